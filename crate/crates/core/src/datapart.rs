//! Splitting a labelled dataset across devices, and the server-side pooled
//! shuffle that makes training independent of that split.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;
use crate::rng;

/// Redraws of the Dirichlet proportions before falling back to top-up.
pub const MAX_REDRAWS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Iid,
    Dirichlet,
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub num_devices: usize,
    pub mode: PartitionMode,
    /// Dirichlet concentration; ignored for IID.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PartitionSpec {
    pub fn iid(num_devices: usize, seed: u64) -> Self {
        Self {
            num_devices,
            mode: PartitionMode::Iid,
            alpha: default_alpha(),
            seed,
        }
    }

    pub fn dirichlet(num_devices: usize, alpha: f64, seed: u64) -> Self {
        Self {
            num_devices,
            mode: PartitionMode::Dirichlet,
            alpha,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_devices == 0 {
            return Err(Error::Partition("num_devices must be >= 1".into()));
        }
        if self.mode == PartitionMode::Dirichlet && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Partition(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceShard {
    pub device_id: u32,
    /// Ascending global sample indices.
    pub sample_indices: Vec<usize>,
    pub class_histogram: Vec<usize>,
}

impl DeviceShard {
    fn build(device_id: u32, mut indices: Vec<usize>, labels: &[u32], classes: usize) -> Self {
        indices.sort_unstable();
        let mut class_histogram = vec![0; classes];
        for &i in &indices {
            class_histogram[labels[i] as usize] += 1;
        }
        Self {
            device_id,
            sample_indices: indices,
            class_histogram,
        }
    }

    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }

    /// Share of the shard held by its most frequent class.
    pub fn max_class_share(&self) -> f64 {
        let max = self.class_histogram.iter().copied().max().unwrap_or(0);
        max as f64 / self.len().max(1) as f64
    }
}

fn class_indices(labels: &[u32], classes: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y as usize].push(i);
    }
    by_class
}

/// Partitions sample indices across devices. Shards are disjoint, cover
/// every sample and are all non-empty.
///
/// IID: each class is shuffled and dealt round-robin with one running
/// counter, so shard sizes differ by at most one. Dirichlet: for each class
/// draw device proportions from Dirichlet(alpha, ..., alpha) and cut the
/// shuffled class list at `round(cumsum(p) * n_class)`. If some device ends
/// up empty the whole draw is repeated (up to [`MAX_REDRAWS`] times), then
/// empty devices take one sample each from the largest shard.
pub fn partition(labels: &[u32], spec: &PartitionSpec) -> Result<Vec<DeviceShard>> {
    spec.validate()?;
    if labels.is_empty() {
        return Err(Error::Partition("no samples".into()));
    }
    let n = spec.num_devices;
    if labels.len() < n {
        return Err(Error::Partition(format!(
            "{} samples cannot cover {} devices",
            labels.len(),
            n
        )));
    }
    let classes = *labels.iter().max().unwrap() as usize + 1;

    let assigned = match spec.mode {
        PartitionMode::Iid => {
            let mut rng = rng::seeded(spec.seed);
            let mut out = vec![Vec::new(); n];
            let mut k = 0usize;
            for mut idx in class_indices(labels, classes) {
                rng::shuffle(&mut rng, &mut idx);
                for i in idx {
                    out[k % n].push(i);
                    k += 1;
                }
            }
            out
        }
        PartitionMode::Dirichlet => dirichlet_assign(labels, classes, spec),
    };
    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(d, idx)| DeviceShard::build(d as u32, idx, labels, classes))
        .collect())
}

fn dirichlet_draw(labels: &[u32], classes: usize, spec: &PartitionSpec, attempt: u64) -> Vec<Vec<usize>> {
    let n = spec.num_devices;
    let mut rng = rng::seeded(rng::derive(spec.seed, attempt));
    let mut out = vec![Vec::new(); n];
    for mut idx in class_indices(labels, classes) {
        rng::shuffle(&mut rng, &mut idx);
        let p = rng::dirichlet(&mut rng, spec.alpha, n);
        let total = idx.len();
        let mut cum = 0.0;
        let mut start = 0usize;
        for (d, share) in p.iter().enumerate() {
            cum += share;
            let end = if d + 1 == n {
                total
            } else {
                ((cum * total as f64).round() as usize).clamp(start, total)
            };
            out[d].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    out
}

fn dirichlet_assign(labels: &[u32], classes: usize, spec: &PartitionSpec) -> Vec<Vec<usize>> {
    let mut draw = Vec::new();
    for attempt in 0..MAX_REDRAWS {
        draw = dirichlet_draw(labels, classes, spec, attempt);
        if draw.iter().all(|s| !s.is_empty()) {
            return draw;
        }
    }
    for d in 0..draw.len() {
        if draw[d].is_empty() {
            let donor = (0..draw.len())
                .max_by(|&a, &b| draw[a].len().cmp(&draw[b].len()).then(b.cmp(&a)))
                .expect("at least one device");
            let moved = draw[donor].pop().expect("donor holds >= 2 samples");
            draw[d].push(moved);
        }
    }
    draw
}

/// Writes the `device_id,sample_id` manifest, one row per sample.
pub fn write_manifest(shards: &[DeviceShard], w: impl Write) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["device_id", "sample_id"])?;
    for s in shards {
        for &i in &s.sample_indices {
            csv.write_record([s.device_id.to_string(), i.to_string()])?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// Synthetic classification data: each class has a random mean token and
/// every sample is that mean plus unit Gaussian noise on each of its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    /// `seq_len` rows per sample, samples in id order.
    pub inputs: Tensor2D,
    pub labels: Vec<u32>,
    pub seq_len: usize,
    pub classes: usize,
}

impl ToyDataset {
    pub fn synthetic(samples: usize, classes: usize, width: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if classes == 0 || width == 0 || seq_len == 0 {
            return Err(Error::Config("dataset classes, width and seq_len must be > 0".into()));
        }
        let mut rng = rng::seeded(seed);
        let means = Tensor2D::randn(classes, width, 1.0, &mut rng);
        let mut labels: Vec<u32> = (0..samples).map(|i| (i % classes) as u32).collect();
        rng::shuffle(&mut rng, &mut labels);
        let noise = Tensor2D::randn(samples * seq_len, width, 1.0, &mut rng);
        let inputs = Tensor2D::from_fn(samples * seq_len, width, |r, c| {
            means.get(labels[r / seq_len] as usize, c) + noise.get(r, c)
        });
        Ok(Self {
            inputs,
            labels,
            seq_len,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Inputs and labels of `indices`, in the given order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor2D, Vec<u32>) {
        let parts: Vec<Tensor2D> = indices
            .iter()
            .map(|&i| self.inputs.slice_rows(i * self.seq_len, (i + 1) * self.seq_len))
            .collect();
        let x = if parts.is_empty() {
            Tensor2D::zeros(0, self.inputs.cols())
        } else {
            Tensor2D::concat_rows(&parts).expect("rows share a width")
        };
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Anything that carries a stable global sample id.
pub trait Keyed {
    fn key(&self) -> u64;
}

impl Keyed for u64 {
    fn key(&self) -> u64 {
        *self
    }
}

/// Pools the samples of every device into one training stream.
///
/// Samples are first put in ascending id order (so neither the device a sample
/// came from nor its arrival order matters), then permuted with
/// [`rng::shuffle`] seeded by `seed`. Duplicate ids are rejected.
pub fn pooled_shuffle<T: Keyed>(per_device: Vec<Vec<T>>, seed: u64) -> Result<Vec<T>> {
    let mut pool: Vec<T> = per_device.into_iter().flatten().collect();
    pool.sort_by_key(Keyed::key);
    if let Some(w) = pool.windows(2).find(|w| w[0].key() == w[1].key()) {
        return Err(Error::Partition(format!("duplicate sample id {}", w[0].key())));
    }
    let mut rng = rng::seeded(seed);
    rng::shuffle(&mut rng, &mut pool);
    Ok(pool)
}

/// Checks that shards are disjoint, exhaustive over `0..num_samples` and histogram-consistent.
pub fn check_partition(shards: &[DeviceShard], labels: &[u32]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in shards {
        let mut hist = vec![0usize; s.class_histogram.len()];
        for &i in &s.sample_indices {
            if !seen.insert(i) {
                return Err(Error::Invariant(format!("sample {i} assigned twice")));
            }
            let y = *labels
                .get(i)
                .ok_or_else(|| Error::Invariant(format!("sample {i} out of range")))?;
            hist[y as usize] += 1;
        }
        if hist != s.class_histogram {
            return Err(Error::Invariant(format!(
                "device {} histogram inconsistent",
                s.device_id
            )));
        }
    }
    if seen.len() != labels.len() {
        return Err(Error::Invariant(format!(
            "{} of {} samples assigned",
            seen.len(),
            labels.len()
        )));
    }
    Ok(())
}

//! Binary model checkpoints. Layout is documented in `docs/checkpoint.md`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::model::{BlockWeights, Head, ToyConfig, ToyModel};
use super::tensor::Tensor2D;
use crate::error::{Error, Result};
use crate::lora::{LoRAAdapter, Projection};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SFZCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_BASE: &[u8; 4] = b"BASE";
const TAG_HEAD: &[u8; 4] = b"HEAD";
const TAG_LORA: &[u8; 4] = b"LORA";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, t: &Tensor2D) {
    out.extend_from_slice(&t.to_le_bytes());
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

pub fn write_checkpoint(model: &ToyModel, mut w: impl Write) -> Result<()> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    for v in [
        cfg.depth,
        cfg.width,
        cfg.hidden_width(),
        cfg.classes,
        cfg.seq_len,
        cfg.attention as usize,
        cfg.lora_rank,
    ] {
        put_u32(&mut out, v as u32);
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&cfg.alpha().to_le_bytes());

    let mut base = Vec::new();
    for block in model.blocks() {
        for t in block.tensors() {
            put_f64s(&mut base, t);
        }
    }
    section(&mut out, TAG_BASE, &base);

    let mut head = Vec::new();
    put_f64s(&mut head, &model.head().weight);
    put_f64s(&mut head, &model.head().bias);
    section(&mut out, TAG_HEAD, &head);

    let adapters: Vec<_> = model.adapters().collect();
    let mut lora = Vec::new();
    put_u32(&mut lora, adapters.len() as u32);
    for (layer, a) in adapters {
        put_u32(&mut lora, layer as u32);
        put_u32(&mut lora, a.target.code());
        put_u32(&mut lora, a.rank as u32);
        lora.extend_from_slice(&a.scale_alpha.to_le_bytes());
        put_f64s(&mut lora, &a.down);
        put_f64s(&mut lora, &a.up);
    }
    section(&mut out, TAG_LORA, &lora);

    w.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fill(&mut self, t: &mut Tensor2D) -> Result<()> {
        for v in t.data_mut() {
            *v = self.f64()?;
        }
        Ok(())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ToyModel> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = c.u32()? as usize;
    }
    let [depth, width, hidden, classes, seq_len, attention, lora_rank] = dims;
    let seed = c.u64()?;
    let alpha = c.f64()?;
    let cfg = ToyConfig {
        depth,
        width,
        hidden: Some(hidden),
        classes,
        seq_len,
        attention: attention != 0,
        seed,
        lora_rank,
        lora_alpha: Some(alpha),
    };
    cfg.validate()?;

    let mut blocks = None;
    let mut head = None;
    let mut adapters = Vec::new();
    while !c.done() {
        let tag: [u8; 4] = c.take(4)?.try_into().unwrap();
        let len = c.u64()? as usize;
        let payload = c.take(len)?;
        let mut s = Cursor { buf: payload, pos: 0 };
        match &tag {
            t if t == TAG_BASE => {
                let mut bs: Vec<BlockWeights> = (0..depth).map(|_| BlockWeights::zeros_like(&cfg)).collect();
                for b in &mut bs {
                    for t in b.tensors_mut() {
                        s.fill(t)?;
                    }
                }
                blocks = Some(bs);
            }
            t if t == TAG_HEAD => {
                let mut h = Head {
                    weight: Tensor2D::zeros(classes, width),
                    bias: Tensor2D::zeros(1, classes),
                };
                s.fill(&mut h.weight)?;
                s.fill(&mut h.bias)?;
                head = Some(h);
            }
            t if t == TAG_LORA => {
                let count = s.u32()?;
                for _ in 0..count {
                    let layer = s.u32()? as usize;
                    let proj = Projection::from_code(s.u32()?)
                        .ok_or_else(|| Error::Checkpoint("unknown projection code".into()))?;
                    let rank = s.u32()? as usize;
                    let scale_alpha = s.f64()?;
                    let (d_in, d_out) = match proj {
                        Projection::Up => (width, hidden),
                        Projection::Down => (hidden, width),
                        _ => (width, width),
                    };
                    let mut a = LoRAAdapter {
                        down: Tensor2D::zeros(rank, d_in),
                        up: Tensor2D::zeros(d_out, rank),
                        rank,
                        scale_alpha,
                        target: proj,
                    };
                    s.fill(&mut a.down)?;
                    s.fill(&mut a.up)?;
                    adapters.push((layer, a));
                }
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "unknown section tag {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        }
        if !s.done() {
            return Err(Error::Checkpoint("section length mismatch".into()));
        }
    }
    let blocks = blocks.ok_or_else(|| Error::Checkpoint("missing BASE section".into()))?;
    let mut model = ToyModel::from_parts(cfg, blocks);
    if let Some(h) = head {
        model.set_head(h)?;
    }
    for (layer, a) in adapters {
        model.set_adapter(layer, a)?;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ToyModel, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyModel> {
    read_checkpoint(fs::File::open(path)?)
}

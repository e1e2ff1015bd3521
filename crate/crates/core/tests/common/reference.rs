//! Straight-line re-implementation of the toy model used as a test oracle.
//! Plain row-major buffers and naive loops; backward computes each weight
//! gradient at the point it becomes available (fused), then applies SGD.
//! Accumulation orders follow the textbook formulas so results are
//! reproducible to the bit.

use std::collections::BTreeMap;

use splitfrozen::lora::Projection;
use splitfrozen::numerics::{ParamId, Tensor2D, ToyModel};

#[derive(Debug, Clone, PartialEq)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl M {
    fn zeros(r: usize, c: usize) -> Self {
        M {
            r,
            c,
            d: vec![0.0; r * c],
        }
    }
    fn from(t: &Tensor2D) -> Self {
        M {
            r: t.rows(),
            c: t.cols(),
            d: t.data().to_vec(),
        }
    }
    pub fn from_rows(r: usize, c: usize, d: &[f64]) -> Self {
        assert_eq!(d.len(), r * c);
        M { r, c, d: d.to_vec() }
    }
    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }
    fn put(&mut self, i: usize, j: usize, v: f64) {
        self.d[i * self.c + j] = v;
    }
    fn rows(&self, lo: usize, hi: usize) -> M {
        M {
            r: hi - lo,
            c: self.c,
            d: self.d[lo * self.c..hi * self.c].to_vec(),
        }
    }
    fn set_rows(&mut self, lo: usize, b: &M) {
        self.d[lo * self.c..lo * self.c + b.d.len()].copy_from_slice(&b.d);
    }
}

fn mm(a: &M, b: &M) -> M {
    assert_eq!(a.c, b.r);
    let mut o = M::zeros(a.r, b.c);
    for i in 0..a.r {
        for j in 0..b.c {
            let mut s = 0.0;
            for k in 0..a.c {
                s += a.at(i, k) * b.at(k, j);
            }
            o.put(i, j, s);
        }
    }
    o
}

/// a * b^T
fn mmt(a: &M, b: &M) -> M {
    assert_eq!(a.c, b.c);
    let mut o = M::zeros(a.r, b.r);
    for i in 0..a.r {
        for j in 0..b.r {
            let mut s = 0.0;
            for k in 0..a.c {
                s += a.at(i, k) * b.at(j, k);
            }
            o.put(i, j, s);
        }
    }
    o
}

/// a^T * b
fn tmm(a: &M, b: &M) -> M {
    assert_eq!(a.r, b.r);
    let mut o = M::zeros(a.c, b.c);
    for i in 0..a.c {
        for j in 0..b.c {
            let mut s = 0.0;
            for k in 0..a.r {
                s += a.at(k, i) * b.at(k, j);
            }
            o.put(i, j, s);
        }
    }
    o
}

fn plus(a: &M, b: &M) -> M {
    assert_eq!((a.r, a.c), (b.r, b.c));
    M {
        r: a.r,
        c: a.c,
        d: a.d.iter().zip(&b.d).map(|(x, y)| x + y).collect(),
    }
}

fn times(a: &M, s: f64) -> M {
    M {
        r: a.r,
        c: a.c,
        d: a.d.iter().map(|x| x * s).collect(),
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_d(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * (c * (1.0 + 3.0 * 0.044715 * x * x))
}

fn softmax(s: &M) -> M {
    let mut o = M::zeros(s.r, s.c);
    for i in 0..s.r {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..s.c {
            mx = mx.max(s.at(i, j));
        }
        let mut z = 0.0;
        for j in 0..s.c {
            let e = (s.at(i, j) - mx).exp();
            o.put(i, j, e);
            z += e;
        }
        for j in 0..s.c {
            o.put(i, j, o.at(i, j) / z);
        }
    }
    o
}

#[derive(Debug, Clone)]
pub struct Lora {
    pub a: M,
    pub b: M,
    pub s: f64,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub attn: Option<[M; 4]>,
    pub fc1: M,
    pub b1: M,
    pub fc2: M,
    pub b2: M,
    pub lora: BTreeMap<Projection, Lora>,
}

#[derive(Debug, Clone)]
pub struct RefModel {
    pub seq: usize,
    pub layers: Vec<Layer>,
    pub head_w: M,
    pub head_b: M,
}

struct Cache {
    x: M,
    q: M,
    k: M,
    v: M,
    probs: Vec<M>,
    ctx: M,
    mid: M,
    pre: M,
    act: M,
}

fn lin(x: &M, w: &M, b: Option<&M>, l: Option<&Lora>) -> M {
    let mut y = mmt(x, w);
    if let Some(b) = b {
        for i in 0..y.r {
            for j in 0..y.c {
                y.put(i, j, y.at(i, j) + b.d[j]);
            }
        }
    }
    if let Some(l) = l {
        y = plus(&y, &times(&mmt(&mmt(x, &l.a), &l.b), l.s));
    }
    y
}

fn lin_back(w: &M, l: Option<&Lora>, g: &M) -> M {
    let mut dx = mm(g, w);
    if let Some(l) = l {
        dx = plus(&dx, &times(&mm(&mm(g, &l.b), &l.a), l.s));
    }
    dx
}

impl RefModel {
    pub fn from_model(m: &ToyModel) -> Self {
        let cfg = m.config();
        let layers = m
            .blocks()
            .iter()
            .enumerate()
            .map(|(l, b)| Layer {
                attn: b
                    .attn
                    .as_ref()
                    .map(|a| [M::from(&a.wq), M::from(&a.wk), M::from(&a.wv), M::from(&a.wo)]),
                fc1: M::from(&b.fc1),
                b1: M::from(&b.b1),
                fc2: M::from(&b.fc2),
                b2: M::from(&b.b2),
                lora: Projection::ALL
                    .iter()
                    .filter_map(|&p| {
                        m.adapter(l, p).map(|a| {
                            (
                                p,
                                Lora {
                                    a: M::from(&a.down),
                                    b: M::from(&a.up),
                                    s: a.scale_alpha / a.rank as f64,
                                },
                            )
                        })
                    })
                    .collect(),
            })
            .collect();
        RefModel {
            seq: cfg.seq_len,
            layers,
            head_w: M::from(&m.head().weight),
            head_b: M::from(&m.head().bias),
        }
    }

    fn layer_forward(&self, l: usize, x: &M) -> (M, Cache) {
        let ly = &self.layers[l];
        let ad = |p| ly.lora.get(&p);
        let mut c = Cache {
            x: x.clone(),
            q: M::zeros(0, 0),
            k: M::zeros(0, 0),
            v: M::zeros(0, 0),
            probs: vec![],
            ctx: M::zeros(0, 0),
            mid: x.clone(),
            pre: M::zeros(0, 0),
            act: M::zeros(0, 0),
        };
        if let Some([wq, wk, wv, wo]) = &ly.attn {
            c.q = lin(x, wq, None, ad(Projection::Query));
            c.k = lin(x, wk, None, ad(Projection::Key));
            c.v = lin(x, wv, None, ad(Projection::Value));
            let inv = 1.0 / (x.c as f64).sqrt();
            c.ctx = M::zeros(x.r, x.c);
            for s in 0..x.r / self.seq {
                let (lo, hi) = (s * self.seq, (s + 1) * self.seq);
                let p = softmax(&times(&mmt(&c.q.rows(lo, hi), &c.k.rows(lo, hi)), inv));
                c.ctx.set_rows(lo, &mm(&p, &c.v.rows(lo, hi)));
                c.probs.push(p);
            }
            c.mid = plus(x, &lin(&c.ctx, wo, None, ad(Projection::Output)));
        }
        c.pre = lin(&c.mid, &ly.fc1, Some(&ly.b1), ad(Projection::Up));
        c.act = M {
            r: c.pre.r,
            c: c.pre.c,
            d: c.pre.d.iter().map(|&v| gelu(v)).collect(),
        };
        let out = plus(&c.mid, &lin(&c.act, &ly.fc2, Some(&ly.b2), ad(Projection::Down)));
        (out, c)
    }

    pub fn forward(&self, x: &M, from: usize, to: usize) -> M {
        let mut h = x.clone();
        for l in from..to {
            h = self.layer_forward(l, &h).0;
        }
        h
    }

    fn pool(&self, h: &M) -> M {
        let n = h.r / self.seq;
        let mut p = M::zeros(n, h.c);
        for s in 0..n {
            for j in 0..h.c {
                let mut acc = 0.0;
                for r in s * self.seq..(s + 1) * self.seq {
                    acc += h.at(r, j);
                }
                p.put(s, j, acc / self.seq as f64);
            }
        }
        p
    }

    /// Forward from `from`, mean cross-entropy, full backward with fused
    /// gradient computation, then one SGD step on adapters of `from..` and
    /// the head. Returns the loss and the gradient at the input of `from`.
    pub fn sgd_step(&mut self, x: &M, y: &[u32], from: usize, lr: f64) -> (f64, M) {
        let depth = self.layers.len();
        let mut caches = Vec::new();
        let mut h = x.clone();
        for l in from..depth {
            let (o, c) = self.layer_forward(l, &h);
            caches.push(c);
            h = o;
        }
        let pooled = self.pool(&h);
        let n = pooled.r;
        let classes = self.head_w.r;
        let mut logits = mmt(&pooled, &self.head_w);
        for i in 0..n {
            for j in 0..classes {
                logits.put(i, j, logits.at(i, j) + self.head_b.d[j]);
            }
        }
        let probs = softmax(&logits);
        let mut loss = 0.0;
        let mut dl = M::zeros(n, classes);
        for i in 0..n {
            let row = &logits.d[i * classes..(i + 1) * classes];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[y[i] as usize];
            for j in 0..classes {
                let t = if j == y[i] as usize { 1.0 } else { 0.0 };
                dl.put(i, j, (probs.at(i, j) - t) / n as f64);
            }
        }
        loss /= n as f64;

        let mut grads: Vec<(ParamId, M)> = Vec::new();
        grads.push((ParamId::HeadWeight, tmm(&dl, &pooled)));
        let mut gb = M::zeros(1, classes);
        for i in 0..n {
            for j in 0..classes {
                gb.d[j] += dl.at(i, j);
            }
        }
        grads.push((ParamId::HeadBias, gb));
        let dp = mm(&dl, &self.head_w);
        let mut g = M::zeros(h.r, h.c);
        for r in 0..h.r {
            for j in 0..h.c {
                g.put(r, j, dp.at(r / self.seq, j) / self.seq as f64);
            }
        }

        for l in (from..depth).rev() {
            let c = &caches[l - from];
            let ly = &self.layers[l];
            let ad = |p| ly.lora.get(&p);
            let mut wgrad = |p: Projection, input: &M, up: &M| {
                if let Some(lo) = ad(p) {
                    grads.push((
                        ParamId::AdapterUp { layer: l, proj: p },
                        times(&tmm(up, &mmt(input, &lo.a)), lo.s),
                    ));
                    grads.push((
                        ParamId::AdapterDown { layer: l, proj: p },
                        times(&tmm(&mm(up, &lo.b), input), lo.s),
                    ));
                }
            };
            wgrad(Projection::Down, &c.act, &g);
            let d_act = lin_back(&ly.fc2, ad(Projection::Down), &g);
            let d_pre = M {
                r: d_act.r,
                c: d_act.c,
                d: d_act.d.iter().zip(&c.pre.d).map(|(a, &p)| a * gelu_d(p)).collect(),
            };
            wgrad(Projection::Up, &c.mid, &d_pre);
            let d_mid = plus(&g, &lin_back(&ly.fc1, ad(Projection::Up), &d_pre));
            let Some([wq, wk, wv, wo]) = &ly.attn else {
                g = d_mid;
                continue;
            };
            wgrad(Projection::Output, &c.ctx, &d_mid);
            let d_ctx = lin_back(wo, ad(Projection::Output), &d_mid);
            let inv = 1.0 / (c.x.c as f64).sqrt();
            let (mut dq, mut dk, mut dv) = (M::zeros(c.x.r, c.x.c), M::zeros(c.x.r, c.x.c), M::zeros(c.x.r, c.x.c));
            for (s, p) in c.probs.iter().enumerate() {
                let (lo, hi) = (s * self.seq, (s + 1) * self.seq);
                let dcs = d_ctx.rows(lo, hi);
                dv.set_rows(lo, &tmm(p, &dcs));
                let dpr = mmt(&dcs, &c.v.rows(lo, hi));
                let mut ds = M::zeros(self.seq, self.seq);
                for i in 0..self.seq {
                    let mut dot = 0.0;
                    for j in 0..self.seq {
                        dot += dpr.at(i, j) * p.at(i, j);
                    }
                    for j in 0..self.seq {
                        ds.put(i, j, p.at(i, j) * (dpr.at(i, j) - dot) * inv);
                    }
                }
                dq.set_rows(lo, &mm(&ds, &c.k.rows(lo, hi)));
                dk.set_rows(lo, &tmm(&ds, &c.q.rows(lo, hi)));
            }
            wgrad(Projection::Query, &c.x, &dq);
            wgrad(Projection::Key, &c.x, &dk);
            wgrad(Projection::Value, &c.x, &dv);
            let mut dx = d_mid;
            dx = plus(&dx, &lin_back(wq, ad(Projection::Query), &dq));
            dx = plus(&dx, &lin_back(wk, ad(Projection::Key), &dk));
            dx = plus(&dx, &lin_back(wv, ad(Projection::Value), &dv));
            g = dx;
        }

        for (id, gr) in grads {
            let p = self.param_mut(id);
            for (w, d) in p.d.iter_mut().zip(&gr.d) {
                *w -= lr * d;
            }
        }
        (loss, g)
    }

    pub fn param(&self, id: ParamId) -> &M {
        match id {
            ParamId::HeadWeight => &self.head_w,
            ParamId::HeadBias => &self.head_b,
            ParamId::AdapterDown { layer, proj } => &self.layers[layer].lora[&proj].a,
            ParamId::AdapterUp { layer, proj } => &self.layers[layer].lora[&proj].b,
        }
    }

    fn param_mut(&mut self, id: ParamId) -> &mut M {
        match id {
            ParamId::HeadWeight => &mut self.head_w,
            ParamId::HeadBias => &mut self.head_b,
            ParamId::AdapterDown { layer, proj } => &mut self.layers[layer].lora.get_mut(&proj).unwrap().a,
            ParamId::AdapterUp { layer, proj } => &mut self.layers[layer].lora.get_mut(&proj).unwrap().b,
        }
    }
}

pub fn to_m(t: &Tensor2D) -> M {
    M::from(t)
}

pub fn bits(d: &[f64]) -> Vec<u64> {
    d.iter().map(|x| x.to_bits()).collect()
}

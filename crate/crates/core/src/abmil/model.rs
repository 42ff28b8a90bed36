//! Gated attention pooling with a linear bag classifier.
//!
//! For instances q_1..q_t (columns of a bag):
//!
//! ```text
//! e_i   = w_att · (tanh(Vᵀq_i) ⊙ sigm(Uᵀq_i))
//! a     = softmax(e)
//! z     = Σ a_i q_i
//! logit = w_cls · z + b_cls
//! ```
//!
//! The loss is binary cross-entropy on `sigm(logit)`.

use std::path::Path;

use rand::Rng;

use crate::data::{read_bytes, write_bytes, EmbeddingMatrix};
use crate::error::{Error, Result};

pub const SIIM_MAGIC: [u8; 4] = *b"SIIM";
pub const SIIM_VERSION: u32 = 1;
pub const DEFAULT_ATTENTION_DIM: usize = 128;

const PROB_CLAMP: f64 = 1e-12;

/// Parameters of the attention aggregator and classifier head. `v` and `u`
/// are D×L, stored row-major (`v[d * L + l]`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionModel {
    dim: usize,
    hidden: usize,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub w_att: Vec<f64>,
    pub w_cls: Vec<f64>,
    pub b_cls: f64,
}

/// Gradient of the bag loss, shaped like [`AttentionModel`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub w_att: Vec<f64>,
    pub w_cls: Vec<f64>,
    pub b_cls: f64,
}

impl Gradients {
    pub fn slices(&self) -> [&[f64]; 5] {
        [
            &self.v,
            &self.u,
            &self.w_att,
            &self.w_cls,
            std::slice::from_ref(&self.b_cls),
        ]
    }
}

impl AttentionModel {
    pub fn zeros(dim: usize, hidden: usize) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive (D={dim}, L={hidden})"
            )));
        }
        Ok(Self {
            dim,
            hidden,
            v: vec![0.0; dim * hidden],
            u: vec![0.0; dim * hidden],
            w_att: vec![0.0; hidden],
            w_cls: vec![0.0; dim],
            b_cls: 0.0,
        })
    }

    /// Attention weights uniform in ±1/√fan_in; the classifier head starts at zero.
    pub fn init<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(dim, hidden)?;
        let in_bound = 1.0 / (dim as f64).sqrt();
        let hid_bound = 1.0 / (hidden as f64).sqrt();
        for x in m.v.iter_mut().chain(m.u.iter_mut()) {
            *x = rng.random_range(-in_bound..in_bound);
        }
        for x in &mut m.w_att {
            *x = rng.random_range(-hid_bound..hid_bound);
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim * self.hidden + self.hidden + self.dim + 1
    }

    pub fn slices(&self) -> [&[f64]; 5] {
        [
            &self.v,
            &self.u,
            &self.w_att,
            &self.w_cls,
            std::slice::from_ref(&self.b_cls),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.v,
            &mut self.u,
            &mut self.w_att,
            &mut self.w_cls,
            std::slice::from_mut(&mut self.b_cls),
        ]
    }

    fn check_bag(&self, bag: &EmbeddingMatrix) -> Result<()> {
        if bag.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: bag.dim(),
            });
        }
        if bag.count() == 0 {
            return Err(Error::EmptyBag);
        }
        Ok(())
    }

    pub fn to_siim_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.num_params());
        out.extend_from_slice(&SIIM_MAGIC);
        out.extend_from_slice(&SIIM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden as u32).to_le_bytes());
        for s in self.slices() {
            for x in s {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_siim_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                expected: 16,
                found: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != SIIM_MAGIC {
            return Err(Error::BadMagic {
                expected: SIIM_MAGIC,
                found: magic,
            });
        }
        if word(4) != SIIM_VERSION {
            return Err(Error::UnsupportedVersion {
                expected: SIIM_VERSION,
                found: word(4),
            });
        }
        let mut m = Self::zeros(word(8) as usize, word(12) as usize)?;
        let expected = 16 + 8 * m.num_params();
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::TrailingBytes(bytes.len() - expected));
        }
        let mut values = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut index = 0;
        for s in m.slices_mut() {
            for x in s.iter_mut() {
                *x = values.next().expect("length checked");
                if !x.is_finite() {
                    return Err(Error::NonFinite(index));
                }
                index += 1;
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_siim_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_siim_bytes(&read_bytes(path.as_ref())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// Pre-softmax attention scores e_i.
    pub scores: Vec<f64>,
    /// Attention weights a_i.
    pub attention: Vec<f64>,
    /// Bag representation z.
    pub bag_repr: Vec<f64>,
    pub logit: f64,
}

impl Forward {
    pub fn probability(&self) -> f64 {
        sigmoid(self.logit)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// tanh through a single exponential; absolute error within a few ulps.
fn tanh_exp(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Intermediates kept for the backward pass.
struct Trace {
    forward: Forward,
    /// t×L tanh(Vᵀq_i) and sigm(Uᵀq_i).
    tanh: Vec<f64>,
    gate: Vec<f64>,
    inputs: Vec<f64>,
}

fn run(bag: &EmbeddingMatrix, model: &AttentionModel) -> Result<Trace> {
    model.check_bag(bag)?;
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2. Without FMA the kernel rounds exactly
        // like the generic path.
        return Ok(unsafe { run_avx2(bag, model) });
    }
    Ok(run_kernel(bag, model))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn run_avx2(bag: &EmbeddingMatrix, model: &AttentionModel) -> Trace {
    run_kernel(bag, model)
}

#[inline(always)]
fn run_kernel(bag: &EmbeddingMatrix, model: &AttentionModel) -> Trace {
    let (d, l, t) = (model.dim, model.hidden, bag.count());
    let inputs = bag.to_f64();
    let mut tanh = vec![0.0; t * l];
    let mut gate = vec![0.0; t * l];
    let mut scores = vec![0.0; t];
    let mut hv = vec![0.0; l];
    let mut hu = vec![0.0; l];
    for i in 0..t {
        let q = &inputs[i * d..(i + 1) * d];
        hv.fill(0.0);
        hu.fill(0.0);
        for (k, &qk) in q.iter().enumerate() {
            let vrow = &model.v[k * l..(k + 1) * l];
            let urow = &model.u[k * l..(k + 1) * l];
            for j in 0..l {
                hv[j] += qk * vrow[j];
                hu[j] += qk * urow[j];
            }
        }
        let th = &mut tanh[i * l..(i + 1) * l];
        let sg = &mut gate[i * l..(i + 1) * l];
        for ((t, s), (&a, &b)) in th.iter_mut().zip(sg.iter_mut()).zip(hv.iter().zip(&hu)) {
            *t = tanh_exp(a);
            *s = sigmoid(b);
        }
        let mut e = 0.0;
        for j in 0..l {
            e += model.w_att[j] * th[j] * sg[j];
        }
        scores[i] = e;
    }
    let attention = softmax(&scores);
    let mut bag_repr = vec![0.0; d];
    for (i, &a) in attention.iter().enumerate() {
        for (z, &x) in bag_repr.iter_mut().zip(&inputs[i * d..(i + 1) * d]) {
            *z += a * x;
        }
    }
    let logit = model
        .w_cls
        .iter()
        .zip(&bag_repr)
        .map(|(w, z)| w * z)
        .sum::<f64>()
        + model.b_cls;
    Trace {
        forward: Forward {
            scores,
            attention,
            bag_repr,
            logit,
        },
        tanh,
        gate,
        inputs,
    }
}

pub fn attention_forward(bag: &EmbeddingMatrix, model: &AttentionModel) -> Result<Forward> {
    Ok(run(bag, model)?.forward)
}

fn clamped_probability(logit: f64) -> (f64, bool) {
    let p = sigmoid(logit);
    let c = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (c, c != p)
}

pub fn bce(logit: f64, label: u8) -> f64 {
    let (p, _) = clamped_probability(logit);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn bag_loss(bag: &EmbeddingMatrix, label: u8, model: &AttentionModel) -> Result<f64> {
    Ok(bce(attention_forward(bag, model)?.logit, label))
}

/// Loss and its exact gradient with respect to every parameter.
pub fn loss_and_gradients(
    bag: &EmbeddingMatrix,
    label: u8,
    model: &AttentionModel,
) -> Result<(f64, Gradients)> {
    let trace = run(bag, model)?;
    let (d, l) = (model.dim, model.hidden);
    let fwd = &trace.forward;
    let loss = bce(fwd.logit, label);
    let (p, clamped) = clamped_probability(fwd.logit);
    // Inside the clamp the loss is flat in the logit.
    let dlogit = if clamped { 0.0 } else { p - f64::from(label) };

    let mut g = Gradients {
        v: vec![0.0; d * l],
        u: vec![0.0; d * l],
        w_att: vec![0.0; l],
        w_cls: fwd.bag_repr.iter().map(|z| dlogit * z).collect(),
        b_cls: dlogit,
    };
    let dz: Vec<f64> = model.w_cls.iter().map(|w| dlogit * w).collect();
    // da_i = dz·q_i; de_i = a_i (da_i - Σ_j a_j da_j), and Σ_j a_j da_j = dz·z.
    let dz_z: f64 = dz.iter().zip(&fwd.bag_repr).map(|(a, b)| a * b).sum();
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: as in `run`.
        unsafe { backward_avx2(&trace, model, &dz, dz_z, &mut g) };
        return Ok((loss, g));
    }
    backward_kernel(&trace, model, &dz, dz_z, &mut g);
    Ok((loss, g))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn backward_avx2(
    trace: &Trace,
    model: &AttentionModel,
    dz: &[f64],
    dz_z: f64,
    g: &mut Gradients,
) {
    backward_kernel(trace, model, dz, dz_z, g)
}

/// Accumulates the attention-branch gradients into `g`.
#[inline(always)]
fn backward_kernel(
    trace: &Trace,
    model: &AttentionModel,
    dz: &[f64],
    dz_z: f64,
    g: &mut Gradients,
) {
    let (d, l) = (model.dim, model.hidden);
    let fwd = &trace.forward;
    let t = fwd.attention.len();
    let mut dhv = vec![0.0; l];
    let mut dhu = vec![0.0; l];
    for i in 0..t {
        let q = &trace.inputs[i * d..(i + 1) * d];
        let da: f64 = dz.iter().zip(q).map(|(a, b)| a * b).sum();
        let de = fwd.attention[i] * (da - dz_z);
        if de == 0.0 {
            continue;
        }
        let th = &trace.tanh[i * l..(i + 1) * l];
        let sg = &trace.gate[i * l..(i + 1) * l];
        for j in 0..l {
            g.w_att[j] += de * th[j] * sg[j];
            let dgate = de * model.w_att[j];
            dhv[j] = dgate * sg[j] * (1.0 - th[j] * th[j]);
            dhu[j] = dgate * th[j] * sg[j] * (1.0 - sg[j]);
        }
        for (k, &qk) in q.iter().enumerate() {
            let gv = &mut g.v[k * l..(k + 1) * l];
            for j in 0..l {
                gv[j] += qk * dhv[j];
            }
            let gu = &mut g.u[k * l..(k + 1) * l];
            for j in 0..l {
                gu[j] += qk * dhu[j];
            }
        }
    }
}

pub fn bag_gradients(
    bag: &EmbeddingMatrix,
    label: u8,
    model: &AttentionModel,
) -> Result<Gradients> {
    Ok(loss_and_gradients(bag, label, model)?.1)
}

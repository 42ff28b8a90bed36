//! Seeded synthetic bags with instance-level ground truth, and a 2-D toy
//! for the effect of instance filtering on a convex bag representation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::abmil::LabeledBag;
use crate::data::{write_embeddings, BagRecord, EmbeddingMatrix, Manifest};
use crate::error::{Error, Result};

pub const DEFAULT_POSITIVE_RATES: [f64; 4] = [0.003, 0.0075, 0.05, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceCount {
    Fixed(usize),
    /// Inclusive range, drawn uniformly per bag.
    Range(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub dim: usize,
    pub bags_per_class: usize,
    pub instances: InstanceCount,
    /// Target TIR of each positive bag, cycled over the positive bags.
    pub positive_rates: Vec<f64>,
    /// Distance between the class means, in units of the noise deviation.
    pub separation: f64,
    /// Norm of the negative mean. It points along (0, 1, ..., 1), orthogonal
    /// to the positive shift on the first axis.
    pub negative_offset: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            bags_per_class: 50,
            instances: InstanceCount::Fixed(1000),
            positive_rates: DEFAULT_POSITIVE_RATES.to_vec(),
            separation: 4.0,
            negative_offset: 8.0,
            seed: 0,
        }
    }
}

fn positive_count(rate: f64, n: usize) -> usize {
    (rate * n as f64).round() as usize
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        if self.bags_per_class == 0 {
            return Err(Error::Config("bags_per_class must be at least 1".into()));
        }
        let (lo, hi) = match self.instances {
            InstanceCount::Fixed(n) => (n, n),
            InstanceCount::Range(lo, hi) => (lo, hi),
        };
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "invalid instance count range {lo}..={hi}"
            )));
        }
        if self.positive_rates.is_empty() {
            return Err(Error::Config(
                "at least one positive rate is required".into(),
            ));
        }
        for &rate in &self.positive_rates {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Config(format!(
                    "positive rate {rate} is outside [0, 1]"
                )));
            }
            if positive_count(rate, lo) < 1 {
                return Err(Error::Config(format!(
                    "positive rate {rate} with {lo} instances gives no positive instance"
                )));
            }
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Config(
                "separation must be finite and non-negative".into(),
            ));
        }
        if !(self.negative_offset >= 0.0 && self.negative_offset.is_finite()) {
            return Err(Error::Config(
                "negative offset must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn negative_mean(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.dim];
        if self.dim > 1 {
            let v = self.negative_offset / ((self.dim - 1) as f64).sqrt();
            mu[1..].fill(v);
        }
        mu
    }

    pub fn positive_mean(&self) -> Vec<f64> {
        let mut mu = self.negative_mean();
        mu[0] += self.separation;
        mu
    }
}

/// Row-major grid positions `[row, col]` for `n` instances.
pub fn grid_coords(n: usize) -> Vec<[i32; 2]> {
    let width = (n as f64).sqrt().ceil().max(1.0) as usize;
    (0..n)
        .map(|i| [(i / width) as i32, (i % width) as i32])
        .collect()
}

fn generate_bag(cfg: &SynthConfig, index: usize, positive_rate: Option<f64>) -> Result<LabeledBag> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let n = match cfg.instances {
        InstanceCount::Fixed(n) => n,
        InstanceCount::Range(lo, hi) => rng.random_range(lo..=hi),
    };
    let mut labels = vec![0u8; n];
    if let Some(rate) = positive_rate {
        let k = positive_count(rate, n);
        if k < 1 {
            return Err(Error::Config(format!(
                "positive rate {rate} with {n} instances gives no positive instance"
            )));
        }
        for i in sample(&mut rng, n, k).iter() {
            labels[i] = 1;
        }
    }
    let mu0 = cfg.negative_mean();
    let mu1 = cfg.positive_mean();
    let mut values = Vec::with_capacity(n * cfg.dim);
    for &l in &labels {
        let mu = if l == 1 { &mu1 } else { &mu0 };
        for &m in mu {
            let noise: f64 = rng.sample(StandardNormal);
            values.push((m + noise) as f32);
        }
    }
    let label = positive_rate.is_some() as u8;
    let id = if label == 1 {
        format!("pos_{:04}", index - cfg.bags_per_class)
    } else {
        format!("neg_{index:04}")
    };
    let instances = EmbeddingMatrix::new(cfg.dim, n, values)?
        .with_coords(grid_coords(n))?
        .with_instance_labels(labels)?;
    Ok(LabeledBag {
        id,
        label,
        instances,
    })
}

/// Negative bags first, then positive bags. Every bag draws from its own
/// ChaCha stream, so the output does not depend on thread scheduling.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<LabeledBag>> {
    cfg.validate()?;
    let b = cfg.bags_per_class;
    (0..2 * b)
        .into_par_iter()
        .map(|i| {
            let rate = (i >= b).then(|| cfg.positive_rates[(i - b) % cfg.positive_rates.len()]);
            generate_bag(cfg, i, rate)
        })
        .collect()
}

/// Writes `manifest.csv` and `bags/<id>.siib` under `dir`.
pub fn write_dataset(bags: &[LabeledBag], dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let bag_dir = dir.join("bags");
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
    let mut records = Vec::with_capacity(bags.len());
    for b in bags {
        let rel = PathBuf::from("bags").join(format!("{}.siib", b.id));
        write_embeddings(&b.instances, dir.join(&rel))?;
        records.push(BagRecord {
            bag_id: b.id.clone(),
            label: b.label,
            embedding_path: rel,
        });
    }
    let manifest = Manifest::new(records)?;
    manifest.write(dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfSpace {
    Negative,
    Positive,
    Boundary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDemo {
    pub z_full: [f64; 2],
    pub z_filtered: [f64; 2],
    pub full_side: HalfSpace,
    pub filtered_side: HalfSpace,
    /// Renormalized weights over the kept negatives, then the positive.
    pub filtered_weights: Vec<f64>,
}

/// Points for the toy: `p` negatives jittered around (1, 0) and one positive
/// jittered around (0, 1).
pub fn toy_2d_points(p: usize, jitter: f64, seed: u64) -> (Vec<[f64; 2]>, [f64; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |cx: f64, cy: f64| {
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        [cx + jitter * dx, cy + jitter * dy]
    };
    let negatives = (0..p).map(|_| draw(1.0, 0.0)).collect();
    let positive = draw(0.0, 1.0);
    (negatives, positive)
}

fn unit(v: [f64; 2]) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    if n == 0.0 {
        [0.0, 0.0]
    } else {
        [v[0] / n, v[1] / n]
    }
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn combine(points: &[[f64; 2]], weights: &[f64]) -> [f64; 2] {
    let mut z = [0.0; 2];
    for (p, &w) in points.iter().zip(weights) {
        z[0] += w * p[0];
        z[1] += w * p[1];
    }
    z
}

/// Side of the bisector between the negative-mean and positive directions.
fn side(z: [f64; 2], neg_dir: [f64; 2], pos_dir: [f64; 2]) -> HalfSpace {
    let margin = dot(z, pos_dir) - dot(z, neg_dir);
    if margin > 0.0 {
        HalfSpace::Positive
    } else if margin < 0.0 {
        HalfSpace::Negative
    } else {
        HalfSpace::Boundary
    }
}

/// Convex bag representation with all instances and after keeping only
/// `keep` negatives (those least aligned with the negative mean), with the
/// weights renormalized. `weights` covers the negatives, then the positive.
pub fn toy_2d_demo(
    negatives: &[[f64; 2]],
    positive: [f64; 2],
    weights: &[f64],
    keep: usize,
) -> Result<ToyDemo> {
    let p = negatives.len();
    if weights.len() != p + 1 {
        return Err(Error::Shape(format!(
            "{} weights for {} instances",
            weights.len(),
            p + 1
        )));
    }
    if weights.iter().any(|&w| w.is_nan() || w < 0.0)
        || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Invalid(
            "weights must be non-negative and sum to 1".into(),
        ));
    }
    if keep > p {
        return Err(Error::Invalid(format!(
            "cannot keep {keep} of {p} negatives"
        )));
    }
    let mut points = negatives.to_vec();
    points.push(positive);
    let z_full = combine(&points, weights);

    let neg_dir = if p > 0 {
        let mean = negatives
            .iter()
            .fold([0.0, 0.0], |a, n| [a[0] + n[0], a[1] + n[1]]);
        unit(mean)
    } else {
        [0.0, 0.0]
    };
    let pos_dir = unit(positive);

    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        dot(unit(negatives[a]), neg_dir)
            .total_cmp(&dot(unit(negatives[b]), neg_dir))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();
    kept.push(p);

    let total: f64 = kept.iter().map(|&i| weights[i]).sum();
    if total <= 0.0 {
        return Err(Error::Invalid("kept instances carry no weight".into()));
    }
    let filtered_weights: Vec<f64> = kept.iter().map(|&i| weights[i] / total).collect();
    let kept_points: Vec<[f64; 2]> = kept.iter().map(|&i| points[i]).collect();
    let z_filtered = combine(&kept_points, &filtered_weights);

    Ok(ToyDemo {
        z_full,
        z_filtered,
        full_side: side(z_full, neg_dir, pos_dir),
        filtered_side: side(z_filtered, neg_dir, pos_dir),
        filtered_weights,
    })
}

//! Representative negative instances by column leverage scores.
//!
//! For a negative bag X (D×n) with numeric rank k and top-k right singular
//! vectors v_1..v_k, column j scores
//!
//! ```text
//! s_j = (1/k) * sum_h v_h[j]^2
//! ```
//!
//! The scores sum to 1. Each bag keeps its `t_per_bag` highest-scoring
//! columns; the per-bag selections are concatenated in bag order to form
//! the key matrix.

use rayon::prelude::*;

use crate::data::{EmbeddingMatrix, KeyMatrix};
use crate::error::{Error, Result};
use crate::svd::right_svd;

pub const DEFAULT_T_PER_BAG: usize = 100;
pub const DEFAULT_RANK_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyLearnConfig {
    pub t_per_bag: usize,
    pub rank_rel_tol: f64,
}

impl Default for KeyLearnConfig {
    fn default() -> Self {
        Self {
            t_per_bag: DEFAULT_T_PER_BAG,
            rank_rel_tol: DEFAULT_RANK_REL_TOL,
        }
    }
}

impl KeyLearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_per_bag == 0 {
            return Err(Error::Config("t_per_bag must be at least 1".into()));
        }
        if !(self.rank_rel_tol > 0.0 && self.rank_rel_tol.is_finite()) {
            return Err(Error::Config(
                "rank tolerance must be a positive number".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeverageScores {
    pub scores: Vec<f64>,
    pub rank: usize,
}

/// Number of singular values above `rel_tol * sigma_max`.
pub fn numeric_rank(x: &EmbeddingMatrix, rel_tol: f64) -> Result<usize> {
    if x.count() == 0 {
        return Err(Error::EmptyBag);
    }
    let svd = right_svd(&x.to_f64(), x.dim(), x.count());
    match svd.rank(rel_tol) {
        0 => Err(Error::ZeroMatrix),
        k => Ok(k),
    }
}

pub fn leverage_scores(x: &EmbeddingMatrix, rel_tol: f64) -> Result<LeverageScores> {
    if x.count() == 0 {
        return Err(Error::EmptyBag);
    }
    leverage_scores_f64(&x.to_f64(), x.dim(), x.count(), rel_tol)
}

/// Leverage scores of a `dim`×`count` matrix given as instance-major `f64`.
pub fn leverage_scores_f64(
    values: &[f64],
    dim: usize,
    count: usize,
    rel_tol: f64,
) -> Result<LeverageScores> {
    let svd = right_svd(values, dim, count);
    let rank = svd.rank(rel_tol);
    if rank == 0 {
        return Err(Error::ZeroMatrix);
    }
    let mut scores = vec![0.0; count];
    for v in &svd.vectors[..rank] {
        for (s, x) in scores.iter_mut().zip(v) {
            *s += x * x;
        }
    }
    let k = rank as f64;
    scores.iter_mut().for_each(|s| *s /= k);
    Ok(LeverageScores { scores, rank })
}

/// Column indices ordered by descending leverage. Zero columns go after
/// every nonzero column; remaining ties resolve by ascending index.
pub fn leverage_order(x: &EmbeddingMatrix, scores: &LeverageScores) -> Vec<usize> {
    let zero: Vec<bool> = (0..x.count()).map(|i| x.column_norm(i) == 0.0).collect();
    let mut order: Vec<usize> = (0..x.count()).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .total_cmp(&scores.scores[a])
            .then(zero[a].cmp(&zero[b]))
            .then(a.cmp(&b))
    });
    order
}

pub fn select_representatives(
    x: &EmbeddingMatrix,
    cfg: &KeyLearnConfig,
) -> Result<EmbeddingMatrix> {
    cfg.validate()?;
    let scores = leverage_scores(x, cfg.rank_rel_tol)?;
    let mut order = leverage_order(x, &scores);
    order.truncate(cfg.t_per_bag.min(x.count()));
    x.select_columns(&order)
}

/// Concatenates the representatives of every negative bag, in input order.
/// Zero-norm columns are never used as keys.
pub fn build_key_matrix(negatives: &[EmbeddingMatrix], cfg: &KeyLearnConfig) -> Result<KeyMatrix> {
    cfg.validate()?;
    let first = negatives
        .first()
        .ok_or_else(|| Error::Invalid("no negative bags to learn keys from".into()))?;
    let dim = first.dim();
    if let Some(bad) = negatives.iter().find(|m| m.dim() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            found: bad.dim(),
        });
    }
    let parts = negatives
        .par_iter()
        .map(|x| select_representatives(x, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut values = Vec::new();
    let mut count = 0;
    for part in &parts {
        for i in 0..part.count() {
            if part.column_norm(i) > 0.0 {
                values.extend_from_slice(part.column(i));
                count += 1;
            }
        }
    }
    KeyMatrix::new(EmbeddingMatrix::new(dim, count, values)?)
}

//! Salient instance inference: score each instance of a bag against the key
//! matrix and keep the most key-dissimilar fraction.
//!
//! Saliency of a query is the negated mean of its `top_k` largest cosine
//! similarities to the keys, so instances unlike every normal pattern rank
//! first.

use rayon::prelude::*;

use crate::data::{EmbeddingMatrix, KeyMatrix, SalientBag};
use crate::error::{Error, Result};

pub const DEFAULT_TOP_K: usize = 150;
pub const DEFAULT_KEEP_RATIO: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiiConfig {
    pub top_k: usize,
    pub keep_ratio: f64,
}

impl Default for SiiConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            keep_ratio: DEFAULT_KEEP_RATIO,
        }
    }
}

impl SiiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "keep_ratio must be in (0, 1], got {}",
                self.keep_ratio
            )));
        }
        Ok(())
    }
}

/// n×τ cosine similarities, row-major (one row per query).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Keys promoted to f64 and pre-divided by their norms.
struct UnitKeys {
    dim: usize,
    values: Vec<f64>,
}

impl UnitKeys {
    fn new(keys: &KeyMatrix) -> Self {
        let m = keys.matrix();
        let mut values = Vec::with_capacity(m.dim() * m.count());
        for j in 0..m.count() {
            let norm = m.column_norm(j);
            values.extend(m.column(j).iter().map(|&v| f64::from(v) / norm));
        }
        Self {
            dim: m.dim(),
            values,
        }
    }

    /// Cosine similarities of one query against every key. A zero query
    /// yields a row of zeros.
    fn similarity_row(&self, query: &[f32], out: &mut [f64]) {
        let q: Vec<f64> = query.iter().map(|&v| f64::from(v)).collect();
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            out.fill(0.0);
            return;
        }
        for (o, k) in out.iter_mut().zip(self.values.chunks_exact(self.dim)) {
            let d: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
            *o = (d / norm).clamp(-1.0, 1.0);
        }
    }
}

fn check_dims(q: &EmbeddingMatrix, keys: &KeyMatrix) -> Result<()> {
    if q.dim() != keys.dim() {
        return Err(Error::DimMismatch {
            expected: keys.dim(),
            found: q.dim(),
        });
    }
    Ok(())
}

pub fn cosine_similarity_matrix(q: &EmbeddingMatrix, keys: &KeyMatrix) -> Result<SimilarityMatrix> {
    check_dims(q, keys)?;
    let unit = UnitKeys::new(keys);
    let cols = keys.count();
    let mut values = vec![0.0; q.count() * cols];
    values
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(i, row)| unit.similarity_row(q.column(i), row));
    Ok(SimilarityMatrix {
        rows: q.count(),
        cols,
        values,
    })
}

/// Negated mean of the `top_k` largest entries. `row` is reordered.
fn row_saliency(row: &mut [f64], top_k: usize) -> f64 {
    let k = top_k.min(row.len());
    if k == 0 {
        return 0.0;
    }
    if k < row.len() {
        row.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    }
    let top = &mut row[..k];
    // Summing in descending order makes the result independent of how the
    // selection arranged the top block.
    top.sort_unstable_by(|a, b| b.total_cmp(a));
    let mean = top.iter().sum::<f64>() / k as f64;
    -mean
}

/// Saliency per query; `top_k` is clamped to the number of keys.
pub fn saliency_scores(c: &SimilarityMatrix, top_k: usize) -> Vec<f64> {
    (0..c.rows)
        .into_par_iter()
        .map(|i| {
            let mut row = c.row(i).to_vec();
            row_saliency(&mut row, top_k)
        })
        .collect()
}

/// `max(1, round(keep_ratio * n))`.
pub fn retained_count(n: usize, keep_ratio: f64) -> usize {
    ((keep_ratio * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Keeps the `retained_count` most salient instances, ordered by descending
/// saliency with ties broken by ascending index.
pub fn select_salient(
    q: &EmbeddingMatrix,
    saliency: &[f64],
    keep_ratio: f64,
    bag_id: &str,
) -> Result<SalientBag> {
    if q.count() == 0 {
        return Err(Error::EmptyBag);
    }
    if saliency.len() != q.count() {
        return Err(Error::Shape(format!(
            "{} saliency scores for {} instances",
            saliency.len(),
            q.count()
        )));
    }
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "keep_ratio must be in (0, 1], got {keep_ratio}"
        )));
    }
    let mut order: Vec<usize> = (0..q.count()).collect();
    order.sort_by(|&a, &b| saliency[b].total_cmp(&saliency[a]).then(a.cmp(&b)));
    order.truncate(retained_count(q.count(), keep_ratio));
    Ok(SalientBag {
        source_bag_id: bag_id.to_string(),
        saliency: order.iter().map(|&i| saliency[i]).collect(),
        embeddings: q.select_columns(&order)?,
        selected_indices: order,
    })
}

/// Full inference for one bag without materializing the similarity matrix.
/// Identical to `select_salient(q, saliency_scores(cosine_similarity_matrix(q, keys)))`.
pub fn sii_bag(
    q: &EmbeddingMatrix,
    keys: &KeyMatrix,
    cfg: &SiiConfig,
    bag_id: &str,
) -> Result<SalientBag> {
    cfg.validate()?;
    check_dims(q, keys)?;
    if q.count() == 0 {
        return Err(Error::EmptyBag);
    }
    let saliency = bag_saliency(q, keys, cfg.top_k)?;
    select_salient(q, &saliency, cfg.keep_ratio, bag_id)
}

/// Per-instance saliency of a bag, streamed row by row.
pub fn bag_saliency(q: &EmbeddingMatrix, keys: &KeyMatrix, top_k: usize) -> Result<Vec<f64>> {
    check_dims(q, keys)?;
    let unit = UnitKeys::new(keys);
    let cols = keys.count();
    Ok((0..q.count())
        .into_par_iter()
        .map_init(
            || vec![0.0; cols],
            |row, i| {
                unit.similarity_row(q.column(i), row);
                row_saliency(row, top_k)
            },
        )
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(dim: usize, cols: &[&[f64]]) -> KeyMatrix {
        KeyMatrix::new(EmbeddingMatrix::from_columns(dim, cols).unwrap()).unwrap()
    }

    fn q(dim: usize, cols: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_columns(dim, cols).unwrap()
    }

    #[test]
    fn identical_and_orthogonal() {
        let k = keys(2, &[&[1.0, 0.0]]);
        let c = cosine_similarity_matrix(&q(2, &[&[1.0, 0.0]]), &k).unwrap();
        assert_eq!(c.values, vec![1.0]);
        assert_eq!(saliency_scores(&c, 1), vec![-1.0]);
        let k = keys(2, &[&[0.0, 1.0]]);
        let c = cosine_similarity_matrix(&q(2, &[&[1.0, 0.0]]), &k).unwrap();
        assert_eq!(c.values, vec![0.0]);
    }

    #[test]
    fn zero_query_row_is_zero() {
        let k = keys(2, &[&[1.0, 0.0], &[0.3, 0.4]]);
        let c = cosine_similarity_matrix(&q(2, &[&[0.0, 0.0]]), &k).unwrap();
        assert_eq!(c.values, vec![0.0, 0.0]);
        assert_eq!(saliency_scores(&c, 2), vec![0.0]);
    }

    #[test]
    fn top_k_mean() {
        let c = SimilarityMatrix {
            rows: 1,
            cols: 3,
            values: vec![0.9, 0.1, 0.5],
        };
        assert!((saliency_scores(&c, 2)[0] + 0.7).abs() < 1e-15);
        // top_k beyond the key count uses every key.
        assert!((saliency_scores(&c, 10)[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let k = keys(3, &[&[1.0, 0.0, 0.0]]);
        assert!(matches!(
            cosine_similarity_matrix(&q(2, &[&[1.0, 0.0]]), &k),
            Err(Error::DimMismatch {
                expected: 3,
                found: 2
            })
        ));
    }

    #[test]
    fn retained_counts() {
        assert_eq!(retained_count(10, 0.3), 3);
        assert_eq!(retained_count(1, 0.3), 1);
        assert_eq!(retained_count(1000, 0.3), 300);
        assert_eq!(retained_count(7, 1.0), 7);
        assert_eq!(retained_count(5, 0.1), 1);
    }

    #[test]
    fn select_keeps_ratio_and_order() {
        let cols: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 + 1.0, 1.0]).collect();
        let m = EmbeddingMatrix::from_columns(2, &cols).unwrap();
        let s: Vec<f64> = vec![0.1, 0.5, 0.5, -0.2, 0.9, 0.0, 0.3, 0.5, -1.0, 0.2];
        let bag = select_salient(&m, &s, 0.3, "b").unwrap();
        assert_eq!(bag.selected_indices, vec![4, 1, 2]);
        assert_eq!(bag.saliency, vec![0.9, 0.5, 0.5]);
        assert_eq!(bag.embeddings.column(0), m.column(4));

        let all = select_salient(&m, &s, 1.0, "b").unwrap();
        let mut idx = all.selected_indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        assert_eq!(all.in_source_order(), m);
    }

    #[test]
    fn single_instance_is_kept() {
        let m = q(2, &[&[1.0, 2.0]]);
        let bag = select_salient(&m, &[0.0], 0.3, "b").unwrap();
        assert_eq!(bag.len(), 1);
    }

    #[test]
    fn all_instances_equal_a_key() {
        let k = keys(2, &[&[1.0, 1.0], &[0.0, 1.0]]);
        let m = q(2, &[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let cfg = SiiConfig {
            top_k: 1,
            keep_ratio: 0.5,
        };
        let bag = sii_bag(&m, &k, &cfg, "b").unwrap();
        assert_eq!(bag.selected_indices, vec![0, 1]);
        assert!(bag.saliency.iter().all(|&s| (s + 1.0).abs() < 1e-15));
    }

    #[test]
    fn streaming_equals_composition() {
        let k = keys(
            3,
            &[
                &[1.0, 0.2, 0.0],
                &[0.0, 1.0, 0.5],
                &[0.3, -0.1, 1.0],
                &[1.0, 1.0, 1.0],
            ],
        );
        let cols: Vec<Vec<f64>> = (0..9)
            .map(|i| {
                vec![
                    (i as f64).sin(),
                    (i as f64 * 1.3).cos(),
                    i as f64 * 0.1 - 0.4,
                ]
            })
            .collect();
        let m = EmbeddingMatrix::from_columns(3, &cols).unwrap();
        let cfg = SiiConfig {
            top_k: 2,
            keep_ratio: 0.4,
        };
        let composed = select_salient(
            &m,
            &saliency_scores(&cosine_similarity_matrix(&m, &k).unwrap(), cfg.top_k),
            cfg.keep_ratio,
            "x",
        )
        .unwrap();
        assert_eq!(sii_bag(&m, &k, &cfg, "x").unwrap(), composed);
    }

    #[test]
    fn config_validation() {
        assert!(SiiConfig {
            top_k: 0,
            keep_ratio: 0.3
        }
        .validate()
        .is_err());
        assert!(SiiConfig {
            top_k: 1,
            keep_ratio: 0.0
        }
        .validate()
        .is_err());
        assert!(SiiConfig {
            top_k: 1,
            keep_ratio: 1.5
        }
        .validate()
        .is_err());
        assert!(SiiConfig::default().validate().is_ok());
    }
}

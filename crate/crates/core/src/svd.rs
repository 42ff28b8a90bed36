//! Right singular vectors by one-sided (Hestenes) Jacobi rotations.
//!
//! For a wide matrix (more columns than rows) the rotations orthogonalize the
//! rows, whose normalized results are the right singular vectors directly.
//! For a tall or square matrix the rotations act on the columns and the
//! accumulated rotation matrix holds the right singular vectors.

const MAX_SWEEPS: usize = 80;

#[derive(Debug, Clone)]
pub struct RightSvd {
    /// Singular values, non-increasing.
    pub singular_values: Vec<f64>,
    /// `vectors[h]` is the right singular vector for `singular_values[h]`,
    /// of length `cols`.
    pub vectors: Vec<Vec<f64>>,
}

impl RightSvd {
    /// Number of singular values above `rel_tol * sigma_max`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let Some(&max) = self.singular_values.first() else {
            return 0;
        };
        if max <= 0.0 {
            return 0;
        }
        self.singular_values
            .iter()
            .filter(|&&s| s > rel_tol * max)
            .count()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthogonalizes `vecs` in place by plane rotations; every rotation is
/// mirrored onto `acc` when given.
fn jacobi_orthogonalize(vecs: &mut [Vec<f64>], mut acc: Option<&mut [Vec<f64>]>) {
    let k = vecs.len();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = dot(&vecs[p], &vecs[p]);
                let beta = dot(&vecs[q], &vecs[q]);
                let gamma = dot(&vecs[p], &vecs[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(vecs, p, q, c, s);
                if let Some(acc) = acc.as_deref_mut() {
                    rotate(acc, p, q, c, s);
                }
            }
        }
        if !rotated {
            break;
        }
    }
}

fn rotate(vecs: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = vecs.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Makes the largest-magnitude entry positive (first such entry on ties).
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Thin SVD right factor of a `rows`×`cols` matrix given instance-major
/// (column-major) values. Returns `min(rows, cols)` singular triplets.
pub fn right_svd(values: &[f64], rows: usize, cols: usize) -> RightSvd {
    assert_eq!(
        values.len(),
        rows * cols,
        "value count does not match shape"
    );
    let mut pairs: Vec<(f64, Vec<f64>)> = if cols > rows {
        // Row r of the matrix as a length-`cols` vector.
        let mut row_vecs: Vec<Vec<f64>> = (0..rows)
            .map(|r| (0..cols).map(|j| values[j * rows + r]).collect())
            .collect();
        jacobi_orthogonalize(&mut row_vecs, None);
        row_vecs
            .into_iter()
            .map(|mut v| {
                let norm = dot(&v, &v).sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
                (norm, v)
            })
            .collect()
    } else {
        let mut col_vecs: Vec<Vec<f64>> = values.chunks(rows.max(1)).map(<[f64]>::to_vec).collect();
        col_vecs.truncate(cols);
        let mut acc: Vec<Vec<f64>> = (0..cols)
            .map(|j| {
                let mut e = vec![0.0; cols];
                e[j] = 1.0;
                e
            })
            .collect();
        jacobi_orthogonalize(&mut col_vecs, Some(&mut acc));
        // X W = B with orthogonal columns; acc[j] is column j of W.
        col_vecs
            .iter()
            .zip(acc)
            .map(|(c, w)| (dot(c, c).sqrt(), w))
            .collect()
    };
    // Stable sort keeps decomposition order among equal singular values.
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (_, v) in &mut pairs {
        fix_sign(v);
    }
    let (singular_values, vectors) = pairs.into_iter().unzip();
    RightSvd {
        singular_values,
        vectors,
    }
}

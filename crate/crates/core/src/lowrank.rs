//! Rank-K hard thresholding of singular values and the partitioned
//! low-rank step on triple*-partitioned Hankel matrices.
//!
//! Hankel matrices here are tall and skinny (hundreds of thousands of rows,
//! `l^2 = 64` columns), so the truncation works on the small Gram matrix:
//! the top-K eigenvectors `V_K` of `M^T M` span the leading right singular
//! subspace and `U_K Δ_K V_K^T = M V_K V_K^T`. This never divides by a
//! singular value, so rank-deficient inputs need no special casing.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hankel::{recombine, HankelMatrix, PartitionSet};

pub const MAX_RANK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankSpec {
    /// Retained rank K.
    pub rank: usize,
    /// Truncate the four overlapping half blocks before averaging them.
    pub per_part: bool,
}

impl Default for RankSpec {
    fn default() -> Self {
        Self {
            rank: 38,
            per_part: true,
        }
    }
}

impl RankSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_RANK).contains(&self.rank) {
            return Err(Error::invalid(format!(
                "rank must be in 1..={MAX_RANK}, got {}",
                self.rank
            )));
        }
        Ok(())
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns.
pub fn symmetric_eigen(a: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut a = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off <= 1e-32 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - sn * akq;
                    a[[k, q]] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - sn * aqk;
                    a[[q, k]] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - sn * vkq;
                    v[[k, q]] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    (values, vectors)
}

fn check_nonempty(m: ArrayView2<f64>) -> Result<()> {
    if m.is_empty() {
        return Err(Error::invalid("empty matrix"));
    }
    Ok(())
}

/// Singular values in descending order, from the Gram matrix of the
/// smaller side.
pub fn singular_values(m: ArrayView2<f64>) -> Result<Vec<f64>> {
    check_nonempty(m)?;
    let gram = if m.nrows() >= m.ncols() { m.t().dot(&m) } else { m.dot(&m.t()) };
    let (vals, _) = symmetric_eigen(gram.view());
    Ok(vals.into_iter().map(|v| v.max(0.0).sqrt()).collect())
}

/// Best rank-`k` approximation `U_[k] Δ_[k] V_[k]^T` of `m` in Frobenius
/// norm. `k` at or above the smaller dimension returns `m` up to rounding.
pub fn svd_hard_threshold(m: ArrayView2<f64>, k: usize) -> Result<Array2<f64>> {
    check_nonempty(m)?;
    if k == 0 {
        return Err(Error::invalid("rank must be at least 1"));
    }
    if m.nrows() >= m.ncols() {
        let (_, v) = symmetric_eigen(m.t().dot(&m).view());
        let vk = v.slice(s![.., ..k.min(m.ncols())]);
        Ok(m.dot(&vk).dot(&vk.t()))
    } else {
        let (_, u) = symmetric_eigen(m.dot(&m.t()).view());
        let uk = u.slice(s![.., ..k.min(m.nrows())]);
        Ok(uk.dot(&uk.t().dot(&m)))
    }
}

/// Low-rank step on a partition set.
///
/// With `per_part`, H1R, H3L, H2L and H3R are each truncated to rank K
/// first. The overlapping pairs are then averaged and stitched into
/// `[H1L; (H1R + H3L)/2; (H2L + H3R)/2; H2R]`, which is truncated to rank K
/// as a whole.
pub fn lr_step(parts: &PartitionSet, spec: &RankSpec) -> Result<HankelMatrix> {
    spec.validate()?;
    let k = spec.rank;
    let stitched = if spec.per_part {
        let lay = parts.layout();
        let (p1, p2, p3) = (parts.part(0), parts.part(1), parts.part(2));
        let r1 = lay.right1();
        let h1r = svd_hard_threshold(p1.slice(s![lay.left1.., ..]), k)?;
        let h3l = svd_hard_threshold(p3.slice(s![..r1, ..]), k)?;
        let h2l = svd_hard_threshold(p2.slice(s![..lay.left2, ..]), k)?;
        let h3r = svd_hard_threshold(p3.slice(s![r1.., ..]), k)?;
        let new1 = concatenate(Axis(0), &[p1.slice(s![..lay.left1, ..]), h1r.view()])
            .map_err(|e| Error::dims(e.to_string()))?;
        let new2 = concatenate(Axis(0), &[h2l.view(), p2.slice(s![lay.left2.., ..])])
            .map_err(|e| Error::dims(e.to_string()))?;
        let new3 = concatenate(Axis(0), &[h3l.view(), h3r.view()]).map_err(|e| Error::dims(e.to_string()))?;
        recombine(&parts.with_parts([new1, new2, new3])?)?
    } else {
        recombine(parts)?
    };
    let src = stitched.src_dims();
    let global = svd_hard_threshold(stitched.view(), k)?;
    HankelMatrix::from_parts(global, src)
}

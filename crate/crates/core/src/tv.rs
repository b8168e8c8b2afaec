//! Smoothed isotropic total variation and the normalised-gradient descent
//! step used inside the reconstruction loop.
//!
//! Forward differences with a replicated last row/column, so the boundary
//! differences vanish:
//! `TV(x) = sum_ij sqrt(dh_ij^2 + dv_ij^2 + eps^2) - eps`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{diff_norm, Sinogram};

/// Gradients with a norm at or below this leave the iterate unchanged.
const FLAT_GRADIENT: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvSpec {
    /// Step length as a fraction of the distance between outer iterates.
    pub alpha: f64,
    /// Inner descent iterations.
    pub iters: usize,
    /// Smoothing constant relative to the dynamic range of the input.
    pub epsilon: f64,
}

impl Default for TvSpec {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            iters: 2,
            epsilon: 1e-6,
        }
    }
}

impl TvSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid(format!("tv alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid(format!("tv epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Absolute smoothing constant for an input spanning `range`.
    pub fn absolute_epsilon(&self, range: f64) -> f64 {
        if range > 0.0 {
            self.epsilon * range
        } else {
            self.epsilon
        }
    }
}

fn forward_diffs(x: ArrayView2<f64>, r: usize, c: usize) -> (f64, f64) {
    let (h, w) = x.dim();
    let dh = if c + 1 < w { x[[r, c + 1]] - x[[r, c]] } else { 0.0 };
    let dv = if r + 1 < h { x[[r + 1, c]] - x[[r, c]] } else { 0.0 };
    (dh, dv)
}

/// Smoothed isotropic TV with absolute smoothing `eps`.
pub fn tv_norm(x: ArrayView2<f64>, eps: f64) -> f64 {
    let (h, w) = x.dim();
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let (dh, dv) = forward_diffs(x, r, c);
            total += (dh * dh + dv * dv + eps * eps).sqrt() - eps;
        }
    }
    total
}

/// Analytic gradient of [`tv_norm`].
pub fn tv_gradient(x: ArrayView2<f64>, eps: f64) -> Array2<f64> {
    let (h, w) = x.dim();
    let mut g = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let (dh, dv) = forward_diffs(x, r, c);
            let mag = (dh * dh + dv * dv + eps * eps).sqrt();
            if mag == 0.0 {
                continue;
            }
            let (gh, gv) = (dh / mag, dv / mag);
            g[[r, c]] -= gh + gv;
            if c + 1 < w {
                g[[r, c + 1]] += gh;
            }
            if r + 1 < h {
                g[[r + 1, c]] += gv;
            }
        }
    }
    g
}

/// `iters` steps of `x <- x - alpha * |x_cur - x_prev| * g / |g|`, starting
/// from `x_cur`, with `g` the smoothed TV gradient at the running iterate.
pub fn tv_step(x_prev: &Sinogram, x_cur: &Sinogram, spec: &TvSpec) -> Result<Sinogram> {
    spec.validate()?;
    if x_prev.dims() != x_cur.dims() {
        return Err(Error::dims(format!(
            "previous iterate is {:?}, current is {:?}",
            x_prev.dims(),
            x_cur.dims()
        )));
    }
    let step = spec.alpha * diff_norm(x_cur.view(), x_prev.view());
    let mut x = x_cur.array().clone();
    if step == 0.0 {
        return Ok(Sinogram::from_array_unchecked(x));
    }
    let eps = spec.absolute_epsilon(x_cur.max() - x_cur.min());
    for _ in 0..spec.iters {
        let g = tv_gradient(x.view(), eps);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= FLAT_GRADIENT {
            break;
        }
        x.scaled_add(-step / norm, &g);
    }
    Ok(Sinogram::from_array_unchecked(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_horizontal_jumps() {
        let x = array![[0.0, 1.0], [0.0, 1.0]];
        assert!((tv_norm(x.view(), 1e-12) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn constant_is_flat() {
        let x = Array2::from_elem((5, 6), 3.0);
        assert_eq!(tv_norm(x.view(), 1e-3), 0.0);
        assert!(tv_gradient(x.view(), 1e-3).iter().all(|&v| v == 0.0));
        let s = Sinogram::from_array(x).unwrap();
        let prev = Sinogram::zeros(5, 6);
        assert_eq!(tv_step(&prev, &s, &TvSpec::default()).unwrap(), s);
    }

    #[test]
    fn zero_alpha_is_identity() {
        let x = Sinogram::from_vec(3, 3, (0..9).map(|v| (v * v) as f64).collect()).unwrap();
        let spec = TvSpec {
            alpha: 0.0,
            ..TvSpec::default()
        };
        assert_eq!(tv_step(&Sinogram::zeros(3, 3), &x, &spec).unwrap(), x);
    }

    #[test]
    fn rejects_bad_spec_and_dims() {
        let x = Sinogram::zeros(3, 3);
        let bad = TvSpec {
            epsilon: 0.0,
            ..TvSpec::default()
        };
        assert!(tv_step(&x, &x, &bad).is_err());
        assert!(tv_step(&Sinogram::zeros(3, 4), &x, &TvSpec::default()).is_err());
    }
}

//! PSNR, SSIM and MSE against a reference.
//!
//! Both PSNR and SSIM take their peak value from the reference, so they are
//! not symmetric in their arguments. When the reference has no positive
//! value the peak falls back to its largest magnitude, and to 1 for an
//! all-zero reference.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_dims(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dims(format!("reference is {:?}, test is {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::invalid("empty arrays"));
    }
    Ok(())
}

fn peak<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max > 0.0 {
        return max;
    }
    let mag = values.fold(0.0_f64, |m, &v| m.max(v.abs()));
    if mag > 0.0 {
        mag
    } else {
        1.0
    }
}

pub fn mse(reference: ArrayView2<f64>, test: ArrayView2<f64>) -> Result<f64> {
    check_dims(reference, test)?;
    let sum: f64 = reference.iter().zip(test.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / reference.len() as f64)
}

/// `20 log10(MAX(ref) / RMSE)`; `+inf` when the inputs are identical.
pub fn psnr(reference: ArrayView2<f64>, test: ArrayView2<f64>) -> Result<f64> {
    let err = mse(reference, test)?;
    Ok(psnr_from_mse(peak(reference.iter()), err))
}

pub fn psnr_from_mse(peak: f64, mse: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    20.0 * (peak / mse.sqrt()).log10()
}

/// Disk of radius `radius_frac * min(rows, cols)` pixels centred in the
/// array.
pub fn disk_mask(rows: usize, cols: usize, radius_frac: f64) -> Array2<bool> {
    let radius = radius_frac * rows.min(cols) as f64;
    let (cr, cc) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (dr, dc) = (r as f64 - cr, c as f64 - cc);
        dr * dr + dc * dc <= radius * radius
    })
}

/// PSNR restricted to the pixels where `mask` is set, with the peak taken
/// from the masked reference.
pub fn psnr_masked(reference: ArrayView2<f64>, test: ArrayView2<f64>, mask: ArrayView2<bool>) -> Result<f64> {
    check_dims(reference, test)?;
    if mask.dim() != reference.dim() {
        return Err(Error::dims(format!("mask is {:?}, images are {:?}", mask.dim(), reference.dim())));
    }
    let inside: Vec<(f64, f64)> = reference
        .iter()
        .zip(test.iter())
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .map(|((&a, &b), _)| (a, b))
        .collect();
    if inside.is_empty() {
        return Err(Error::invalid("empty mask"));
    }
    let refs: Vec<f64> = inside.iter().map(|p| p.0).collect();
    let err = inside.iter().map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / inside.len() as f64;
    Ok(psnr_from_mse(peak(refs.iter()), err))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (k, v) in w.iter_mut().enumerate() {
        let d = k as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.map(|v| v / total)
}

/// Separable Gaussian filtering over the valid region.
fn filter_valid(x: &Array2<f64>, w: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, wd) = x.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, wd + 1 - SSIM_WINDOW);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            rows[[r, c]] = (0..SSIM_WINDOW).map(|k| w[k] * x[[r, c + k]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            out[[r, c]] = (0..SSIM_WINDOW).map(|k| w[k] * rows[[r + k, c]]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over the valid
/// region, `c1 = (0.01 L)^2`, `c2 = (0.03 L)^2`, `L = MAX(ref)`.
pub fn ssim(reference: ArrayView2<f64>, test: ArrayView2<f64>) -> Result<f64> {
    check_dims(reference, test)?;
    let (h, w) = reference.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let l = peak(reference.iter());
    let c1 = (K1 * l).powi(2);
    let c2 = (K2 * l).powi(2);
    let win = gaussian_window();
    let x = reference.to_owned();
    let y = test.to_owned();
    let mx = filter_valid(&x, &win);
    let my = filter_valid(&y, &win);
    let sxx = filter_valid(&(&x * &x), &win);
    let syy = filter_valid(&(&y * &y), &win);
    let sxy = filter_valid(&(&x * &y), &win);
    let mut total = 0.0;
    ndarray::Zip::from(&mx)
        .and(&my)
        .and(&sxx)
        .and(&syy)
        .and(&sxy)
        .for_each(|&ux, &uy, &xx, &yy, &xy| {
            let (vx, vy, cxy) = (xx - ux * ux, yy - uy * uy, xy - ux * uy);
            total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        });
    Ok(total / mx.len() as f64)
}

/// `psnr` is `None` (serialised as `null`) when the inputs are identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: Option<f64>,
    pub identical: bool,
    /// `None` when the arrays are smaller than the SSIM window.
    pub ssim: Option<f64>,
    pub mse: f64,
}

impl MetricReport {
    pub fn compute(reference: ArrayView2<f64>, test: ArrayView2<f64>) -> Result<Self> {
        let err = mse(reference, test)?;
        let p = psnr_from_mse(peak(reference.iter()), err);
        let (h, w) = reference.dim();
        let s = if h >= SSIM_WINDOW && w >= SSIM_WINDOW {
            Some(ssim(reference, test)?)
        } else {
            None
        };
        Ok(Self {
            psnr: p.is_finite().then_some(p),
            identical: err == 0.0,
            ssim: s,
            mse: err,
        })
    }
}

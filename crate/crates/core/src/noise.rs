//! Poisson transmission noise and PWLS statistical weights.

use ndarray::Array2;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Sinogram;
use crate::rng;

/// Counts below this are clamped before the log transform.
pub const COUNT_FLOOR: f64 = 0.5;

/// Default PWLS calibration constant.
pub const DEFAULT_ETA: f64 = 22000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoseSpec {
    /// Incident photons per ray.
    pub source_intensity: f64,
    /// Expected background counts per ray (scatter + electronic).
    #[serde(default)]
    pub background: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DoseSpec {
    fn default() -> Self {
        Self {
            source_intensity: 1e5,
            background: 0.0,
            seed: 0,
        }
    }
}

impl DoseSpec {
    pub fn new(source_intensity: f64, seed: u64) -> Self {
        Self {
            source_intensity,
            background: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.source_intensity.is_finite() && self.source_intensity > 0.0) {
            return Err(Error::invalid(format!(
                "source intensity must be positive, got {}",
                self.source_intensity
            )));
        }
        if !(self.background.is_finite() && self.background >= 0.0) {
            return Err(Error::invalid(format!(
                "background must be non-negative, got {}",
                self.background
            )));
        }
        Ok(())
    }
}

/// Inverse-variance weights, one per sinogram entry, normalised to unit mean.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    weights: Array2<f64>,
}

impl WeightMap {
    /// All-ones weights (equal confidence in every entry).
    pub fn uniform(num_views: usize, num_detectors: usize) -> Self {
        Self {
            weights: Array2::ones((num_views, num_detectors)),
        }
    }

    pub fn from_array(weights: Array2<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        Ok(Self { weights })
    }

    pub fn view(&self) -> ndarray::ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.weights.dim()
    }
}

/// Simulates a low-dose acquisition of the line integrals `x`:
/// `L ~ Poisson(a exp(-x) + r)`, `y = -ln(max(L - r, 0.5) / a)`.
pub fn simulate_low_dose(x: &Sinogram, dose: &DoseSpec) -> Result<Sinogram> {
    dose.validate()?;
    if !x.is_finite() {
        return Err(Error::NonFinite("sinogram"));
    }
    let a = dose.source_intensity;
    let r = dose.background;
    let mut rng = rng::stream(dose.seed, rng::STREAM_NOISE);
    let mut any_counts = false;
    let mut y = Array2::zeros(x.dims());
    for (out, &xi) in y.iter_mut().zip(x.view().iter()) {
        let mean = a * (-xi).exp() + r;
        let counts = if mean > 0.0 {
            Poisson::new(mean)
                .map_err(|e| Error::invalid(format!("Poisson mean {mean}: {e}")))?
                .sample(&mut rng)
        } else {
            0.0
        };
        let net = counts - r;
        any_counts |= net > 0.0;
        *out = -(net.max(COUNT_FLOOR) / a).ln();
    }
    if !any_counts {
        return Err(Error::DoseTooLow);
    }
    Sinogram::from_array(y)
}

/// Unnormalised weights `a exp(-y / eta)`.
pub fn raw_pwls_weights(y: &Sinogram, dose: &DoseSpec, eta: f64) -> Result<Array2<f64>> {
    dose.validate()?;
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::invalid(format!("eta must be positive, got {eta}")));
    }
    let a = dose.source_intensity;
    Ok(y.view().mapv(|yi| a * (-yi / eta).exp()))
}

/// PWLS weights `w_i ∝ a exp(-y_i / eta)` scaled to unit mean, so the data
/// consistency blend weight does not depend on the dose level.
pub fn pwls_weights(y: &Sinogram, dose: &DoseSpec, eta: f64) -> Result<WeightMap> {
    let mut w = raw_pwls_weights(y, dose, eta)?;
    let mean = w.mean().unwrap_or(0.0);
    if !(mean.is_finite() && mean > 0.0) {
        return Err(Error::invalid("weights underflow; sinogram values too large for eta"));
    }
    w.mapv_inplace(|v| v / mean);
    WeightMap::from_array(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(rows: usize, cols: usize, max: f64) -> Sinogram {
        let n = (rows * cols - 1).max(1) as f64;
        Sinogram::from_vec(rows, cols, (0..rows * cols).map(|k| max * k as f64 / n).collect()).unwrap()
    }

    #[test]
    fn high_dose_is_nearly_noise_free() {
        let x = ramp(16, 16, 5.0);
        let y = simulate_low_dose(&x, &DoseSpec::new(1e12, 3)).unwrap();
        let worst = x
            .view()
            .iter()
            .zip(y.view().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-3, "{worst}");
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let x = ramp(8, 32, 4.0);
        let d = DoseSpec::new(1e4, 11);
        assert_eq!(simulate_low_dose(&x, &d).unwrap(), simulate_low_dose(&x, &d).unwrap());
        let other = DoseSpec::new(1e4, 12);
        assert_ne!(simulate_low_dose(&x, &d).unwrap(), simulate_low_dose(&x, &other).unwrap());
    }

    #[test]
    fn rejects_bad_dose() {
        let x = ramp(4, 4, 1.0);
        assert!(simulate_low_dose(&x, &DoseSpec::new(0.0, 0)).is_err());
        assert!(simulate_low_dose(&x, &DoseSpec::new(-1.0, 0)).is_err());
    }

    #[test]
    fn starved_detector_is_an_error() {
        // a = 1e-9 photons through x = 30: every draw is zero
        let x = Sinogram::from_elem(4, 4, 30.0);
        let err = simulate_low_dose(&x, &DoseSpec::new(1e-9, 0)).unwrap_err();
        assert!(matches!(err, Error::DoseTooLow));
    }

    #[test]
    fn constant_sinogram_gives_unit_weights() {
        let y = Sinogram::from_elem(5, 7, 2.5);
        let w = pwls_weights(&y, &DoseSpec::new(1e5, 0), DEFAULT_ETA).unwrap();
        assert!(w.view().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn weight_ratio_at_eta_ln2() {
        let eta = DEFAULT_ETA;
        let mut y = Sinogram::zeros(3, 3);
        y.view_mut()[[1, 1]] = eta * 2f64.ln();
        let w = raw_pwls_weights(&y, &DoseSpec::new(1e5, 0), eta).unwrap();
        assert!((w[[1, 1]] / w[[0, 0]] - 0.5).abs() < 1e-12);
        assert!(pwls_weights(&y, &DoseSpec::new(1e5, 0), 0.0).is_err());
    }
}

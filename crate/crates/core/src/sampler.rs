//! Iterative reconstruction from a low-dose sinogram.
//!
//! Starting at the measured sinogram, each outer iteration runs a reverse
//! diffusion predictor step, the partitioned low-rank step, a TV descent
//! step and the weighted data-consistency blend, followed by `M` Langevin
//! corrector steps each coupled to its own data-consistency blend. The
//! restored sinogram is then passed through FBP.
//!
//! All score updates happen on sinograms divided by the models'
//! normalisation scale; the result is scaled back before it is returned.

use std::thread;

use ndarray::Zip;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fbp_reconstruct, FanGeometry, FilterKind};
use crate::grid::{Image, Sinogram};
use crate::hankel::{hankel_pinv, hankel_transform, partition_triple_star, recombine, tile_for_inference, untile};
use crate::lowrank::{lr_step, RankSpec};
use crate::noise::WeightMap;
use crate::score::{fill_standard_normal, make_schedule, ScoreModel, SigmaSchedule, PARTITIONS};
use crate::rng;
use crate::tv::{tv_step, TvSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    /// Outer iterations `N`.
    pub iterations: usize,
    /// Corrector steps `M` per outer iteration.
    pub corrector_steps: usize,
    pub rank: RankSpec,
    pub tv: TvSpec,
    /// Prior weight in the data-consistency blend.
    pub lambda_dc: f64,
    /// Langevin step size is `2 (snr * sigma)^2`.
    pub corrector_snr: f64,
    pub filter: FilterKind,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            corrector_steps: 2,
            rank: RankSpec::default(),
            tv: TvSpec::default(),
            lambda_dc: 1.0,
            corrector_snr: 0.16,
            filter: FilterKind::RamLak,
            seed: 0,
        }
    }
}

impl ReconConfig {
    /// 300 outer iterations with 2 corrector steps each.
    pub fn long_run() -> Self {
        Self {
            iterations: 300,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rank.validate()?;
        self.tv.validate()?;
        if !(self.lambda_dc.is_finite() && self.lambda_dc >= 0.0) {
            return Err(Error::invalid(format!("lambda_dc must be >= 0, got {}", self.lambda_dc)));
        }
        if !(self.corrector_snr.is_finite() && self.corrector_snr > 0.0) {
            return Err(Error::invalid(format!("corrector_snr must be > 0, got {}", self.corrector_snr)));
        }
        Ok(())
    }
}

/// Window, patch height, normalisation scale and schedule shared by a
/// consistent set of partition models.
#[derive(Debug, Clone)]
struct PriorShape {
    window: usize,
    patch_rows: usize,
    scale: f64,
    schedule: SigmaSchedule,
}

fn prior_shape(models: &[ScoreModel]) -> Result<PriorShape> {
    if models.len() != PARTITIONS {
        return Err(Error::invalid(format!(
            "expected {PARTITIONS} partition models, got {}",
            models.len()
        )));
    }
    let first = models[0].meta();
    for (k, m) in models.iter().enumerate() {
        let meta = m.meta();
        if meta.partition != k {
            return Err(Error::invalid(format!("model {k} is for partition {}", meta.partition)));
        }
        if (meta.patch_rows, meta.patch_cols) != (first.patch_rows, first.patch_cols)
            || meta.scale != first.scale
            || meta.schedule != first.schedule
        {
            return Err(Error::invalid("partition models disagree on patch shape, scale or schedule"));
        }
    }
    let window = (first.patch_cols as f64).sqrt().round() as usize;
    if window * window != first.patch_cols {
        return Err(Error::invalid(format!("{} patch columns is not a square window", first.patch_cols)));
    }
    Ok(PriorShape {
        window,
        patch_rows: first.patch_rows,
        scale: first.scale,
        schedule: first.schedule.clone(),
    })
}

/// Score of the whole (normalised) sinogram: Hankel transform, partition,
/// per-tile model evaluation, untile, mean recombination and
/// pseudo-inverse. The three partitions are evaluated on separate threads
/// and joined in order.
pub fn score_field(x: &Sinogram, models: &[ScoreModel], sigma: f64) -> Result<Sinogram> {
    let shape = prior_shape(models)?;
    let parts = partition_triple_star(&hankel_transform(x, shape.window)?)?;
    let fields: Vec<Result<ndarray::Array2<f64>>> = thread::scope(|scope| {
        let handles: Vec<_> = models
            .iter()
            .enumerate()
            .map(|(k, model)| {
                let part = parts.part(k);
                let patch_rows = shape.patch_rows;
                scope.spawn(move || {
                    let tiles = tile_for_inference(part, patch_rows)?;
                    let scores = model.score_tiles(&tiles, sigma)?;
                    untile(&scores, part.nrows(), part.ncols())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("score thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(PARTITIONS);
    for f in fields {
        out.push(f?);
    }
    let fields: [ndarray::Array2<f64>; PARTITIONS] = out.try_into().expect("three partitions");
    hankel_pinv(&recombine(&parts.with_parts(fields)?)?)
}

fn add_noise(x: &mut Sinogram, amplitude: f64, rng: Option<&mut ChaCha8Rng>) {
    let Some(rng) = rng else { return };
    if amplitude == 0.0 {
        return;
    }
    let mut z = vec![0.0; x.view().len()];
    fill_standard_normal(&mut z, rng);
    for (v, z) in x.view_mut().iter_mut().zip(z) {
        *v += amplitude * z;
    }
}

fn check_finite(x: &Sinogram, what: &'static str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Reverse-diffusion step from `sigma_next` down to `sigma_cur`:
/// `x + (s_n^2 - s_c^2) s(x) + sqrt(s_n^2 - s_c^2) z`. Passing no RNG
/// drops the noise term.
pub fn predictor_step(
    x: &Sinogram,
    models: &[ScoreModel],
    sigma_next: f64,
    sigma_cur: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Sinogram> {
    if !(sigma_cur >= 0.0 && sigma_next >= sigma_cur && sigma_next.is_finite()) {
        return Err(Error::invalid(format!(
            "predictor needs sigma_next >= sigma_cur >= 0, got {sigma_next} and {sigma_cur}"
        )));
    }
    let dvar = sigma_next * sigma_next - sigma_cur * sigma_cur;
    if dvar == 0.0 {
        prior_shape(models)?;
        return Ok(x.clone());
    }
    let score = score_field(x, models, sigma_next)?;
    let mut out = x.array().clone();
    out.scaled_add(dvar, score.array());
    let mut out = Sinogram::from_array_unchecked(out);
    add_noise(&mut out, dvar.sqrt(), rng);
    check_finite(&out, "predictor output")?;
    Ok(out)
}

/// Langevin step at `sigma` with `eps = 2 (snr sigma)^2`:
/// `x + eps s(x) + sqrt(2 eps) z`. Passing no RNG drops the noise term.
pub fn corrector_step(
    x: &Sinogram,
    models: &[ScoreModel],
    sigma: f64,
    snr: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Sinogram> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("corrector sigma must be positive, got {sigma}")));
    }
    if !(snr.is_finite() && snr >= 0.0) {
        return Err(Error::invalid(format!("corrector snr must be >= 0, got {snr}")));
    }
    let eps = 2.0 * (snr * sigma).powi(2);
    if eps == 0.0 {
        prior_shape(models)?;
        return Ok(x.clone());
    }
    let score = score_field(x, models, sigma)?;
    let mut out = x.array().clone();
    out.scaled_add(eps, score.array());
    let mut out = Sinogram::from_array_unchecked(out);
    add_noise(&mut out, (2.0 * eps).sqrt(), rng);
    check_finite(&out, "corrector output")?;
    Ok(out)
}

/// Elementwise weighted blend `(w y + lambda x) / (w + lambda)`.
pub fn dc_pwls_step(x: &Sinogram, y: &Sinogram, weights: &WeightMap, lambda_dc: f64) -> Result<Sinogram> {
    if !(lambda_dc.is_finite() && lambda_dc >= 0.0) {
        return Err(Error::invalid(format!("lambda_dc must be >= 0, got {lambda_dc}")));
    }
    if x.dims() != y.dims() || weights.dims() != y.dims() {
        return Err(Error::dims(format!(
            "iterate {:?}, measurement {:?}, weights {:?}",
            x.dims(),
            y.dims(),
            weights.dims()
        )));
    }
    let mut out = y.array().clone();
    Zip::from(&mut out)
        .and(x.view())
        .and(weights.view())
        .for_each(|o, &xv, &w| {
            let denom = w + lambda_dc;
            // a zero-weight entry with no prior weight has nothing to blend
            if denom > 0.0 {
                *o = (w * *o + lambda_dc * xv) / denom;
            }
        });
    Ok(Sinogram::from_array_unchecked(out))
}

/// Hankel transform, triple*-partition, partitioned rank-K truncation and
/// pseudo-inverse.
pub fn lowrank_projection(x: &Sinogram, window: usize, rank: &RankSpec) -> Result<Sinogram> {
    let parts = partition_triple_star(&hankel_transform(x, window)?)?;
    hankel_pinv(&lr_step(&parts, rank)?)
}

/// State handed to the observer after every outer iteration.
#[derive(Debug)]
pub struct IterationRecord<'a> {
    /// Counts up from 0.
    pub iteration: usize,
    /// Noise level of the corrector steps in this iteration.
    pub sigma: f64,
    /// Current estimate in the units of the measurement.
    pub sinogram: &'a Sinogram,
}

pub fn reconstruct(
    y: &Sinogram,
    models: &[ScoreModel],
    weights: &WeightMap,
    geom: &FanGeometry,
    cfg: &ReconConfig,
) -> Result<(Sinogram, Image)> {
    reconstruct_with(y, models, weights, geom, cfg, |_| {})
}

/// [`reconstruct`] with a callback after every outer iteration.
///
/// The outer loop anneals over `N + 1` geometric levels spanning the
/// models' training schedule: iteration `i = N-1, ..., 0` predicts from
/// `sigma_{i+1}` to `sigma_i` and runs its correctors at `sigma_i`.
pub fn reconstruct_with(
    y: &Sinogram,
    models: &[ScoreModel],
    weights: &WeightMap,
    geom: &FanGeometry,
    cfg: &ReconConfig,
    mut observer: impl FnMut(&IterationRecord<'_>),
) -> Result<(Sinogram, Image)> {
    cfg.validate()?;
    check_finite(y, "measured sinogram")?;
    let shape = prior_shape(models)?;
    if weights.dims() != y.dims() {
        return Err(Error::dims(format!("weights {:?} for a {:?} sinogram", weights.dims(), y.dims())));
    }
    if cfg.iterations == 0 {
        let image = fbp_reconstruct(y, geom, cfg.filter)?;
        return Ok((y.clone(), image));
    }
    let n = cfg.iterations;
    let sched = make_schedule(n + 1, shape.schedule.min(), shape.schedule.max())?;
    let mut rng = rng::stream(cfg.seed, rng::STREAM_SAMPLING);
    let y_norm = y.scaled(1.0 / shape.scale);
    let mut x = y_norm.clone();

    for (it, i) in (0..n).rev().enumerate() {
        let sigma_next = sched.sigma(i + 1);
        let sigma = sched.sigma(i);
        let step = |x: &Sinogram, rng: &mut ChaCha8Rng| -> Result<Sinogram> {
            let prev = x.clone();
            let x = predictor_step(x, models, sigma_next, sigma, Some(rng))?;
            let x = lowrank_projection(&x, shape.window, &cfg.rank)?;
            let x = tv_step(&prev, &x, &cfg.tv)?;
            let mut x = dc_pwls_step(&x, &y_norm, weights, cfg.lambda_dc)?;
            for _ in 0..cfg.corrector_steps {
                x = corrector_step(&x, models, sigma, cfg.corrector_snr, Some(rng))?;
                x = dc_pwls_step(&x, &y_norm, weights, cfg.lambda_dc)?;
            }
            check_finite(&x, "iterate")?;
            Ok(x)
        };
        x = step(&x, &mut rng).map_err(|e| e.at_iteration(it))?;
        let current = x.scaled(shape.scale);
        observer(&IterationRecord {
            iteration: it,
            sigma,
            sinogram: &current,
        });
    }
    let out = x.scaled(shape.scale);
    let image = fbp_reconstruct(&out, geom, cfg.filter)?;
    Ok((out, image))
}

/// Draws a fresh sampling stream; handy for driving the step functions
/// directly with the same seeding as [`reconstruct`].
pub fn sampling_rng(seed: u64) -> ChaCha8Rng {
    rng::stream(seed, rng::STREAM_SAMPLING)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::make_schedule;

    fn sched() -> SigmaSchedule {
        make_schedule(5, 0.01, 1.0).unwrap()
    }

    fn sino(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Sinogram {
        Sinogram::from_array(ndarray::Array2::from_shape_fn((rows, cols), |(r, c)| f(r, c))).unwrap()
    }

    #[test]
    fn dc_limits() {
        let x = sino(4, 5, |r, c| (r * c) as f64);
        let y = sino(4, 5, |r, c| (r + c) as f64);
        let w = WeightMap::uniform(4, 5);
        assert_eq!(dc_pwls_step(&x, &y, &w, 0.0).unwrap(), y);
        let far = dc_pwls_step(&x, &y, &w, 1e12).unwrap();
        assert!(far.view().iter().zip(x.view().iter()).all(|(a, b)| (a - b).abs() < 1e-9));
        let half = dc_pwls_step(&x, &y, &w, 1.0).unwrap();
        for ((h, a), b) in half.view().iter().zip(x.view().iter()).zip(y.view().iter()) {
            assert_eq!(*h, (a + b) / 2.0);
        }
        assert!(dc_pwls_step(&x, &sino(4, 4, |_, _| 0.0), &w, 1.0).is_err());
    }

    #[test]
    fn zero_steps_are_identity() {
        let m = sino(16, 16, |r, c| ((r * 3 + c) as f64 * 0.1).sin());
        let models = ScoreModel::gaussian_triplet(&m, 0.1, &sched(), 4, 16).unwrap();
        let x = sino(16, 16, |r, c| (r as f64 - c as f64) * 0.01);
        assert_eq!(predictor_step(&x, &models, 0.3, 0.3, None).unwrap(), x);
        assert_eq!(corrector_step(&x, &models, 0.3, 0.0, None).unwrap(), x);
        assert!(predictor_step(&x, &models, 0.2, 0.3, None).is_err());
        assert!(predictor_step(&x, &models[..2], 0.3, 0.2, None).is_err());
    }

    #[test]
    fn gaussian_score_is_closed_form() {
        let m = sino(16, 16, |r, c| ((r * 3 + c) as f64 * 0.1).sin());
        let models = ScoreModel::gaussian_triplet(&m, 0.1, &sched(), 4, 16).unwrap();
        let x = sino(16, 16, |r, c| ((r + 2 * c) as f64 * 0.07).cos());
        let s = score_field(&x, &models, 0.5).unwrap();
        for ((sv, xv), mv) in s.view().iter().zip(x.view().iter()).zip(m.view().iter()) {
            assert!((sv + (xv - mv) / 0.35).abs() < 1e-12);
        }
    }

    #[test]
    fn no_iterations_returns_input() {
        let geom = FanGeometry {
            num_views: 16,
            num_detectors: 24,
            image_size: 16,
            pixel_spacing: 20.0 / 16.0,
            ..FanGeometry::clinical()
        };
        let y = sino(16, 24, |r, c| 0.1 * (r + c) as f64);
        let models = ScoreModel::gaussian_triplet(&y, 0.1, &sched(), 4, 16).unwrap();
        let cfg = ReconConfig {
            iterations: 0,
            ..ReconConfig::default()
        };
        let (out, img) = reconstruct(&y, &models, &WeightMap::uniform(16, 24), &geom, &cfg).unwrap();
        assert_eq!(out, y);
        assert_eq!(img, fbp_reconstruct(&y, &geom, FilterKind::RamLak).unwrap());
    }
}

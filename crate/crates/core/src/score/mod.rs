//! Noise-conditional score models over Hankel patches.
//!
//! A patch is a block of `patch_rows` consecutive Hankel rows from one
//! partition (64 x 64 with the default window and patch height). Two model
//! kinds share one interface: a small trainable network whose output is
//! divided by `sigma`, and a closed-form Gaussian prior used as an oracle in
//! tests. Sinograms are normalised by the training scale before they reach
//! a model.

mod net;
mod schedule;
mod train;

pub use net::{Adam, ScoreNet};
pub use schedule::{make_schedule, SigmaSchedule};
pub use train::{input_scale, train, TrainConfig, Trained};

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Sinogram;
use crate::hankel::{hankel_transform, partition_triple_star, PatchTensor};
use crate::rng;

/// Number of partition models in a triple*-partition prior.
pub const PARTITIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    TrainableNet,
    AnalyticGaussian,
}

/// Everything about a model except its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub kind: ModelKind,
    pub schedule: SigmaSchedule,
    /// Sinograms are divided by this before Hankel embedding.
    pub scale: f64,
    /// Which triple*-partition the model belongs to (0, 1 or 2).
    pub partition: usize,
    pub seed: u64,
    pub patch_rows: usize,
    pub patch_cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Net(ScoreNet),
    /// Isotropic Gaussian around `mean`. A mean with exactly `patch_rows`
    /// rows is shared by every patch; a taller one is indexed by the patch
    /// origin within the partition.
    Gaussian { mean: Array2<f64>, variance: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    meta: ModelMeta,
    prior: Prior,
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid(format!("normalisation scale must be positive, got {scale}")));
    }
    Ok(())
}

impl ScoreModel {
    pub fn from_parts(meta: ModelMeta, prior: Prior) -> Result<Self> {
        check_scale(meta.scale)?;
        if meta.partition >= PARTITIONS {
            return Err(Error::invalid(format!("partition index {} out of range", meta.partition)));
        }
        if meta.patch_rows == 0 || meta.patch_cols == 0 {
            return Err(Error::invalid("empty patch shape"));
        }
        match &prior {
            Prior::Net(net) => {
                if meta.kind != ModelKind::TrainableNet || net.sizes()[0] != meta.patch_rows * meta.patch_cols {
                    return Err(Error::dims(format!(
                        "network input {} does not match {}x{} patches",
                        net.sizes()[0],
                        meta.patch_rows,
                        meta.patch_cols
                    )));
                }
            }
            Prior::Gaussian { mean, variance } => {
                if meta.kind != ModelKind::AnalyticGaussian {
                    return Err(Error::invalid("Gaussian prior with a network kind"));
                }
                if mean.ncols() != meta.patch_cols || mean.nrows() < meta.patch_rows {
                    return Err(Error::dims(format!(
                        "mean is {:?}, patches are {}x{}",
                        mean.dim(),
                        meta.patch_rows,
                        meta.patch_cols
                    )));
                }
                if !(variance.is_finite() && *variance >= 0.0) || mean.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("Gaussian prior needs a finite mean and variance >= 0"));
                }
            }
        }
        Ok(Self { meta, prior })
    }

    pub fn net(
        net: ScoreNet,
        schedule: SigmaSchedule,
        scale: f64,
        partition: usize,
        seed: u64,
        patch_rows: usize,
    ) -> Result<Self> {
        let features = net.sizes()[0];
        if patch_rows == 0 || !features.is_multiple_of(patch_rows) {
            return Err(Error::dims(format!("{features} inputs do not split into {patch_rows} rows")));
        }
        let meta = ModelMeta {
            kind: ModelKind::TrainableNet,
            schedule,
            scale,
            partition,
            seed,
            patch_rows,
            patch_cols: features / patch_rows,
        };
        Self::from_parts(meta, Prior::Net(net))
    }

    /// A network with every parameter zero: its score is identically zero.
    pub fn zero(schedule: SigmaSchedule, partition: usize, patch_rows: usize, patch_cols: usize, hidden: usize) -> Result<Self> {
        let d = patch_rows * patch_cols;
        Self::net(ScoreNet::zeros([d, hidden, hidden, d])?, schedule, 1.0, partition, 0, patch_rows)
    }

    pub fn gaussian(
        mean: Array2<f64>,
        variance: f64,
        schedule: SigmaSchedule,
        partition: usize,
        patch_rows: usize,
    ) -> Result<Self> {
        let meta = ModelMeta {
            kind: ModelKind::AnalyticGaussian,
            schedule,
            scale: 1.0,
            partition,
            seed: 0,
            patch_rows,
            patch_cols: mean.ncols(),
        };
        Self::from_parts(meta, Prior::Gaussian { mean, variance })
    }

    /// Three Gaussian models whose means are the partitions of the Hankel
    /// matrix of `m`, so the score of the whole pipeline at sinogram `x` is
    /// `-(x - m) / (variance + sigma^2)`.
    pub fn gaussian_triplet(
        m: &Sinogram,
        variance: f64,
        schedule: &SigmaSchedule,
        window: usize,
        patch_rows: usize,
    ) -> Result<Vec<Self>> {
        let parts = partition_triple_star(&hankel_transform(m, window)?)?;
        (0..PARTITIONS)
            .map(|k| Self::gaussian(parts.part(k).to_owned(), variance, schedule.clone(), k, patch_rows))
            .collect()
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn kind(&self) -> ModelKind {
        self.meta.kind
    }

    pub fn schedule(&self) -> &SigmaSchedule {
        &self.meta.schedule
    }

    pub fn scale(&self) -> f64 {
        self.meta.scale
    }

    pub fn partition(&self) -> usize {
        self.meta.partition
    }

    pub fn patch_shape(&self) -> (usize, usize) {
        (self.meta.patch_rows, self.meta.patch_cols)
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn network(&self) -> Option<&ScoreNet> {
        match &self.prior {
            Prior::Net(net) => Some(net),
            Prior::Gaussian { .. } => None,
        }
    }

    pub(crate) fn network_mut(&mut self) -> Option<&mut ScoreNet> {
        match &mut self.prior {
            Prior::Net(net) => Some(net),
            Prior::Gaussian { .. } => None,
        }
    }

    /// Score of one patch taken from partition row `origin`.
    pub fn score_eval_at(&self, patch: ArrayView2<f64>, origin: usize, sigma: f64) -> Result<Array2<f64>> {
        let (pr, pc) = self.patch_shape();
        let batch = patch
            .to_owned()
            .into_shape_with_order((1, pr, pc))
            .map_err(|_| Error::dims(format!("patch is {:?}, model expects {pr}x{pc}", patch.dim())))?;
        let out = self.score_batch(batch.view(), &[origin], sigma)?;
        Ok(out.index_axis_move(Axis(0), 0))
    }

    /// Score of one patch; Gaussian models with per-origin means use the
    /// first one.
    pub fn score_eval(&self, patch: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
        self.score_eval_at(patch, 0, sigma)
    }

    /// Scores of a stack of patches, one origin per patch.
    pub fn score_batch(&self, patches: ArrayView3<f64>, origins: &[usize], sigma: f64) -> Result<Array3<f64>> {
        check_sigma(sigma)?;
        let (n, pr, pc) = patches.dim();
        if (pr, pc) != self.patch_shape() || origins.len() != n {
            return Err(Error::dims(format!(
                "{n} patches of {pr}x{pc} with {} origins; model expects {:?}",
                origins.len(),
                self.patch_shape()
            )));
        }
        if patches.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score input"));
        }
        match &self.prior {
            Prior::Net(net) => {
                let flat = patches
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((n, pr * pc))
                    .expect("standard layout reshapes");
                let out = net.forward(flat.view())? / sigma;
                Ok(out.into_shape_with_order((n, pr, pc)).expect("same element count"))
            }
            Prior::Gaussian { mean, variance } => {
                let denom = variance + sigma * sigma;
                let mut out = Array3::zeros((n, pr, pc));
                for ((mut dst, src), &o) in out.outer_iter_mut().zip(patches.outer_iter()).zip(origins) {
                    let m = if mean.nrows() == pr {
                        mean.view()
                    } else if o + pr <= mean.nrows() {
                        mean.slice(s![o..o + pr, ..])
                    } else {
                        return Err(Error::dims(format!("patch origin {o} outside the {}-row mean", mean.nrows())));
                    };
                    ndarray::Zip::from(&mut dst)
                        .and(&src)
                        .and(&m)
                        .for_each(|d, &p, &mu| *d = -(p - mu) / denom);
                }
                Ok(out)
            }
        }
    }

    /// Scores of inference tiles, keeping their origins.
    pub fn score_tiles(&self, tiles: &PatchTensor, sigma: f64) -> Result<PatchTensor> {
        let out = self.score_batch(tiles.patches(), tiles.origins(), sigma)?;
        PatchTensor::new(out, tiles.origins().to_vec())
    }
}

pub(crate) fn fill_standard_normal<R: Rng + ?Sized>(values: &mut [f64], rng: &mut R) {
    for v in values {
        *v = StandardNormal.sample(rng);
    }
}

/// Denoising score-matching loss with `lambda(sigma) = sigma^2`, drawing
/// the perturbations from `seed`.
pub fn dsm_loss(model: &ScoreModel, clean: &PatchTensor, sigma: f64, seed: u64) -> Result<f64> {
    let (pr, pc) = clean.patch_shape();
    let mut noise = Array3::zeros((clean.len(), pr, pc));
    fill_standard_normal(
        noise.as_slice_mut().expect("fresh array is contiguous"),
        &mut rng::stream(seed, rng::STREAM_TRAINING),
    );
    dsm_loss_with_noise(model, clean, sigma, noise.view())
}

/// `sigma^2 * mean_b |s(p_b + sigma z_b, sigma) + z_b / sigma|^2` for given
/// standard-normal draws `z`.
pub fn dsm_loss_with_noise(model: &ScoreModel, clean: &PatchTensor, sigma: f64, noise: ArrayView3<f64>) -> Result<f64> {
    check_sigma(sigma)?;
    if clean.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if noise.dim() != clean.patches().dim() {
        return Err(Error::dims("noise and patches differ in shape"));
    }
    let perturbed = &clean.patches() + &(&noise * sigma);
    let scores = model.score_batch(perturbed.view(), clean.origins(), sigma)?;
    let total: f64 = scores
        .iter()
        .zip(noise.iter())
        .map(|(s, z)| {
            let r = s + z / sigma;
            r * r
        })
        .sum();
    Ok(sigma * sigma * total / clean.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn sched() -> SigmaSchedule {
        make_schedule(4, 0.01, 1.0).unwrap()
    }

    #[test]
    fn gaussian_closed_form() {
        let mean = Array2::from_shape_fn((4, 3), |(r, c)| (r + c) as f64);
        let model = ScoreModel::gaussian(mean.clone(), 0.5, sched(), 0, 4).unwrap();
        let p = Array2::from_elem((4, 3), 1.0);
        let s = model.score_eval(p.view(), 0.5).unwrap();
        for ((sv, pv), mv) in s.iter().zip(p.iter()).zip(mean.iter()) {
            assert_eq!(*sv, -(pv - mv) / 0.75);
        }
        assert!(model.score_eval(mean.view(), 0.3).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_origin_means() {
        let mean = Array2::from_shape_fn((10, 2), |(r, _)| r as f64);
        let model = ScoreModel::gaussian(mean, 0.0, sched(), 1, 4).unwrap();
        let p = Array2::from_shape_fn((4, 2), |(r, _)| (r + 3) as f64);
        assert!(model.score_eval_at(p.view(), 3, 1.0).unwrap().iter().all(|&v| v == 0.0));
        assert!(model.score_eval_at(p.view(), 7, 1.0).is_err());
    }

    #[test]
    fn zero_model_and_sigma_checks() {
        let model = ScoreModel::zero(sched(), 2, 4, 4, 8).unwrap();
        let p = Array2::from_elem((4, 4), 0.3);
        assert!(model.score_eval(p.view(), 0.2).unwrap().iter().all(|&v| v == 0.0));
        assert!(model.score_eval(p.view(), 0.0).is_err());
        assert!(model.score_eval(Array2::from_elem((4, 4), f64::NAN).view(), 0.2).is_err());
        assert!(model.score_eval(Array2::zeros((3, 4)).view(), 0.2).is_err());
        assert!(ScoreModel::zero(sched(), 3, 4, 4, 8).is_err());
    }

    #[test]
    fn dsm_loss_is_seeded() {
        let model = ScoreModel::zero(sched(), 0, 4, 4, 8).unwrap();
        let clean = PatchTensor::new(Array3::zeros((5, 4, 4)), vec![0; 5]).unwrap();
        let a = dsm_loss(&model, &clean, 0.1, 9).unwrap();
        assert_eq!(a, dsm_loss(&model, &clean, 0.1, 9).unwrap());
        assert_ne!(a, dsm_loss(&model, &clean, 0.1, 10).unwrap());
        let empty = PatchTensor::new(Array3::zeros((0, 4, 4)), vec![]).unwrap();
        assert!(dsm_loss(&model, &empty, 0.1, 9).is_err());
    }
}

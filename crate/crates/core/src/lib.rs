//! Few-shot low-dose CT restoration in the projection domain.
//!
//! The pipeline simulates a fan-beam acquisition, learns small score models
//! on partitioned Hankel patches of one or a few normal-dose sinograms, and
//! restores a low-dose sinogram by alternating predictor/corrector score
//! updates with low-rank, total-variation and weighted data-consistency
//! steps. The restored sinogram is finally passed through filtered
//! back-projection.
//!
//! Module map:
//!
//! - [`geometry`]: fan-beam geometry, phantoms, Siddon projector, FBP
//! - [`noise`]: Poisson transmission noise and PWLS weights
//! - [`hankel`]: block-Hankel transform, triple*-partition, patch tiling
//! - [`lowrank`]: SVD hard thresholding and the partitioned low-rank step
//! - [`tv`]: smoothed isotropic total variation and its descent step
//! - [`score`]: noise schedules, score models and denoising score matching
//! - [`sampler`]: the iterative reconstruction loop
//! - [`metrics`]: PSNR / SSIM / MSE
//! - [`io`]: raw-float files, checkpoints, run configuration, PNG export

pub mod error;
pub mod geometry;
pub mod grid;
pub mod hankel;
pub mod io;
pub mod lowrank;
pub mod metrics;
pub mod noise;
pub mod rng;
pub mod sampler;
pub mod score;
pub mod tv;

pub use error::{Error, Result};
pub use geometry::{FanGeometry, FilterKind, PhantomKind};
pub use grid::{Image, Sinogram};
pub use hankel::{HankelMatrix, PartitionSet, PatchTensor};
pub use lowrank::RankSpec;
pub use metrics::MetricReport;
pub use noise::{DoseSpec, WeightMap};
pub use sampler::ReconConfig;
pub use score::{ScoreModel, SigmaSchedule, TrainConfig};
pub use tv::TvSpec;

use std::thread;

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{fill_standard_normal, Adam, ScoreModel, ScoreNet, SigmaSchedule, PARTITIONS};
use crate::error::{Error, Result};
use crate::grid::Sinogram;
use crate::hankel::{hankel_transform, SourceDims, TripleLayout, DEFAULT_PATCH_ROWS, DEFAULT_WINDOW};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Optimiser steps per partition model.
    pub steps: usize,
    pub seed: u64,
    /// Size of the patch pool, redrawn once the steps have consumed about
    /// this many patches.
    pub patches_per_epoch: usize,
    pub window: usize,
    pub patch_rows: usize,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            steps: 2000,
            seed: 0,
            patches_per_epoch: 512,
            window: DEFAULT_WINDOW,
            patch_rows: DEFAULT_PATCH_ROWS,
            hidden: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("patches_per_epoch", self.patches_per_epoch),
            ("window", self.window),
            ("patch_rows", self.patch_rows),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Output of [`train`]: one model per partition and the per-step training
/// losses of each.
#[derive(Debug, Clone)]
pub struct Trained {
    pub models: Vec<ScoreModel>,
    pub scale: f64,
    pub losses: Vec<Vec<f64>>,
}

/// Normalised Hankel matrix of one shot and its partition layout.
struct Shot {
    hankel: Array2<f64>,
    layout: TripleLayout,
}

impl Shot {
    fn partition(&self, k: usize) -> ndarray::ArrayView2<'_, f64> {
        let range = self.layout.ranges()[k].clone();
        self.hankel.slice(s![range, ..])
    }
}

/// Trains the three partition models on the Hankel patches of `shots`
/// with denoising score matching, `sigma` drawn uniformly from `schedule`
/// at every step. Deterministic for a fixed `cfg.seed`; the partitions train
/// on separate threads with independent random streams.
pub fn train(shots: &[Sinogram], cfg: &TrainConfig, schedule: &SigmaSchedule) -> Result<Trained> {
    cfg.validate()?;
    if shots.is_empty() {
        return Err(Error::invalid("training needs at least one shot"));
    }
    let peak = shots.iter().map(|s| s.view().iter().fold(0.0_f64, |m, v| m.max(v.abs()))).fold(0.0, f64::max);
    let scale = if peak > 0.0 { peak } else { 1.0 };

    let mut prepared = Vec::with_capacity(shots.len());
    for shot in shots {
        SourceDims::new(shot.num_views(), shot.num_detectors(), cfg.window)?;
        let hankel = hankel_transform(&shot.scaled(1.0 / scale), cfg.window)?.into_array();
        let layout = TripleLayout::new(hankel.nrows())?;
        let shortest = layout.ranges().iter().map(|r| r.len()).min().unwrap_or(0);
        if shortest < cfg.patch_rows {
            return Err(Error::invalid(format!(
                "a {}x{} shot gives partitions of {shortest} rows, fewer than the {}-row patches",
                shot.num_views(),
                shot.num_detectors(),
                cfg.patch_rows
            )));
        }
        prepared.push(Shot { hankel, layout });
    }

    let results: Vec<Result<(ScoreModel, Vec<f64>)>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..PARTITIONS)
            .map(|k| {
                let prepared = &prepared;
                scope.spawn(move || train_partition(prepared, k, cfg, schedule, scale))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });

    let mut models = Vec::with_capacity(PARTITIONS);
    let mut losses = Vec::with_capacity(PARTITIONS);
    for r in results {
        let (m, l) = r?;
        models.push(m);
        losses.push(l);
    }
    Ok(Trained { models, scale, losses })
}

/// `E[sigma] / E[sigma^2]` over the levels: the gain of the best
/// noise-level-blind linear predictor of `-z` from `sigma z`.
pub fn input_scale(schedule: &SigmaSchedule) -> f64 {
    let levels = schedule.levels();
    let m1 = levels.iter().sum::<f64>();
    let m2 = levels.iter().map(|s| s * s).sum::<f64>();
    m1 / m2
}

fn train_partition(
    shots: &[Shot],
    k: usize,
    cfg: &TrainConfig,
    schedule: &SigmaSchedule,
    scale: f64,
) -> Result<(ScoreModel, Vec<f64>)> {
    let cols = cfg.window * cfg.window;
    let d = cfg.patch_rows * cols;
    let mut init_rng = rng::substream(cfg.seed, rng::STREAM_INIT, k as u64);
    let net = ScoreNet::kaiming(d, cfg.hidden, &mut init_rng)?.with_input_scale(input_scale(schedule))?;
    let mut model = ScoreModel::net(net, schedule.clone(), scale, k, cfg.seed, cfg.patch_rows)?;

    let mut rng = rng::substream(cfg.seed, rng::STREAM_TRAINING, k as u64);
    let pool_size = cfg.patches_per_epoch;
    let refresh_every = pool_size.div_ceil(cfg.batch_size);
    let mut pool = Array2::<f64>::zeros((pool_size, d));
    let mut batch = Array2::<f64>::zeros((cfg.batch_size, d));
    let mut target = Array2::<f64>::zeros((cfg.batch_size, d));
    let n_params = ScoreNet::param_count([d, cfg.hidden, cfg.hidden, d]);
    let mut opt = Adam::new(n_params, cfg.learning_rate);
    let mut grad = vec![0.0; n_params];
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        if step % refresh_every == 0 {
            for mut row in pool.outer_iter_mut() {
                let shot = &shots[rng.random_range(0..shots.len())];
                let part = shot.partition(k);
                let origin = rng.random_range(0..=part.nrows() - cfg.patch_rows);
                let patch = part.slice(s![origin..origin + cfg.patch_rows, ..]);
                for (dst, src) in row.iter_mut().zip(patch.iter()) {
                    *dst = *src;
                }
            }
        }
        let sigma = schedule.levels()[rng.random_range(0..schedule.len())];
        fill_standard_normal(target.as_slice_mut().expect("contiguous"), &mut rng);
        for (b, mut row) in batch.outer_iter_mut().enumerate() {
            let src = pool.row(rng.random_range(0..pool_size));
            for ((dst, &p), &z) in row.iter_mut().zip(src.iter()).zip(target.row(b).iter()) {
                *dst = p + sigma * z;
            }
        }
        // the network regresses -z, which is sigma times the conditional score
        target.mapv_inplace(|z| -z);
        let net = model.network_mut().expect("trainable model");
        let loss = net.loss_and_grad_into(batch.view(), target.view(), &mut grad)?;
        if !loss.is_finite() {
            return Err(Error::invalid(format!("training loss diverged at step {step}")));
        }
        opt.update(net.params_mut(), &grad);
        losses.push(loss);
    }
    Ok((model, losses))
}

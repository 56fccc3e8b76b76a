//! Noise-prediction training with AdamW.
//!
//! Every iteration draws its randomness from its own sub-stream
//! `substream(seed, iteration)`, so a run resumed from a checkpoint replays
//! exactly the batches an uninterrupted run would have seen.

use std::io::Write;

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta, OptimizerState};
use super::nn::Act;
use super::unet::{UNet, UNetConfig};
use crate::diffusion::noisy_from_eps;
use crate::error::{Error, Result};
use crate::field::ImageField;
use crate::sampler::{standardized_noise, substream, NoiseFamily};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub noise_family: NoiseFamily,
    pub augment_hflip: bool,
    /// Side of the square training crops; a multiple of 4.
    pub crop_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Save a checkpoint every this many iterations; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            noise_family: NoiseFamily::Gamma,
            augment_hflip: true,
            crop_size: 64,
            grad_clip: 1.0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::invalid("iterations and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return Err(Error::invalid("weight_decay and grad_clip must be non-negative"));
        }
        if self.crop_size < 8 || !self.crop_size.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "crop_size must be a multiple of 4 and at least 8, got {}",
                self.crop_size
            )));
        }
        Ok(())
    }
}

/// One training batch: noisy inputs, their standardized-noise targets, the
/// clean crops and the timesteps used.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub x0: Vec<Array2<f64>>,
    pub x_t: Vec<Array2<f64>>,
    pub eps: Vec<Array2<f64>>,
    pub timesteps: Vec<usize>,
}

/// Draws the batch of `iteration`: images uniformly with replacement, a
/// random crop, an optional horizontal flip, `t` uniform in `[1, T]`.
pub fn sample_training_batch(
    dataset: &[ImageField],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<TrainingBatch> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = cfg.crop_size;
    let mut rng = substream(cfg.seed, iteration as u64);
    let mut batch = TrainingBatch {
        x0: Vec::with_capacity(cfg.batch_size),
        x_t: Vec::with_capacity(cfg.batch_size),
        eps: Vec::with_capacity(cfg.batch_size),
        timesteps: Vec::with_capacity(cfg.batch_size),
    };
    for _ in 0..cfg.batch_size {
        let img = &dataset[rng.random_range(0..dataset.len())];
        let (h, w) = img.dim();
        if h < c || w < c {
            return Err(Error::ImageTooSmall {
                height: h,
                width: w,
                min_height: c,
                min_width: c,
            });
        }
        let (oy, ox) = (rng.random_range(0..=h - c), rng.random_range(0..=w - c));
        let mut x0 = img.values().slice(s![oy..oy + c, ox..ox + c]).to_owned();
        if cfg.augment_hflip && rng.random_bool(0.5) {
            x0.invert_axis(ndarray::Axis(1));
            x0 = x0.as_standard_layout().into_owned();
        }
        let t = rng.random_range(1..=schedule.steps());
        let eps = standardized_noise(schedule, t, cfg.noise_family, (c, c), &mut rng)?.values;
        batch.x_t.push(noisy_from_eps(schedule, &x0, &eps, t)?);
        batch.x0.push(x0);
        batch.eps.push(eps);
        batch.timesteps.push(t);
    }
    Ok(batch)
}

fn to_act(fields: &[Array2<f64>]) -> Act {
    let (h, w) = fields[0].dim();
    let mut a = Act::zeros(1, fields.len(), h, w);
    for (dst, f) in a.data.chunks_exact_mut(h * w).zip(fields) {
        for (d, &v) in dst.iter_mut().zip(f.iter()) {
            *d = v as f32;
        }
    }
    a
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamW {
    pub fn new(num_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; `decay[i]` selects parameters that receive
    /// weight decay.
    pub fn update(&mut self, params: &mut [f32], grad: &[f32], decay: &[bool]) {
        assert!(params.len() == self.m.len() && grad.len() == params.len() && decay.len() == params.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = self.eps as f32;
        let shrink = (1.0 - self.lr * self.weight_decay) as f32;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            if decay[i] {
                params[i] *= shrink;
            }
            params[i] -= step_size * self.m[i] / ((self.v[i] * inv_bc2).sqrt() + eps);
        }
    }

    pub(crate) fn state(&self) -> OptimizerState {
        OptimizerState {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub(crate) fn restore(&mut self, state: OptimizerState) -> Result<()> {
        if state.m.len() != self.m.len() || state.v.len() != self.v.len() {
            return Err(Error::Checkpoint("optimizer state does not match the network".into()));
        }
        self.step = state.step;
        self.m = state.m;
        self.v = state.v;
        Ok(())
    }
}

/// Resumable training loop over a fixed dataset.
#[derive(Debug, Clone)]
pub struct Trainer {
    net: UNet,
    opt: AdamW,
    decay: Vec<bool>,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    iteration: usize,
    grad: Vec<f32>,
}

impl Trainer {
    pub fn new(net: UNet, schedule: NoiseSchedule, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut decay = vec![false; net.num_params()];
        for r in net.decayed_ranges() {
            decay[r].fill(true);
        }
        Ok(Self {
            opt: AdamW::new(net.num_params(), cfg.learning_rate, cfg.weight_decay),
            grad: vec![0.0; net.num_params()],
            decay,
            net,
            schedule,
            cfg,
            iteration: 0,
        })
    }

    /// Continues from `ckpt`. The schedule and noise family must match the
    /// ones the checkpoint was trained with.
    pub fn resume(ckpt: Checkpoint, schedule: NoiseSchedule, cfg: TrainConfig) -> Result<Self> {
        ckpt.meta.check_schedule(schedule.params())?;
        if ckpt.meta.noise_family != cfg.noise_family {
            return Err(Error::invalid(format!(
                "checkpoint was trained with {} noise, config asks for {}",
                ckpt.meta.noise_family, cfg.noise_family
            )));
        }
        let iteration = ckpt.meta.iteration;
        let state = ckpt.optimizer;
        let mut trainer = Self::new(ckpt.net, schedule, cfg)?;
        trainer.iteration = iteration;
        if let Some(state) = state {
            trainer.opt.restore(state)?;
        }
        Ok(trainer)
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn into_net(self) -> UNet {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Number of completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    /// Runs one iteration and returns its mean squared error.
    pub fn step(&mut self, dataset: &[ImageField]) -> Result<f64> {
        let batch = sample_training_batch(dataset, &self.schedule, &self.cfg, self.iteration)?;
        let x = to_act(&batch.x_t);
        let target = to_act(&batch.eps);
        self.grad.fill(0.0);
        let loss = self.net.loss_and_grad(x, &batch.timesteps, &target, &mut self.grad);
        let norm = self.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration + 1,
                loss,
            });
        }
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            let k = (self.cfg.grad_clip / norm) as f32;
            self.grad.iter_mut().for_each(|g| *g *= k);
        }
        self.opt.update(self.net.params_mut(), &self.grad, &self.decay);
        self.iteration += 1;
        Ok(loss)
    }

    /// Snapshot of weights, optimizer state and provenance.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta::new(
                *self.schedule.params(),
                *self.net.config(),
                self.cfg.noise_family,
                self.iteration,
                Some(self.cfg),
            ),
            net: self.net.clone(),
            optimizer: Some(self.opt.state()),
        }
    }
}

/// Trains a fresh network for `cfg.iterations` iterations and returns it
/// with the per-iteration losses.
pub fn train_epsilon_model(
    dataset: &[ImageField],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    net_cfg: UNetConfig,
) -> Result<(UNet, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let net = UNet::new(net_cfg, cfg.seed)?;
    let mut trainer = Trainer::new(net, schedule.clone(), *cfg)?;
    let mut losses = Vec::with_capacity(cfg.iterations);
    while !trainer.is_done() {
        losses.push(trainer.step(dataset)?);
    }
    Ok((trainer.into_net(), losses))
}

/// Mean loss over the first and the last tenth of `losses` (at least one
/// value each), or `None` when there are fewer than two values.
pub fn loss_trend(losses: &[f64]) -> Option<(f64, f64)> {
    if losses.len() < 2 {
        return None;
    }
    let w = (losses.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}

/// Writes `iter,loss` rows; iterations are 1-based.
pub fn write_loss_csv<W: Write>(mut out: W, losses: &[(usize, f64)]) -> std::io::Result<()> {
    writeln!(out, "iter,loss")?;
    for (i, l) in losses {
        writeln!(out, "{i},{l:e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Domain;
    use crate::schedule::ScheduleParams;

    fn sched() -> NoiseSchedule {
        ScheduleParams::default().build().unwrap()
    }

    fn phantomish(seed: usize, side: usize) -> ImageField {
        ImageField::new(
            Array2::from_shape_fn((side, side), |(i, j)| {
                (((i / 6 + seed) % 4) as f64 / 2.0 - 0.75) + 0.05 * ((j as f64) / 7.0).sin()
            }),
            Domain::Normalized,
        )
        .unwrap()
    }

    fn tiny_cfg() -> UNetConfig {
        UNetConfig {
            widths: [8, 8, 16],
            groups: 4,
            time_features: 16,
            embed_dim: 16,
        }
    }

    #[test]
    fn targets_are_standardized_and_consistent() {
        let s = sched();
        let data: Vec<_> = (0..4).map(|k| phantomish(k, 32)).collect();
        let cfg = TrainConfig {
            batch_size: 100,
            crop_size: 32,
            ..Default::default()
        };
        let b = sample_training_batch(&data, &s, &cfg, 3).unwrap();
        let all: Vec<f64> = b.eps.iter().flat_map(|e| e.iter().copied()).collect();
        let n = all.len() as f64;
        let m = all.iter().sum::<f64>() / n;
        let v = all.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(n >= 1e5);
        assert!(m.abs() < 0.03 && (v - 1.0).abs() < 0.03, "{m} {v}");
        for i in 0..b.x_t.len() {
            let ab = s.alpha_bar(b.timesteps[i]).unwrap();
            let recon = (&b.x_t[i] - &(ab.sqrt() * &b.x0[i])) / (1.0 - ab).sqrt();
            let err = (&recon - &b.eps[i]).mapv(f64::abs).fold(0.0f64, |a, &x| a.max(x));
            assert!(err < 1e-9);
        }
    }

    #[test]
    fn batches_are_reproducible() {
        let s = sched();
        let data: Vec<_> = (0..3).map(|k| phantomish(k, 40)).collect();
        let cfg = TrainConfig {
            crop_size: 32,
            ..Default::default()
        };
        let a = sample_training_batch(&data, &s, &cfg, 17).unwrap();
        let b = sample_training_batch(&data, &s, &cfg, 17).unwrap();
        assert_eq!(a.x_t, b.x_t);
        assert_eq!(a.timesteps, b.timesteps);
        let c = sample_training_batch(&data, &s, &cfg, 18).unwrap();
        assert_ne!(a.timesteps, c.timesteps);
    }

    #[test]
    fn rejects_empty_data_and_bad_configs() {
        let s = sched();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train_epsilon_model(&[], &s, &cfg, tiny_cfg()),
            Err(Error::EmptyDataset)
        ));
        for bad in [
            TrainConfig { iterations: 0, ..cfg },
            TrainConfig { learning_rate: 0.0, ..cfg },
            TrainConfig { crop_size: 30, ..cfg },
        ] {
            assert!(bad.validate().is_err());
        }
        let small = [phantomish(0, 16)];
        assert!(sample_training_batch(&small, &s, &cfg, 0).is_err());
    }

    #[test]
    fn first_losses_are_deterministic() {
        let s = sched();
        let data: Vec<_> = (0..3).map(|k| phantomish(k, 32)).collect();
        let cfg = TrainConfig {
            iterations: 10,
            crop_size: 32,
            batch_size: 2,
            ..Default::default()
        };
        let (_, a) = train_epsilon_model(&data, &s, &cfg, tiny_cfg()).unwrap();
        let (_, b) = train_epsilon_model(&data, &s, &cfg, tiny_cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overfits_a_single_image() {
        let s = sched();
        let data = [phantomish(1, 32)];
        let cfg = TrainConfig {
            iterations: 2000,
            crop_size: 32,
            batch_size: 4,
            learning_rate: 2e-3,
            ..Default::default()
        };
        let (_, losses) = train_epsilon_model(&data, &s, &cfg, tiny_cfg()).unwrap();
        let first = losses[..100].iter().sum::<f64>() / 100.0;
        let last = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn resume_replays_the_uninterrupted_run() {
        let s = sched();
        let data: Vec<_> = (0..2).map(|k| phantomish(k, 32)).collect();
        let cfg = TrainConfig {
            iterations: 6,
            crop_size: 32,
            batch_size: 2,
            ..Default::default()
        };
        let mut full = Trainer::new(UNet::new(tiny_cfg(), 0).unwrap(), s.clone(), cfg).unwrap();
        let mut split = full.clone();
        let mut la = Vec::new();
        while !full.is_done() {
            la.push(full.step(&data).unwrap());
        }
        let mut lb = Vec::new();
        for _ in 0..3 {
            lb.push(split.step(&data).unwrap());
        }
        let mut resumed = Trainer::resume(split.checkpoint(), s, cfg).unwrap();
        while !resumed.is_done() {
            lb.push(resumed.step(&data).unwrap());
        }
        assert_eq!(la, lb);
        assert_eq!(full.net().params(), resumed.net().params());
    }

    #[test]
    fn adamw_decays_only_masked_parameters() {
        let mut opt = AdamW::new(2, 0.1, 0.5);
        let mut p = [1.0f32, 1.0];
        opt.update(&mut p, &[0.0, 0.0], &[true, false]);
        assert!((p[0] - 0.95).abs() < 1e-6);
        assert_eq!(p[1], 1.0);
    }

    #[test]
    fn loss_csv_layout() {
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &[(1, 0.5), (2, 0.25)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().collect::<Vec<_>>(), ["iter,loss", "1,5e-1", "2,2.5e-1"]);
    }

    #[test]
    fn trend_windows() {
        assert_eq!(loss_trend(&[1.0]), None);
        assert_eq!(loss_trend(&[3.0, 1.0]), Some((3.0, 1.0)));
        let l: Vec<f64> = (0..20).map(|i| 20.0 - i as f64).collect();
        assert_eq!(loss_trend(&l), Some((19.5, 1.5)));
    }
}

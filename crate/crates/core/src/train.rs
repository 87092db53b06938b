//! Optimisation schedule, hard example mining, the training epoch and early
//! stopping.

use std::f64::consts::PI;

use hmsv_tensor::{clip_grad_global_norm, AdamW, Tape, Tensor};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::augment::{
    mixup, photometric_augment, sample_lambda, spatial_augment, AugmentConfig, Sample,
};
use crate::error::{Error, Result};
use crate::eval::{confusion, dice_score, predict_image};
use crate::losses::{deep_supervised_total, LossConfig};
use crate::model::{Mode, Model};
use crate::preprocess::{
    enhance, locate_optic_disc, planes_to_tensor, weight_map, PreprocessConfig,
};
use crate::raster::{Plane, RgbImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Epochs in the first annealing cycle.
    pub cycle_len: f64,
    pub cycle_mult: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub patience: usize,
    /// Zero-based epoch from which mining is active.
    pub hem_start: usize,
    pub hem_fraction: f64,
    pub hem_ratio: f64,
    /// Re-score difficulty every this many epochs.
    pub hem_every: usize,
    pub max_epochs: usize,
    /// Optimiser step budget; 0 means unlimited.
    pub max_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            lr_max: 1e-3,
            lr_min: 1e-6,
            cycle_len: 40.0,
            cycle_mult: 2.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            batch_size: 2,
            patience: 30,
            hem_start: 20,
            hem_fraction: 0.15,
            hem_ratio: 3.0,
            hem_every: 1,
            max_epochs: 300,
            max_steps: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            return Err(Error::config("schedule.lr_min", "need 0 < lr_min < lr_max"));
        }
        if self.cycle_len.is_nan() || self.cycle_len < 1.0 {
            return Err(Error::config("schedule.cycle_len", "must be at least 1"));
        }
        if self.cycle_mult.is_nan() || self.cycle_mult < 1.0 {
            return Err(Error::config("schedule.cycle_mult", "must be at least 1"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config(
                "schedule.weight_decay",
                "must be nonnegative",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("schedule.beta1", "betas must lie in [0, 1)"));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::config("schedule.adam_eps", "must be positive"));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::config("schedule.clip_norm", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("schedule.batch_size", "must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("schedule.patience", "must be at least 1"));
        }
        if !(self.hem_fraction > 0.0 && self.hem_fraction < 1.0) {
            return Err(Error::config("schedule.hem_fraction", "must lie in (0, 1)"));
        }
        if self.hem_ratio.is_nan() || self.hem_ratio < 1.0 {
            return Err(Error::config("schedule.hem_ratio", "must be at least 1"));
        }
        if self.hem_every == 0 {
            return Err(Error::config("schedule.hem_every", "must be at least 1"));
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts; cycle `i` lasts
/// `cycle_len * cycle_mult^i` epochs.
pub fn lr_at(epoch: f64, cfg: &ScheduleConfig) -> f64 {
    let mut t = epoch.max(0.0);
    let mut len = cfg.cycle_len;
    while t >= len {
        t -= len;
        len *= cfg.cycle_mult;
    }
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * t / len).cos())
}

/// Epochs at which cycles begin, up to `limit`.
pub fn cycle_starts(cfg: &ScheduleConfig, limit: f64) -> Vec<f64> {
    let mut out = vec![0.0];
    let (mut start, mut len) = (0.0, cfg.cycle_len);
    while start + len <= limit {
        start += len;
        len *= cfg.cycle_mult;
        out.push(start);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyTable {
    /// `1 - Dice` per training image.
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    /// Indices carrying the elevated weight, ascending.
    pub hard: Vec<usize>,
}

impl DifficultyTable {
    pub fn uniform(n: usize) -> Self {
        DifficultyTable {
            scores: vec![f64::NAN; n],
            weights: vec![1.0; n],
            hard: Vec::new(),
        }
    }

    pub fn is_active(&self) -> bool {
        !self.hard.is_empty()
    }
}

/// Number of images promoted once mining is active.
pub fn hem_top_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).floor() as usize).clamp(1, n)
}

/// Sampling weights from difficulty scores: before `hem_start` uniform,
/// afterwards the hardest `max(1, floor(fraction N))` images (ties to the
/// lower index) get `hem_ratio`.
pub fn hem_weights(scores: &[f64], epoch: usize, cfg: &ScheduleConfig) -> Result<DifficultyTable> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::invalid(
            "hard example mining on an empty training set",
        ));
    }
    if epoch < cfg.hem_start {
        return Ok(DifficultyTable {
            scores: scores.to_vec(),
            ..DifficultyTable::uniform(n)
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hard = order[..hem_top_count(n, cfg.hem_fraction)].to_vec();
    hard.sort_unstable();
    let mut weights = vec![1.0; n];
    for &i in &hard {
        weights[i] = cfg.hem_ratio;
    }
    Ok(DifficultyTable {
        scores: scores.to_vec(),
        weights,
        hard,
    })
}

/// Training image indices for one epoch: a uniform permutation, or weighted
/// draws with replacement once mining is active.
pub fn epoch_order<R: Rng>(table: &DifficultyTable, rng: &mut R) -> Vec<usize> {
    let n = table.weights.len();
    if !table.is_active() {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        return idx;
    }
    let dist = WeightedIndex::new(&table.weights).expect("positive weights");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Mixes a list of seed components into one 64-bit seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed;
    for &p in parts {
        h = SplitMix64::seed_from_u64(h ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15)).next_u64();
    }
    h
}

pub const STREAM_ORDER: u64 = 1;
pub const STREAM_AUGMENT: u64 = 2;
pub const STREAM_DROPOUT: u64 = 3;
pub const STREAM_MIXUP: u64 = 4;
pub const STREAM_INIT: u64 = 5;
pub const STREAM_SYNTH: u64 = 6;

/// ChaCha8 generator for one named stream of a run.
pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

/// A preprocessed image ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub dataset: String,
    pub id: String,
    /// Native-resolution planes, mask and weight map.
    pub native: Sample,
    /// Unaugmented `[4, R, R]` network input.
    pub input: Tensor<f32>,
    /// Binary target at network resolution.
    pub target: Vec<u8>,
    /// Weight map at network resolution.
    pub weight: Vec<f64>,
}

/// Resizes a native sample to the network resolution.
pub fn to_network(s: &Sample, size: usize) -> Sample {
    Sample {
        image: s
            .image
            .iter()
            .map(|p| p.resize(size, size).map(|v| v.clamp(0.0, 1.0)))
            .collect(),
        mask: s.mask.resize_binary(size, size),
        weight: s.weight.resize(size, size),
    }
}

impl Prepared {
    pub fn new(dataset: &str, id: &str, native: Sample, size: usize) -> Self {
        let net = to_network(&native, size);
        Prepared {
            dataset: dataset.to_string(),
            id: id.to_string(),
            input: planes_to_tensor(&net.image),
            target: net.mask.data.iter().map(|&v| (v >= 0.5) as u8).collect(),
            weight: net.weight.data,
            native,
        }
    }
}

/// Enhances an image, locates the optic disc and builds the weight map.
pub fn prepare(
    dataset: &str,
    id: &str,
    img: &RgbImage,
    mask: &Plane,
    cfg: &PreprocessConfig,
    size: usize,
) -> Result<Prepared> {
    if (mask.height, mask.width) != (img.height, img.width) {
        return Err(Error::invalid(format!(
            "{dataset}/{id}: mask {}x{} vs image {}x{}",
            mask.height, mask.width, img.height, img.width
        )));
    }
    let planes = enhance(img, cfg);
    let wm = weight_map(locate_optic_disc(img), img.height, img.width);
    let native = Sample {
        image: planes.to_vec(),
        mask: mask.clone(),
        weight: wm.weights,
    };
    Ok(Prepared::new(dataset, id, native, size))
}

/// Stacks network-resolution samples into batched tensors.
fn batch_tensors(items: &[Sample]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let n = items.len();
    let size = items[0].mask.height;
    let c = items[0].image.len();
    let img: Vec<f32> = items
        .iter()
        .flat_map(|s| {
            s.image
                .iter()
                .flat_map(|p| p.data.iter().map(|&v| v as f32))
        })
        .collect();
    let plane = |f: fn(&Sample) -> &Plane| -> Vec<f32> {
        items
            .iter()
            .flat_map(|s| f(s).data.iter().map(|&v| v as f32))
            .collect()
    };
    Ok((
        Tensor::new(&[n, c, size, size], img)?,
        Tensor::new(&[n, 1, size, size], plane(|s| &s.mask))?,
        Tensor::new(&[n, 1, size, size], plane(|s| &s.weight))?,
    ))
}

/// One optimiser step's record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    /// Fused-head constituents.
    pub dice: f64,
    pub bce: f64,
    pub cldice: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: Vec<StepRecord>,
    pub mean_total: f64,
    pub fusion_weights: [f64; 4],
    pub hard: Vec<usize>,
    /// True when the step budget ran out inside this epoch.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue { best_epoch: usize },
    Stop { best_epoch: usize },
}

/// Stops once the best validation Dice (earliest on ties) is `patience`
/// epochs old.
pub fn early_stop(history: &[f64], patience: usize) -> Result<StopDecision> {
    if history.is_empty() {
        return Err(Error::invalid(
            "early stopping needs at least one validation score",
        ));
    }
    let mut best = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > history[best] {
            best = i;
        }
    }
    let since = history.len() - 1 - best;
    Ok(if since >= patience {
        StopDecision::Stop { best_epoch: best }
    } else {
        StopDecision::Continue { best_epoch: best }
    })
}

/// Optimisation state of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub model: Model<f32>,
    pub optimizer: AdamW<f32>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Completed optimiser steps.
    pub step: u64,
    pub table: Option<DifficultyTable>,
    pub val_history: Vec<f64>,
}

/// Mean fused-output Dice (no test-time augmentation) over `data`.
pub fn validation_dice(model: &mut Model<f32>, data: &[Prepared]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let mut sum = 0.0;
    for p in data {
        let pred = predict_image(model, &p.input, false)?;
        sum += dice_score(&confusion(&pred.mask, &p.target)?);
    }
    Ok(sum / data.len() as f64)
}

/// `1 - Dice` of the fused output on each unaugmented image.
pub fn difficulty_scores(model: &mut Model<f32>, data: &[Prepared]) -> Result<Vec<f64>> {
    data.iter()
        .map(|p| {
            let pred = predict_image(model, &p.input, false)?;
            Ok(1.0 - dice_score(&confusion(&pred.mask, &p.target)?))
        })
        .collect()
}

impl Trainer {
    pub fn new(
        seed: u64,
        model: Model<f32>,
        schedule: ScheduleConfig,
        loss: LossConfig,
        augment: AugmentConfig,
    ) -> Self {
        let optimizer = AdamW::with_betas(
            &model.params,
            schedule.weight_decay,
            schedule.beta1,
            schedule.beta2,
            schedule.adam_eps,
        );
        Trainer {
            seed,
            schedule,
            loss,
            augment,
            model,
            optimizer,
            epoch: 0,
            step: 0,
            table: None,
            val_history: Vec::new(),
        }
    }

    pub fn budget_exhausted(&self) -> bool {
        self.schedule.max_steps > 0 && self.step >= self.schedule.max_steps
    }

    /// Refreshes the sampling table for the coming epoch.
    pub fn hem_update(&mut self, data: &[Prepared]) -> Result<&DifficultyTable> {
        let cfg = &self.schedule;
        let due = self.epoch >= cfg.hem_start
            && (self.epoch - cfg.hem_start).is_multiple_of(cfg.hem_every);
        let stale = match &self.table {
            Some(t) => t.scores.len() != data.len() || !t.is_active(),
            None => true,
        };
        if self.epoch < cfg.hem_start {
            self.table = Some(DifficultyTable::uniform(data.len()));
        } else if due || stale {
            let scores = difficulty_scores(&mut self.model, data)?;
            self.table = Some(hem_weights(&scores, self.epoch, &self.schedule)?);
        }
        Ok(self.table.as_ref().expect("set above"))
    }

    /// Augmented network-resolution copy of training image `idx` at batch
    /// position `pos`.
    fn augmented(&self, data: &[Prepared], idx: usize, pos: usize) -> Sample {
        let mut rng = stream(self.seed, &[STREAM_AUGMENT, self.epoch as u64, pos as u64]);
        let s = spatial_augment(&data[idx].native, &self.augment, &mut rng);
        let image = photometric_augment(&s.image, &self.augment, &mut rng);
        let size = self.model.config.full_resolution;
        to_network(&Sample { image, ..s }, size)
    }

    /// One pass over the training set.
    pub fn train_epoch(&mut self, data: &[Prepared]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let table = self.hem_update(data)?.clone();
        let order = epoch_order(
            &table,
            &mut stream(self.seed, &[STREAM_ORDER, self.epoch as u64]),
        );
        let bs = self.schedule.batch_size;
        let batches: Vec<&[usize]> = order.chunks(bs).collect();
        let per_epoch = batches.len() as f64;
        let mut dropout_rng = stream(self.seed, &[STREAM_DROPOUT, self.epoch as u64]);
        let mut mix_rng = stream(self.seed, &[STREAM_MIXUP, self.epoch as u64]);
        let mut steps = Vec::with_capacity(batches.len());
        let mut truncated = false;
        for (b, batch) in batches.iter().enumerate() {
            if self.budget_exhausted() {
                truncated = true;
                break;
            }
            let plain: Vec<Sample> = batch
                .iter()
                .enumerate()
                .map(|(j, &i)| self.augmented(data, i, b * bs + j))
                .collect();
            let mut items = plain.clone();
            let mut mixed = vec![false; items.len()];
            if items.len() > 1 {
                for j in 0..items.len() {
                    if mix_rng.random::<f64>() < self.augment.p_mixup {
                        let lambda = sample_lambda(self.augment.mixup_alpha, &mut mix_rng);
                        items[j] = mixup(&plain[j], &plain[(j + 1) % plain.len()], lambda);
                        mixed[j] = true;
                    }
                }
            }
            let (x, g, w) = batch_tensors(&items)?;
            let lr = lr_at(self.epoch as f64 + b as f64 / per_epoch, &self.schedule);
            let tape = Tape::new();
            let vars = self.model.bind(&tape);
            let xv = tape.constant(x);
            let out = self
                .model
                .forward(&tape, &vars, &xv, Mode::Train, &mut dropout_rng)?;
            let loss = deep_supervised_total(&tape, &out, &g, &w, &self.loss, &mixed)?;
            let total = loss.total.item() as f64;
            if !total.is_finite() {
                let ids: Vec<String> = batch
                    .iter()
                    .zip(&mixed)
                    .map(|(&i, &m)| {
                        format!(
                            "{}/{}{}",
                            data[i].dataset,
                            data[i].id,
                            if m { " (mixup)" } else { "" }
                        )
                    })
                    .collect();
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {} step {}; batch: {}",
                    self.epoch,
                    self.step,
                    ids.join(", ")
                )));
            }
            let grads = tape.backward(&loss.total)?;
            let mut g: Vec<Tensor<f32>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
            drop(out);
            drop(loss.total);
            drop(vars);
            drop(tape);
            let clip = clip_grad_global_norm(&mut g, self.schedule.clip_norm);
            self.optimizer
                .step(&mut self.model.params, &g, lr)
                .map_err(|e| Error::Numerical(e.to_string()))?;
            self.step += 1;
            let fused = &loss.heads[0];
            steps.push(StepRecord {
                epoch: self.epoch,
                step: self.step,
                lr,
                total,
                dice: fused.dice,
                bce: fused.bce,
                cldice: fused.cldice,
                grad_norm: clip.norm_before,
                clipped_norm: clip.norm_after,
            });
        }
        let mean_total = steps.iter().map(|s| s.total).sum::<f64>() / steps.len().max(1) as f64;
        let stats = EpochStats {
            epoch: self.epoch,
            steps,
            mean_total,
            fusion_weights: self.model.fusion_weights(),
            hard: table.hard.clone(),
            truncated,
        };
        self.epoch += 1;
        Ok(stats)
    }

    /// Validates and records the score; returns the early-stopping verdict.
    pub fn validate(&mut self, data: &[Prepared]) -> Result<(f64, StopDecision)> {
        let d = validation_dice(&mut self.model, data)?;
        self.val_history.push(d);
        Ok((d, early_stop(&self.val_history, self.schedule.patience)?))
    }
}

//! Two-stage curriculum: matching pretraining of the feature extractor, then
//! joint flow finetuning, plus the pretrained-versus-scratch comparison.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::{downsample_flow, flow_loss};
use crate::io::save_weights;
use crate::matching::{correlation_volume, dual_softmax, matching_loss, GtMatches, TEMPERATURE};
use crate::model::{flow_trace, matching_features};
use crate::params::{ModelWeights, ParamGroup};
use crate::synth::{gen_flow_pair, gen_static_pair, JitterSpec, MotionSpec, WarpSpec};
use matchflow_tensor::{Tape, Tensor};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Stage {
    /// Static-scene matching; only the feature extractor is trained.
    Matching,
    /// Flow finetuning of every parameter.
    Flow,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Static { size: (usize, usize), warp: WarpSpec, jitter: JitterSpec },
    Flow { size: (usize, usize), motion: MotionSpec },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub stage: Stage,
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    /// Multiplier on the learning rate of the feature extractor.
    pub feature_lr_scale: f64,
    /// Fraction of the run spent warming up to `peak_lr`.
    pub pct_start: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub data: DataSpec,
    /// Refinement iterations during training.
    pub train_iters: usize,
    /// Refinement iterations during validation.
    pub val_iters: usize,
    /// Validation cadence in steps (0 disables periodic validation).
    pub val_every: usize,
    pub val_pairs: usize,
    /// Checkpoint cadence in steps (0 disables checkpoints).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Desk-scale stage-1 defaults: 64×96 sub-pixel translations up to 8 px.
    pub fn stage1(seed: u64) -> Self {
        Self {
            model: ModelConfig::desk(),
            seed,
            stage: Stage::Matching,
            steps: 300,
            batch: 2,
            peak_lr: 2e-3,
            feature_lr_scale: 1.0,
            pct_start: 0.3,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            gamma: 0.8,
            temperature: TEMPERATURE,
            data: DataSpec::Static {
                size: (64, 96),
                warp: WarpSpec::RandomTranslation { max: 8.0, integer: false },
                jitter: JitterSpec { brightness: 0.05, contrast: 0.1 },
            },
            train_iters: 4,
            val_iters: 4,
            val_every: 50,
            val_pairs: 8,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }

    /// Desk-scale stage-2 defaults: a translating background and one
    /// independently moving square, motions up to 8 px.
    pub fn stage2(seed: u64) -> Self {
        Self {
            stage: Stage::Flow,
            steps: 400,
            peak_lr: 4e-4,
            data: DataSpec::Flow {
                size: (64, 96),
                motion: MotionSpec::Random { max_background: 8.0, max_foreground: 8.0, layers: 1, integer: false },
            },
            val_every: 10,
            val_iters: 8,
            ..Self::stage1(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if self.temperature.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if self.batch == 0 || self.train_iters == 0 || self.val_iters == 0 {
            return bad("batch and iteration counts must be positive".into());
        }
        if !(self.peak_lr > 0.0) || !(self.feature_lr_scale >= 0.0) || !(0.0..1.0).contains(&self.pct_start) || !(self.clip_norm > 0.0) {
            return bad("learning rate, warmup fraction and clip norm must be positive".into());
        }
        let stage_ok = matches!((self.stage, &self.data), (Stage::Matching, DataSpec::Static { .. }) | (Stage::Flow, DataSpec::Flow { .. }));
        if !stage_ok {
            return bad(format!("data spec does not fit stage {:?}", self.stage));
        }
        Ok(())
    }
}

/// One-cycle schedule: linear warmup from `peak/25` to `peak` over the first
/// `pct_start` of the run, then cosine decay to `peak/1000`.
pub fn one_cycle(step: usize, total: usize, peak: f64, pct_start: f64) -> f64 {
    let lo = peak / 25.0;
    let end = peak / 1000.0;
    if total <= 1 {
        return lo;
    }
    let warm = ((pct_start * total as f64).round() as usize).clamp(1, total - 1);
    if step <= warm {
        lo + (peak - lo) * step as f64 / warm as f64
    } else {
        let t = (step - warm) as f64 / (total - 1 - warm).max(1) as f64;
        end + (peak - end) * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
    }
}

/// Adam with decoupled weight decay over named f32 tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update to every parameter that has a gradient, with the
    /// learning rate `lr(name)`.
    pub fn step(&mut self, weights: &mut ModelWeights, grads: &BTreeMap<String, Tensor<f32>>, lr: impl Fn(&str) -> f64) {
        self.t += 1;
        let (c1, c2) = (1.0 - self.beta1.powi(self.t), 1.0 - self.beta2.powi(self.t));
        for (name, g) in grads {
            let p = weights.get_mut(name).expect("gradient for a bound parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let lr = lr(name);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mut x = *w as f64 * (1.0 - lr * self.weight_decay);
                x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w = x as f32;
            }
        }
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

const VALIDATION_BIT: u64 = 1 << 63;

/// Seed of training sample `b` at `step`; always below the validation range.
pub fn train_seed(seed: u64, step: usize, b: usize) -> u64 {
    splitmix(splitmix(seed ^ 0x5452_4149_4e00_0000) ^ ((step as u64) << 16) ^ b as u64) & !VALIDATION_BIT
}

/// Seed of held-out sample `k`; always inside the validation range.
pub fn validation_seed(seed: u64, k: usize) -> u64 {
    splitmix(splitmix(seed ^ 0x5641_4c00_0000_0000) ^ k as u64) | VALIDATION_BIT
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValPoint {
    pub step: usize,
    /// Mean matching loss (stage 1) or coarse AEPE in 1/8 pixels (stage 2).
    pub metric: f64,
    /// Fraction of ground-truth cells whose row argmax is correct (stage 1).
    pub precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub stage: Stage,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub validation: Vec<ValPoint>,
    pub wall_clock_secs: f64,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    stage: Stage,
    step: usize,
    loss: f64,
    lr: f64,
    grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    val: Option<&'a ValPoint>,
}

impl TrainReport {
    /// One JSON record per logged step. Wall-clock time is left out so the
    /// log is reproducible.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for (i, (&loss, &lr)) in self.losses.iter().zip(&self.lrs).enumerate() {
            let rec = StepRecord {
                stage: self.stage,
                step: i + 1,
                loss,
                lr,
                grad_norm: self.grad_norms[i],
                val: self.validation.iter().find(|v| v.step == i + 1),
            };
            out.push_str(&serde_json::to_string(&rec).expect("plain record"));
            out.push('\n');
        }
        out
    }

    /// First validated step whose metric is at or below `threshold`.
    pub fn steps_to(&self, threshold: f64) -> Option<usize> {
        self.validation.iter().find(|v| v.metric <= threshold).map(|v| v.step)
    }
}

/// A generated training or validation sample.
enum Sample {
    Static { i1: Tensor<f32>, i2: Tensor<f32>, gt: GtMatches },
    Flow { i1: Tensor<f32>, i2: Tensor<f32>, coarse: Tensor<f32> },
}

fn sample(data: &DataSpec, seed: u64) -> Result<Sample> {
    Ok(match data {
        DataSpec::Static { size, warp, jitter } => {
            let p = gen_static_pair(seed, *size, warp, jitter)?;
            let gt = p.gt_matches();
            Sample::Static { i1: p.i1, i2: p.i2, gt }
        }
        DataSpec::Flow { size, motion } => {
            let p = gen_flow_pair(seed, *size, motion)?;
            Sample::Flow { coarse: downsample_flow(&p.flow)?, i1: p.i1, i2: p.i2 }
        }
    })
}

/// Loss and gradients of the trainable groups for one sample.
fn sample_grad(weights: &ModelWeights, cfg: &TrainConfig, s: &Sample) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let mut g: Tape<f32> = Tape::new();
    let trainable = |grp: ParamGroup| cfg.stage == Stage::Flow || grp == ParamGroup::Features;
    let p = weights.bind(&mut g, trainable);
    let loss = match s {
        Sample::Static { i1, i2, gt } => {
            let (a, b) = (g.constant(i1.clone()), g.constant(i2.clone()));
            let (f1, f2) = matching_features(&mut g, &p, &cfg.model, a, b)?;
            let c = correlation_volume(&mut g, f1, f2, cfg.model.scale_corr)?;
            let prob = dual_softmax(&mut g, c, cfg.temperature as f32)?;
            matching_loss(&mut g, prob, gt)?
        }
        Sample::Flow { i1, i2, coarse } => {
            let (a, b) = (g.constant(i1.clone()), g.constant(i2.clone()));
            let trace = flow_trace(&mut g, &p, &cfg.model, a, b, cfg.train_iters)?;
            flow_loss(&mut g, &trace.flows, coarse, cfg.gamma, None)?
        }
    };
    let value = g.value(loss).item() as f64;
    g.backward(loss)?;
    let grads = p
        .iter()
        .filter(|(n, _)| trainable(ParamGroup::of(n)))
        .map(|(n, &v)| (n.clone(), g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(weights.get(n).expect("bound").shape()))))
        .collect();
    Ok((value, grads))
}

fn row_argmax_precision(prob: &Tensor<f32>, gt: &GtMatches) -> f64 {
    let n2 = prob.shape()[1];
    let hits = gt
        .0
        .iter()
        .filter(|&&(i, j)| {
            let row = &prob.data()[i * n2..(i + 1) * n2];
            let best = row.iter().enumerate().fold(0, |b, (k, &v)| if v > row[b] { k } else { b });
            best == j
        })
        .count();
    hits as f64 / gt.len() as f64
}

/// Held-out metric of `weights` on the validation seeds of `cfg`.
pub fn validate(weights: &ModelWeights, cfg: &TrainConfig, step: usize) -> Result<ValPoint> {
    let results = (0..cfg.val_pairs)
        .into_par_iter()
        .map(|k| -> Result<(f64, Option<f64>)> {
            let s = sample(&cfg.data, validation_seed(cfg.seed, k))?;
            let mut g: Tape<f32> = Tape::new();
            let p = weights.bind(&mut g, |_| false);
            match &s {
                Sample::Static { i1, i2, gt } => {
                    let (a, b) = (g.constant(i1.clone()), g.constant(i2.clone()));
                    let (f1, f2) = matching_features(&mut g, &p, &cfg.model, a, b)?;
                    let c = correlation_volume(&mut g, f1, f2, cfg.model.scale_corr)?;
                    let prob = dual_softmax(&mut g, c, cfg.temperature as f32)?;
                    let loss = matching_loss(&mut g, prob, gt)?;
                    Ok((g.value(loss).item() as f64, Some(row_argmax_precision(g.value(prob), gt))))
                }
                Sample::Flow { i1, i2, coarse } => {
                    let (a, b) = (g.constant(i1.clone()), g.constant(i2.clone()));
                    let trace = flow_trace(&mut g, &p, &cfg.model, a, b, cfg.val_iters)?;
                    let pred = g.value(*trace.flows.last().expect("iters >= 1"));
                    Ok((crate::eval::aepe(pred, coarse, None)?, None))
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let n = results.len().max(1) as f64;
    let metric = results.iter().map(|r| r.0).sum::<f64>() / n;
    let precision = results.iter().map(|r| r.1).sum::<Option<f64>>().map(|s| s / n);
    Ok(ValPoint { step, metric, precision })
}

/// Runs `cfg.steps` optimizer steps from `init`.
pub fn train(cfg: &TrainConfig, init: ModelWeights) -> Result<(ModelWeights, TrainReport)> {
    cfg.validate()?;
    if init.config != cfg.model {
        return Err(Error::Config("initial weights were built for a different architecture".into()));
    }
    init.check_against_config()?;
    let started = Instant::now();
    let mut weights = init;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut report = TrainReport {
        stage: cfg.stage,
        losses: Vec::with_capacity(cfg.steps),
        lrs: Vec::with_capacity(cfg.steps),
        grad_norms: Vec::with_capacity(cfg.steps),
        validation: Vec::new(),
        wall_clock_secs: 0.0,
        checkpoints: Vec::new(),
    };
    if cfg.steps > 0 && cfg.val_every > 0 && cfg.val_pairs > 0 {
        report.validation.push(validate(&weights, cfg, 0)?);
    }
    for step in 0..cfg.steps {
        let per_sample = (0..cfg.batch)
            .into_par_iter()
            .map(|b| sample(&cfg.data, train_seed(cfg.seed, step, b)).and_then(|s| sample_grad(&weights, cfg, &s)))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::Tensor(t) => Error::Training { step, msg: t.to_string() },
                other => other,
            })?;
        let mut loss = 0.0;
        let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (l, gs) in per_sample {
            loss += l;
            for (n, g) in gs {
                match grads.get_mut(&n) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        grads.insert(n, g);
                    }
                }
            }
        }
        let inv = 1.0 / cfg.batch as f32;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= inv;
            }
        }
        loss /= cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Training { step, msg: format!("loss is {loss}") });
        }
        if let Some((n, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Training { step, msg: format!("gradient of `{n}` is not finite") });
        }
        let norm = clip_global_norm(&mut grads, cfg.clip_norm);
        let lr = one_cycle(step, cfg.steps, cfg.peak_lr, cfg.pct_start);
        let fs = cfg.feature_lr_scale;
        opt.step(&mut weights, &grads, |n| if ParamGroup::of(n) == ParamGroup::Features { lr * fs } else { lr });
        report.losses.push(loss);
        report.lrs.push(lr);
        report.grad_norms.push(norm);
        let done = step + 1;
        if cfg.val_every > 0 && cfg.val_pairs > 0 && (done % cfg.val_every == 0 || done == cfg.steps) {
            report.validation.push(validate(&weights, cfg, done)?);
        }
        if let (true, Some(dir)) = (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0, &cfg.checkpoint_dir) {
            let path = dir.join(format!("stage{}-step{done:06}.mfw", if cfg.stage == Stage::Matching { 1 } else { 2 }));
            save_weights(&path, &weights)?;
            report.checkpoints.push(path);
        }
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((weights, report))
}

/// Stage 1 from a fresh seeded initialization.
pub fn pretrain_matching(cfg: &TrainConfig) -> Result<(ModelWeights, TrainReport)> {
    if cfg.stage != Stage::Matching {
        return Err(Error::Config("pretrain_matching needs a matching-stage config".into()));
    }
    train(cfg, ModelWeights::init(&cfg.model, cfg.seed)?)
}

/// Stage 2 from `init`, or from a fresh seeded initialization.
pub fn finetune_flow(cfg: &TrainConfig, init: Option<ModelWeights>) -> Result<(ModelWeights, TrainReport)> {
    if cfg.stage != Stage::Flow {
        return Err(Error::Config("finetune_flow needs a flow-stage config".into()));
    }
    let init = match init {
        Some(w) => w,
        None => ModelWeights::init(&cfg.model, cfg.seed)?,
    };
    train(cfg, init)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumConfig {
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Coarse AEPE (1/8 pixels) that counts as converged.
    pub threshold: f64,
}

impl CurriculumConfig {
    pub fn desk() -> Self {
        Self { pretrain: TrainConfig::stage1(0), finetune: TrainConfig::stage2(0), threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub steps_to_threshold: Option<usize>,
    pub final_aepe: f64,
    pub report: TrainReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedComparison {
    pub seed: u64,
    pub pretrain_losses: Vec<f64>,
    pub pretrained: ArmResult,
    pub scratch: ArmResult,
}

impl SeedComparison {
    /// Pretrained arm reaches the threshold strictly earlier (or only it does).
    pub fn pretrained_faster(&self) -> bool {
        match (self.pretrained.steps_to_threshold, self.scratch.steps_to_threshold) {
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            _ => false,
        }
    }

    pub fn pretrained_not_worse(&self) -> bool {
        self.pretrained.final_aepe <= self.scratch.final_aepe
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumReport {
    pub threshold: f64,
    pub seeds: Vec<SeedComparison>,
}

impl CurriculumReport {
    pub fn faster_count(&self) -> usize {
        self.seeds.iter().filter(|s| s.pretrained_faster()).count()
    }

    pub fn not_worse_count(&self) -> usize {
        self.seeds.iter().filter(|s| s.pretrained_not_worse()).count()
    }
}

fn arm(report: TrainReport, threshold: f64) -> ArmResult {
    ArmResult {
        steps_to_threshold: report.steps_to(threshold),
        final_aepe: report.validation.last().map_or(f64::NAN, |v| v.metric),
        report,
    }
}

/// Per seed: pretrain then finetune, versus finetune from the same fresh
/// initialization, with identical stage-2 data and budget.
pub fn compare_curricula(base: &CurriculumConfig, seeds: &[u64]) -> Result<CurriculumReport> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!("need at least 3 seeds, got {}", seeds.len())));
    }
    if base.pretrain.model != base.finetune.model {
        return Err(Error::Config("both stages must share one architecture".into()));
    }
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let pre_cfg = TrainConfig { seed, ..base.pretrain.clone() };
        let ft_cfg = TrainConfig { seed, ..base.finetune.clone() };
        let init = ModelWeights::init(&pre_cfg.model, seed)?;
        let (pre, pre_report) = train(&pre_cfg, init.clone())?;
        let (_, with) = train(&ft_cfg, pre)?;
        let (_, without) = train(&ft_cfg, init)?;
        out.push(SeedComparison {
            seed,
            pretrain_losses: pre_report.losses,
            pretrained: arm(with, base.threshold),
            scratch: arm(without, base.threshold),
        });
    }
    Ok(CurriculumReport { threshold: base.threshold, seeds: out })
}

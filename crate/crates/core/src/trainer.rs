//! Runs a compiled plan on the synthetic dataset and evaluates the result.
//!
//! The loop applies each record verbatim: its shape, learning rate and BN
//! group. Batch `i` depends only on `(seed, i)`, so prefetching the next batch
//! on a worker thread does not change any result.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, Checkpoint};
use crate::nn::layers::softmax;
use crate::nn::model::model_forward_backward;
use crate::nn::{sgd_step, ModelConfig, ModelParams, SgdState, Tensor};
use crate::par;
use crate::sampling_grid::{self, Clip};
use crate::schedule::{self, CompiledPlan, PlanConfig};
use crate::synth::{self, SynthDataset, SynthSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Prepare batch `i + 1` on a worker thread while step `i` runs.
    pub prefetch: bool,
    /// Record `wall_ms` in the metrics (makes them non-reproducible).
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
            prefetch: true,
            wall_clock: false,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub b: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub bn_group: usize,
    pub cum_clips: u64,
    pub wall_ms: Option<f64>,
}

pub fn write_metrics<W: Write>(mut w: W, metrics: &[Metric]) -> Result<()> {
    for m in metrics {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub optimizer: SgdState<f32>,
    pub metrics: Vec<Metric>,
    pub checkpoints: Vec<PathBuf>,
}

/// The parameter-init RNG; its stream never collides with a batch stream.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Rejects plans the model or dataset cannot execute, before any work.
pub fn check_plan(plan: &CompiledPlan, model: &ModelConfig, data: &SynthDataset) -> Result<()> {
    model.validate()?;
    let (mt, mh, mw) = model.min_input();
    let mut seen = BTreeSet::new();
    let mut max_span = 0.0f64;
    for r in &plan.records {
        let s = r.shape;
        if seen.insert((s.b, s.t, s.h, s.w, r.bn_group)) {
            if s.t < mt || s.h < mh || s.w < mw {
                return Err(Error::Shape(format!(
                    "record {} shape {s} is below the network minimum {mt}x{mh}x{mw}",
                    r.iter
                )));
            }
            if r.bn_group == 0 || s.b % r.bn_group != 0 {
                return Err(Error::BnGroup {
                    group: r.bn_group,
                    batch: s.b,
                });
            }
        }
        max_span = max_span.max(s.t as f64 * r.sample_ranges.t_stride_max);
    }
    data.spec.check_fits(max_span)
}

/// Trains from a fresh initialization.
pub fn train(
    plan: &CompiledPlan,
    model: &ModelConfig,
    data: &SynthDataset,
    seed: u64,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let params = ModelParams::<f32>::init(model, &mut init_rng(seed))?;
    let optimizer = SgdState::new(&params, cfg.momentum, cfg.weight_decay);
    let start = Checkpoint {
        params,
        optimizer,
        seed,
        next_iter: 0,
    };
    resume(plan, data, start, cfg, checkpoint_dir)
}

/// Continues a run from `start.next_iter`.
pub fn resume(
    plan: &CompiledPlan,
    data: &SynthDataset,
    start: Checkpoint,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    check_plan(plan, &start.params.config, data)?;
    let Checkpoint {
        mut params,
        mut optimizer,
        seed,
        next_iter,
    } = start;
    let first = next_iter as usize;
    if first > plan.len() {
        return Err(Error::PlanMismatch(format!(
            "checkpoint resumes at {first} but the plan has {} records",
            plan.len()
        )));
    }
    let stage_ends: BTreeSet<usize> = plan.stage_ends().into_iter().collect();
    let mut cum_clips: u64 = plan.records[..first].iter().map(|r| r.shape.b as u64).sum();
    let mut metrics = Vec::with_capacity(plan.len() - first);
    let mut checkpoints = Vec::new();
    let clock = Instant::now();

    let records = &plan.records[first..];
    let mut step = |batch: Tensor<f32>, labels: Vec<usize>, i: usize| -> Result<()> {
        let r = &plan.records[i];
        let (loss, grads) = model_forward_backward(&mut params, &batch, &labels, r.bn_group)?;
        let loss = loss as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter: r.iter,
                loss,
                record: format!("stage {} shape {} lr {} bn_group {}", r.stage, r.shape, r.lr, r.bn_group),
            });
        }
        sgd_step(&mut params, &grads, &mut optimizer, r.lr);
        cum_clips += r.shape.b as u64;
        metrics.push(Metric {
            iter: r.iter,
            loss,
            lr: r.lr,
            b: r.shape.b,
            t: r.shape.t,
            h: r.shape.h,
            w: r.shape.w,
            bn_group: r.bn_group,
            cum_clips,
            wall_ms: cfg.wall_clock.then(|| clock.elapsed().as_secs_f64() * 1e3),
        });
        if let (Some(dir), true) = (checkpoint_dir, stage_ends.contains(&i)) {
            let path = dir.join(format!("stage{}_iter{:06}.ckpt", r.stage, i + 1));
            let ck = Checkpoint {
                params: params.clone(),
                optimizer: optimizer.clone(),
                seed,
                next_iter: (i + 1) as u64,
            };
            checkpoint::save(&path, &ck)?;
            checkpoints.push(path);
        }
        Ok(())
    };

    if cfg.prefetch && records.len() > 1 {
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel(1);
            scope.spawn(move || {
                for r in records {
                    // stop early once the consumer has gone away
                    if tx.send(synth::next_batch(data, r, seed)).is_err() {
                        break;
                    }
                }
            });
            for (offset, batch) in rx.iter().enumerate() {
                let (x, labels) = batch?;
                step(x, labels, first + offset)?;
            }
            Ok(())
        })?;
    } else {
        for r in records {
            let (x, labels) = synth::next_batch(data, r, seed)?;
            step(x, labels, r.iter)?;
        }
    }

    if let Some(dir) = checkpoint_dir {
        let path = dir.join("final.ckpt");
        let ck = Checkpoint {
            params: params.clone(),
            optimizer: optimizer.clone(),
            seed,
            next_iter: plan.len() as u64,
        };
        checkpoint::save(&path, &ck)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        params,
        optimizer,
        metrics,
        checkpoints,
    })
}

/// Multi-clip testing: `clips` uniformly spaced temporal clips at the test
/// shape, center crop at `short_side`, softmax averaged per video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub clips: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub short_side: f64,
    pub t_stride: f64,
    /// Videos per forward pass.
    #[serde(default = "default_eval_batch")]
    pub batch_videos: usize,
}

fn default_eval_batch() -> usize {
    16
}

impl EvalConfig {
    /// Test at the base shape, smallest short side and stride of the recipe.
    pub fn for_plan(cfg: &PlanConfig, clips: usize) -> Self {
        EvalConfig {
            clips,
            t: cfg.base_shape.t,
            h: cfg.base_shape.h,
            w: cfg.base_shape.w,
            short_side: cfg.ranges.short_side_min,
            t_stride: cfg.ranges.t_stride_min,
            batch_videos: default_eval_batch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub videos: usize,
    pub top1: f64,
    /// Top-`k` accuracy with `k = min(5, classes)`.
    pub top5: f64,
    pub clips_per_video: usize,
}

/// The `j`-th of `k` evaluation clips of `video`.
pub fn eval_clip(video: &Clip, j: usize, cfg: &EvalConfig) -> Result<Clip> {
    let span = (cfg.t as f64 * cfg.t_stride).min(video.frames as f64);
    let room = video.frames as f64 - span;
    let start = (room * (j as f64 + 0.5) / cfg.clips as f64).round();
    let grid = sampling_grid::center_grid(
        (video.frames, video.height, video.width),
        (cfg.t, cfg.h, cfg.w),
        cfg.short_side,
        cfg.t_stride,
        start,
    )?;
    sampling_grid::resample(video, &grid)
}

/// Per-video averaged class probabilities, in dataset order.
pub fn predict(params: &ModelParams<f32>, data: &SynthDataset, cfg: &EvalConfig) -> Result<Vec<Vec<f64>>> {
    if cfg.clips == 0 {
        return Err(Error::config("eval.clips", "must be >= 1"));
    }
    let per_clip = cfg.t * cfg.h * cfg.w;
    let classes = params.config.classes;
    let chunk = cfg.batch_videos.max(1);
    let mut out = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(chunk) {
        let videos = &data.videos[start..(start + chunk).min(data.len())];
        let n = videos.len() * cfg.clips;
        let clips = par::map_indexed(n, |i| eval_clip(&videos[i / cfg.clips], i % cfg.clips, cfg));
        let mut x = Vec::with_capacity(n * per_clip);
        for c in clips {
            x.extend_from_slice(&c?.data);
        }
        let x = Tensor::from_vec(&[n, cfg.t, cfg.h, cfg.w, 1], x)?;
        let probs = softmax(&params.forward_eval(&x)?)?;
        for rows in probs.data.chunks_exact(classes * cfg.clips) {
            let mut avg = vec![0.0f64; classes];
            for row in rows.chunks_exact(classes) {
                for (a, &p) in avg.iter_mut().zip(row) {
                    *a += p as f64;
                }
            }
            avg.iter_mut().for_each(|a| *a /= cfg.clips as f64);
            out.push(avg);
        }
    }
    Ok(out)
}

/// Rank of `label` among the scores (0 = best); ties go to the lower class.
fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > s || (v == s && c < label))
        .count()
}

pub fn accuracy(probs: &[Vec<f64>], labels: &[usize], clips: usize) -> EvalResult {
    let k = probs.first().map_or(1, |p| p.len().min(5));
    let (mut top1, mut topk) = (0usize, 0usize);
    for (p, &l) in probs.iter().zip(labels) {
        let rank = rank_of(p, l);
        top1 += (rank == 0) as usize;
        topk += (rank < k) as usize;
    }
    let n = probs.len().max(1) as f64;
    EvalResult {
        videos: probs.len(),
        top1: top1 as f64 / n,
        top5: topk as f64 / n,
        clips_per_video: clips,
    }
}

pub fn evaluate(params: &ModelParams<f32>, data: &SynthDataset, cfg: &EvalConfig) -> Result<EvalResult> {
    let probs = predict(params, data, cfg)?;
    Ok(accuracy(&probs, &data.labels, cfg.clips))
}

/// Everything one training run needs, as read from a JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub plan: PlanConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: SynthSpec,
    /// Validation set; evaluation is skipped when absent.
    #[serde(default)]
    pub val: Option<SynthSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_eval_clips")]
    pub eval_clips: usize,
}

fn default_eval_clips() -> usize {
    1
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.plan.validate()?;
        cfg.model.validate()?;
        cfg.data.validate()?;
        if let Some(v) = &cfg.val {
            v.validate()?;
        }
        if cfg.eval_clips == 0 {
            return Err(Error::config("eval_clips", "must be >= 1"));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Outcome of training one plan and evaluating it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub iterations: usize,
    pub clips: u64,
    pub flops_proxy: u64,
    pub final_loss: f64,
    pub eval: Option<EvalResult>,
}

/// Compiles `plan`, trains and (if `val` is given) evaluates.
pub fn run(
    plan_cfg: &PlanConfig,
    model: &ModelConfig,
    train_data: &SynthDataset,
    val: Option<&SynthDataset>,
    seed: u64,
    cfg: &TrainConfig,
    eval_clips: usize,
) -> Result<(TrainOutcome, RunReport)> {
    let plan = schedule::compile(plan_cfg)?;
    let outcome = train(&plan, model, train_data, seed, cfg, None)?;
    let eval = match val {
        Some(v) => Some(evaluate(&outcome.params, v, &EvalConfig::for_plan(plan_cfg, eval_clips))?),
        None => None,
    };
    let report = RunReport {
        iterations: plan.len(),
        clips: plan.total_clips(),
        flops_proxy: plan.summary.flops_proxy,
        final_loss: outcome.metrics.last().map_or(f64::NAN, |m| m.loss),
        eval,
    };
    Ok((outcome, report))
}

//! Multigrid schedule compiler.
//!
//! A baseline recipe (base mini-batch shape, stepwise LR stages, warmup) plus a
//! [`CycleConfig`] compiles into a [`CompiledPlan`]: one [`IterationRecord`]
//! per SGD step carrying the mini-batch shape, learning rate, BN sub-batch size
//! and grid-sampling ranges.
//!
//! Two cycles run at different frequencies. The long cycle walks a
//! coarse-to-fine list of base shapes, spending equal iterations on each and
//! restarting at every LR stage (or once for the whole run in the single-cycle
//! design). The short cycle changes the spatial shape every iteration with
//! period `short_spatial_factors.len()`. The batch size always follows
//! `b = B * (T/t) * (H/h) * (W/w)` using exact design factors. Only the
//! long-cycle factor scales the learning rate. The last LR stage is a
//! fine-tuning phase at the full base shape, split into halves that use the
//! second-to-last and last stage LRs.

mod config;
mod export;

pub use config::{CycleConfig, LongDesign, LrKind, LrSchedule, LrStage, PlanConfig, RangePolicy};
pub use export::{record_lines, write_jsonl, RecordLine};

use serde::{Deserialize, Serialize};

use crate::accounting::{self, PlanSummary};
use crate::error::{Error, Result};
use crate::sampling_grid::GridSampleRanges;

/// A mini-batch shape: clips x frames x height x width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shape4D {
    pub b: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4D {
    pub fn new(b: usize, t: usize, h: usize, w: usize) -> Self {
        Shape4D { b, t, h, w }
    }

    /// Clip volume `b * t * h * w`, the FLOPs proxy of one iteration.
    pub fn volume(&self) -> u64 {
        self.b as u64 * self.t as u64 * self.h as u64 * self.w as u64
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        if self.b == 0 || self.t == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::config(key, format!("all dims must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape4D {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.b, self.t, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Cycling,
    Finetune,
    Baseline,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Cycling => "cycling",
            Phase::Finetune => "finetune",
            Phase::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub phase: Phase,
    /// Recipe stage this iteration falls in.
    pub stage: usize,
    /// Stage whose learning rate is applied (differs from `stage` in the
    /// first half of fine-tuning).
    pub lr_stage: usize,
    pub long_idx: Option<usize>,
    pub short_m: Option<usize>,
    pub shape: Shape4D,
    pub lr: f64,
    pub bn_group: usize,
    /// Long-cycle batch factor; also the LR scale.
    pub long_multiplier: f64,
    /// Short-cycle batch factor relative to the long-cycle batch.
    pub short_multiplier: f64,
    pub sample_ranges: GridSampleRanges,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompiledPlan {
    pub records: Vec<IterationRecord>,
    pub base_shape: Shape4D,
    pub dataset_size: usize,
    /// Summary against the config's own baseline recipe.
    pub summary: PlanSummary,
}

impl CompiledPlan {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_clips(&self) -> u64 {
        self.records.iter().map(|r| r.shape.b as u64).sum()
    }

    /// Indices of the last record of every recipe stage.
    pub fn stage_ends(&self) -> Vec<usize> {
        let mut ends = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            match self.records.get(i + 1) {
                Some(next) if next.stage == r.stage => {}
                _ => ends.push(i),
            }
        }
        ends
    }
}

/// Scaled mini-batch size `round(B * (T/t) * (H/h) * (W/w))`, at least 1.
pub fn scaled_batch(base: &Shape4D, t: f64, h: f64, w: f64) -> usize {
    assert!(t > 0.0 && h > 0.0 && w > 0.0, "shape dims must be positive");
    let b = base.b as f64 * (base.t as f64 / t) * (base.h as f64 / h) * (base.w as f64 / w);
    (b.round() as usize).max(1)
}

/// Rounds a spatial size to the nearest even integer, at least 2.
pub fn round_spatial(x: f64) -> usize {
    let even = 2.0 * (x / 2.0).round();
    (even as usize).max(2)
}

/// Snaps values within 1e-9 of an integer onto it, so that products of
/// irrational design factors such as `(1/sqrt 2)^2` give exact multipliers.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// Spatial shape of one short-cycle step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShortCycleShape {
    pub h: usize,
    pub w: usize,
    /// Batch factor relative to the long-cycle batch, from exact factors.
    pub batch_multiplier: f64,
}

/// Short-cycle spatial shape for a step whose factor (of the default spatial
/// shape) is `factor`, given the long-cycle base at exact factors
/// `base_factors` of `default_spatial`. The short cycle never enlarges the
/// base, so each dimension is clamped to it.
pub fn short_cycle_shape(base_factors: (f64, f64), default_spatial: (usize, usize), factor: f64) -> ShortCycleShape {
    let (fh, fw) = base_factors;
    let (dh, dw) = default_spatial;
    let base_h = round_spatial(dh as f64 * fh);
    let base_w = round_spatial(dw as f64 * fw);
    let h = round_spatial(dh as f64 * factor).min(base_h);
    let w = round_spatial(dw as f64 * factor).min(base_w);
    let eff_h = factor.min(fh);
    let eff_w = factor.min(fw);
    ShortCycleShape {
        h,
        w,
        batch_multiplier: snap((fh / eff_h) * (fw / eff_w)),
    }
}

/// Largest divisor of `b` that is at most `want`.
fn fit_group(want: usize, b: usize) -> usize {
    let want = want.clamp(1, b);
    (1..=want).rev().find(|&g| b.is_multiple_of(g)).unwrap_or(1)
}

/// One long-cycle base shape resolved against the base recipe.
#[derive(Debug, Clone, Copy)]
struct LongShape {
    factors: (f64, f64, f64),
    t: usize,
    multiplier: f64,
}

struct Layout<'a> {
    cfg: &'a PlanConfig,
    long: Vec<LongShape>,
    full: LongShape,
    base_total: usize,
    finetune: bool,
    any_cycles: bool,
}

impl<'a> Layout<'a> {
    fn new(cfg: &'a PlanConfig) -> Self {
        let base = cfg.base_shape;
        let resolve = |(tf, hf, wf): (f64, f64, f64)| LongShape {
            factors: (tf, hf, wf),
            t: ((base.t as f64 * tf).round() as usize).max(1),
            multiplier: snap(1.0 / (tf * hf * wf)),
        };
        let c = &cfg.cycles;
        let any_cycles = c.long_enabled || c.short_enabled;
        Layout {
            cfg,
            long: c.long_shapes.iter().map(|s| resolve((s[0], s[1], s[2]))).collect(),
            full: resolve((1.0, 1.0, 1.0)),
            base_total: cfg.lr.base_total_iters(),
            finetune: any_cycles && c.finetune,
            any_cycles,
        }
    }

    /// Iterations per recipe stage for a run of `total` iterations.
    fn stage_iters(&self, total: usize) -> Vec<usize> {
        let stages = &self.cfg.lr.stages;
        let mut out = Vec::with_capacity(stages.len());
        let mut used = 0usize;
        for s in &stages[..stages.len() - 1] {
            let n = (total as f64 * s.length as f64 / self.base_total as f64).round() as usize;
            out.push(n);
            used += n;
        }
        out.push(total.saturating_sub(used));
        out
    }

    fn cycling_stages(&self) -> usize {
        let l = self.cfg.lr.stages.len();
        if self.finetune {
            l - 1
        } else {
            l
        }
    }

    /// Splits `n` iterations over `parts` contiguous blocks; the remainder goes
    /// to the later blocks.
    fn split(n: usize, parts: usize) -> Vec<usize> {
        let base = n / parts;
        let rem = n % parts;
        (0..parts).map(|i| base + usize::from(i >= parts - rem)).collect()
    }

    fn long_indices(&self, stage_iters: &[usize]) -> Vec<Option<usize>> {
        let total: usize = stage_iters.iter().sum();
        let cycling = self.cycling_stages();
        let cycling_iters: usize = stage_iters[..cycling].iter().sum();
        let mut idx = Vec::with_capacity(total);
        if !self.cfg.cycles.long_enabled {
            idx.resize(total, None);
            return idx;
        }
        let s = self.long.len();
        let push_blocks = |idx: &mut Vec<Option<usize>>, n: usize| {
            for (k, len) in Self::split(n, s).into_iter().enumerate() {
                idx.extend(std::iter::repeat_n(Some(k), len));
            }
        };
        match self.cfg.cycles.long_design {
            LongDesign::MultiCycle => {
                for &n in &stage_iters[..cycling] {
                    push_blocks(&mut idx, n);
                }
            }
            LongDesign::SingleCycle => push_blocks(&mut idx, cycling_iters),
        }
        idx.resize(total, None);
        idx
    }

    fn build(&self, total: usize) -> Vec<IterationRecord> {
        let cfg = self.cfg;
        let base = cfg.base_shape;
        let stage_iters = self.stage_iters(total);
        let long_idx = self.long_indices(&stage_iters);
        let l = stage_iters.len();
        let warmup = (cfg.lr.warmup_iters as f64 * total as f64 / self.base_total as f64).round() as usize;
        let period = cfg.cycles.short_spatial_factors.len();

        let mut records = Vec::with_capacity(total);
        let mut iter = 0usize;
        for (stage, &n) in stage_iters.iter().enumerate() {
            let is_finetune = self.finetune && stage == l - 1;
            let phase = if is_finetune {
                Phase::Finetune
            } else if self.any_cycles {
                Phase::Cycling
            } else {
                Phase::Baseline
            };
            for k in 0..n {
                let li = long_idx[iter];
                let long = li.map_or(self.full, |i| self.long[i]);
                let (_, fh, fw) = long.factors;

                let (short_m, h, w, short_mult) = if cfg.cycles.short_enabled {
                    let m = iter % period;
                    let s = short_cycle_shape((fh, fw), (base.h, base.w), cfg.cycles.short_spatial_factors[m]);
                    (Some(m), s.h, s.w, s.batch_multiplier)
                } else {
                    (
                        None,
                        round_spatial(base.h as f64 * fh),
                        round_spatial(base.w as f64 * fw),
                        1.0,
                    )
                };
                let b = ((base.b as f64 * long.multiplier * short_mult).round() as usize).max(1);
                let shape = Shape4D { b, t: long.t, h, w };

                let lr_stage = if is_finetune && cfg.lr.kind == LrKind::Stepwise && l >= 2 {
                    if k < n / 2 {
                        l - 2
                    } else {
                        l - 1
                    }
                } else {
                    stage
                };
                let unscaled = match cfg.lr.kind {
                    LrKind::Stepwise => cfg.lr.stages[lr_stage].lr,
                    LrKind::Cosine => {
                        let peak = cfg.lr.stages[0].lr;
                        peak * 0.5 * (1.0 + (std::f64::consts::PI * iter as f64 / total as f64).cos())
                    }
                };
                let target = unscaled * long.multiplier;
                let lr = if iter < warmup {
                    let start = cfg.lr.warmup_start_lr;
                    start + (target - start) * iter as f64 / warmup as f64
                } else {
                    target
                };

                let bn_group = fit_group((cfg.cycles.bn_base_group as f64 * short_mult).round() as usize, b);
                let t_stride_min = cfg.ranges.t_stride_min;
                let sample_ranges = GridSampleRanges {
                    short_side_min: (cfg.ranges.short_side_min * h as f64 / base.h as f64).round().max(1.0),
                    short_side_max: cfg.ranges.short_side_max,
                    t_stride_min,
                    t_stride_max: t_stride_min * base.t as f64 / long.t as f64,
                };

                records.push(IterationRecord {
                    iter,
                    phase,
                    stage,
                    lr_stage,
                    long_idx: li,
                    short_m,
                    shape,
                    lr,
                    bn_group,
                    long_multiplier: long.multiplier,
                    short_multiplier: short_mult,
                    sample_ranges,
                });
                iter += 1;
            }
        }
        records
    }

    fn clips(&self, total: usize) -> u64 {
        self.build(total).iter().map(|r| r.shape.b as u64).sum()
    }

    fn check_stage_lengths(&self, total: usize) -> Result<()> {
        if !self.cfg.cycles.long_enabled {
            return Ok(());
        }
        let s = self.long.len();
        let stage_iters = self.stage_iters(total);
        let cycling = &stage_iters[..self.cycling_stages()];
        match self.cfg.cycles.long_design {
            LongDesign::MultiCycle => {
                for (k, &n) in cycling.iter().enumerate() {
                    if n < s {
                        return Err(Error::config(
                            "lr.stages",
                            format!(
                                "stage {k} compiles to {n} iterations but needs at least {s} \
                                 (one per long-cycle shape)"
                            ),
                        ));
                    }
                }
            }
            LongDesign::SingleCycle => {
                let n: usize = cycling.iter().sum();
                if n < s {
                    return Err(Error::config(
                        "lr.stages",
                        format!("cycling stages compile to {n} iterations but need at least {s}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Compiles `cfg` into a per-iteration plan.
///
/// The iteration count is chosen so the plan processes
/// `epoch_multiplier * base_total_iters * B` clips: a closed-form estimate from
/// the average clips per iteration, refined on the exact layout until the clip
/// total is as close to the target as one iteration allows.
pub fn compile(cfg: &PlanConfig) -> Result<CompiledPlan> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let base_total = layout.base_total;
    let target = cfg.cycles.epoch_multiplier * base_total as f64 * cfg.base_shape.b as f64;

    let avg = layout.clips(base_total) as f64 / base_total as f64;
    let mut total = ((target / avg).round() as usize).max(1);
    for _ in 0..32 {
        let diff = target - layout.clips(total) as f64;
        let step = (diff / avg).round() as i64;
        if step == 0 {
            break;
        }
        total = (total as i64 + step).max(1) as usize;
    }
    let mut best = (f64::INFINITY, total);
    for cand in total.saturating_sub(4).max(1)..=total + 4 {
        let err = (layout.clips(cand) as f64 - target).abs();
        if err <= best.0 {
            best = (err, cand);
        }
    }
    let total = best.1;
    layout.check_stage_lengths(total)?;

    let records = layout.build(total);
    let summary = accounting::summarize_records(
        &records,
        cfg.dataset_size,
        &accounting::BaselineTotals::of_recipe(cfg),
    );
    Ok(CompiledPlan {
        records,
        base_shape: cfg.base_shape,
        dataset_size: cfg.dataset_size,
        summary,
    })
}

#[cfg(test)]
mod tests;

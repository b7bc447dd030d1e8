//! Clip, epoch and clip-volume accounting for compiled plans.
//!
//! The compute proxy of one iteration is its clip volume `b * t * h * w`;
//! it is model independent and constant across shapes up to rounding.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{CompiledPlan, IterationRecord, Phase, PlanConfig, Shape4D};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTotals {
    pub iters: usize,
    pub clips: u64,
    pub epochs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub total_iters: usize,
    pub total_clips: u64,
    pub epochs: f64,
    /// Baseline iterations divided by plan iterations.
    pub iteration_ratio_vs_baseline: f64,
    /// Summed clip volume of the plan.
    pub flops_proxy: u64,
    /// Plan clip volume divided by baseline clip volume.
    pub flops_proxy_ratio: f64,
    pub cycling: PhaseTotals,
    pub finetune: PhaseTotals,
    pub baseline_phase: PhaseTotals,
    pub max_batch: usize,
    pub min_batch: usize,
    pub baseline_iters: usize,
    pub baseline_clips: u64,
}

/// Totals of the reference run that ratios are taken against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineTotals {
    pub iters: usize,
    pub clips: u64,
    pub flops_proxy: u64,
}

impl BaselineTotals {
    /// The recipe run as-is: `base_total_iters` iterations at the base shape.
    pub fn of_recipe(cfg: &PlanConfig) -> Self {
        let iters = cfg.lr.base_total_iters();
        BaselineTotals {
            iters,
            clips: iters as u64 * cfg.base_shape.b as u64,
            flops_proxy: iters as u64 * cfg.base_shape.volume(),
        }
    }

    pub fn of_plan(plan: &CompiledPlan) -> Self {
        BaselineTotals {
            iters: plan.records.len(),
            clips: plan.total_clips(),
            flops_proxy: plan.records.iter().map(|r| r.shape.volume()).sum(),
        }
    }
}

pub(crate) fn summarize_records(records: &[IterationRecord], dataset_size: usize, baseline: &BaselineTotals) -> PlanSummary {
    let ds = dataset_size as f64;
    let mut cycling = PhaseTotals::default();
    let mut finetune = PhaseTotals::default();
    let mut baseline_phase = PhaseTotals::default();
    let mut flops = 0u64;
    let mut max_batch = 0usize;
    let mut min_batch = usize::MAX;
    for r in records {
        let p = match r.phase {
            Phase::Cycling => &mut cycling,
            Phase::Finetune => &mut finetune,
            Phase::Baseline => &mut baseline_phase,
        };
        p.iters += 1;
        p.clips += r.shape.b as u64;
        flops += r.shape.volume();
        max_batch = max_batch.max(r.shape.b);
        min_batch = min_batch.min(r.shape.b);
    }
    for p in [&mut cycling, &mut finetune, &mut baseline_phase] {
        p.epochs = p.clips as f64 / ds;
    }
    let total_clips = cycling.clips + finetune.clips + baseline_phase.clips;
    PlanSummary {
        total_iters: records.len(),
        total_clips,
        epochs: total_clips as f64 / ds,
        iteration_ratio_vs_baseline: baseline.iters as f64 / records.len().max(1) as f64,
        flops_proxy: flops,
        flops_proxy_ratio: flops as f64 / baseline.flops_proxy.max(1) as f64,
        cycling,
        finetune,
        baseline_phase,
        max_batch,
        min_batch: if records.is_empty() { 0 } else { min_batch },
        baseline_iters: baseline.iters,
        baseline_clips: baseline.clips,
    }
}

fn check_compatible(a: (Shape4D, usize), b: (Shape4D, usize)) -> Result<()> {
    if a.0 != b.0 {
        return Err(Error::PlanMismatch(format!("base shapes differ: {} vs {}", a.0, b.0)));
    }
    if a.1 != b.1 {
        return Err(Error::PlanMismatch(format!("dataset sizes differ: {} vs {}", a.1, b.1)));
    }
    Ok(())
}

/// Summarizes `plan` against an explicit `baseline` plan.
pub fn summarize(plan: &CompiledPlan, baseline: &CompiledPlan) -> Result<PlanSummary> {
    check_compatible(
        (plan.base_shape, plan.dataset_size),
        (baseline.base_shape, baseline.dataset_size),
    )?;
    Ok(summarize_records(
        &plan.records,
        plan.dataset_size,
        &BaselineTotals::of_plan(baseline),
    ))
}

/// Writes `plan,metric,value` rows, one per (plan, metric).
pub fn write_csv<W: Write>(mut w: W, rows: &[(&str, &PlanSummary)]) -> Result<()> {
    writeln!(w, "plan,metric,value")?;
    for (name, s) in rows {
        let metrics: [(&str, f64); 13] = [
            ("total_iters", s.total_iters as f64),
            ("total_clips", s.total_clips as f64),
            ("epochs", s.epochs),
            ("iteration_ratio_vs_baseline", s.iteration_ratio_vs_baseline),
            ("flops_proxy", s.flops_proxy as f64),
            ("flops_proxy_ratio", s.flops_proxy_ratio),
            ("cycling_iters", s.cycling.iters as f64),
            ("cycling_clips", s.cycling.clips as f64),
            ("finetune_iters", s.finetune.iters as f64),
            ("finetune_clips", s.finetune.clips as f64),
            ("max_batch", s.max_batch as f64),
            ("min_batch", s.min_batch as f64),
            ("baseline_iters", s.baseline_iters as f64),
        ];
        for (m, v) in metrics {
            writeln!(w, "{name},{m},{v}")?;
        }
    }
    Ok(())
}

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{CompiledPlan, Phase};
use crate::error::Result;

/// One JSON Lines row of an exported plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLine {
    pub iter: usize,
    pub phase: Phase,
    pub long_idx: Option<usize>,
    pub short_m: Option<usize>,
    pub b: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub lr: f64,
    pub bn_group: usize,
    pub lr_stage: usize,
    /// Clips processed up to and including this iteration.
    pub cum_clips: u64,
    pub epoch: f64,
}

pub fn record_lines(plan: &CompiledPlan) -> Vec<RecordLine> {
    let mut cum = 0u64;
    plan.records
        .iter()
        .map(|r| {
            cum += r.shape.b as u64;
            RecordLine {
                iter: r.iter,
                phase: r.phase,
                long_idx: r.long_idx,
                short_m: r.short_m,
                b: r.shape.b,
                t: r.shape.t,
                h: r.shape.h,
                w: r.shape.w,
                lr: r.lr,
                bn_group: r.bn_group,
                lr_stage: r.lr_stage,
                cum_clips: cum,
                epoch: cum as f64 / plan.dataset_size as f64,
            }
        })
        .collect()
}

pub fn write_jsonl<W: Write>(mut w: W, plan: &CompiledPlan) -> Result<()> {
    for line in record_lines(plan) {
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

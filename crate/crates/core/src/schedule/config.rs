use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Shape4D;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    #[default]
    Stepwise,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStage {
    /// Stage length in baseline iterations.
    pub length: usize,
    pub lr: f64,
}

/// The baseline learning-rate recipe.
///
/// For `cosine`, only the first stage's LR (the peak) sets the curve; stage
/// lengths still define where long cycles restart and where fine-tuning
/// begins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    #[serde(default)]
    pub kind: LrKind,
    pub stages: Vec<LrStage>,
    #[serde(default)]
    pub warmup_iters: usize,
    #[serde(default = "default_warmup_start")]
    pub warmup_start_lr: f64,
}

fn default_warmup_start() -> f64 {
    1e-3
}

impl LrSchedule {
    pub fn base_total_iters(&self) -> usize {
        self.stages.iter().map(|s| s.length).sum()
    }

    /// Stepwise schedule: `initial` decayed by `decay` at each boundary.
    pub fn stepwise(lengths: &[usize], initial: f64, decay: f64, warmup_iters: usize, warmup_start_lr: f64) -> Self {
        let mut lr = initial;
        let stages = lengths
            .iter()
            .map(|&length| {
                let s = LrStage { length, lr };
                lr *= decay;
                s
            })
            .collect();
        LrSchedule {
            kind: LrKind::Stepwise,
            stages,
            warmup_iters,
            warmup_start_lr,
        }
    }

    fn validate(&self, needs_finetune: bool) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("lr.stages", "at least one stage is required"));
        }
        if needs_finetune && self.stages.len() < 2 {
            return Err(Error::config(
                "lr.stages",
                format!(
                    "fine-tuning uses the last stage and needs at least 2 stages, got {}",
                    self.stages.len()
                ),
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.length == 0 {
                return Err(Error::config(format!("lr.stages[{i}].length"), "must be positive"));
            }
            if !(s.lr.is_finite() && s.lr >= 0.0) {
                return Err(Error::config(format!("lr.stages[{i}].lr"), "must be finite and >= 0"));
            }
        }
        if self.kind == LrKind::Stepwise {
            if let Some(i) = (1..self.stages.len()).find(|&i| self.stages[i].lr > self.stages[i - 1].lr) {
                return Err(Error::config(
                    format!("lr.stages[{i}].lr"),
                    "stepwise stage learning rates must be non-increasing",
                ));
            }
        }
        if self.warmup_iters >= self.base_total_iters() {
            return Err(Error::config(
                "lr.warmup_iters",
                format!(
                    "{} must be below the total of {} iterations",
                    self.warmup_iters,
                    self.base_total_iters()
                ),
            ));
        }
        if !(self.warmup_start_lr.is_finite() && self.warmup_start_lr >= 0.0) {
            return Err(Error::config("lr.warmup_start_lr", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LongDesign {
    /// One long cycle per LR stage.
    #[default]
    MultiCycle,
    /// One long cycle over all cycling stages.
    SingleCycle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycleConfig {
    pub long_enabled: bool,
    pub short_enabled: bool,
    /// `(t, h, w)` factors of the base shape, coarse to fine.
    pub long_shapes: Vec<[f64; 3]>,
    pub long_design: LongDesign,
    /// Spatial factors of the default shape, indexed by `iter mod len`.
    pub short_spatial_factors: Vec<f64>,
    pub bn_base_group: usize,
    /// Clips processed relative to the baseline recipe.
    pub epoch_multiplier: f64,
    /// Reserve the last LR stage for fine-tuning at the full shape.
    pub finetune: bool,
}

impl Default for CycleConfig {
    fn default() -> Self {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        CycleConfig {
            long_enabled: true,
            short_enabled: true,
            long_shapes: vec![[0.25, r, r], [0.5, r, r], [0.5, 1.0, 1.0], [1.0, 1.0, 1.0]],
            long_design: LongDesign::MultiCycle,
            short_spatial_factors: vec![0.5, r, 1.0],
            bn_base_group: 8,
            epoch_multiplier: 1.5,
            finetune: true,
        }
    }
}

impl CycleConfig {
    /// Cycles off, 1x epochs: the plan is the baseline recipe.
    pub fn baseline() -> Self {
        CycleConfig {
            long_enabled: false,
            short_enabled: false,
            epoch_multiplier: 1.0,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epoch_multiplier.is_finite() && self.epoch_multiplier > 0.0) {
            return Err(Error::config("cycles.epoch_multiplier", "must be positive and finite"));
        }
        if self.bn_base_group == 0 {
            return Err(Error::config("cycles.bn_base_group", "must be >= 1"));
        }
        if self.long_shapes.is_empty() {
            return Err(Error::config("cycles.long_shapes", "must not be empty"));
        }
        for (i, s) in self.long_shapes.iter().enumerate() {
            if s.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
                return Err(Error::config(
                    format!("cycles.long_shapes[{i}]"),
                    format!("factors must lie in (0, 1], got {s:?}"),
                ));
            }
            if i > 0 {
                let prev = self.long_shapes[i - 1];
                if (0..3).any(|d| s[d] < prev[d]) {
                    return Err(Error::config(
                        format!("cycles.long_shapes[{i}]"),
                        "shapes must be non-decreasing in every dimension",
                    ));
                }
            }
        }
        if self.short_spatial_factors.is_empty() {
            return Err(Error::config("cycles.short_spatial_factors", "must not be empty"));
        }
        if let Some(f) = self.short_spatial_factors.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::config(
                "cycles.short_spatial_factors",
                format!("factors must lie in (0, 1], got {f}"),
            ));
        }
        Ok(())
    }
}

/// Grid-sampling range policy; per-record ranges are derived from it.
///
/// A record with spatial size `h` samples short sides in
/// `[round(short_side_min * h / H), short_side_max]` and temporal strides in
/// `[t_stride_min, t_stride_min * T / t]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangePolicy {
    pub short_side_min: f64,
    pub short_side_max: f64,
    pub t_stride_min: f64,
}

impl Default for RangePolicy {
    fn default() -> Self {
        RangePolicy {
            short_side_min: 256.0,
            short_side_max: 340.0,
            t_stride_min: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub base_shape: Shape4D,
    /// Clips per epoch.
    pub dataset_size: usize,
    pub lr: LrSchedule,
    #[serde(default)]
    pub cycles: CycleConfig,
    #[serde(default)]
    pub ranges: RangePolicy,
}

impl PlanConfig {
    /// The Kinetics SlowFast recipe: 112k iterations of 512 x 32 x 224 x 224,
    /// LR 0.8 decayed 10x at 44k/72k/92k, warmup from 0.002 over 16k.
    pub fn kinetics_baseline() -> Self {
        PlanConfig {
            base_shape: Shape4D::new(512, 32, 224, 224),
            dataset_size: 240_000,
            lr: LrSchedule::stepwise(&[44_000, 28_000, 20_000, 20_000], 0.8, 0.1, 16_000, 0.002),
            cycles: CycleConfig::baseline(),
            ranges: RangePolicy::default(),
        }
    }

    /// Default multigrid (long + short cycles, 1.5x epochs) on the Kinetics recipe.
    pub fn kinetics_multigrid() -> Self {
        PlanConfig {
            cycles: CycleConfig::default(),
            ..Self::kinetics_baseline()
        }
    }

    /// The same recipe with cycles disabled and 1x epochs.
    pub fn baseline_of(&self) -> Self {
        PlanConfig {
            cycles: CycleConfig::baseline(),
            ..self.clone()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PlanConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.base_shape.validate("base_shape")?;
        if self.dataset_size == 0 {
            return Err(Error::config("dataset_size", "must be positive"));
        }
        self.cycles.validate()?;
        let needs_finetune = (self.cycles.long_enabled || self.cycles.short_enabled) && self.cycles.finetune;
        self.lr.validate(needs_finetune)?;
        let r = &self.ranges;
        if !(r.short_side_min > 0.0 && r.short_side_min <= r.short_side_max && r.short_side_max.is_finite()) {
            return Err(Error::config(
                "ranges.short_side_min",
                format!("need 0 < min <= max, got [{}, {}]", r.short_side_min, r.short_side_max),
            ));
        }
        if !(r.t_stride_min >= 1.0 && r.t_stride_min.is_finite()) {
            return Err(Error::config("ranges.t_stride_min", "must be >= 1"));
        }
        Ok(())
    }
}

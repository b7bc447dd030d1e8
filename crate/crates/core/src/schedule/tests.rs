use proptest::prelude::*;

use super::*;

const R: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[test]
fn scaled_batch_examples() {
    let base = Shape4D::new(512, 32, 224, 224);
    assert_eq!(scaled_batch(&base, 32.0, 224.0, 224.0), 512);
    assert_eq!(scaled_batch(&base, 16.0, 224.0, 224.0), 1024);
    assert_eq!(scaled_batch(&base, 8.0, 224.0 * R, 224.0 * R), 4096);
    assert_eq!(scaled_batch(&Shape4D::new(1, 1, 1, 1), 4.0, 4.0, 4.0), 1);
}

#[test]
fn round_spatial_examples() {
    assert_eq!(224.0 * R, 158.39191898578665);
    assert_eq!(round_spatial(224.0 * R), 158);
    assert_eq!(round_spatial(224.0), 224);
    assert_eq!(round_spatial(112.0), 112);
    assert_eq!(round_spatial(0.4), 2);
    assert_eq!(round_spatial(32.0 * R), 22);
}

#[test]
fn short_cycle_shape_examples() {
    let full = short_cycle_shape((1.0, 1.0), (224, 224), 0.5);
    assert_eq!((full.h, full.w, full.batch_multiplier), (112, 112, 4.0));
    let full1 = short_cycle_shape((1.0, 1.0), (224, 224), R);
    assert_eq!((full1.h, full1.batch_multiplier), (158, 2.0));

    let small_m1 = short_cycle_shape((R, R), (224, 224), R);
    assert_eq!((small_m1.h, small_m1.w, small_m1.batch_multiplier), (158, 158, 1.0));
    let small_m0 = short_cycle_shape((R, R), (224, 224), 0.5);
    assert_eq!((small_m0.h, small_m0.w, small_m0.batch_multiplier), (112, 112, 2.0));
    // never enlarges the base
    let small_m2 = short_cycle_shape((R, R), (224, 224), 1.0);
    assert_eq!((small_m2.h, small_m2.batch_multiplier), (158, 1.0));
}

#[test]
fn kinetics_baseline_recipe() {
    let plan = compile(&PlanConfig::kinetics_baseline()).unwrap();
    assert_eq!(plan.len(), 112_000);
    let base = Shape4D::new(512, 32, 224, 224);
    for r in &plan.records {
        assert_eq!(r.shape, base);
        assert_eq!(r.phase, Phase::Baseline);
        assert_eq!(r.long_idx, None);
        assert_eq!(r.short_m, None);
        assert_eq!(r.bn_group, 8);
    }
    let lr_at = |i: usize| plan.records[i].lr;
    assert_eq!(lr_at(0), 0.002);
    assert!((lr_at(8_000) - (0.002 + (0.8 - 0.002) * 0.5)).abs() < 1e-12);
    assert_eq!(lr_at(16_000), 0.8);
    assert_eq!(lr_at(43_999), 0.8);
    assert!((lr_at(44_000) - 0.08).abs() < 1e-15);
    assert!((lr_at(72_000) - 0.008).abs() < 1e-15);
    assert!((lr_at(92_000) - 0.0008).abs() < 1e-15);
    assert!((lr_at(111_999) - 0.0008).abs() < 1e-15);
    assert_eq!(plan.records[71_999].stage, 1);
    assert_eq!(plan.records[72_000].stage, 2);
}

/// Average clips per iteration (in units of B) of the default design,
/// enumerated directly from the shape factors.
fn enumerated_average_multiplier() -> f64 {
    let long = [(0.25, R), (0.5, R), (0.5, 1.0), (1.0, 1.0)];
    let short = [0.5, R, 1.0];
    let mult = |tf: f64, hf: f64, sf: f64| {
        let eff = sf.min(hf);
        1.0 / (tf * eff * eff)
    };
    let mut cycling = 0.0;
    for &(tf, hf) in &long {
        for &sf in &short {
            cycling += mult(tf, hf, sf);
        }
    }
    cycling /= (long.len() * short.len()) as f64;
    let finetune: f64 = short.iter().map(|&sf| mult(1.0, 1.0, sf)).sum::<f64>() / 3.0;
    (92.0 * cycling + 20.0 * finetune) / 112.0
}

#[test]
fn default_multigrid_iteration_ratio() {
    let avg = enumerated_average_multiplier();
    assert!((avg - (92.0 * (69.0 / 12.0) + 20.0 * (7.0 / 3.0)) / 112.0).abs() < 1e-9);
    let expected_iters = 1.5 * 112_000.0 / avg;

    let plan = compile(&PlanConfig::kinetics_multigrid()).unwrap();
    let n = plan.len() as f64;
    assert!((n - expected_iters).abs() / expected_iters < 0.005, "{n} vs {expected_iters}");
    let ratio = 112_000.0 / n;
    assert!((3.3..=3.5).contains(&ratio), "ratio {ratio}");
    assert_eq!(plan.summary.iteration_ratio_vs_baseline, ratio);
}

#[test]
fn long_cycle_lr_scaling_after_warmup() {
    let plan = compile(&PlanConfig::kinetics_multigrid()).unwrap();
    let warm = (16_000.0 * plan.len() as f64 / 112_000.0).round() as usize;
    let rec = plan
        .records
        .iter()
        .find(|r| r.iter >= warm && r.long_idx == Some(0) && r.stage == 0)
        .or_else(|| plan.records.iter().find(|r| r.long_idx == Some(0) && r.stage == 1))
        .unwrap();
    let stage_lr = [0.8, 0.08, 0.008][rec.stage];
    assert!((rec.lr - 8.0 * stage_lr).abs() < 1e-12);
    // Stage 0's first shape ends before warmup does at this scale; check the
    // post-warmup multiplier on shape 1 of stage 0 as well.
    let r1 = plan
        .records
        .iter()
        .find(|r| r.iter >= warm && r.stage == 0 && r.long_idx == Some(1))
        .unwrap();
    assert!((r1.lr - 4.0 * 0.8).abs() < 1e-12);
}

#[test]
fn long_idx_zero_at_lr_08_gives_64() {
    // A recipe short enough on warmup that stage 0's first shape is post-warmup.
    let mut cfg = PlanConfig::kinetics_multigrid();
    cfg.lr.warmup_iters = 0;
    let plan = compile(&cfg).unwrap();
    let r = &plan.records[0];
    assert_eq!(r.long_idx, Some(0));
    assert_eq!(r.lr, 6.4);
}

#[test]
fn fine_tune_halves_and_shape() {
    let plan = compile(&PlanConfig::kinetics_multigrid()).unwrap();
    let ft: Vec<_> = plan.records.iter().filter(|r| r.phase == Phase::Finetune).collect();
    assert!(!ft.is_empty());
    let half = ft.len() / 2;
    for (k, r) in ft.iter().enumerate() {
        assert_eq!(r.shape.t, 32);
        assert_eq!(r.long_idx, None);
        assert!(r.short_m.is_some());
        let want = if k < half { (2, 0.008) } else { (3, 0.0008) };
        assert_eq!(r.lr_stage, want.0);
        assert!((r.lr - want.1).abs() < 1e-15);
    }
}

#[test]
fn bn_groups_follow_short_multiplier() {
    let plan = compile(&PlanConfig::kinetics_multigrid()).unwrap();
    for r in &plan.records {
        let want = 8 * r.short_multiplier as usize;
        assert_eq!(r.bn_group, want);
        assert!([8, 16, 32].contains(&r.bn_group));
        assert_eq!(r.shape.b % r.bn_group, 0);
    }
}

#[test]
fn sample_ranges_follow_shape() {
    let plan = compile(&PlanConfig::kinetics_multigrid()).unwrap();
    for r in &plan.records {
        let s = &r.sample_ranges;
        assert_eq!(s.short_side_max, 340.0);
        assert_eq!(s.short_side_min, (256.0 * r.shape.h as f64 / 224.0).round());
        assert_eq!(s.t_stride_min, 2.0);
        assert_eq!(s.t_stride_max, 2.0 * 32.0 / r.shape.t as f64);
    }
    let h112 = plan.records.iter().find(|r| r.shape.h == 112).unwrap();
    assert_eq!(h112.sample_ranges.short_side_min, 128.0);
    let t8 = plan.records.iter().find(|r| r.shape.t == 8).unwrap();
    assert_eq!(t8.sample_ranges.t_stride_max, 8.0);
}

#[test]
fn single_cycle_spans_cycling_stages() {
    let mut cfg = PlanConfig::kinetics_multigrid();
    cfg.cycles.long_design = LongDesign::SingleCycle;
    let plan = compile(&cfg).unwrap();
    let cyc: Vec<_> = plan.records.iter().filter(|r| r.phase == Phase::Cycling).collect();
    let idx: Vec<usize> = cyc.iter().map(|r| r.long_idx.unwrap()).collect();
    assert!(idx.windows(2).all(|w| w[0] <= w[1]));
    let counts: Vec<usize> = (0..4).map(|k| idx.iter().filter(|&&i| i == k).count()).collect();
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    assert!(hi - lo <= 1, "{counts:?}");
    // shape blocks cross LR stage boundaries
    assert!(cyc.iter().any(|r| r.long_idx == Some(0) && r.stage == 1) || cyc.iter().any(|r| r.long_idx == Some(1) && r.stage == 0));

    cfg.cycles.finetune = false;
    let plan = compile(&cfg).unwrap();
    assert!(plan.records.iter().all(|r| r.phase == Phase::Cycling));
}

#[test]
fn cosine_variant_follows_curve() {
    let mut cfg = PlanConfig::kinetics_multigrid();
    cfg.lr.kind = LrKind::Cosine;
    cfg.lr.warmup_iters = 0;
    let plan = compile(&cfg).unwrap();
    let n = plan.len() as f64;
    for r in plan.records.iter().step_by(997) {
        let curve = 0.8 * 0.5 * (1.0 + (std::f64::consts::PI * r.iter as f64 / n).cos());
        assert!((r.lr - curve * r.long_multiplier).abs() < 1e-12);
        assert_eq!(r.lr_stage, r.stage);
    }
}

#[test]
fn config_errors_name_keys() {
    let mut cfg = PlanConfig::kinetics_multigrid();
    cfg.lr.stages.truncate(1);
    cfg.lr.stages[0].length = 112_000;
    match compile(&cfg) {
        Err(Error::Config { key, .. }) => assert!(key.contains("stages"), "{key}"),
        other => panic!("expected config error, got {other:?}"),
    }
    // Without fine-tuning one stage is acceptable.
    cfg.cycles = CycleConfig::baseline();
    assert!(compile(&cfg).is_ok());

    let mut cfg = PlanConfig::kinetics_multigrid();
    cfg.lr = LrSchedule::stepwise(&[40, 2, 40, 20], 0.1, 0.1, 0, 0.01);
    cfg.cycles.epoch_multiplier = 1.0;
    match compile(&cfg) {
        Err(Error::Config { key, message }) => {
            assert_eq!(key, "lr.stages");
            assert!(message.contains("at least 4"), "{message}");
        }
        other => panic!("expected config error, got {other:?}"),
    }

    let text = serde_json::to_string(&PlanConfig::kinetics_baseline()).unwrap();
    let bad = text.replacen("\"dataset_size\"", "\"bogus_key\":1,\"dataset_size\"", 1);
    let err = PlanConfig::from_json(&bad).unwrap_err().to_string();
    assert!(err.contains("bogus_key"), "{err}");
    assert_eq!(PlanConfig::from_json(&text).unwrap(), PlanConfig::kinetics_baseline());
}

#[test]
fn jsonl_export_fields() {
    let mut cfg = PlanConfig::kinetics_multigrid();
    cfg.lr = LrSchedule::stepwise(&[40, 30, 20, 20], 0.1, 0.1, 10, 0.01);
    cfg.dataset_size = 5000;
    let plan = compile(&cfg).unwrap();
    let mut out = Vec::new();
    write_jsonl(&mut out, &plan).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), plan.len());
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let keys: Vec<&str> = first.as_object().unwrap().keys().map(|s| s.as_str()).collect();
    for k in ["iter", "phase", "long_idx", "short_m", "b", "t", "h", "w", "lr", "bn_group", "lr_stage", "cum_clips", "epoch"] {
        assert!(keys.contains(&k), "missing {k}");
    }
    assert_eq!(first["phase"], "cycling");
    let last: RecordLine = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(last.cum_clips, plan.total_clips());
    assert!((last.epoch - plan.summary.epochs).abs() < 1e-12);
}

// ---- property tests ----------------------------------------------------------

fn arb_config() -> impl Strategy<Value = PlanConfig> {
    (
        prop::sample::select(vec![8usize, 16, 24, 64, 512]),
        prop::sample::select(vec![8usize, 16, 32, 64]),
        prop::sample::select(vec![32usize, 48, 64, 112, 224]),
        prop::collection::vec(40usize..2000, 2..6),
        0.5f64..2.5,
        any::<bool>(),
        any::<bool>(),
        prop::sample::select(vec![LongDesign::MultiCycle, LongDesign::SingleCycle]),
        0usize..20,
    )
        .prop_map(|(b, t, h, lengths, mult, long, short, design, warm_pct)| {
            let total: usize = lengths.iter().sum();
            PlanConfig {
                base_shape: Shape4D::new(b, t, h, h),
                dataset_size: 10_000,
                lr: LrSchedule::stepwise(&lengths, 0.4, 0.1, total * warm_pct / 100, 0.001),
                cycles: CycleConfig {
                    long_enabled: long,
                    short_enabled: short,
                    long_design: design,
                    epoch_multiplier: mult,
                    ..CycleConfig::default()
                },
                ranges: RangePolicy::default(),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn plan_invariants(cfg in arb_config()) {
        let plan = match compile(&cfg) {
            Ok(p) => p,
            Err(Error::Config { key, .. }) => { prop_assert_eq!(key, "lr.stages"); return Ok(()); }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let base = cfg.base_shape;
        let vol = base.volume() as f64;
        let l = cfg.lr.stages.len();
        let any = cfg.cycles.long_enabled || cfg.cycles.short_enabled;

        for (i, r) in plan.records.iter().enumerate() {
            prop_assert_eq!(r.iter, i);
            // FLOPs constancy
            let err = (r.shape.volume() as f64 - vol).abs() / vol;
            prop_assert!(err <= 0.10, "record {} shape {} err {}", i, r.shape, err);
            // BN group divides the batch
            prop_assert_eq!(r.shape.b % r.bn_group, 0);
            // short-cycle periodicity
            if cfg.cycles.short_enabled {
                prop_assert_eq!(r.short_m, Some(i % 3));
            } else {
                prop_assert_eq!(r.short_m, None);
            }
            prop_assert!(r.lr > 0.0);
        }

        // epoch fidelity
        let target = cfg.cycles.epoch_multiplier * cfg.lr.base_total_iters() as f64 * base.b as f64;
        let max_b = plan.records.iter().map(|r| r.shape.b).max().unwrap() as f64;
        prop_assert!((plan.total_clips() as f64 - target).abs() <= 3.0 * max_b);

        // LR constant per (lr_stage, long_idx) after warmup; stage LRs non-increasing
        let warm = (cfg.lr.warmup_iters as f64 * plan.len() as f64 / cfg.lr.base_total_iters() as f64).round() as usize;
        let mut seen: std::collections::HashMap<(usize, Option<usize>, usize), f64> = Default::default();
        for r in plan.records.iter().filter(|r| r.iter >= warm) {
            let key = (r.lr_stage, r.long_idx, r.phase as usize);
            let lr = *seen.entry(key).or_insert(r.lr);
            prop_assert_eq!(lr, r.lr);
            prop_assert_eq!(r.lr, cfg.lr.stages[r.lr_stage].lr * r.long_multiplier);
        }

        if any && cfg.cycles.finetune {
            let ft: Vec<_> = plan.records.iter().filter(|r| r.phase == Phase::Finetune).collect();
            let half = ft.len() / 2;
            for (k, r) in ft.iter().enumerate() {
                prop_assert_eq!(r.lr_stage, if k < half { l - 2 } else { l - 1 });
                prop_assert_eq!(r.shape.t, base.t);
            }
        }

        // one long cycle per stage, contiguous equal blocks
        if cfg.cycles.long_enabled && cfg.cycles.long_design == LongDesign::MultiCycle {
            for stage in 0..l - 1 {
                let idx: Vec<usize> = plan.records.iter()
                    .filter(|r| r.stage == stage && r.phase == Phase::Cycling)
                    .map(|r| r.long_idx.unwrap()).collect();
                prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
                let counts: Vec<usize> = (0..4).map(|k| idx.iter().filter(|&&i| i == k).count()).collect();
                prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
                prop_assert!(counts.iter().all(|&c| c >= 1));
            }
        }
    }

    #[test]
    fn baseline_identity(cfg in arb_config()) {
        let cfg = cfg.baseline_of();
        let plan = compile(&cfg).unwrap();
        prop_assert_eq!(plan.len(), cfg.lr.base_total_iters());
        let mut boundary = 0usize;
        let mut stage = 0usize;
        for r in &plan.records {
            while r.iter >= boundary + cfg.lr.stages[stage].length { boundary += cfg.lr.stages[stage].length; stage += 1; }
            prop_assert_eq!(r.shape, cfg.base_shape);
            prop_assert_eq!(r.stage, stage);
            let lr = cfg.lr.stages[stage].lr;
            let want = if r.iter < cfg.lr.warmup_iters {
                cfg.lr.warmup_start_lr + (lr - cfg.lr.warmup_start_lr) * r.iter as f64 / cfg.lr.warmup_iters as f64
            } else { lr };
            prop_assert_eq!(r.lr, want);
        }
        prop_assert_eq!(plan.summary.iteration_ratio_vs_baseline, 1.0);
        prop_assert_eq!(plan.summary.flops_proxy_ratio, 1.0);
    }
}

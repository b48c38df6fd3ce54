//! Loss oracles, metric cross-checks, optimizer schedule, and training-loop
//! accounting.

mod common;

use common::check_grad;
use dseg::gradcheck::{seeded_tensor, seeded_values};
use dseg::loss::{bce_loss, dice_metric, soft_dice_loss, total_loss};
use dseg::model::{build_model, Arch, Model, ModelSpec};
use dseg::optim::lr_at_epoch;
use dseg::tensor::{Ctx, Tensor};
use dseg::train::{evaluate, fit, Sample, TrainConfig, TrainError};

fn probs(seed: u64, shape: &[usize]) -> Tensor<f64> {
    // Values in (0.05, 0.95): away from the clamp so FD stays smooth.
    let t = seeded_tensor::<f64>(seed, shape);
    t.map_data(|v| *v = 0.5 + 0.45 * *v);
    t
}

fn binary(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let t = seeded_tensor::<f64>(seed, shape);
    t.map_data(|v| *v = if *v > 0.0 { 1.0 } else { 0.0 });
    t
}

// ---------------------------------------------------------------------------
// loss oracles
// ---------------------------------------------------------------------------

#[test]
fn dice_perfect_prediction_scores_one() {
    let ctx = Ctx::eval();
    let t = binary(1, &[1, 1, 4, 4]);
    let d = soft_dice_loss(&ctx, &t, &t, 0.0).unwrap();
    assert!((d.item() - 1.0).abs() < 1e-12);
}

#[test]
fn dice_hand_computed_example() {
    // pred [0.5, 0.5], target [1, 0], smooth 1:
    // (2*0.5 + 1) / (1 + 1 + 1) = 2/3
    let ctx = Ctx::eval();
    let p = Tensor::from_vec(&[2], vec![0.5f64, 0.5]).unwrap();
    let t = Tensor::from_vec(&[2], vec![1.0f64, 0.0]).unwrap();
    let d = soft_dice_loss(&ctx, &p, &t, 1.0).unwrap();
    assert!((d.item() - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn dice_smooth_keeps_empty_pair_finite() {
    let ctx = Ctx::eval();
    let z = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
    let d = soft_dice_loss(&ctx, &z, &z, 1.0).unwrap();
    assert!((d.item() - 1.0).abs() < 1e-12, "empty/empty with smoothing is a perfect score");
}

#[test]
fn bce_half_probability_is_ln_two() {
    let ctx = Ctx::eval();
    let p = Tensor::full(&[1, 1, 3, 3], 0.5f64);
    let t = binary(2, &[1, 1, 3, 3]);
    let b = bce_loss(&ctx, &p, &t).unwrap();
    assert!((b.item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn bce_clamp_bounds_extreme_predictions() {
    let ctx = Ctx::eval();
    let p = Tensor::zeros(&[4]);
    let t = Tensor::full(&[4], 1.0f64);
    let b = bce_loss(&ctx, &p, &t).unwrap();
    // -ln(1e-7), not infinity.
    assert!((b.item() - (-(1e-7f64).ln())).abs() < 1e-9);
}

#[test]
fn total_loss_frozen_value() {
    // target all zeros, pred all 0.5, smooth 0:
    // dice = 0, bce = ln 2, total = 1.25 + 0.95*ln 2 = 1.908490...
    let ctx = Ctx::eval();
    let p = Tensor::full(&[1, 1, 8, 8], 0.5f64);
    let t = Tensor::zeros(&[1, 1, 8, 8]);
    let l = total_loss(&ctx, &p, &t, 1.25, 0.95, 0.0).unwrap();
    assert!((l.item() - 1.908490).abs() < 1e-5, "got {}", l.item());
}

#[test]
fn loss_rejects_bad_targets() {
    let ctx = Ctx::<f64>::eval();
    let p = Tensor::full(&[4], 0.5);
    let t = Tensor::full(&[4], 0.3);
    assert!(soft_dice_loss(&ctx, &p, &t, 1.0).is_err());
    assert!(bce_loss(&ctx, &p, &t).is_err());
    let t = Tensor::zeros(&[5]);
    assert!(total_loss(&ctx, &p, &t, 1.0, 1.0, 1.0).is_err(), "shape mismatch must fail");
}

#[test]
fn loss_gradchecks() {
    let p = probs(3, &[1, 1, 4, 4]);
    let t = binary(4, &[1, 1, 4, 4]);
    check_grad(&p, |ctx| soft_dice_loss(ctx, &p, &t, 1.0).unwrap(), 1e-6, "soft_dice");
    p.zero_grad();
    check_grad(&p, |ctx| bce_loss(ctx, &p, &t).unwrap(), 1e-6, "bce");
    p.zero_grad();
    check_grad(
        &p,
        |ctx| total_loss(ctx, &p, &t, 1.25, 0.95, 1.0).unwrap(),
        1e-6,
        "total_loss",
    );
}

#[test]
fn total_loss_through_model_gradcheck() {
    let model: Model<f64> = build_model(&ModelSpec::with_base_width(Arch::Proposed, 2), 5).unwrap();
    let x = seeded_tensor::<f64>(6, &[1, 1, 32, 32]);
    let t = binary(7, &[1, 1, 32, 32]);
    let forward = |ctx: &Ctx<'_, f64>| {
        let pred = model.forward(ctx, &x).unwrap();
        total_loss(ctx, &pred, &t, 1.25, 0.95, 1.0).unwrap()
    };
    for name in ["head/conv/bias", "stem/prelu/slope", "enc3/fuse/bias"] {
        let p = model.params.get(name).unwrap();
        p.zero_grad();
        check_grad(p, forward, 1e-4, name);
    }
}

// ---------------------------------------------------------------------------
// dice metric vs brute force
// ---------------------------------------------------------------------------

#[test]
fn dice_metric_matches_brute_force_counting() {
    for seed in 0..100u64 {
        let p = seeded_values(seed * 2 + 1, 256);
        let t: Vec<f64> = seeded_values(seed * 2 + 2, 256)
            .iter()
            .map(|&v| if v > 0.2 { 1.0 } else { 0.0 })
            .collect();
        let p: Vec<f64> = p.iter().map(|v| 0.5 + 0.5 * v).collect();
        let got = dice_metric(&p, &t, 0.5);

        let mut inter = 0usize;
        let mut a = 0usize;
        let mut b = 0usize;
        for i in 0..256 {
            let pa = p[i] > 0.5;
            let tb = t[i] == 1.0;
            inter += (pa && tb) as usize;
            a += pa as usize;
            b += tb as usize;
        }
        let want = if a + b == 0 { 1.0 } else { 2.0 * inter as f64 / (a + b) as f64 };
        assert_eq!(got, want, "seed {seed}");
    }
}

#[test]
fn dice_metric_edge_cases() {
    assert_eq!(dice_metric::<f64>(&[0.1, 0.2], &[0.0, 0.0], 0.5), 1.0);
    assert_eq!(dice_metric::<f64>(&[0.9, 0.9], &[0.0, 0.0], 0.5), 0.0);
    assert_eq!(dice_metric::<f64>(&[0.9, 0.1], &[1.0, 0.0], 0.5), 1.0);
}

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

#[test]
fn lr_schedule_through_epoch_150() {
    let (lr0, gamma, step): (f64, f64, usize) = (1e-4, 0.9, 10);
    for epoch in 0..150 {
        let want = lr0 * gamma.powi((epoch / step) as i32);
        assert_eq!(lr_at_epoch(epoch, lr0, gamma, step), want);
    }
    assert!((lr_at_epoch(10, lr0, gamma, step) - 9e-5).abs() < 1e-18);
    assert!((lr_at_epoch(149, lr0, gamma, step) - lr0 * 0.9f64.powi(14)).abs() < 1e-18);
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

fn tiny_dataset(n: usize, seed: u64) -> Vec<Sample<f32>> {
    (0..n)
        .map(|i| {
            let image = seeded_tensor::<f32>(seed + i as u64, &[1, 1, 32, 32]);
            image.map_data(|v| *v = 0.5 + 0.5 * *v);
            let mask = seeded_tensor::<f32>(seed + 100 + i as u64, &[1, 1, 32, 32]);
            mask.map_data(|v| *v = if *v > 0.0 { 1.0 } else { 0.0 });
            Sample { image, mask }
        })
        .collect()
}

fn tiny_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, lr0: 1e-3, ..TrainConfig::default() }
}

#[test]
fn fit_step_accounting() {
    let model: Model<f32> = build_model(&ModelSpec::with_base_width(Arch::Unet, 2), 0).unwrap();
    let data = tiny_dataset(4, 0);
    let val = tiny_dataset(1, 50);
    let mut events = 0;
    let cfg = TrainConfig { batch_size: 2, ..tiny_cfg(3) };
    let report = fit(&model, &data, &val, &cfg, |_| {
        events += 1;
        true
    })
    .unwrap();
    assert_eq!(report.epochs_run, 3);
    assert_eq!(report.optimizer_steps, 6, "4 samples / batch 2 * 3 epochs");
    assert_eq!(events, 3);
    assert!(report.final_train_loss.is_finite());
}

#[test]
fn fit_zero_epochs_is_a_no_op() {
    let model: Model<f32> = build_model(&ModelSpec::with_base_width(Arch::Unet, 2), 0).unwrap();
    let before: Vec<Vec<f32>> = model.params.iter().map(|(_, t, _)| t.to_vec()).collect();
    let data = tiny_dataset(1, 0);
    let report = fit(&model, &data, &data, &tiny_cfg(0), |_| true).unwrap();
    assert_eq!(report.epochs_run, 0);
    assert_eq!(report.optimizer_steps, 0);
    for ((_, t, _), old) in model.params.iter().zip(&before) {
        assert_eq!(&t.to_vec(), old);
    }
}

#[test]
fn fit_early_stop_via_sink() {
    let model: Model<f32> = build_model(&ModelSpec::with_base_width(Arch::Unet, 2), 0).unwrap();
    let data = tiny_dataset(1, 0);
    let report = fit(&model, &data, &data, &tiny_cfg(10), |_| false).unwrap();
    assert_eq!(report.epochs_run, 1);
}

#[test]
fn fit_rejects_empty_train_set() {
    let model: Model<f32> = build_model(&ModelSpec::with_base_width(Arch::Unet, 2), 0).unwrap();
    let err = fit(&model, &[], &[], &tiny_cfg(1), |_| true).unwrap_err();
    assert!(matches!(err, TrainError::EmptyDataset(_)));
}

#[test]
fn fit_detects_non_finite_loss() {
    let model: Model<f32> = build_model(&ModelSpec::with_base_width(Arch::Unet, 2), 0).unwrap();
    let w = model.params.get("head/conv/weight").unwrap();
    w.set_data(&vec![f32::NAN; w.numel()]);
    let data = tiny_dataset(1, 0);
    let err = fit(&model, &data, &data, &tiny_cfg(1), |_| true).unwrap_err();
    assert!(matches!(err, TrainError::NonFiniteLoss { epoch: 0, batch: 0 }));
}

#[test]
fn fit_is_reproducible_for_fixed_seed() {
    let run = || {
        let model: Model<f32> =
            build_model(&ModelSpec::with_base_width(Arch::Unet, 2), 9).unwrap();
        let data = tiny_dataset(3, 1);
        let val = tiny_dataset(1, 60);
        let mut log = Vec::new();
        fit(&model, &data, &val, &tiny_cfg(2), |e| {
            log.push((e.epoch, e.lr, e.train_loss, e.val_dsc));
            true
        })
        .unwrap();
        let params: Vec<Vec<f32>> = model.params.iter().map(|(_, t, _)| t.to_vec()).collect();
        (log, params)
    };
    let (log_a, params_a) = run();
    let (log_b, params_b) = run();
    assert_eq!(log_a, log_b);
    for (a, b) in params_a.iter().zip(&params_b) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn fit_restores_best_validation_epoch() {
    let model: Model<f32> = build_model(&ModelSpec::with_base_width(Arch::Unet, 2), 2).unwrap();
    let data = tiny_dataset(2, 3);
    let val = tiny_dataset(1, 70);
    let mut best_seen = f64::NEG_INFINITY;
    let report = fit(&model, &data, &val, &tiny_cfg(4), |e| {
        best_seen = best_seen.max(e.val_dsc);
        true
    })
    .unwrap();
    assert_eq!(report.best_val_dsc, best_seen);
    // The restored parameters reproduce the best epoch's validation score.
    let (mean, scores) = evaluate(&model, &val, 0.5).unwrap();
    assert_eq!(scores.len(), 1);
    assert!((mean - report.best_val_dsc).abs() < 1e-12);
}

#[test]
fn evaluate_rejects_empty_dataset() {
    let model: Model<f32> = build_model(&ModelSpec::with_base_width(Arch::Unet, 2), 0).unwrap();
    assert!(matches!(evaluate(&model, &[], 0.5), Err(TrainError::EmptyDataset(_))));
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { lambda_dice: 0.0, ..TrainConfig::default() },
        TrainConfig { beta1: 0.999, beta2: 0.9, ..TrainConfig::default() },
        TrainConfig { lr_gamma: 0.0, ..TrainConfig::default() },
        TrainConfig { threshold: 1.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { lr_step: 0, ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?} should be rejected");
    }
}

#[test]
fn default_config_matches_published_values() {
    let c = TrainConfig::default();
    assert_eq!(c.lambda_dice, 1.25);
    assert_eq!(c.lambda_bce, 0.95);
    assert_eq!(c.lr0, 1e-4);
    assert_eq!(c.weight_decay, 1e-6);
    assert_eq!(c.beta1, 0.9);
    assert_eq!(c.beta2, 0.999);
    assert_eq!(c.adam_eps, 1e-8);
    assert_eq!(c.lr_gamma, 0.9);
    assert_eq!(c.lr_step, 10);
    assert_eq!(c.epochs, 150);
    assert_eq!(c.batch_size, 1);
}

//! Composite segmentation loss and the dice-score metric.
//!
//! L_total = lambda_dice * (1 - L_dice) + lambda_bce * L_bce, with the soft
//! dice similarity computed over the whole batch and BCE averaged per pixel.

use crate::tensor::{maybe_record, Ctx, Elem, Tensor, TensorError};

/// Clamp bound for BCE probabilities.
pub const BCE_EPS: f64 = 1e-7;

fn check_pair<T: Elem>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(), TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::DimensionMismatch(format!(
            "prediction shape {:?} vs target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    for &v in target.data().iter() {
        if v != T::zero() && v != T::one() {
            return Err(TensorError::InvalidValue(format!(
                "target must be binary {{0,1}}, found {v:?}"
            )));
        }
    }
    Ok(())
}

/// Soft dice similarity (2*sum(p*t) + smooth) / (sum(p) + sum(t) + smooth),
/// over the whole batch. Returns the similarity; the loss term is 1 - dice.
pub fn soft_dice_loss<T: Elem>(
    ctx: &Ctx<'_, T>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    smooth: f64,
) -> Result<Tensor<T>, TensorError> {
    check_pair(pred, target)?;
    let s = T::from_f64(smooth);
    let (mut inter, mut sum_p, mut sum_t) = (T::zero(), T::zero(), T::zero());
    {
        let p = pred.data();
        let t = target.data();
        for i in 0..p.len() {
            inter = inter + p[i] * t[i];
            sum_p = sum_p + p[i];
            sum_t = sum_t + t[i];
        }
    }
    let denom = sum_p + sum_t + s;
    let dice = (T::from_f64(2.0) * inter + s) / denom;
    let out = Tensor::scalar(dice);
    let (pi, ti) = (pred.clone(), target.clone());
    maybe_record(ctx, &[pred, target], &out, move |dy| {
        // d dice / d p_i = (2*t_i*denom - (2*inter + s)) / denom^2
        let t = ti.data();
        let num = T::from_f64(2.0) * inter + s;
        let d2 = denom * denom;
        let dp: Vec<T> = t
            .iter()
            .map(|&ti| dy[0] * (T::from_f64(2.0) * ti * denom - num) / d2)
            .collect();
        drop(t);
        pi.accumulate_grad(&dp);
    });
    Ok(out)
}

/// Mean binary cross-entropy with probabilities clamped to
/// [BCE_EPS, 1 - BCE_EPS].
pub fn bce_loss<T: Elem>(
    ctx: &Ctx<'_, T>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    check_pair(pred, target)?;
    let lo = T::from_f64(BCE_EPS);
    let hi = T::one() - lo;
    let n = pred.numel();
    let n_t = T::from_usize(n);
    let mut total = T::zero();
    {
        let p = pred.data();
        let t = target.data();
        for i in 0..n {
            let pc = p[i].max(lo).min(hi);
            total = total - (t[i] * pc.ln() + (T::one() - t[i]) * (T::one() - pc).ln());
        }
    }
    let out = Tensor::scalar(total / n_t);
    let (pi, ti) = (pred.clone(), target.clone());
    maybe_record(ctx, &[pred, target], &out, move |dy| {
        let p = pi.data();
        let t = ti.data();
        let mut dp = vec![T::zero(); n];
        for i in 0..n {
            // Zero gradient through the clamp when saturated.
            if p[i] > lo && p[i] < hi {
                dp[i] = dy[0] * (p[i] - t[i]) / (p[i] * (T::one() - p[i]) * n_t);
            }
        }
        drop(p);
        drop(t);
        pi.accumulate_grad(&dp);
    });
    Ok(out)
}

/// lambda_dice * (1 - dice) + lambda_bce * bce.
pub fn total_loss<T: Elem>(
    ctx: &Ctx<'_, T>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    lambda_dice: f64,
    lambda_bce: f64,
    smooth: f64,
) -> Result<Tensor<T>, TensorError> {
    let dice = soft_dice_loss(ctx, pred, target, smooth)?;
    let bce = bce_loss(ctx, pred, target)?;
    let dice_term = crate::tensor::ops::affine(ctx, &dice, -lambda_dice, lambda_dice);
    let bce_term = crate::tensor::ops::affine(ctx, &bce, lambda_bce, 0.0);
    crate::tensor::ops::add(ctx, &dice_term, &bce_term)
}

/// Hard dice score 2|A∩B|/(|A|+|B|) after thresholding the prediction.
/// Both masks empty scores 1.0.
pub fn dice_metric<T: Elem>(pred: &[T], target: &[T], threshold: f64) -> f64 {
    assert_eq!(pred.len(), target.len());
    let thr = T::from_f64(threshold);
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for i in 0..pred.len() {
        let pa = pred[i] > thr;
        let tb = target[i] > T::from_f64(0.5);
        if pa {
            a += 1;
        }
        if tb {
            b += 1;
        }
        if pa && tb {
            inter += 1;
        }
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

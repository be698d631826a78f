//! Masked sigmoid and softmax cross-entropy losses with their gradients.

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor4;

/// A scalar loss value with its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct Loss {
    pub value: f64,
    pub grad: Tensor4,
}

/// Binary cross-entropy on logits, averaged over pixels where `mask > 0.5`.
///
/// An all-zero mask yields loss 0 with a zero gradient.
pub fn bce_loss(logits: &Tensor4, targets: &Tensor4, mask: &Tensor4) -> Result<Loss> {
    logits.check_same_shape(targets, "bce_loss targets")?;
    logits.check_same_shape(mask, "bce_loss mask")?;
    let count = mask.data().iter().filter(|&&m| m > 0.5).count();
    let mut grad = Tensor4::zeros(logits.shape());
    if count == 0 {
        return Ok(Loss { value: 0.0, grad });
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for (i, ((&x, &t), &m)) in logits
        .data()
        .iter()
        .zip(targets.data())
        .zip(mask.data())
        .enumerate()
    {
        if m <= 0.5 {
            continue;
        }
        if !(0.0..=1.0).contains(&t) {
            return arg_err(format!("bce target {} outside [0, 1]", t));
        }
        total += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        grad.data_mut()[i] = (crate::tensor::sigmoid_scalar(x) - t) * inv;
    }
    Ok(Loss {
        value: total * inv,
        grad,
    })
}

/// Per-pixel softmax cross-entropy over the channel axis.
///
/// `targets` holds one class index per (n, y, x) pixel in row-major order; pixels where
/// `valid_mask` (shape `(n, 1, h, w)`) is not set are ignored and may carry any label.
pub fn softmax_ce_loss(logits: &Tensor4, targets: &[i32], valid_mask: &Tensor4) -> Result<Loss> {
    let [n, c, h, w] = logits.shape();
    if valid_mask.shape() != [n, 1, h, w] {
        return shape_err(format!(
            "softmax_ce_loss: mask {:?} for logits {:?}",
            valid_mask.shape(),
            logits.shape()
        ));
    }
    if targets.len() != n * h * w {
        return shape_err(format!(
            "softmax_ce_loss: {} targets for {} pixels",
            targets.len(),
            n * h * w
        ));
    }
    let hw = h * w;
    let count = valid_mask.data().iter().filter(|&&m| m > 0.5).count();
    let mut grad = Tensor4::zeros(logits.shape());
    if count == 0 {
        return Ok(Loss { value: 0.0, grad });
    }
    let inv = 1.0 / count as f64;
    let data = logits.data();
    let mut total = 0.0;
    let mut probs = vec![0.0; c];
    for ni in 0..n {
        for p in 0..hw {
            if valid_mask.data()[ni * hw + p] <= 0.5 {
                continue;
            }
            let t = targets[ni * hw + p];
            if t < 0 || t as usize >= c {
                return arg_err(format!("class target {} outside [0, {})", t, c));
            }
            let base = ni * c * hw + p;
            let mut max = f64::NEG_INFINITY;
            for k in 0..c {
                max = max.max(data[base + k * hw]);
            }
            let mut z = 0.0;
            for (k, pk) in probs.iter_mut().enumerate() {
                *pk = (data[base + k * hw] - max).exp();
                z += *pk;
            }
            total += z.ln() + max - data[base + t as usize * hw];
            let g = grad.data_mut();
            for (k, pk) in probs.iter().enumerate() {
                let target = if k == t as usize { 1.0 } else { 0.0 };
                g[base + k * hw] = (pk / z - target) * inv;
            }
        }
    }
    Ok(Loss {
        value: total * inv,
        grad,
    })
}

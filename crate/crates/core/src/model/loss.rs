//! Stage losses and their gradients w.r.t. the head output.

use super::{bounded_log_delay, sigmoid, LOG_DELAY_BOUND};

/// Mean loss of one step and the number of terms in the mean.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLoss {
    pub loss: f64,
    pub count: usize,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy on logits. `pos_weight` scales the positive
/// term (1.0 for plain BCE).
pub fn bce_with_logits(logits: &[f64], labels: &[bool], pos_weight: f64) -> (StepLoss, Vec<f64>) {
    assert_eq!(logits.len(), labels.len());
    let n = logits.len();
    if n == 0 {
        return (StepLoss::default(), Vec::new());
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&x, &y) in logits.iter().zip(labels) {
        let p = sigmoid(x);
        if y {
            loss += pos_weight * softplus(-x);
            grad.push(pos_weight * (p - 1.0) / n as f64);
        } else {
            loss += softplus(x);
            grad.push(p / n as f64);
        }
    }
    (
        StepLoss {
            loss: loss / n as f64,
            count: n,
        },
        grad,
    )
}

/// Mean squared error between `5·tanh(pre)` and `log1p(delay)` over truly
/// delayed targets only. On-time targets get an exactly zero gradient.
pub fn masked_mse(pre: &[f64], true_delay: &[f64]) -> (StepLoss, Vec<f64>) {
    assert_eq!(pre.len(), true_delay.len());
    let count = true_delay.iter().filter(|&&d| d > 0.0).count();
    let mut grad = vec![0.0; pre.len()];
    if count == 0 {
        return (StepLoss::default(), grad);
    }
    let mut loss = 0.0;
    for ((&p, &d), g) in pre.iter().zip(true_delay).zip(&mut grad) {
        if d > 0.0 {
            let diff = bounded_log_delay(p) - d.ln_1p();
            loss += diff * diff;
            let t = p.tanh();
            *g = 2.0 * diff * LOG_DELAY_BOUND * (1.0 - t * t) / count as f64;
        }
    }
    (
        StepLoss {
            loss: loss / count as f64,
            count,
        },
        grad,
    )
}

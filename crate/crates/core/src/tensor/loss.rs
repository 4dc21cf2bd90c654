use super::{CompensatedSum, Tensor};
use crate::error::{check_dim, invalid, Result};

/// Pixels carrying this label contribute neither loss nor gradient.
pub const IGNORE_LABEL: u16 = 255;

/// Per-pixel softmax cross-entropy, averaged over non-ignored pixels.
///
/// `labels` is `[n, h, w]` row-major. Returns the mean loss and its gradient
/// with respect to `logits`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u16]) -> Result<(f64, Tensor)> {
    let [n, classes, h, w] = logits.shape();
    let hw = h * w;
    check_dim("softmax_cross_entropy", "label count", n * hw, labels.len())?;
    if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= classes) {
        return invalid(
            "softmax_cross_entropy",
            format!("label {bad} outside [0, {classes}) and not the ignore label {IGNORE_LABEL}"),
        );
    }
    let counted = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    let mut grad = Tensor::zeros(logits.shape());
    if counted == 0 {
        return Ok((0.0, grad));
    }
    let norm = counted as f64;
    let data = logits.data();
    // Compensated so the loss is accurate to a few ulp, which finite-difference
    // checks on large maps depend on.
    let mut loss = CompensatedSum::default();
    let mut probs = vec![0.0; classes];
    for b in 0..n {
        for pix in 0..hw {
            let label = labels[b * hw + pix];
            if label == IGNORE_LABEL {
                continue;
            }
            let at = |k: usize| (b * classes + k) * hw + pix;
            let max = (0..classes).map(|k| data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, p) in probs.iter_mut().enumerate() {
                *p = (data[at(k)] - max).exp();
                sum += *p;
            }
            loss.add(sum.ln() - (data[at(label as usize)] - max));
            for (k, p) in probs.iter().enumerate() {
                let onehot = if k == label as usize { 1.0 } else { 0.0 };
                grad.data_mut()[at(k)] = (p / sum - onehot) / norm;
            }
        }
    }
    Ok((loss.total() / norm, grad))
}

use crate::error::{Error, Result};
use crate::math::prob::log_softmax_slice;
use crate::math::Tensor;

/// `-sum_c y_c log softmax(z)_c` for a soft label `y`.
pub fn soft_cross_entropy(logits: &Tensor, soft_label: &Tensor) -> Result<f64> {
    if logits.len() != soft_label.len() {
        return Err(Error::Shape(format!(
            "logits have {} entries, label has {}",
            logits.len(),
            soft_label.len()
        )));
    }
    Ok(soft_cross_entropy_slice(logits.data(), soft_label.data()))
}

pub(crate) fn soft_cross_entropy_slice(logits: &[f64], label: &[f64]) -> f64 {
    let logp = log_softmax_slice(logits);
    let loss: f64 = -label
        .iter()
        .zip(&logp)
        .filter(|(y, _)| **y != 0.0)
        .map(|(y, lp)| y * lp)
        .sum::<f64>();
    loss.max(0.0)
}

pub fn one_hot(class: usize, num_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_classes];
    v[class] = 1.0;
    v
}

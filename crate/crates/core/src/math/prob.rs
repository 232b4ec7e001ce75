use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Max-shifted softmax into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// `log softmax(z)_c = z_c - max - ln sum exp(z - max)`.
pub fn log_softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - max - lse).collect()
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 1 || logits.is_empty() {
        return Err(Error::Shape(format!(
            "softmax expects a nonempty vector, got {:?}",
            logits.shape()
        )));
    }
    Ok(Tensor::vector(softmax_slice(logits.data())))
}

/// Entropy of a slice assumed to be a valid distribution; `0 ln 0 = 0`.
pub fn entropy_slice(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

pub fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Distribution("empty vector".into()));
    }
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Distribution(format!("invalid entry {v}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::Distribution(format!("entries sum to {s}")));
    }
    Ok(())
}

pub fn entropy(p: &Tensor) -> Result<f64> {
    check_distribution(p.data())?;
    Ok(entropy_slice(p.data()).max(0.0))
}

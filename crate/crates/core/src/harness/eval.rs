//! Anytime evaluation and the classifier loss-landscape probe.

use crate::bsc::{predict_ensemble, BscState};
use crate::error::{Error, Result};
use crate::math::prob::log_softmax_slice;
use crate::math::rng::stream;
use crate::math::{RngState, Tensor};
use crate::network::{BranchedHeads, MlpModel};
use crate::stream::Dataset;

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Ensemble class probabilities (`B x C`) for a batch of inputs.
pub fn predict_inputs(model: &MlpModel, bsc: &BscState, inputs: &Tensor, rng: &mut RngState) -> Result<Tensor> {
    let features = model.encoder.forward(inputs)?;
    Ok(predict_ensemble(&features, &model.heads, bsc, rng)?.0)
}

/// Accuracy (percent) on every task up to `current_task`, grouping test
/// samples by the task owning their class. Tasks with no test samples and
/// tasks beyond `current_task` are `None`.
pub fn anytime_eval(
    model: &MlpModel,
    bsc: &BscState,
    test: &Dataset,
    class_to_task: &[Option<usize>],
    current_task: usize,
    num_tasks: usize,
    rng: &mut RngState,
) -> Result<Vec<Option<f64>>> {
    if current_task >= num_tasks {
        return Err(Error::Index(format!("task {current_task} outside {num_tasks} tasks")));
    }
    let probs = predict_inputs(model, bsc, &test.inputs, rng)?;
    let mut hit = vec![0usize; num_tasks];
    let mut total = vec![0usize; num_tasks];
    for (i, &y) in test.labels.iter().enumerate() {
        let Some(task) = class_to_task.get(y).copied().flatten() else {
            continue;
        };
        if task > current_task {
            continue;
        }
        total[task] += 1;
        if argmax(probs.row(i)) == y {
            hit[task] += 1;
        }
    }
    Ok((0..num_tasks)
        .map(|k| (k <= current_task && total[k] > 0).then(|| 100.0 * hit[k] as f64 / total[k] as f64))
        .collect())
}

/// Overall accuracy (percent) of the ensemble on a dataset.
pub fn dataset_accuracy(model: &MlpModel, bsc: &BscState, data: &Dataset, rng: &mut RngState) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let probs = predict_inputs(model, bsc, &data.inputs, rng)?;
    let hits = data
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(probs.row(*i)) == y)
        .count();
    Ok(100.0 * hits as f64 / data.len() as f64)
}

/// `points` evenly spaced step sizes on `[-radius, radius]`.
pub fn symmetric_grid(points: usize, radius: f64) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..points)
            .map(|i| -radius + 2.0 * radius * i as f64 / (points - 1) as f64)
            .collect(),
    }
}

/// Cross-entropy averaged over heads and samples for precomputed features.
pub fn head_average_loss(heads: &BranchedHeads, features: &Tensor, labels: &[usize]) -> Result<f64> {
    if features.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.rows()
        )));
    }
    let n = heads.num_heads();
    let mut total = 0.0;
    for h in 0..n {
        let logits = heads.logits(h, features);
        for (i, &y) in labels.iter().enumerate() {
            total -= log_softmax_slice(logits.row(i))[y];
        }
    }
    Ok(total / (n * labels.len()) as f64)
}

/// Loss along a random direction in each head's parameter space.
///
/// Each head gets a Gaussian direction rescaled to the Frobenius norm of that
/// head's weights and bias, so a step of `s` moves every head by a relative
/// amount `s`. The curve is averaged over one direction per seed. The encoder
/// is untouched, so features are computed once.
pub fn weight_landscape_probe(
    model: &MlpModel,
    data: &Dataset,
    grid: &[f64],
    seeds: &[u64],
) -> Result<Vec<(f64, f64)>> {
    if seeds.is_empty() {
        return Err(Error::Parameter("landscape probe needs at least one direction seed".into()));
    }
    let features = model.encoder.forward(&data.inputs)?;
    let mut curve = vec![0.0; grid.len()];
    for &seed in seeds {
        let root = RngState::new(seed);
        let mut dirs = Vec::with_capacity(model.heads.num_heads());
        for (h, head) in model.heads.heads.iter().enumerate() {
            let mut rng = root.substream(stream::PROBE, h as u64);
            let norm = (head.weight.norm().powi(2) + head.bias.norm().powi(2)).sqrt();
            if norm == 0.0 {
                return Err(Error::Numeric {
                    iteration: 0,
                    what: format!("head {h} has zero norm"),
                });
            }
            let dw: Vec<f64> = (0..head.weight.len()).map(|_| rng.gaussian()).collect();
            let db: Vec<f64> = (0..head.bias.len()).map(|_| rng.gaussian()).collect();
            let dn = dw.iter().chain(&db).map(|v| v * v).sum::<f64>().sqrt();
            let k = norm / dn;
            dirs.push((
                dw.into_iter().map(|v| v * k).collect::<Vec<_>>(),
                db.into_iter().map(|v| v * k).collect::<Vec<_>>(),
            ));
        }
        for (slot, &s) in curve.iter_mut().zip(grid) {
            let mut heads = model.heads.clone();
            if s != 0.0 {
                for (head, (dw, db)) in heads.heads.iter_mut().zip(&dirs) {
                    for (w, d) in head.weight.data_mut().iter_mut().zip(dw) {
                        *w += s * d;
                    }
                    for (b, d) in head.bias.data_mut().iter_mut().zip(db) {
                        *b += s * d;
                    }
                }
            }
            *slot += head_average_loss(&heads, &features, &data.labels)?;
        }
    }
    let k = seeds.len() as f64;
    Ok(grid.iter().zip(curve).map(|(&s, l)| (s, l / k)).collect())
}

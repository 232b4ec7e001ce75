//! Fully connected encoder with branched linear heads, trained by manual
//! backpropagation and Adam.

pub mod adam;
pub mod layers;
pub mod loss;
pub mod trace;

pub use adam::AdamState;
pub use layers::{Activation, BranchedHeads, Gradients, Linear, MlpEncoder, MlpModel};
pub use loss::{one_hot, soft_cross_entropy};
pub use trace::{ForwardPlan, ForwardTrace, Injection};

#[cfg(test)]
mod gradient_tests {
    use super::*;
    use crate::math::{RngState, Tensor};

    fn batch(rng: &mut RngState, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.gaussian()).collect()).unwrap()
    }

    fn labels(rows: usize, classes: usize, rng: &mut RngState) -> Tensor {
        let rs: Vec<Vec<f64>> = (0..rows).map(|_| one_hot(rng.below(classes), classes)).collect();
        Tensor::from_rows(&rs).unwrap()
    }

    #[test]
    fn duplicated_sample_same_gradient() {
        let model = MlpModel::new(4, &[5], 3, 3, 2, &RngState::new(1)).unwrap();
        let mut rng = RngState::new(2);
        let x = batch(&mut rng, 1, 4);
        let y = labels(1, 3, &mut rng);
        let x2 = Tensor::from_rows(&[x.row(0), x.row(0)]).unwrap();
        let y2 = Tensor::from_rows(&[y.row(0), y.row(0)]).unwrap();
        let plan = ForwardPlan::plain(&model);
        let g1 = model.backward(&model.forward_trace(&x, &plan).unwrap(), &y).unwrap();
        let g2 = model.backward(&model.forward_trace(&x2, &plan).unwrap(), &y2).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn head_bias_gradient_is_mean_residual() {
        let model = MlpModel::new(4, &[6], 3, 5, 1, &RngState::new(3)).unwrap();
        let mut rng = RngState::new(4);
        let x = batch(&mut rng, 7, 4);
        let soft: Vec<Vec<f64>> = (0..7)
            .map(|_| {
                let w: Vec<f64> = (0..5).map(|_| rng.uniform() + 0.01).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|v| v / s).collect()
            })
            .collect();
        let y = Tensor::from_rows(&soft).unwrap();
        let trace = model.forward_trace(&x, &ForwardPlan::plain(&model)).unwrap();
        let g = model.backward(&trace, &y).unwrap();
        for c in 0..5 {
            let expected: f64 = (0..7)
                .map(|i| {
                    let z = trace.logits()[0].row(i);
                    let p = crate::math::prob::softmax_slice(z);
                    p[c] - soft[i][c]
                })
                .sum::<f64>()
                / 7.0;
            assert!((g.heads[0].bias.data()[c] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn wrong_label_shape() {
        let model = MlpModel::new(2, &[3], 2, 2, 1, &RngState::new(0)).unwrap();
        let x = Tensor::zeros(&[2, 2]);
        let t = model.forward_trace(&x, &ForwardPlan::plain(&model)).unwrap();
        assert!(model.backward(&t, &Tensor::zeros(&[3, 2])).is_err());
    }
}

//! Recorded forward passes and manual backpropagation.
//!
//! A pass may inject a perturbation at layer `split`: every clean
//! representation `f_i` becomes `scale_i * f_i + shift_i`, and then each row
//! is mixed with its partner, `zeta_i * f_i + (1 - zeta_i) * f_{partner_i}`.
//! Scales, shifts and mixing weights are constants for differentiation.

use super::layers::{Activation, Gradients, MlpModel};
use super::loss::soft_cross_entropy_slice;
use crate::error::{Error, Result};
use crate::math::prob::softmax_into;
use crate::math::Tensor;

/// Noise and mixing applied at the split layer, one row per batch sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Injection {
    pub scale: Tensor,
    pub shift: Tensor,
    pub partner: Vec<usize>,
    pub zeta: Vec<f64>,
}

impl Injection {
    fn validate(&self, batch: usize, width: usize) -> Result<()> {
        let shape = [batch, width];
        if self.scale.shape() != shape || self.shift.shape() != shape {
            return Err(Error::Shape(format!(
                "injection tensors must be {shape:?}, got {:?} / {:?}",
                self.scale.shape(),
                self.shift.shape()
            )));
        }
        if self.partner.len() != batch || self.zeta.len() != batch {
            return Err(Error::Shape("injection partner/zeta length".into()));
        }
        if self.partner.iter().any(|&p| p >= batch) {
            return Err(Error::Index("partner index outside batch".into()));
        }
        if self.zeta.iter().any(|z| !(0.0..=1.0).contains(z)) {
            return Err(Error::Parameter("mixing weight outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Elementwise `scale * f + shift` followed by partner mixing.
    pub fn apply(&self, clean: &Tensor) -> Tensor {
        let batch = clean.rows();
        let mut perturbed = clean.clone();
        for (i, v) in perturbed.data_mut().iter_mut().enumerate() {
            *v = self.scale.data()[i] * *v + self.shift.data()[i];
        }
        let mut mixed = Tensor::zeros(&[batch, clean.cols()]);
        for i in 0..batch {
            let z = self.zeta[i];
            let (a, b) = (perturbed.row(i), perturbed.row(self.partner[i]));
            for ((m, x), y) in mixed.row_mut(i).iter_mut().zip(a).zip(b) {
                *m = z * x + (1.0 - z) * y;
            }
        }
        mixed
    }
}

/// Where (and whether) to inject a perturbation during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardPlan {
    pub split: usize,
    pub injection: Option<Injection>,
}

impl ForwardPlan {
    pub fn plain(model: &MlpModel) -> Self {
        Self {
            split: model.encoder.depth(),
            injection: None,
        }
    }
}

/// Activations recorded by [`MlpModel::forward_trace`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    split: usize,
    /// `prefix[0]` is the input; `prefix[l]` is the clean layer-`l` output.
    prefix: Vec<Tensor>,
    injection: Option<Injection>,
    /// `suffix[0]` is the (possibly mixed) split representation; the last is the features.
    suffix: Vec<Tensor>,
    logits: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.prefix[0].rows()
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn features(&self) -> &Tensor {
        self.suffix.last().expect("suffix never empty")
    }

    /// Per-head `B x C` logits.
    pub fn logits(&self) -> &[Tensor] {
        &self.logits
    }

    fn check_labels(&self, labels: &Tensor) -> Result<()> {
        let expected = [self.batch_size(), self.logits[0].cols()];
        if labels.shape() != expected {
            return Err(Error::Shape(format!(
                "labels must be {expected:?}, got {:?}",
                labels.shape()
            )));
        }
        Ok(())
    }

    /// Loss of sample `i` against `label`, averaged over heads.
    pub fn sample_loss(&self, i: usize, label: &[f64]) -> f64 {
        let n = self.logits.len() as f64;
        self.logits
            .iter()
            .map(|l| soft_cross_entropy_slice(l.row(i), label))
            .sum::<f64>()
            / n
    }

    /// Mean over the batch of the head-averaged soft cross-entropy.
    pub fn loss(&self, labels: &Tensor) -> Result<f64> {
        self.check_labels(labels)?;
        let b = self.batch_size();
        Ok((0..b).map(|i| self.sample_loss(i, labels.row(i))).sum::<f64>() / b as f64)
    }
}

impl MlpModel {
    /// Forward pass that records everything [`MlpModel::backward`] needs.
    pub fn forward_trace(&self, inputs: &Tensor, plan: &ForwardPlan) -> Result<ForwardTrace> {
        let enc = &self.encoder;
        if plan.split > enc.depth() {
            return Err(Error::Index(format!(
                "split {} outside 0..={}",
                plan.split,
                enc.depth()
            )));
        }
        if inputs.rank() != 2 || inputs.cols() != enc.input_dim() || inputs.rows() == 0 {
            return Err(Error::Shape(format!(
                "inputs must be B x {}, got {:?}",
                enc.input_dim(),
                inputs.shape()
            )));
        }
        let mut prefix = Vec::with_capacity(plan.split + 1);
        prefix.push(inputs.clone());
        for i in 0..plan.split {
            let h = enc.layer_forward(i, prefix.last().unwrap());
            prefix.push(h);
        }
        let split_repr = match &plan.injection {
            Some(inj) => {
                inj.validate(inputs.rows(), enc.width_at(plan.split))?;
                inj.apply(prefix.last().unwrap())
            }
            None => prefix.last().unwrap().clone(),
        };
        let mut suffix = vec![split_repr];
        for i in plan.split..enc.depth() {
            let h = enc.layer_forward(i, suffix.last().unwrap());
            suffix.push(h);
        }
        let features = suffix.last().unwrap();
        let logits = (0..self.heads.num_heads())
            .map(|n| self.heads.logits(n, features))
            .collect();
        Ok(ForwardTrace {
            split: plan.split,
            prefix,
            injection: plan.injection.clone(),
            suffix,
            logits,
        })
    }

    /// Gradient of [`ForwardTrace::loss`] with respect to every parameter.
    pub fn backward(&self, trace: &ForwardTrace, labels: &Tensor) -> Result<Gradients> {
        trace.check_labels(labels)?;
        if trace.logits.len() != self.heads.num_heads() || trace.split > self.encoder.depth() {
            return Err(Error::Contract("trace was recorded on a different model".into()));
        }
        let batch = trace.batch_size();
        let num_heads = self.heads.num_heads();
        let norm = 1.0 / (batch * num_heads) as f64;
        let mut grads = self.zero_like();

        // heads
        let features = trace.features();
        let mut dfeat = Tensor::zeros(&[batch, features.cols()]);
        let mut probs = vec![0.0; self.num_classes()];
        for (n, head) in self.heads.heads.iter().enumerate() {
            let logits = &trace.logits[n];
            let mut dlogits = Tensor::zeros(&[batch, self.num_classes()]);
            for i in 0..batch {
                softmax_into(logits.row(i), &mut probs);
                for ((d, p), y) in dlogits.row_mut(i).iter_mut().zip(&probs).zip(labels.row(i)) {
                    *d = (p - y) * norm;
                }
            }
            let dx = head.backward(features, &dlogits, &mut grads.heads[n]);
            for (a, b) in dfeat.data_mut().iter_mut().zip(dx.data()) {
                *a += b;
            }
        }

        // suffix layers split+1 ..= L
        let enc = &self.encoder;
        let mut delta = dfeat;
        for i in (trace.split..enc.depth()).rev() {
            let j = i - trace.split;
            mask_activation(enc.activations[i], &trace.suffix[j + 1], &mut delta);
            delta = enc.layers[i].backward(&trace.suffix[j], &delta, &mut grads.encoder[i]);
        }

        // through mixing and noise back to the clean representation
        if let Some(inj) = &trace.injection {
            let mut dpert = Tensor::zeros(&[batch, delta.cols()]);
            for i in 0..batch {
                let z = inj.zeta[i];
                let g = delta.row(i).to_vec();
                for (d, gi) in dpert.row_mut(i).iter_mut().zip(&g) {
                    *d += z * gi;
                }
                for (d, gi) in dpert.row_mut(inj.partner[i]).iter_mut().zip(&g) {
                    *d += (1.0 - z) * gi;
                }
            }
            for (d, s) in dpert.data_mut().iter_mut().zip(inj.scale.data()) {
                *d *= s;
            }
            delta = dpert;
        }

        // prefix layers 1 ..= split
        for i in (0..trace.split).rev() {
            mask_activation(enc.activations[i], &trace.prefix[i + 1], &mut delta);
            delta = enc.layers[i].backward(&trace.prefix[i], &delta, &mut grads.encoder[i]);
        }
        Ok(grads)
    }
}

fn mask_activation(act: Activation, output: &Tensor, delta: &mut Tensor) {
    if act == Activation::Relu {
        for (d, &y) in delta.data_mut().iter_mut().zip(output.data()) {
            if y <= 0.0 {
                *d = 0.0;
            }
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::rng::{stream, RngState};
use crate::math::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }
}

/// Affine map `y = W x + b` with `W` stored as `out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// He-uniform over fan-in, zero bias.
    pub fn he_uniform(input: usize, output: usize, rng: &mut RngState) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        let mut layer = Self::zeros(input, output);
        for w in layer.weight.data_mut() {
            *w = (2.0 * rng.uniform() - 1.0) * bound;
        }
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Batched forward of a `B x in` matrix, activation applied elementwise.
    pub fn forward(&self, input: &Tensor, act: Activation) -> Tensor {
        let batch = input.rows();
        let out_dim = self.output_dim();
        let mut out = Tensor::zeros(&[batch, out_dim]);
        let bias = self.bias.data();
        for b in 0..batch {
            let x = input.row(b);
            let y = out.row_mut(b);
            for (o, yo) in y.iter_mut().enumerate() {
                let w = self.weight.row(o);
                let mut acc = bias[o];
                for (wi, xi) in w.iter().zip(x) {
                    acc += wi * xi;
                }
                *yo = act.apply(acc);
            }
        }
        out
    }

    /// Accumulates parameter gradients for output gradient `delta` and
    /// returns the gradient with respect to the input.
    pub fn backward(&self, input: &Tensor, delta: &Tensor, grad: &mut Linear) -> Tensor {
        let batch = input.rows();
        let in_dim = self.input_dim();
        let mut dinput = Tensor::zeros(&[batch, in_dim]);
        for b in 0..batch {
            let x = input.row(b);
            let d = delta.row(b);
            for (o, &dout) in d.iter().enumerate() {
                if dout == 0.0 {
                    continue;
                }
                grad.bias.data_mut()[o] += dout;
                let gw = grad.weight.row_mut(o);
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += dout * xi;
                }
                let w = self.weight.row(o);
                for (di, wi) in dinput.row_mut(b).iter_mut().zip(w) {
                    *di += dout * wi;
                }
            }
        }
        dinput
    }
}

/// Fully connected encoder: ReLU hidden layers and an identity feature layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpEncoder {
    pub layers: Vec<Linear>,
    pub activations: Vec<Activation>,
}

impl MlpEncoder {
    pub fn new(input_dim: usize, hidden: &[usize], feature_dim: usize, rng: &RngState) -> Self {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(feature_dim);
        let depth = widths.len() - 1;
        let mut layers = Vec::with_capacity(depth);
        let mut activations = Vec::with_capacity(depth);
        for i in 0..depth {
            let mut r = rng.substream(stream::INIT_ENCODER, i as u64);
            layers.push(Linear::he_uniform(widths[i], widths[i + 1], &mut r));
            activations.push(if i + 1 == depth {
                Activation::Identity
            } else {
                Activation::Relu
            });
        }
        Self {
            layers,
            activations,
        }
    }

    /// Number of layers `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.depth() - 1].output_dim()
    }

    /// Width of the representation after `l` layers (`l = 0` is the input).
    pub fn width_at(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim()
        } else {
            self.layers[l - 1].output_dim()
        }
    }

    fn check_split(&self, l: usize) -> Result<()> {
        if l > self.depth() {
            return Err(Error::Index(format!(
                "layer index {l} outside 0..={}",
                self.depth()
            )));
        }
        Ok(())
    }

    pub(crate) fn layer_forward(&self, i: usize, input: &Tensor) -> Tensor {
        self.layers[i].forward(input, self.activations[i])
    }

    /// Runs layers `from+1 ..= to` on a batch, keeping the input's rank.
    fn run(&self, x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        let expected = self.width_at(from);
        if x.cols() != expected || x.rank() > 2 {
            return Err(Error::Shape(format!(
                "expected width {expected} at layer {from}, got shape {:?}",
                x.shape()
            )));
        }
        let vector = x.rank() == 1;
        let mut h = if vector {
            Tensor::from_vec(&[1, x.cols()], x.data().to_vec())?
        } else {
            x.clone()
        };
        for i in from..to {
            h = self.layer_forward(i, &h);
        }
        if vector {
            Ok(Tensor::vector(h.into_vec()))
        } else {
            Ok(h)
        }
    }

    /// `f_{0:l}(x)`; `l = 0` returns the input unchanged.
    pub fn forward_partial(&self, x: &Tensor, l: usize) -> Result<Tensor> {
        self.check_split(l)?;
        self.run(x, 0, l)
    }

    /// `f_{(l+1):L}(h)` applied to a layer-`l` representation.
    pub fn forward_from(&self, h: &Tensor, l: usize) -> Result<Tensor> {
        self.check_split(l)?;
        self.run(h, l, self.depth())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, 0, self.depth())
    }
}

/// `N` independent linear classifiers sharing the encoder's features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchedHeads {
    pub heads: Vec<Linear>,
}

impl BranchedHeads {
    pub fn new(num_heads: usize, feature_dim: usize, num_classes: usize, rng: &RngState) -> Self {
        let heads = (0..num_heads)
            .map(|n| {
                let mut r = rng.substream(stream::INIT_HEAD, n as u64);
                Linear::he_uniform(feature_dim, num_classes, &mut r)
            })
            .collect();
        Self { heads }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn num_classes(&self) -> usize {
        self.heads[0].output_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.heads[0].input_dim()
    }

    /// `B x C` logits of head `n`.
    pub fn logits(&self, n: usize, features: &Tensor) -> Tensor {
        self.heads[n].forward(features, Activation::Identity)
    }

    /// Sub-classifier parameters of head `n`, class `c`: weight row followed by bias.
    pub fn sub_classifier(&self, n: usize, c: usize) -> Vec<f64> {
        let head = &self.heads[n];
        let mut phi = head.weight.row(c).to_vec();
        phi.push(head.bias.data()[c]);
        phi
    }
}

/// Encoder plus branched heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub encoder: MlpEncoder,
    pub heads: BranchedHeads,
}

impl MlpModel {
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        num_classes: usize,
        num_heads: usize,
        rng: &RngState,
    ) -> Result<Self> {
        if input_dim == 0 || feature_dim == 0 || num_classes == 0 || num_heads == 0 {
            return Err(Error::Parameter(
                "model dimensions and head count must be positive".into(),
            ));
        }
        if hidden.contains(&0) {
            return Err(Error::Parameter("hidden widths must be positive".into()));
        }
        Ok(Self {
            encoder: MlpEncoder::new(input_dim, hidden, feature_dim, rng),
            heads: BranchedHeads::new(num_heads, feature_dim, num_classes, rng),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.heads.num_classes()
    }

    /// Canonical parameter order: encoder `(W, b)` per layer, then heads.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.encoder
            .layers
            .iter()
            .chain(&self.heads.heads)
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder
            .layers
            .iter_mut()
            .chain(self.heads.heads.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn zero_like(&self) -> Gradients {
        Gradients {
            encoder: self
                .encoder
                .layers
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            heads: self
                .heads
                .heads
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }
}

/// Parameter-shaped gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<Linear>,
    pub heads: Vec<Linear>,
}

impl Gradients {
    /// Same order as [`MlpModel::parameters`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.encoder
            .iter()
            .chain(&self.heads)
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }
}

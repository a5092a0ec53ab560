//! Fully connected networks evaluated on a [`Tape`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use super::tape::{Tape, Var};
use crate::error::{ensure_dim, Error, Result};
use crate::matrix::Matrix;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Swish,
    Identity,
}

/// Dense network: hidden layers use `activation`, the output layer is linear.
///
/// Parameters are stored as blocks `w0, b0, w1, b1, ...` with `w{l}` shaped `(in, out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet<F> {
    layer_sizes: Vec<usize>,
    activation: Activation,
    params: ParamVector<F>,
}

impl<F: Scalar> DenseNet<F> {
    /// Zero-initialized network.
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must have at least two positive entries, got {layer_sizes:?}"
            )));
        }
        let mut params = ParamVector::new();
        for (l, w) in layer_sizes.windows(2).enumerate() {
            params.push_block(format!("w{l}"), &Matrix::zeros(w[0], w[1]));
            params.push_block(format!("b{l}"), &Matrix::zeros(1, w[1]));
        }
        Ok(DenseNet {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params,
        })
    }

    /// Gaussian weights with standard deviation `gain / sqrt(fan_in)`, zero biases.
    pub fn random<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        activation: Activation,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, activation)?;
        for l in 0..layer_sizes.len() - 1 {
            let std = gain / (layer_sizes[l] as f64).sqrt();
            for v in net.params.block_slice_mut(2 * l) {
                let z: f64 = StandardNormal.sample(rng);
                *v = F::lit(z * std);
            }
        }
        Ok(net)
    }

    /// Builds a network from explicit parameters, checking the block layout.
    pub fn from_params(
        layer_sizes: &[usize],
        activation: Activation,
        params: ParamVector<F>,
    ) -> Result<Self> {
        let template = Self::zeros(layer_sizes, activation)?;
        if !template.params.same_layout(&params) {
            return Err(Error::InvalidArgument(
                "parameter blocks do not match the layer sizes".into(),
            ));
        }
        Ok(DenseNet {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &ParamVector<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector<F> {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamVector<F>) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::InvalidArgument(
                "parameter layout does not match the network".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    /// Mutable access to the weight block of layer `l`.
    pub fn weight_mut(&mut self, l: usize) -> &mut [F] {
        self.params.block_slice_mut(2 * l)
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [F] {
        self.params.block_slice_mut(2 * l + 1)
    }

    /// Records the forward pass of a batch (`n × input_dim`) using already bound parameters.
    pub fn forward_tape(&self, tape: &Tape<F>, bound: &[Var], input: Var) -> Var {
        let layers = self.layer_sizes.len() - 1;
        let mut h = input;
        for l in 0..layers {
            h = tape.matmul(h, bound[2 * l]);
            h = tape.add(h, bound[2 * l + 1]);
            if l + 1 < layers && self.activation == Activation::Swish {
                h = tape.swish(h);
            }
        }
        h
    }

    /// Evaluates a batch without recording gradients.
    pub fn forward_batch(&self, input: &Matrix<F>) -> Result<Matrix<F>> {
        ensure_dim("dense net input", self.input_dim(), input.cols())?;
        let layers = self.layer_sizes.len() - 1;
        let mut h = input.clone();
        for l in 0..layers {
            let w = self.params.block_matrix(2 * l);
            let b = self.params.block_slice(2 * l + 1);
            h = h.matmul(&w);
            for i in 0..h.rows() {
                for (x, &bj) in h.row_mut(i).iter_mut().zip(b) {
                    *x = *x + bj;
                }
            }
            if l + 1 < layers && self.activation == Activation::Swish {
                h = h.map(swish);
            }
        }
        Ok(h)
    }

    /// Evaluates a single input vector.
    pub fn forward(&self, input: &[F]) -> Result<Vec<F>> {
        Ok(self
            .forward_batch(&Matrix::row_vector(input))?
            .into_vec())
    }
}

#[inline]
pub fn swish<F: Scalar>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

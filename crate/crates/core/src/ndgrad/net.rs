use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::mat::{gemm, Mat};
use crate::error::first_non_finite;
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Silu,
    Mish,
    Sigmoid,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Silu => x * sigmoid(x),
            Activation::Mish => x * softplus(x).tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Mish => {
                let t = softplus(x).tanh();
                t + x * (1.0 - t * t) * sigmoid(x)
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn n_params(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Dense network shape. The conditioning vector is concatenated onto the
/// input of every layer, so layer `i` sees `width_{i-1} + cond_dim` inputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub input_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl Topology {
    pub fn new(
        input_dim: usize,
        cond_dim: usize,
        hidden: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Self {
        Topology {
            input_dim,
            cond_dim,
            hidden,
            output_dim,
            activation,
        }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        let n = self.hidden.len() + 1;
        (0..n)
            .map(|i| LayerSpec {
                fan_in: widths[i] + self.cond_dim,
                fan_out: if i + 1 == n {
                    self.output_dim
                } else {
                    widths[i + 1]
                },
                activation: if i + 1 == n {
                    Activation::Identity
                } else {
                    self.activation
                },
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers().iter().map(LayerSpec::n_params).sum()
    }
}

/// Flat weight vector plus the layer layout that indexes into it.
///
/// Layer `i` stores its weight matrix (`fan_out x fan_in`, row-major) at
/// `offsets[i]`, followed by `fan_out` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    topology: Topology,
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    weights: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros(topology: Topology) -> Self {
        let n = topology.n_params();
        Self::from_weights(topology, vec![0.0; n]).expect("length matches by construction")
    }

    /// Uniform init in ±1/sqrt(fan_in) for weights and biases.
    pub fn init(topology: Topology, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(topology);
        for l in 0..p.layers.len() {
            let spec = p.layers[l];
            let bound = 1.0 / (spec.fan_in.max(1) as f64).sqrt();
            let off = p.offsets[l];
            for w in &mut p.weights[off..off + spec.n_params()] {
                *w = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn from_weights(topology: Topology, weights: Vec<f64>) -> Result<Self> {
        let layers = topology.layers();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut at = 0;
        for l in &layers {
            offsets.push(at);
            at += l.n_params();
        }
        if weights.len() != at {
            return Err(Error::Shape(format!(
                "topology needs {at} weights, got {}",
                weights.len()
            )));
        }
        if let Some(i) = first_non_finite(&weights) {
            return Err(Error::non_finite("network weights", i));
        }
        Ok(NetworkParams {
            topology,
            layers,
            offsets,
            weights,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mutable weight access for optimizers. Length is fixed.
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.topology.input_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.topology.cond_dim
    }

    pub fn output_dim(&self) -> usize {
        self.topology.output_dim
    }

    pub(crate) fn check_inputs(&self, input: &Mat, condition: &Mat) -> Result<()> {
        if input.cols() != self.topology.input_dim {
            return Err(Error::LayerDimension {
                layer: 0,
                expected: self.layers[0].fan_in,
                got: input.cols() + condition.cols(),
            });
        }
        if condition.cols() != self.topology.cond_dim {
            return Err(Error::LayerDimension {
                layer: 0,
                expected: self.layers[0].fan_in,
                got: input.cols() + condition.cols(),
            });
        }
        if condition.cols() > 0 && condition.rows() != input.rows() {
            return Err(Error::Shape(format!(
                "condition has {} rows, input has {}",
                condition.rows(),
                input.rows()
            )));
        }
        Ok(())
    }

    /// Plain forward pass without recording. Bit-identical to the taped path.
    pub fn forward(&self, input: &Mat, condition: &Mat) -> Result<Mat> {
        self.check_inputs(input, condition)?;
        let mut h = input.clone();
        for (l, spec) in self.layers.iter().enumerate() {
            let x = if self.topology.cond_dim > 0 {
                Mat::hcat(&[&h, condition])?
            } else {
                h
            };
            if x.cols() != spec.fan_in {
                return Err(Error::LayerDimension {
                    layer: l,
                    expected: spec.fan_in,
                    got: x.cols(),
                });
            }
            let pre = affine_forward(&self.weights, self.offsets[l], spec, &x);
            h = if spec.activation == Activation::Identity {
                pre
            } else {
                pre.map(|v| spec.activation.apply(v))
            };
        }
        Ok(h)
    }
}

/// `x W^T + b` for one layer stored at `offset`.
pub(crate) fn affine_forward(weights: &[f64], offset: usize, spec: &LayerSpec, x: &Mat) -> Mat {
    let (fi, fo) = (spec.fan_in, spec.fan_out);
    let w = &weights[offset..offset + fi * fo];
    let b = &weights[offset + fi * fo..offset + fi * fo + fo];
    let mut out = Mat::broadcast_row(b, x.rows());
    gemm(
        x.rows(),
        fi,
        fo,
        1.0,
        x.data(),
        (fi, 1),
        w,
        (1, fi),
        1.0,
        out.data_mut(),
        (fo, 1),
    );
    out
}

/// Accumulates weight/bias gradients and returns the input adjoint.
pub(crate) fn affine_backward(
    weights: &[f64],
    offset: usize,
    spec: &LayerSpec,
    x: &Mat,
    dy: &Mat,
    grad: Option<&mut [f64]>,
    want_dx: bool,
) -> Option<Mat> {
    let (fi, fo) = (spec.fan_in, spec.fan_out);
    let rows = x.rows();
    if let Some(g) = grad {
        let (gw, gb) = g[offset..offset + fi * fo + fo].split_at_mut(fi * fo);
        gemm(
            fo,
            rows,
            fi,
            1.0,
            dy.data(),
            (1, fo),
            x.data(),
            (fi, 1),
            1.0,
            gw,
            (fi, 1),
        );
        for r in dy.iter_rows() {
            for (b, d) in gb.iter_mut().zip(r) {
                *b += d;
            }
        }
    }
    if !want_dx {
        return None;
    }
    let w = &weights[offset..offset + fi * fo];
    let mut dx = Mat::zeros(rows, fi);
    gemm(
        rows,
        fo,
        fi,
        1.0,
        dy.data(),
        (fo, 1),
        w,
        (fi, 1),
        0.0,
        dx.data_mut(),
        (fi, 1),
    );
    Some(dx)
}

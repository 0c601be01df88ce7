//! Dense feed-forward networks with tape-based reverse-mode gradients and
//! the Adam optimizer.
//!
//! The models in this crate only need sequential dense layers plus a handful
//! of elementwise ops, so the tape is simply the per-layer pre- and
//! post-activation values of one forward call; no general graph engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y = act(x)`.
    fn derivative_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// True for activations with range inside [-1, 1].
    pub fn is_bounded_unit(&self) -> bool {
        matches!(self, Activation::Tanh | Activation::Sigmoid)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One dense layer: `out = act(x W^T + b)` with `weight` stored `[out x in]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

/// Per-layer activations recorded by one forward call.
pub struct Tape {
    input: Tensor,
    /// Post-activation output of each layer.
    outputs: Vec<Tensor>,
}

/// Gradients produced by one backward call, layer-aligned with the net.
pub struct NetGrads {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub input: Tensor,
}

impl DenseNet {
    /// Glorot-uniform initialized net. `dims` chains layer widths;
    /// `activations` has one entry per layer.
    pub fn init(dims: &[usize], activations: &[Activation], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::InvalidArgument {
                context: format!(
                    "net init: {} dims with {} activations",
                    dims.len(),
                    activations.len()
                ),
            });
        }
        let mut layers = Vec::with_capacity(activations.len());
        for (k, &act) in activations.iter().enumerate() {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut weight = Tensor::zeros(vec![fan_out, fan_in]);
            for v in weight.data_mut() {
                *v = rng.next_range(-bound, bound);
            }
            layers.push(Layer {
                weight,
                bias: Tensor::zeros(vec![fan_out]),
                activation: act,
            });
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Checks that consecutive layer dimensions chain.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument { context: "empty net".into() });
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::InvalidArgument {
                    context: format!(
                        "layer {} out dim {} does not feed layer {} in dim {}",
                        k,
                        pair[0].out_dim(),
                        k + 1,
                        pair[1].in_dim()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Batched forward pass; `x` is `[batch x in]`. Returns the output and a
    /// tape sufficient for [`DenseNet::backward`].
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tape)> {
        if x.shape().len() != 2 || x.cols() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: x.shape().to_vec(),
                right: vec![self.in_dim()],
            });
        }
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let mut pre = cur.mat_mul(&layer.weight.transpose()?)?;
            let bias = layer.bias.data();
            let out_dim = layer.out_dim();
            for r in 0..pre.rows() {
                let row = pre.row_mut(r);
                for j in 0..out_dim {
                    row[j] = layer.activation.apply(row[j] + bias[j]);
                }
            }
            outputs.push(pre.clone());
            cur = pre;
        }
        Ok((cur, Tape { input: x.clone(), outputs }))
    }

    /// Convenience forward for a single item given as a flat vector.
    pub fn forward_single(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::new(vec![1, x.len()], x.to_vec())?;
        let (out, _) = self.forward(&t)?;
        Ok(out.data().to_vec())
    }

    /// Reverse-mode gradients for all parameters and for the input, given the
    /// gradient of a scalar loss with respect to the forward output.
    pub fn backward(&self, tape: &Tape, loss_grad: &Tensor) -> Result<NetGrads> {
        let last = tape.outputs.last().ok_or_else(|| Error::InvalidArgument {
            context: "backward on empty tape".into(),
        })?;
        if loss_grad.shape() != last.shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: loss_grad.shape().to_vec(),
                right: last.shape().to_vec(),
            });
        }
        let n_layers = self.layers.len();
        let mut weights = vec![Tensor::zeros(vec![0]); n_layers];
        let mut biases = vec![Tensor::zeros(vec![0]); n_layers];
        let mut delta = loss_grad.clone();
        for k in (0..n_layers).rev() {
            let layer = &self.layers[k];
            let out = &tape.outputs[k];
            // delta <- dloss/dpre = dloss/dout * act'(pre)
            for r in 0..delta.rows() {
                let orow = out.row(r);
                let drow = delta.row_mut(r);
                for j in 0..orow.len() {
                    drow[j] *= layer.activation.derivative_from_output(orow[j]);
                }
            }
            let layer_in = if k == 0 { &tape.input } else { &tape.outputs[k - 1] };
            // dW = delta^T x_in, db = column sums of delta
            weights[k] = delta.transpose()?.mat_mul(layer_in)?;
            let mut b = Tensor::zeros(vec![layer.out_dim()]);
            for r in 0..delta.rows() {
                let drow = delta.row(r);
                let bd = b.data_mut();
                for j in 0..drow.len() {
                    bd[j] += drow[j];
                }
            }
            biases[k] = b;
            delta = delta.mat_mul(&layer.weight)?;
        }
        Ok(NetGrads { weights, biases, input: delta })
    }
}

/// Adam optimizer state for one flat list of named parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(learning_rate: f64, param_shapes: &[Vec<usize>]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            second: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over `(name, param, grad)` triples.
    /// A non-finite gradient aborts with the offending parameter's name.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument {
                context: format!(
                    "adam: {} params, {} grads, state holds {}",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, (name, param)) in params.iter_mut().enumerate() {
            let grad = &grads[idx];
            if param.shape() != grad.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    left: param.shape().to_vec(),
                    right: grad.shape().to_vec(),
                });
            }
            if grad.data().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of parameter {name}"),
                });
            }
            let m = self.first[idx].data_mut();
            let v = self.second[idx].data_mut();
            let p = param.data_mut();
            let g = grad.data();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

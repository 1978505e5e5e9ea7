//! Multi-layer perceptrons over the parameter store.
//!
//! An [`Mlp`] owns the [`ParamId`]s of its layers; the weights themselves
//! live in the shared [`ParamStore`]. Forward passes exist in two flavours:
//! tape-recorded (for training) and direct (for planning / acting, where no
//! gradients are needed and per-call tape allocation would be wasted).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::matrix::Matrix;
use crate::nn::params::{ParamGroup, ParamId, ParamStore};
use crate::nn::tape::{NodeId, Tape, UnaryKind};

/// Nonlinearity between layers, plus optional output normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Tanh,
    Sigmoid,
    Mish,
    /// Softmax over contiguous groups of the given size (latent simplicial
    /// normalization); only valid as an output activation.
    GroupSoftmax(usize),
    /// Rows scaled to unit L2 norm; only valid as an output activation.
    L2Norm,
}

/// Shape and initialization of one MLP.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub name: String,
    pub group: ParamGroup,
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub hidden_act: Activation,
    pub output_act: Activation,
    /// Zero-initialize the final layer so the net starts as the identity on
    /// its bias (reward, value and discriminator heads start at 0).
    pub zero_init_last: bool,
}

impl MlpSpec {
    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 {
            return Err(Error::InvalidConfig(format!("mlp {}: zero-width layer", self.name)));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig(format!("mlp {}: zero-width hidden layer", self.name)));
        }
        if let Activation::GroupSoftmax(g) = self.output_act {
            if g == 0 || self.output % g != 0 {
                return Err(Error::InvalidConfig(format!(
                    "mlp {}: output {} not divisible into groups of {g}",
                    self.name, self.output
                )));
            }
        }
        match self.hidden_act {
            Activation::GroupSoftmax(_) | Activation::L2Norm => {
                return Err(Error::InvalidConfig(format!(
                    "mlp {}: normalization activations are output-only",
                    self.name
                )))
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

/// An MLP whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Layer>,
    hidden_act: Activation,
    output_act: Activation,
    input: usize,
    output: usize,
}

impl Mlp {
    /// Build parameters in `store` per `spec`, initialized from `rng`.
    /// Weights use uniform fan-in scaling, `U(-1/sqrt(in), 1/sqrt(in))`;
    /// biases start at zero.
    pub fn new(store: &mut ParamStore, spec: &MlpSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut dims = Vec::with_capacity(spec.hidden.len() + 2);
        dims.push(spec.input);
        dims.extend_from_slice(&spec.hidden);
        dims.push(spec.output);

        let mut layers = Vec::with_capacity(dims.len() - 1);
        for li in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[li], dims[li + 1]);
            let last = li == dims.len() - 2;
            let mut w = Matrix::zeros(fan_in, fan_out);
            if !(last && spec.zero_init_last) {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in &mut w.data {
                    *v = rng.gen_range(-bound..bound);
                }
            }
            let wid = store.add(format!("{}.w{li}", spec.name), spec.group, w);
            let bid = store.add(format!("{}.b{li}", spec.name), spec.group, Matrix::zeros(1, fan_out));
            layers.push(Layer { w: wid, b: bid });
        }
        Ok(Mlp {
            layers,
            hidden_act: spec.hidden_act,
            output_act: spec.output_act,
            input: spec.input,
            output: spec.output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    /// All parameter ids, layer order, weights before biases.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Tape-recorded forward pass.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let mut h = x;
        let n = self.layers.len();
        for (li, layer) in self.layers.iter().enumerate() {
            h = tape.linear(store, layer.w, layer.b, h);
            let act = if li + 1 == n { self.output_act } else { self.hidden_act };
            h = apply_activation_tape(tape, act, h);
        }
        h
    }

    /// Forward pass without recording; for action selection and planning.
    pub fn forward_nograd(&self, store: &ParamStore, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        let n = self.layers.len();
        for (li, layer) in self.layers.iter().enumerate() {
            let w = store.value(layer.w);
            let b = store.value(layer.b);
            h = h.matmul(w).add_row_broadcast(&b.data);
            let act = if li + 1 == n { self.output_act } else { self.hidden_act };
            apply_activation_in_place(act, &mut h);
        }
        h
    }
}

fn apply_activation_tape(tape: &mut Tape, act: Activation, x: NodeId) -> NodeId {
    match act {
        Activation::None => x,
        Activation::Relu => {
            // relu(x) = x * sigmoid_step; expressed as max(x, 0) via Min on -x.
            let neg = tape.neg(x);
            let zero = {
                let v = tape.value(x);
                tape.constant(Matrix::zeros(v.rows, v.cols))
            };
            let m = tape.min(neg, zero); // min(-x, 0) = -max(x, 0)
            tape.neg(m)
        }
        Activation::Tanh => tape.unary(UnaryKind::Tanh, x),
        Activation::Sigmoid => tape.unary(UnaryKind::Sigmoid, x),
        Activation::Mish => tape.unary(UnaryKind::Mish, x),
        Activation::GroupSoftmax(g) => tape.group_softmax(x, g),
        Activation::L2Norm => tape.l2_normalize_rows(x),
    }
}

fn apply_activation_in_place(act: Activation, m: &mut Matrix) {
    match act {
        Activation::None => {}
        Activation::Relu => m.data.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Tanh => m.data.iter_mut().for_each(|v| *v = v.tanh()),
        Activation::Sigmoid => m.data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
        Activation::Mish => m.data.iter_mut().for_each(|v| {
            let sp = v.max(0.0) + (-v.abs()).exp().ln_1p();
            *v *= sp.tanh();
        }),
        Activation::GroupSoftmax(g) => {
            for r in 0..m.rows {
                for chunk in m.row_mut(r).chunks_mut(g) {
                    let mx = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for v in chunk.iter_mut() {
                        *v = (*v - mx).exp();
                        z += *v;
                    }
                    for v in chunk.iter_mut() {
                        *v /= z;
                    }
                }
            }
        }
        Activation::L2Norm => {
            for r in 0..m.rows {
                let row = m.row_mut(r);
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let inv = 1.0 / (n + 1e-12);
                row.iter_mut().for_each(|v| *v *= inv);
            }
        }
    }
}

//! Neural building blocks on top of the tape: linear layers, MLPs,
//! multi-head attention, and a GRU cell.

use serde::{Deserialize, Serialize};

use crate::error::{ChimeError, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Xavier-uniform initialization.
fn init_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols)
        .map(|_| rng.uniform_in(-bound, bound))
        .collect();
    Tensor::new(vec![rows, cols], values).expect("init shape")
}

/// Affine layer `x . w + b`; parameters live in the store under
/// `<name>.w` and `<name>.b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        store.insert(
            format!("{}.w", self.name),
            init_matrix(rng, self.in_dim, self.out_dim),
        )?;
        store.insert(
            format!("{}.b", self.name),
            Tensor::zeros(vec![self.out_dim]),
        )
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, &format!("{}.w", self.name))?;
        let b = tape.param(store, &format!("{}.b", self.name))?;
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }
}

/// One step of the spec-level MLP contract: a chain of (weight, bias,
/// activation) layers already placed on the tape.
pub fn mlp_forward(
    tape: &mut Tape,
    layers: &[(Var, Var, Activation)],
    x: Var,
) -> Result<Var> {
    let mut h = x;
    for (idx, &(w, b, act)) in layers.iter().enumerate() {
        if tape.shape(h).last() != tape.shape(w).first() {
            return Err(ChimeError::Config(format!(
                "mlp layer {idx}: input width {:?} does not chain into weight {:?}",
                tape.shape(h),
                tape.shape(w)
            )));
        }
        let xw = tape.matmul(h, w)?;
        let z = tape.add_bias(xw, b)?;
        h = act.apply(tape, z);
    }
    Ok(h)
}

/// Feedforward network with a fixed activation on hidden layers and an
/// identity output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    pub dims: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    pub fn new(name: impl Into<String>, dims: &[usize], hidden: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        Mlp {
            name: name.into(),
            dims: dims.to_vec(),
            hidden,
            output: Activation::Identity,
        }
    }

    fn layer(&self, idx: usize) -> Linear {
        Linear::new(
            format!("{}.{}", self.name, idx),
            self.dims[idx],
            self.dims[idx + 1],
        )
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        for idx in 0..self.dims.len() - 1 {
            self.layer(idx).init(store, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let last = self.dims.len() - 2;
        let mut h = x;
        for idx in 0..=last {
            h = self.layer(idx).forward(tape, store, h)?;
            let act = if idx == last { self.output } else { self.hidden };
            h = act.apply(tape, h);
        }
        Ok(h)
    }
}

/// Standard scaled dot-product multi-head attention with input and output
/// projections. Queries, keys, and values share the model width.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub name: String,
    pub model_dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(name: impl Into<String>, model_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !model_dim.is_multiple_of(heads) {
            return Err(ChimeError::Config(format!(
                "model dim {model_dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            name: name.into(),
            model_dim,
            heads,
        })
    }

    fn proj(&self, which: &str) -> Linear {
        Linear::new(
            format!("{}.{which}", self.name),
            self.model_dim,
            self.model_dim,
        )
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        for which in ["wq", "wk", "wv", "wo"] {
            self.proj(which).init(store, rng)?;
        }
        Ok(())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<Var> {
        if tape.shape(k)[0] != tape.shape(v)[0] {
            return Err(ChimeError::DimensionMismatch {
                op: "attention keys/values",
                left: tape.shape(k).to_vec(),
                right: tape.shape(v).to_vec(),
            });
        }
        let head_dim = self.model_dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let qp = self.proj("wq").forward(tape, store, q)?;
        let kp = self.proj("wk").forward(tape, store, k)?;
        let vp = self.proj("wv").forward(tape, store, v)?;
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(qp, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(kp, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(vp, h * head_dim, head_dim)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax(scaled, 1)?;
            head_outputs.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&head_outputs)?;
        self.proj("wo").forward(tape, store, merged)
    }
}

/// Gated recurrent unit. The recurrence follows the original formulation:
/// `h_t = (1 - z_t) * h_{t-1} + z_t * candidate_t`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub name: String,
    pub in_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(name: impl Into<String>, in_dim: usize, hidden_dim: usize) -> Self {
        GruCell {
            name: name.into(),
            in_dim,
            hidden_dim,
        }
    }

    fn gate_params(&self, gate: &str) -> (Linear, Linear) {
        (
            Linear::new(format!("{}.{gate}x", self.name), self.in_dim, self.hidden_dim),
            Linear::new(
                format!("{}.{gate}h", self.name),
                self.hidden_dim,
                self.hidden_dim,
            ),
        )
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        for gate in ["z", "r", "c"] {
            let (wx, wh) = self.gate_params(gate);
            wx.init(store, rng)?;
            wh.init(store, rng)?;
        }
        Ok(())
    }

    fn gate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        gate: &str,
        x: Var,
        h: Var,
        act: Activation,
    ) -> Result<Var> {
        let (wx, wh) = self.gate_params(gate);
        let a = wx.forward(tape, store, x)?;
        let b = wh.forward(tape, store, h)?;
        let s = tape.add(a, b)?;
        Ok(act.apply(tape, s))
    }

    /// One recurrence step for a batch: `x` is [batch, in_dim], `h` is
    /// [batch, hidden_dim].
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let z = self.gate(tape, store, "z", x, h, Activation::Sigmoid)?;
        let r = self.gate(tape, store, "r", x, h, Activation::Sigmoid)?;
        let rh = tape.mul(r, h)?;
        let cand = self.gate(tape, store, "c", x, rh, Activation::Tanh)?;
        let one_minus_z = tape.affine(z, -1.0, 1.0);
        let keep = tape.mul(one_minus_z, h)?;
        let update = tape.mul(z, cand)?;
        tape.add(keep, update)
    }

    /// Runs the recurrence over flattened sequences: `seq_flat` is
    /// [batch, len * in_dim] with timesteps contiguous per row. Returns all
    /// hidden states as [batch, len * hidden_dim].
    pub fn forward_flat(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq_flat: Var,
        h0: Var,
        len: usize,
    ) -> Result<Var> {
        if tape.shape(seq_flat)[1] != len * self.in_dim {
            return Err(ChimeError::DimensionMismatch {
                op: "gru sequence",
                left: tape.shape(seq_flat).to_vec(),
                right: vec![len, self.in_dim],
            });
        }
        let mut h = h0;
        let mut states = Vec::with_capacity(len);
        for t in 0..len {
            let x = tape.slice_cols(seq_flat, t * self.in_dim, self.in_dim)?;
            h = self.step(tape, store, x, h)?;
            states.push(h);
        }
        tape.concat_cols(&states)
    }

    /// Spec-shaped entry point: a single sequence [len, in_dim] and initial
    /// state [hidden_dim]; returns hidden states [len, hidden_dim].
    pub fn forward_sequence(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: Var,
        h0: Var,
    ) -> Result<Var> {
        let len = tape.shape(seq)[0];
        let flat = tape.reshape(seq, vec![1, len * self.in_dim])?;
        let h0 = tape.reshape(h0, vec![1, self.hidden_dim])?;
        let states = self.forward_flat(tape, store, flat, h0, len)?;
        tape.reshape(states, vec![len, self.hidden_dim])
    }
}

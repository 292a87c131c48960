//! Layers shared by the encoder, decoder and refinement stages.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::numerics::{KeySets, NormStats, NumericsError, ParamId, ParamKind, ParamStore, Tape, Var};

type Result<T> = std::result::Result<T, NumericsError>;

/// Hands out hierarchically named parameters during model construction.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        let prefix = self.name(name);
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn xavier(&mut self, leaf: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let name = self.name(leaf);
        self.store.xavier(name, shape, fan_in, fan_out, self.rng)
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> ParamId {
        let name = self.name(leaf);
        self.store.normal(name, shape, std, self.rng)
    }

    pub fn filled(&mut self, leaf: &str, kind: ParamKind, shape: &[usize], value: f64) -> ParamId {
        let name = self.name(leaf);
        self.store.filled(name, kind, shape, value)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            weight: s.xavier("weight", &[d_in, d_out], d_in, d_out),
            bias: Some(s.filled("bias", ParamKind::NoDecay, &[d_out], 0.0)),
        }
    }

    pub fn without_bias(b: &mut Builder<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            weight: s.xavier("weight", &[d_in, d_out], d_in, d_out),
            bias: None,
        }
    }

    /// All-zero weight and bias.
    pub fn zeroed(b: &mut Builder<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            weight: s.filled("weight", ParamKind::Weight, &[d_in, d_out], 0.0),
            bias: Some(s.filled("bias", ParamKind::NoDecay, &[d_out], 0.0)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = self.bias.map(|b| tape.param(params, b));
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            gain: s.filled("gain", ParamKind::NoDecay, &[dim], 1.0),
            bias: s.filled("bias", ParamKind::NoDecay, &[dim], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(params, self.gain);
        let b = tape.param(params, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Batch norm over the rows of each sequence, per channel. Training tapes
/// normalize with the sequence statistics and report them; evaluation tapes
/// use the running statistics.
#[derive(Debug, Clone)]
pub struct SequenceBatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

impl SequenceBatchNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            gain: s.filled("gain", ParamKind::NoDecay, &[dim], 1.0),
            bias: s.filled("bias", ParamKind::NoDecay, &[dim], 0.0),
            running_mean: s.filled("running_mean", ParamKind::Buffer, &[dim], 0.0),
            running_var: s.filled("running_var", ParamKind::Buffer, &[dim], 1.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: Var, seq_len: usize) -> Result<Var> {
        let g = tape.param(params, self.gain);
        let b = tape.param(params, self.bias);
        if tape.is_train() {
            let (y, mean, var) = tape.batch_norm_train(x, g, b, seq_len)?;
            tape.record_norm_stats(NormStats {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean: mean,
                batch_var: var,
            });
            Ok(y)
        } else {
            tape.batch_norm_eval(
                x,
                g,
                b,
                params.value(self.running_mean).data(),
                params.value(self.running_var).data(),
            )
        }
    }
}

/// Folds batch statistics into running statistics with exponential averaging.
pub fn apply_norm_stats(params: &mut ParamStore, stats: &[NormStats]) {
    for s in stats {
        let m = BATCH_NORM_MOMENTUM;
        for (r, b) in params.get_mut(s.mean).value.data_mut().iter_mut().zip(&s.batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in params.get_mut(s.var).value.data_mut().iter_mut().zip(&s.batch_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Three-stage input embedding:
/// `Linear -> LN -> ReLU -> Linear -> LN -> ReLU -> Linear -> LN`.
#[derive(Debug, Clone)]
pub struct Embedding {
    layers: [Linear; 3],
    norms: [LayerNorm; 3],
}

impl Embedding {
    pub fn new(b: &mut Builder<'_>, name: &str, d_in: usize, dim: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            layers: [
                Linear::new(&mut s, "fc0", d_in, dim),
                Linear::new(&mut s, "fc1", dim, dim),
                Linear::new(&mut s, "fc2", dim, dim),
            ],
            norms: [
                LayerNorm::new(&mut s, "ln0", dim),
                LayerNorm::new(&mut s, "ln1", dim),
                LayerNorm::new(&mut s, "ln2", dim),
            ],
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (lin, ln)) in self.layers.iter().zip(&self.norms).enumerate() {
            h = lin.forward(tape, params, h)?;
            h = ln.forward(tape, params, h)?;
            if i < 2 {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

/// Position-wise feedforward, hidden width `4 * dim`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
    act: Activation,
    dropout: f64,
}

impl FeedForward {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, act: Activation, dropout: f64) -> Self {
        let mut s = b.scope(name);
        Self {
            up: Linear::new(&mut s, "up", dim, 4 * dim),
            down: Linear::new(&mut s, "down", 4 * dim, dim),
            act,
            dropout,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, params, x)?;
        let h = self.act.apply(tape, h);
        let h = tape.dropout(h, self.dropout)?;
        let h = self.down.forward(tape, params, h)?;
        tape.dropout(h, self.dropout)
    }
}

/// Plain MLP: linear layers with ReLU between them, optionally with layer
/// norm before each activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    norms: Vec<LayerNorm>,
}

impl Mlp {
    /// `widths = [d_in, h1, ..., d_out]`.
    pub fn new(b: &mut Builder<'_>, name: &str, widths: &[usize], layer_norm: bool) -> Self {
        Self::build(b, name, widths, layer_norm, false)
    }

    /// Same as [`Mlp::new`] with the last layer initialized to zero.
    pub fn zero_last(b: &mut Builder<'_>, name: &str, widths: &[usize], layer_norm: bool) -> Self {
        Self::build(b, name, widths, layer_norm, true)
    }

    fn build(b: &mut Builder<'_>, name: &str, widths: &[usize], layer_norm: bool, zero_last: bool) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let mut s = b.scope(name);
        let depth = widths.len() - 1;
        let mut layers = Vec::with_capacity(depth);
        let mut norms = Vec::new();
        for i in 0..depth {
            let lname = format!("fc{i}");
            if zero_last && i + 1 == depth {
                layers.push(Linear::zeroed(&mut s, &lname, widths[i], widths[i + 1]));
            } else {
                layers.push(Linear::new(&mut s, &lname, widths[i], widths[i + 1]));
            }
            if layer_norm && i + 1 < depth {
                norms.push(LayerNorm::new(&mut s, &format!("ln{i}"), widths[i + 1]));
            }
        }
        Self { layers, norms }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, lin) in self.layers.iter().enumerate() {
            h = lin.forward(tape, params, h)?;
            if i < last {
                if let Some(ln) = self.norms.get(i) {
                    h = ln.forward(tape, params, h)?;
                }
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Output of [`GatedAttention::forward`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub out: Var,
    /// The raw attention node, for inspecting weights.
    pub attention: Var,
}

/// Multi-head attention block with a gated self path, residual connections
/// and a feedforward sublayer:
///
/// ```text
/// agg  = MHA(W_q LN(x), W_k kv, W_v kv)
/// gate = sigmoid(W_ih agg + W_hh LN(x))
/// x'   = x + W_o (agg + gate * (W_self LN(x) - agg))
/// out  = x' + FF(LN(x'))
/// ```
///
/// A query with no keys has `agg = 0`, so it flows through the gated self
/// path only.
#[derive(Debug, Clone)]
pub struct GatedAttention {
    norm_query: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    self_proj: Linear,
    gate_agg: Linear,
    gate_self: Linear,
    out_proj: Linear,
    norm_ff: LayerNorm,
    ff: FeedForward,
    heads: usize,
    dropout: f64,
}

impl GatedAttention {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, kv_dim: usize, heads: usize, dropout: f64) -> Self {
        let mut s = b.scope(name);
        Self {
            norm_query: LayerNorm::new(&mut s, "norm_query", dim),
            query: Linear::new(&mut s, "query", dim, dim),
            key: Linear::new(&mut s, "key", kv_dim, dim),
            value: Linear::new(&mut s, "value", kv_dim, dim),
            self_proj: Linear::new(&mut s, "self_proj", dim, dim),
            gate_agg: Linear::new(&mut s, "gate_agg", dim, dim),
            gate_self: Linear::new(&mut s, "gate_self", dim, dim),
            out_proj: Linear::new(&mut s, "out_proj", dim, dim),
            norm_ff: LayerNorm::new(&mut s, "norm_ff", dim),
            ff: FeedForward::new(&mut s, "ff", dim, Activation::Relu, dropout),
            heads,
            dropout,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        x: Var,
        kv: Var,
        keys: Arc<KeySets>,
    ) -> Result<AttentionOutput> {
        let xn = self.norm_query.forward(tape, params, x)?;
        let q = self.query.forward(tape, params, xn)?;
        let k = self.key.forward(tape, params, kv)?;
        let v = self.value.forward(tape, params, kv)?;
        let agg = tape.attention(q, k, v, self.heads, keys)?;
        let ga = self.gate_agg.forward(tape, params, agg)?;
        let gs = self.gate_self.forward(tape, params, xn)?;
        let gate = tape.add(ga, gs)?;
        let gate = tape.sigmoid(gate);
        let own = self.self_proj.forward(tape, params, xn)?;
        let diff = tape.sub(own, agg)?;
        let gated = tape.mul(gate, diff)?;
        let upd = tape.add(agg, gated)?;
        let upd = self.out_proj.forward(tape, params, upd)?;
        let upd = tape.dropout(upd, self.dropout)?;
        let x = tape.add(x, upd)?;
        let h = self.norm_ff.forward(tape, params, x)?;
        let h = self.ff.forward(tape, params, h)?;
        let out = tape.add(x, h)?;
        Ok(AttentionOutput {
            out,
            attention: agg,
        })
    }
}

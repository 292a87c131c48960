//! Local temporal-spatial encoder: per-step agent-agent attention, the local
//! trend-aware temporal stack, the motion state encoder and agent-lane
//! attention.

use std::ops::Range;
use std::sync::Arc;

use crate::nn::{
    Activation, AttentionOutput, Builder, Embedding, FeedForward, GatedAttention, LayerNorm, Linear,
    SequenceBatchNorm,
};
use crate::numerics::{KeySets, NumericsError, ParamId, ParamStore, Tape, Var};
use crate::scene::MOTION_STATE_DIM;

type Result<T> = std::result::Result<T, NumericsError>;

/// Width of one lane feature row.
pub const LANE_FEATURE_DIM: usize = 7;

/// Splits `0..len` into consecutive boxes of `box_size`; the last box holds
/// the remainder when `len` is not a multiple.
pub fn local_box_partition(len: usize, box_size: usize) -> Result<Vec<Range<usize>>> {
    if box_size == 0 {
        return Err(NumericsError::Invalid("box size must be at least 1".into()));
    }
    Ok((0..len)
        .step_by(box_size)
        .map(|s| s..(s + box_size).min(len))
        .collect())
}

/// Key sets for box-local attention over `seqs` stacked sequences of `len`
/// rows. A query sees the valid rows of its own box.
pub fn box_keys(seqs: usize, len: usize, box_size: usize, valid: &[bool]) -> Result<KeySets> {
    if valid.len() != seqs * len {
        return Err(NumericsError::Invalid(format!(
            "box_keys: {} validity flags for {seqs} x {len} rows",
            valid.len()
        )));
    }
    let boxes = local_box_partition(len, box_size)?;
    let mut keys = KeySets::new();
    for s in 0..seqs {
        let base = s * len;
        for b in &boxes {
            let members: Vec<usize> = b.clone().map(|p| base + p).filter(|&r| valid[r]).collect();
            for _ in b.clone() {
                keys.push_query(members.iter().copied());
            }
        }
    }
    Ok(keys)
}

/// Per-step spatial interaction: `c_i^t = MHA(phi_center(h_i^t), phi_nbr([h_j^t, h_ij^t]))`.
#[derive(Debug, Clone)]
pub struct AgentAgentEncoder {
    center: Embedding,
    neighbor: Embedding,
    attn: GatedAttention,
}

impl AgentAgentEncoder {
    pub fn new(b: &mut Builder<'_>, dim: usize, heads: usize, dropout: f64) -> Self {
        let mut s = b.scope("agent_agent");
        Self {
            center: Embedding::new(&mut s, "center", 2, dim),
            neighbor: Embedding::new(&mut s, "neighbor", 4, dim),
            attn: GatedAttention::new(&mut s, "attn", dim, dim, heads, dropout),
        }
    }

    /// `center` is `[Q, 2]` (one row per agent and step), `neighbor` is
    /// `[E, 4]` and `keys` maps query rows to neighbor rows. Rows whose
    /// `row_mask` entry is 0 are zeroed in the output.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        center: Var,
        neighbor: Var,
        keys: Arc<KeySets>,
        row_mask: Vec<f64>,
    ) -> Result<AttentionOutput> {
        let s = self.center.forward(tape, params, center)?;
        let n = self.neighbor.forward(tape, params, neighbor)?;
        let mut o = self.attn.forward(tape, params, s, n, keys)?;
        o.out = tape.scale_rows(o.out, row_mask)?;
        Ok(o)
    }
}

/// One local trend-aware attention layer. Queries and keys come from causal
/// convolutions followed by batch norm; attention is restricted to boxes.
#[derive(Debug, Clone)]
pub struct LtaaLayer {
    pub box_size: usize,
    norm_in: LayerNorm,
    conv_q: ParamId,
    conv_k: ParamId,
    bn_q: SequenceBatchNorm,
    bn_k: SequenceBatchNorm,
    value: Linear,
    out_proj: Linear,
    norm_ff: LayerNorm,
    ff: FeedForward,
    heads: usize,
    dropout: f64,
}

/// Intermediate values of one layer, for inspection.
#[derive(Debug, Clone)]
pub struct LtaaLayerTrace {
    pub box_size: usize,
    pub input: Var,
    pub q: Var,
    pub k: Var,
    pub attention: Var,
    pub keys: Arc<KeySets>,
    pub output: Var,
}

impl LtaaLayer {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        kernel: usize,
        box_size: usize,
        dropout: f64,
    ) -> Self {
        let mut s = b.scope(name);
        Self {
            box_size,
            norm_in: LayerNorm::new(&mut s, "norm_in", dim),
            conv_q: s.xavier("conv_q", &[kernel, dim, dim], kernel * dim, dim),
            conv_k: s.xavier("conv_k", &[kernel, dim, dim], kernel * dim, dim),
            bn_q: SequenceBatchNorm::new(&mut s, "bn_q", dim),
            bn_k: SequenceBatchNorm::new(&mut s, "bn_k", dim),
            value: Linear::new(&mut s, "value", dim, dim),
            out_proj: Linear::new(&mut s, "out_proj", dim, dim),
            norm_ff: LayerNorm::new(&mut s, "norm_ff", dim),
            ff: FeedForward::new(&mut s, "ff", dim, Activation::Gelu, dropout),
            heads,
            dropout,
        }
    }

    /// `lookahead > 0` moves the convolution window into the future; it
    /// exists only to build a deliberately broken model for negative tests.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        x: Var,
        seq_len: usize,
        keys: Arc<KeySets>,
        lookahead: usize,
    ) -> Result<LtaaLayerTrace> {
        let xn = self.norm_in.forward(tape, params, x)?;
        let wq = tape.param(params, self.conv_q);
        let wk = tape.param(params, self.conv_k);
        let q = tape.conv1d_shifted(xn, wq, seq_len, lookahead)?;
        let q = self.bn_q.forward(tape, params, q, seq_len)?;
        let k = tape.conv1d_shifted(xn, wk, seq_len, lookahead)?;
        let k = self.bn_k.forward(tape, params, k, seq_len)?;
        let v = self.value.forward(tape, params, xn)?;
        let attention = tape.attention(q, k, v, self.heads, keys.clone())?;
        let upd = self.out_proj.forward(tape, params, attention)?;
        let upd = tape.dropout(upd, self.dropout)?;
        let h = tape.add(x, upd)?;
        let f = self.norm_ff.forward(tape, params, h)?;
        let f = self.ff.forward(tape, params, f)?;
        let output = tape.add(h, f)?;
        Ok(LtaaLayerTrace {
            box_size: self.box_size,
            input: x,
            q,
            k,
            attention,
            keys,
            output,
        })
    }
}

/// Stack of LTAA layers with growing boxes over `[z_i; token]` sequences.
#[derive(Debug, Clone)]
pub struct Ltaa {
    token: ParamId,
    positions: ParamId,
    layers: Vec<LtaaLayer>,
    norm_out: LayerNorm,
    observed: usize,
    /// Test-only fault: makes the convolutions look one step ahead.
    pub noncausal: bool,
}

#[derive(Debug, Clone)]
pub struct LtaaOutput {
    /// `[A, d]`, the final token row of each sequence after the last layer.
    pub summary: Var,
    /// `[A * (T_o + 1), d]` sequences fed to the first layer.
    pub sequence: Var,
    pub layers: Vec<LtaaLayerTrace>,
}

impl Ltaa {
    pub fn new(
        b: &mut Builder<'_>,
        dim: usize,
        heads: usize,
        kernel: usize,
        observed: usize,
        box_sizes: &[usize],
        dropout: f64,
    ) -> Self {
        let mut s = b.scope("ltaa");
        let layers = box_sizes
            .iter()
            .enumerate()
            .map(|(i, &u)| LtaaLayer::new(&mut s, &format!("layer{i}"), dim, heads, kernel, u, dropout))
            .collect();
        Self {
            token: s.normal("token", &[1, dim], 0.02),
            positions: s.normal("positions", &[observed + 1, dim], 0.02),
            layers,
            norm_out: LayerNorm::new(&mut s, "norm_out", dim),
            observed,
            noncausal: false,
        }
    }

    pub fn layers(&self) -> &[LtaaLayer] {
        &self.layers
    }

    pub fn seq_len(&self) -> usize {
        self.observed + 1
    }

    /// `z` is `[A * T_o, d]`; `valid[a * T_o + t]` says whether step `t` of
    /// agent `a` may be attended to. The appended token is always valid.
    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, z: Var, valid: &[bool]) -> Result<LtaaOutput> {
        let to = self.observed;
        let len = self.seq_len();
        let rows = tape.shape(z)[0];
        if rows % to != 0 || valid.len() != rows {
            return Err(NumericsError::Invalid(format!(
                "ltaa: {rows} rows ({} flags) do not form sequences of {to} steps",
                valid.len()
            )));
        }
        let agents = rows / to;
        let token = tape.param(params, self.token);
        let pos = tape.param(params, self.positions);
        let stacked = tape.concat_rows(&[z, token])?;
        let mut order = Vec::with_capacity(agents * len);
        for a in 0..agents {
            order.extend((0..to).map(|t| a * to + t));
            order.push(rows);
        }
        let seq = tape.gather_rows(stacked, order)?;
        let pos_rows: Vec<usize> = (0..agents).flat_map(|_| 0..len).collect();
        let pos = tape.gather_rows(pos, pos_rows)?;
        let sequence = tape.add(seq, pos)?;
        let mut flags = Vec::with_capacity(agents * len);
        for a in 0..agents {
            flags.extend_from_slice(&valid[a * to..(a + 1) * to]);
            flags.push(true);
        }
        self.encode(tape, params, sequence, &flags)
    }

    /// Runs the layer stack on ready-made `[A * (T_o + 1), d]` sequences,
    /// token last, with per-row validity `flags`.
    pub fn encode(&self, tape: &mut Tape, params: &ParamStore, sequence: Var, flags: &[bool]) -> Result<LtaaOutput> {
        let to = self.observed;
        let len = self.seq_len();
        let rows = tape.shape(sequence)[0];
        if rows % len != 0 || flags.len() != rows {
            return Err(NumericsError::Invalid(format!(
                "ltaa: {rows} rows ({} flags) do not form sequences of {len} tokens",
                flags.len()
            )));
        }
        let agents = rows / len;
        let lookahead = usize::from(self.noncausal);
        let mut x = sequence;
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let keys = Arc::new(box_keys(agents, len, layer.box_size, flags)?);
            let tr = layer.forward(tape, params, x, len, keys, lookahead)?;
            x = tr.output;
            traces.push(tr);
        }
        let last: Vec<usize> = (0..agents).map(|a| a * len + to).collect();
        let summary = tape.gather_rows(x, last)?;
        let summary = self.norm_out.forward(tape, params, summary)?;
        Ok(LtaaOutput {
            summary,
            sequence,
            layers: traces,
        })
    }
}

/// Attention from the temporal summary over the neighbors' motion state
/// vectors.
#[derive(Debug, Clone)]
pub struct MotionStateEncoder {
    embed: Embedding,
    attn: GatedAttention,
}

impl MotionStateEncoder {
    pub fn new(b: &mut Builder<'_>, dim: usize, heads: usize, dropout: f64) -> Self {
        let mut s = b.scope("motion");
        Self {
            embed: Embedding::new(&mut s, "embed", MOTION_STATE_DIM, dim),
            attn: GatedAttention::new(&mut s, "attn", dim, dim, heads, dropout),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        summary: Var,
        motion: Var,
        keys: Arc<KeySets>,
    ) -> Result<AttentionOutput> {
        let m = self.embed.forward(tape, params, motion)?;
        self.attn.forward(tape, params, summary, m, keys)
    }
}

/// Attention from the motion-aware embedding over nearby lane segments.
#[derive(Debug, Clone)]
pub struct AgentLaneEncoder {
    embed: Embedding,
    attn: GatedAttention,
}

impl AgentLaneEncoder {
    pub fn new(b: &mut Builder<'_>, dim: usize, heads: usize, dropout: f64) -> Self {
        let mut s = b.scope("lane");
        Self {
            embed: Embedding::new(&mut s, "embed", LANE_FEATURE_DIM, dim),
            attn: GatedAttention::new(&mut s, "attn", dim, dim, heads, dropout),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        query: Var,
        lanes: Var,
        keys: Arc<KeySets>,
    ) -> Result<AttentionOutput> {
        let l = self.embed.forward(tape, params, lanes)?;
        self.attn.forward(tape, params, query, l, keys)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_fn(&[rows, cols], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn box_partition_examples() {
        let sizes = |len, b| -> Vec<usize> {
            local_box_partition(len, b).unwrap().iter().map(|r| r.len()).collect()
        };
        assert_eq!(sizes(21, 3), vec![3; 7]);
        assert_eq!(sizes(21, 21), vec![21]);
        assert_eq!(sizes(20, 7), vec![7, 7, 6]);
        assert!(local_box_partition(5, 0).is_err());
        let r = local_box_partition(20, 7).unwrap();
        assert_eq!(r[0], 0..7);
        assert_eq!(r[2], 14..20);
    }

    fn agent_agent_case(neighbors: &[[f64; 4]]) -> (Tape, AttentionOutput) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = AgentAgentEncoder::new(&mut Builder::new(&mut store, &mut rng), 16, 4, 0.0);
        let mut tape = Tape::eval();
        let c = tape.constant(Tensor::from_rows(&[[0.5, -0.2]]).unwrap());
        let rows: Vec<[f64; 4]> = if neighbors.is_empty() { vec![[0.0; 4]] } else { neighbors.to_vec() };
        let n = tape.constant(Tensor::from_rows(&rows).unwrap());
        let keys = KeySets::from_lists(&[(0..neighbors.len()).collect::<Vec<_>>()]);
        let o = enc
            .forward(&mut tape, &store, c, n, Arc::new(keys), vec![1.0])
            .unwrap();
        (tape, o)
    }

    #[test]
    fn singleton_neighbor_gets_full_weight() {
        let (tape, o) = agent_agent_case(&[[0.1, 0.2, 3.0, -1.0]]);
        for h in 0..4 {
            assert_eq!(tape.attention_weights(o.attention, 0, h).unwrap(), &[1.0]);
        }
    }

    #[test]
    fn identical_neighbors_split_evenly() {
        let nb = [0.1, 0.2, 3.0, -1.0];
        let (tape, o) = agent_agent_case(&[nb, nb]);
        for h in 0..4 {
            let w = tape.attention_weights(o.attention, 0, h).unwrap();
            assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn no_neighbors_has_zero_aggregate() {
        let (tape, o) = agent_agent_case(&[]);
        assert!(tape.value(o.attention).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(o.out).is_finite());
    }

    #[test]
    fn neighbor_permutation_invariance() {
        let a = [0.1, 0.2, 3.0, -1.0];
        let b = [-0.4, 0.7, 1.0, 2.0];
        let c = [0.9, -0.3, -2.0, 0.5];
        let (t1, o1) = agent_agent_case(&[a, b, c]);
        let (t2, o2) = agent_agent_case(&[c, a, b]);
        assert!(t1.value(o1.out).max_abs_diff(t2.value(o2.out)) < 1e-12);
    }

    fn ltaa(dim: usize, observed: usize, boxes: &[usize]) -> (ParamStore, Ltaa) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let l = Ltaa::new(&mut Builder::new(&mut store, &mut rng), dim, 4, 3, observed, boxes, 0.0);
        (store, l)
    }

    #[test]
    fn box_masking_is_exact() {
        let (store, l) = ltaa(16, 20, &[3, 7, 21]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::train(0);
        let z = tape.variable(random(&mut rng, 40, 16));
        let out = l.forward(&mut tape, &store, z, &[true; 40]).unwrap();
        for tr in &out.layers {
            let u = tr.box_size;
            for r in 0..42 {
                let keys = tr.keys.keys(r);
                assert!(keys.iter().all(|&k| k / 21 == r / 21 && (k % 21) / u == (r % 21) / u));
            }
        }
        // first layer, u = 3: query 1 (box 0..3) never sees row 5
        assert!(!out.layers[0].keys.keys(1).contains(&5));
    }

    #[test]
    fn full_box_equals_dense_attention() {
        let flags = vec![true; 21];
        let boxed = box_keys(1, 21, 21, &flags).unwrap();
        assert_eq!(boxed, KeySets::dense(21, 21));
    }

    #[test]
    fn zero_kernels_give_uniform_box_weights() {
        let (mut store, l) = ltaa(8, 6, &[3, 7]);
        for layer in &l.layers {
            for id in [layer.conv_q, layer.conv_k] {
                store.get_mut(id).value.data_mut().fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::train(0);
        let z = tape.variable(random(&mut rng, 12, 8));
        let out = l.forward(&mut tape, &store, z, &[true; 12]).unwrap();
        let tr = &out.layers[0];
        for r in 0..14 {
            let w = tape.attention_weights(tr.attention, r, 0).unwrap();
            let u = 1.0 / w.len() as f64;
            assert!(w.iter().all(|x| (x - u).abs() < 1e-12), "{w:?}");
        }
    }
}

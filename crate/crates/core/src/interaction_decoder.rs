//! Global interaction between agents and the Laplace mixture decoder.

use std::sync::Arc;

use crate::nn::{AttentionOutput, Builder, Embedding, GatedAttention, Mlp};
use crate::numerics::{KeySets, NumericsError, ParamStore, Tape, Var};
use crate::scene::{Frame, LocalContext, NeighborContext, Vec2};

type Result<T> = std::result::Result<T, NumericsError>;

/// Width of the pairwise geometry row `[h_ij, cos, sin]`.
pub const PAIR_FEATURE_DIM: usize = 4;

/// Lower bound added to every predicted scale, meters.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Relative position of `j` at the current step in the frame of `i`, and the
/// cosine and sine of their heading difference.
pub fn pairwise_features(ctx_i: &LocalContext, nbr: &NeighborContext) -> [f64; PAIR_FEATURE_DIM] {
    let h = ctx_i.current_relative(nbr);
    let (s, c) = nbr.relative_heading.sin_cos();
    [h[0], h[1], c, s]
}

/// `psi_global_i = MHA(psi_local_i, [psi_local_j, phi_global(g_ij)])`.
#[derive(Debug, Clone)]
pub struct GlobalInteractor {
    embed: Embedding,
    attn: GatedAttention,
}

impl GlobalInteractor {
    pub fn new(b: &mut Builder<'_>, dim: usize, heads: usize, dropout: f64) -> Self {
        let mut s = b.scope("global");
        Self {
            embed: Embedding::new(&mut s, "embed", PAIR_FEATURE_DIM, dim),
            attn: GatedAttention::new(&mut s, "attn", dim, 2 * dim, heads, dropout),
        }
    }

    /// `pair` is `[E, 4]`; edge `e` points from the agent whose key set
    /// contains `e` to agent row `source[e]` of `local`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        local: Var,
        pair: Var,
        source: Vec<usize>,
        keys: Arc<KeySets>,
    ) -> Result<AttentionOutput> {
        let g = self.embed.forward(tape, params, pair)?;
        let src = tape.gather_rows(local, source)?;
        let kv = tape.concat_cols(&[src, g])?;
        self.attn.forward(tape, params, local, kv, keys)
    }
}

/// Three separate heads over `[psi_local, psi_global]`.
#[derive(Debug, Clone)]
pub struct MultimodalDecoder {
    loc: Mlp,
    scale: Mlp,
    pi: Mlp,
    modes: usize,
    steps: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    /// `[A * M, T_p * 2]`, agent-major then mode.
    pub loc: Var,
    /// Same layout as `loc`, strictly positive.
    pub scale: Var,
    /// `[A, M]` unnormalized mode scores.
    pub logits: Var,
    /// `[A, M]` mode probabilities.
    pub probs: Var,
}

impl MultimodalDecoder {
    pub fn new(b: &mut Builder<'_>, dim: usize, hidden: usize, modes: usize, steps: usize) -> Self {
        let mut s = b.scope("decoder");
        Self {
            loc: Mlp::new(&mut s, "loc", &[2 * dim, hidden, modes * steps * 2], true),
            scale: Mlp::new(&mut s, "scale", &[2 * dim, hidden, modes * steps * 2], true),
            pi: Mlp::new(&mut s, "pi", &[2 * dim, hidden, modes], true),
            modes,
            steps,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, local: Var, global: Var) -> Result<DecoderOutput> {
        let agents = tape.shape(local)[0];
        let x = tape.concat_cols(&[local, global])?;
        let loc = self.loc.forward(tape, params, x)?;
        let loc = tape.reshape(loc, &[agents * self.modes, self.steps * 2])?;
        let scale = self.scale.forward(tape, params, x)?;
        let scale = tape.softplus(scale);
        let scale = tape.add_scalar(scale, SCALE_FLOOR);
        let scale = tape.reshape(scale, &[agents * self.modes, self.steps * 2])?;
        let logits = self.pi.forward(tape, params, x)?;
        let probs = tape.softmax(logits);
        Ok(DecoderOutput {
            loc,
            scale,
            logits,
            probs,
        })
    }
}

/// Per-agent Laplace mixture read back from a tape, in agent-local frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDistribution {
    pub modes: usize,
    pub steps: usize,
    /// `loc[a][m][t]`.
    pub loc: Vec<Vec<Vec<Vec2>>>,
    pub scale: Vec<Vec<Vec<Vec2>>>,
    /// `probs[a][m]`.
    pub probs: Vec<Vec<f64>>,
}

fn unpack(data: &[f64], agents: usize, modes: usize, steps: usize) -> Vec<Vec<Vec<Vec2>>> {
    (0..agents)
        .map(|a| {
            (0..modes)
                .map(|m| {
                    let base = (a * modes + m) * steps * 2;
                    (0..steps)
                        .map(|t| [data[base + 2 * t], data[base + 2 * t + 1]])
                        .collect()
                })
                .collect()
        })
        .collect()
}

impl TrajectoryDistribution {
    pub fn from_tape(tape: &Tape, loc: Var, scale: Var, probs: Var, modes: usize) -> Self {
        let p = tape.value(probs);
        let agents = p.rows();
        let steps = tape.value(loc).cols() / 2;
        Self {
            modes,
            steps,
            loc: unpack(tape.value(loc).data(), agents, modes, steps),
            scale: unpack(tape.value(scale).data(), agents, modes, steps),
            probs: (0..agents).map(|a| p.row(a).to_vec()).collect(),
        }
    }

    pub fn agents(&self) -> usize {
        self.probs.len()
    }

    /// Mode locations of agent `a` in world coordinates.
    pub fn world_locations(&self, a: usize, frame: &Frame) -> Vec<Vec<Vec2>> {
        self.loc[a].iter().map(|m| to_global_frame(m, frame)).collect()
    }
}

/// Maps agent-local points back to the world: `p = R^T q + origin`.
pub fn to_global_frame(points: &[Vec2], frame: &Frame) -> Vec<Vec2> {
    points.iter().map(|&q| frame.to_world(q)).collect()
}

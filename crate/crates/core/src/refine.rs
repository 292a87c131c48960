//! Lightweight proposal refinement: MLPs that predict an offset for every
//! stage-one mode from the proposal, the full observed-plus-predicted
//! trajectory and the agent's local and global embeddings.

use crate::nn::{Builder, Linear, Mlp};
use crate::numerics::{NumericsError, ParamStore, Tape, Var};

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Clone)]
pub struct Refiner {
    proposal: Mlp,
    full_in: Linear,
    full_hidden: Linear,
    full_out: Linear,
    consistency: Mlp,
    offset: Mlp,
}

#[derive(Debug, Clone, Copy)]
pub struct RefineOutput {
    pub proposal_embedding: Var,
    /// Projection of the full trajectory before the residual block.
    pub full_projection: Var,
    pub full_embedding: Var,
    pub consistency: Var,
    pub offset: Var,
    /// `proposal + offset`, same layout as the proposal.
    pub refined: Var,
}

impl Refiner {
    pub fn new(b: &mut Builder<'_>, dim: usize, observed: usize, predicted: usize) -> Self {
        let mut s = b.scope("refine");
        let p = predicted * 2;
        let full = (observed + predicted) * 2;
        Self {
            proposal: Mlp::new(&mut s, "proposal", &[p, dim, dim], true),
            full_in: Linear::new(&mut s, "full_in", full, dim),
            full_hidden: Linear::new(&mut s, "full_hidden", dim, dim),
            full_out: Linear::new(&mut s, "full_out", dim, dim),
            consistency: Mlp::new(&mut s, "consistency", &[dim, dim, dim, dim], true),
            offset: Mlp::zero_last(&mut s, "offset", &[4 * dim, 2 * dim, dim, p], true),
        }
    }

    /// Zeroes the inner residual layer of the full-trajectory block.
    pub fn zero_full_residual(&self, params: &mut ParamStore) {
        for id in [Some(self.full_out.weight), self.full_out.bias].into_iter().flatten() {
            params.get_mut(id).value.data_mut().fill(0.0);
        }
    }

    /// All inputs have one row per agent and mode: `proposal` is
    /// `[R, T_p * 2]`, `observed` is `[R, T_o * 2]`, `local` and `global`
    /// are `[R, d]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        proposal: Var,
        observed: Var,
        local: Var,
        global: Var,
    ) -> Result<RefineOutput> {
        let psi_p = self.proposal.forward(tape, params, proposal)?;
        let full = tape.concat_cols(&[observed, proposal])?;
        let y0 = self.full_in.forward(tape, params, full)?;
        let h = self.full_hidden.forward(tape, params, y0)?;
        let h = tape.relu(h);
        let h = self.full_out.forward(tape, params, h)?;
        let yf = tape.add(y0, h)?;
        let cons = self.consistency.forward(tape, params, yf)?;
        let joint = tape.concat_cols(&[cons, psi_p, local, global])?;
        let offset = self.offset.forward(tape, params, joint)?;
        let refined = tape.add(proposal, offset)?;
        Ok(RefineOutput {
            proposal_embedding: psi_p,
            full_projection: y0,
            full_embedding: yf,
            consistency: cons,
            offset,
            refined,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Case {
        store: ParamStore,
        refiner: Refiner,
        inputs: Vec<Tensor>,
    }

    fn case() -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let refiner = Refiner::new(&mut Builder::new(&mut store, &mut rng), 8, 4, 5);
        let mut t = |c| Tensor::from_fn(&[3, c], |_| rng.random_range(-1.0..1.0));
        let inputs = vec![t(10), t(8), t(8), t(8)];
        Case { store, refiner, inputs }
    }

    fn run(c: &Case, inputs: &[Tensor]) -> (Tape, RefineOutput) {
        let mut tape = Tape::eval();
        let v: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let o = c.refiner.forward(&mut tape, &c.store, v[0], v[1], v[2], v[3]).unwrap();
        (tape, o)
    }

    #[test]
    fn zero_init_refinement_is_identity() {
        let c = case();
        let (tape, o) = run(&c, &c.inputs);
        assert!(tape.value(o.offset).data().iter().all(|&x| x == 0.0));
        assert_eq!(tape.value(o.refined), &c.inputs[0]);
    }

    #[test]
    fn refined_minus_proposal_is_offset() {
        let mut c = case();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in c.store.iter_mut() {
            if p.name.starts_with("refine.offset.fc2") {
                p.value.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
            }
        }
        let (tape, o) = run(&c, &c.inputs);
        let r = tape.value(o.refined).data();
        let off = tape.value(o.offset).data();
        for ((r, p), d) in r.iter().zip(c.inputs[0].data()).zip(off) {
            assert_eq!(*r, p + d);
        }
    }

    #[test]
    fn zeroed_residual_passes_projection() {
        let mut c = case();
        c.refiner.zero_full_residual(&mut c.store);
        let (tape, o) = run(&c, &c.inputs);
        assert_eq!(tape.value(o.full_embedding), tape.value(o.full_projection));
    }

    #[test]
    fn rows_are_independent() {
        let c = case();
        let (t1, o1) = run(&c, &c.inputs);
        let mut changed = c.inputs.clone();
        changed[0].data_mut()[0] += 1.0;
        let (t2, o2) = run(&c, &changed);
        let (a, b) = (t1.value(o1.consistency), t2.value(o2.consistency));
        assert_ne!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_eq!(a.row(2), b.row(2));
    }

    #[test]
    fn observed_steps_reach_consistency_embedding() {
        let c = case();
        let (t1, o1) = run(&c, &c.inputs);
        for k in 0..8 {
            let mut changed = c.inputs.clone();
            changed[1].data_mut()[k] += 1e-3;
            let (t2, o2) = run(&c, &changed);
            assert_ne!(t1.value(o1.consistency).row(0), t2.value(o2.consistency).row(0), "step {k}");
        }
    }

    #[test]
    fn zero_proposal_gives_bias_path() {
        let c = case();
        let mut inputs = c.inputs.clone();
        inputs[0].data_mut().fill(0.0);
        let (tape, o) = run(&c, &inputs);
        let e = tape.value(o.proposal_embedding);
        assert_eq!(e.row(0), e.row(1));
    }
}

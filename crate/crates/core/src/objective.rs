//! Two-stage training loss and displacement metrics.
//!
//! Regression terms are evaluated in each agent's own frame, where the
//! Laplace scales were predicted. Displacements and hence the best mode are
//! the same in every frame because frames differ by rigid motions.

use crate::interaction_decoder::DecoderOutput;
use crate::model::{ForwardOutput, Targets};
use crate::numerics::{Tape, Tensor, Var};
use crate::scene::{norm, sub, Vec2};

/// Euclidean displacement as written, `sqrt(dx^2 + dy^2)`.
fn displacement(p: Vec2, g: Vec2) -> f64 {
    let d = sub(p, g);
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}
use crate::{Error, Result};

pub use crate::numerics::smooth_l1;

/// Default miss threshold on the final displacement, meters.
pub const MISS_THRESHOLD: f64 = 2.0;

/// Mean displacement of each mode to the target, lowest index on ties.
pub fn best_mode(modes: &[&[f64]], target: &[Vec2]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (m, loc) in modes.iter().enumerate() {
        let ade = target
            .iter()
            .enumerate()
            .map(|(t, g)| norm(sub([loc[2 * t], loc[2 * t + 1]], *g)))
            .sum::<f64>()
            / target.len() as f64;
        if ade < best.1 {
            best = (m, ade);
        }
    }
    best.0
}

/// Best stage-one mode of every scored agent.
pub fn best_modes(loc: &Tensor, modes: usize, targets: &Targets) -> Vec<usize> {
    targets
        .slots
        .iter()
        .zip(&targets.local)
        .map(|(&a, g)| {
            let rows: Vec<&[f64]> = (0..modes).map(|m| loc.row(a * modes + m)).collect();
            best_mode(&rows, g)
        })
        .collect()
}

fn target_tensor(targets: &Targets) -> Tensor {
    let steps = targets.local[0].len();
    Tensor::from_fn(&[targets.len(), steps * 2], |i| {
        let (r, c) = (i / (steps * 2), i % (steps * 2));
        targets.local[r][c / 2][c % 2]
    })
}

/// Classification and winner-take-all Laplace regression terms, plus the
/// selected modes.
pub fn loss_stage1(
    tape: &mut Tape,
    dec: &DecoderOutput,
    modes: usize,
    targets: &Targets,
) -> Result<(Var, Var, Vec<usize>)> {
    if targets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let best = best_modes(tape.value(dec.loc), modes, targets);
    let rows: Vec<usize> = targets
        .slots
        .iter()
        .zip(&best)
        .map(|(&a, &m)| a * modes + m)
        .collect();
    let mu = tape.gather_rows(dec.loc, rows.clone())?;
    let beta = tape.gather_rows(dec.scale, rows)?;
    let g = tape.constant(target_tensor(targets));
    let resid = tape.sub(g, mu)?;
    let resid = tape.abs(resid);
    let ratio = tape.div(resid, beta)?;
    let two_beta = tape.scale(beta, 2.0);
    let log_term = tape.ln(two_beta);
    let nll = tape.add(log_term, ratio)?;
    let steps = targets.local[0].len();
    let total = tape.sum(nll);
    let reg = tape.scale(total, 1.0 / (targets.len() * steps) as f64);

    let logits = tape.gather_rows(dec.logits, targets.slots.clone())?;
    let logp = tape.log_softmax(logits);
    let onehot = Tensor::from_fn(&[targets.len(), modes], |i| {
        if i % modes == best[i / modes] {
            1.0
        } else {
            0.0
        }
    });
    let onehot = tape.constant(onehot);
    let picked = tape.mul(logp, onehot)?;
    let picked = tape.sum(picked);
    let cls = tape.scale(picked, -1.0 / targets.len() as f64);
    Ok((cls, reg, best))
}

/// Smooth L1 between the refined best mode and the ground truth, summed
/// over both axes and averaged over agents and steps.
pub fn loss_stage2(
    tape: &mut Tape,
    refined: Var,
    modes: usize,
    targets: &Targets,
    best: &[usize],
) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let rows: Vec<usize> = targets
        .slots
        .iter()
        .zip(best)
        .map(|(&a, &m)| a * modes + m)
        .collect();
    let y = tape.gather_rows(refined, rows)?;
    let g = tape.constant(target_tensor(targets));
    let d = tape.sub(y, g)?;
    let l = tape.smooth_l1(d);
    let total = tape.sum(l);
    let steps = targets.local[0].len();
    Ok(tape.scale(total, 1.0 / (targets.len() * steps) as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub cls: Var,
    pub reg: Var,
    pub stage1: Var,
    pub stage2: Var,
    pub all: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub cls: f64,
    pub reg: f64,
    pub stage1: f64,
    pub stage2: f64,
    pub all: f64,
    pub lambda1: f64,
}

impl LossReport {
    pub fn read(tape: &Tape, v: &LossVars, lambda1: f64) -> Self {
        Self {
            cls: tape.value(v.cls).item(),
            reg: tape.value(v.reg).item(),
            stage1: tape.value(v.stage1).item(),
            stage2: tape.value(v.stage2).item(),
            all: tape.value(v.all).item(),
            lambda1,
        }
    }

    /// Component-wise weighted mean of per-scene reports.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(LossReport {
            cls: avg(|r| r.cls),
            reg: avg(|r| r.reg),
            stage1: avg(|r| r.stage1),
            stage2: avg(|r| r.stage2),
            all: avg(|r| r.all),
            lambda1: first.lambda1,
        })
    }
}

/// `L_all = (L_cls + L_reg) + lambda1 * L_stage2`.
pub fn total_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    modes: usize,
    targets: &Targets,
    lambda1: f64,
) -> Result<LossVars> {
    let (cls, reg, best) = loss_stage1(tape, &out.decoder, modes, targets)?;
    let stage2 = loss_stage2(tape, out.refine.refined, modes, targets, &best)?;
    let stage1 = tape.add(cls, reg)?;
    let weighted = tape.scale(stage2, lambda1);
    let all = tape.add(stage1, weighted)?;
    Ok(LossVars {
        cls,
        reg,
        stage1,
        stage2,
        all,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub agents: usize,
    pub modes: usize,
}

/// Running sums of per-agent best displacements.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    ade: f64,
    fde: f64,
    misses: usize,
    agents: usize,
    modes: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one agent: `modes[m][t]` against `truth[t]`.
    pub fn push(&mut self, modes: &[Vec<Vec2>], truth: &[Vec2], threshold: f64) -> Result<()> {
        if modes.is_empty() {
            return Err(Error::Numerics(crate::numerics::NumericsError::Invalid(
                "metrics need at least one mode".into(),
            )));
        }
        if truth.is_empty() || modes.iter().any(|m| m.len() != truth.len()) {
            return Err(Error::Numerics(crate::numerics::NumericsError::Invalid(
                "predicted and true horizons differ".into(),
            )));
        }
        let last = truth.len() - 1;
        let mut best_ade = f64::INFINITY;
        let mut best_fde = f64::INFINITY;
        for m in modes {
            let dist: Vec<f64> = m.iter().zip(truth).map(|(p, g)| displacement(*p, *g)).collect();
            best_ade = best_ade.min(dist.iter().sum::<f64>() / truth.len() as f64);
            best_fde = best_fde.min(dist[last]);
        }
        self.ade += best_ade;
        self.fde += best_fde;
        self.misses += usize::from(best_fde > threshold);
        self.agents += 1;
        self.modes = modes.len();
        Ok(())
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.agents == 0 {
            return Err(Error::EmptyBatch);
        }
        let n = self.agents as f64;
        Ok(MetricReport {
            min_ade: self.ade / n,
            min_fde: self.fde / n,
            miss_rate: self.misses as f64 / n,
            agents: self.agents,
            modes: self.modes,
        })
    }
}

/// minADE, minFDE and miss rate over agents; `predictions[a][m][t]`.
pub fn metrics(predictions: &[Vec<Vec<Vec2>>], truth: &[Vec<Vec2>], threshold: f64) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    for (p, g) in predictions.iter().zip(truth) {
        acc.push(p, g, threshold)?;
    }
    acc.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;
    use crate::nn::Builder;
    use crate::interaction_decoder::MultimodalDecoder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_step_targets(g: Vec2) -> Targets {
        Targets {
            slots: vec![0],
            local: vec![vec![g]],
            world: vec![vec![g]],
        }
    }

    fn dec_from(tape: &mut Tape, loc: &[f64], scale: &[f64], logits: &[f64], modes: usize) -> DecoderOutput {
        let steps2 = loc.len() / modes;
        let loc = tape.variable(Tensor::new(vec![modes, steps2], loc.to_vec()).unwrap());
        let scale = tape.variable(Tensor::new(vec![modes, steps2], scale.to_vec()).unwrap());
        let logits = tape.variable(Tensor::new(vec![1, modes], logits.to_vec()).unwrap());
        let probs = tape.softmax(logits);
        DecoderOutput { loc, scale, logits, probs }
    }

    #[test]
    fn laplace_nll_closed_form() {
        let mut tape = Tape::eval();
        let dec = dec_from(&mut tape, &[1.0, 2.0], &[0.5, 0.5], &[0.0], 1);
        let (_, reg, _) = loss_stage1(&mut tape, &dec, 1, &one_step_targets([1.0, 2.0])).unwrap();
        // log(2 * 0.5) + 0 on both axes
        assert_eq!(tape.value(reg).item(), 0.0);
    }

    #[test]
    fn confident_correct_classification_has_tiny_loss() {
        let mut tape = Tape::eval();
        let dec = dec_from(&mut tape, &[0.0, 0.0, 5.0, 5.0], &[1.0; 4], &[40.0, -40.0], 2);
        let (cls, _, best) = loss_stage1(&mut tape, &dec, 2, &one_step_targets([0.0, 0.0])).unwrap();
        assert_eq!(best, vec![0]);
        assert!(tape.value(cls).item() < 1e-9);
    }

    #[test]
    fn ties_pick_the_lower_mode() {
        let a = [1.0, 0.0];
        let b = [-1.0, 0.0];
        assert_eq!(best_mode(&[&a, &b], &[[0.0, 0.0]]), 0);
        assert_eq!(best_mode(&[&b, &a], &[[0.0, 0.0]]), 0);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut tape = Tape::eval();
        let dec = dec_from(&mut tape, &[0.0, 0.0], &[1.0, 1.0], &[0.0], 1);
        let t = Targets { slots: vec![], local: vec![], world: vec![] };
        let err = loss_stage1(&mut tape, &dec, 1, &t).unwrap_err();
        assert!(err.to_string().contains("empty batch"));
    }

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
    }

    #[test]
    fn stage2_uniform_residuals() {
        for (dx, expect) in [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5)] {
            let mut tape = Tape::eval();
            let steps = 4;
            let refined = tape.variable(Tensor::from_fn(&[1, steps * 2], |i| if i % 2 == 0 { dx } else { 0.0 }));
            let t = Targets {
                slots: vec![0],
                local: vec![vec![[0.0, 0.0]; steps]],
                world: vec![vec![[0.0, 0.0]; steps]],
            };
            let l = loss_stage2(&mut tape, refined, 1, &t, &[0]).unwrap();
            assert_eq!(tape.value(l).item(), expect);
        }
    }

    #[test]
    fn moving_best_mode_toward_truth_lowers_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let loc: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eval = |loc: &[f64]| {
            let mut tape = Tape::eval();
            let dec = dec_from(&mut tape, loc, &[0.7; 12], &[0.1, -0.2], 2);
            let t = Targets {
                slots: vec![0],
                local: vec![vec![[0.3, 0.2], [0.5, -0.4], [0.9, 0.1]]],
                world: vec![vec![]],
            };
            let (c, r, best) = loss_stage1(&mut tape, &dec, 2, &t).unwrap();
            (tape.value(c).item() + tape.value(r).item(), best[0], t)
        };
        let (l0, m, t) = eval(&loc);
        let mut moved = loc.clone();
        for k in 0..3 {
            for ax in 0..2 {
                let i = m * 6 + 2 * k + ax;
                moved[i] += 0.01 * (t.local[0][k][ax] - loc[i]);
            }
        }
        let (l1, m1, _) = eval(&moved);
        assert_eq!(m, m1);
        assert!(l1 < l0);
    }

    #[test]
    fn mode_permutation_leaves_losses_and_metrics_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let _ = MultimodalDecoder::new(&mut Builder::new(&mut store, &mut rng), 4, 4, 3, 2);
        let loc: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scale: Vec<f64> = (0..12).map(|_| rng.random_range(0.2..1.0)).collect();
        let logits = [0.3, -0.1, 0.8];
        let perm = [2, 0, 1];
        let permute = |v: &[f64], w: usize| -> Vec<f64> {
            perm.iter().flat_map(|&m| v[m * w..(m + 1) * w].to_vec()).collect()
        };
        let t = Targets {
            slots: vec![0],
            local: vec![vec![[0.1, 0.2], [0.3, 0.1]]],
            world: vec![vec![[0.1, 0.2], [0.3, 0.1]]],
        };
        let run = |loc: &[f64], scale: &[f64], logits: &[f64]| {
            let mut tape = Tape::eval();
            let dec = dec_from(&mut tape, loc, scale, logits, 3);
            let (c, r, _) = loss_stage1(&mut tape, &dec, 3, &t).unwrap();
            (tape.value(c).item(), tape.value(r).item())
        };
        let a = run(&loc, &scale, &logits);
        let b = run(&permute(&loc, 4), &permute(&scale, 4), &permute(&logits, 1));
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);

        let modes = |v: &[f64]| -> Vec<Vec<Vec2>> {
            (0..3).map(|m| (0..2).map(|k| [v[m * 4 + 2 * k], v[m * 4 + 2 * k + 1]]).collect()).collect()
        };
        let m1 = metrics(&[modes(&loc)], &t.world, 2.0).unwrap();
        let m2 = metrics(&[modes(&permute(&loc, 4))], &t.world, 2.0).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn metric_examples() {
        let g: Vec<Vec2> = (0..5).map(|k| [k as f64, 0.0]).collect();
        let off: Vec<Vec2> = g.iter().map(|p| [p[0], p[1] + 3.0]).collect();
        let r = metrics(&[vec![off.clone(), g.clone()]], &[g.clone()], 2.0).unwrap();
        assert_eq!((r.min_ade, r.min_fde, r.miss_rate), (0.0, 0.0, 0.0));
        let r = metrics(&[vec![off.clone(), off]], &[g], 2.0).unwrap();
        assert_eq!(r.miss_rate, 1.0);
        assert!(metrics(&[vec![]], &[vec![[0.0, 0.0]]], 2.0).is_err());
    }
}

//! AdamW training, evaluation and the constant-velocity reference.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Checkpoint, LrSchedule, ModelConfig, OptimizerState};
use crate::model::{Model, Prediction, SceneInputs};
use crate::nn::apply_norm_stats;
use crate::numerics::{NormStats, NumericsError, ParamGrads, ParamKind, ParamStore, Tape};
use crate::objective::{total_loss, LossReport, MetricAccumulator, MetricReport};
use crate::scene::{Scenario, Vec2};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with decoupled weight decay applied to `Weight` parameters only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_state(state: OptimizerState, params: &ParamStore, weight_decay: f64) -> Result<Self> {
        let ok = state.m.len() == params.len()
            && state.v.len() == params.len()
            && params
                .iter()
                .zip(state.m.iter().zip(&state.v))
                .all(|((_, p), (m, v))| m.len() == p.value.len() && v.len() == p.value.len());
        if !ok {
            return Err(Error::Data(crate::data::DataError::Checkpoint(
                "optimizer state does not match the model parameters".into(),
            )));
        }
        Ok(Self {
            weight_decay,
            step: state.step,
            m: state.m,
            v: state.v,
        })
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    /// One update from the gradients accumulated in `params`.
    pub fn update(&mut self, params: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let wd = self.weight_decay;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable() {
                continue;
            }
            let decay = p.kind == ParamKind::Weight;
            for (((x, &g), m), v) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                if decay {
                    *x -= lr * wd * *x;
                }
                *x -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Learning rate at optimizer step `step` of `total`.
pub fn scheduled_lr(schedule: LrSchedule, base: f64, step: u64, total: u64) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            let frac = if total == 0 { 0.0 } else { (step as f64 / total as f64).min(1.0) };
            0.5 * base * (1.0 + (PI * frac).cos())
        }
    }
}

/// Builds model inputs for every scenario that has at least one scored
/// agent; returns the inputs and the number of skipped scenarios.
pub fn prepare(scenarios: &[Scenario], config: &ModelConfig) -> Result<(Vec<SceneInputs>, usize)> {
    let built: Vec<SceneInputs> = scenarios
        .par_iter()
        .map(|s| SceneInputs::build(s, config))
        .collect::<Result<_>>()?;
    let total = built.len();
    let kept: Vec<SceneInputs> = built.into_iter().filter(|s| !s.targets.is_empty()).collect();
    let skipped = total - kept.len();
    Ok((kept, skipped))
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct SceneResult {
    grads: ParamGrads,
    report: LossReport,
    stats: Vec<NormStats>,
}

fn scene_gradient(model: &Model, inputs: &SceneInputs, seed: u64, train: bool) -> Result<SceneResult> {
    let mut tape = Tape::with_mode(train, seed);
    let out = model.forward(&mut tape, inputs)?;
    let lambda1 = model.config.lambda1;
    let loss = total_loss(&mut tape, &out, model.config.modes, &inputs.targets, lambda1)?;
    let report = LossReport::read(&tape, &loss, lambda1);
    if !report.all.is_finite() {
        let op = tape.first_non_finite().unwrap_or("loss");
        return Err(NumericsError::NonFinite(op).into());
    }
    tape.backward(loss.all)?;
    Ok(SceneResult {
        grads: tape.param_grads(),
        report,
        stats: tape.norm_stats().to_vec(),
    })
}

/// Averages batch statistics of several tapes entry by entry.
fn mean_stats(all: &[Vec<NormStats>]) -> Vec<NormStats> {
    let Some(first) = all.first() else {
        return Vec::new();
    };
    let n = all.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut mean = vec![0.0; s.batch_mean.len()];
            let mut var = vec![0.0; s.batch_var.len()];
            for stats in all {
                for (acc, x) in mean.iter_mut().zip(&stats[i].batch_mean) {
                    *acc += x / n;
                }
                for (acc, x) in var.iter_mut().zip(&stats[i].batch_var) {
                    *acc += x / n;
                }
            }
            NormStats {
                mean: s.mean,
                var: s.var,
                batch_mean: mean,
                batch_var: var,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    /// Seed of the data-order stream.
    pub data_seed: u64,
    /// Use training-mode tapes (dropout, batch statistics).
    pub train_mode: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let optimizer = AdamW::new(&model.params, model.config.weight_decay);
        let data_seed = model.config.seed;
        Self {
            model,
            optimizer,
            epoch: 0,
            data_seed,
            train_mode: true,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(&ckpt.config)?;
        ckpt.restore_into(&mut model.params)?;
        let optimizer = match &ckpt.optimizer {
            Some(state) => AdamW::from_state(state.clone(), &model.params, ckpt.config.weight_decay)?,
            None => AdamW::new(&model.params, ckpt.config.weight_decay),
        };
        Ok(Self {
            model,
            optimizer,
            epoch: ckpt.epoch,
            data_seed: ckpt.rng_state,
            train_mode: true,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            &self.model.config,
            &self.model.params,
            self.epoch,
            self.data_seed,
            Some(self.optimizer.state()),
        )
    }

    /// Forward and backward over `batch`, averaging scene losses, then one
    /// optimizer update. Nothing is updated if any gradient is non-finite.
    pub fn train_step(&mut self, batch: &[&SceneInputs], lr: f64) -> Result<LossReport> {
        let step = self.optimizer.step;
        let seed = mix(self.data_seed, step);
        let model = &self.model;
        let train = self.train_mode;
        let results: Vec<SceneResult> = batch
            .par_iter()
            .enumerate()
            .map(|(i, s)| scene_gradient(model, s, mix(seed, i as u64 + 1), train))
            .collect::<Result<_>>()?;
        if results.iter().any(|r| !r.grads.is_finite()) {
            return Err(NumericsError::NonFinite("gradient").into());
        }
        let scale = 1.0 / results.len() as f64;
        let params = &mut self.model.params;
        params.zero_grad();
        for r in &results {
            params.accumulate(&r.grads, scale);
        }
        if train {
            let stats: Vec<Vec<NormStats>> = results.iter().map(|r| r.stats.clone()).collect();
            apply_norm_stats(params, &mean_stats(&stats));
        }
        self.optimizer.update(params, lr);
        let reports: Vec<LossReport> = results.iter().map(|r| r.report).collect();
        Ok(LossReport::mean(&reports).expect("non-empty batch"))
    }

    /// One pass over `data` in a seeded order. `total_epochs` sets the
    /// length of the learning-rate schedule.
    pub fn run_epoch(&mut self, data: &[SceneInputs], total_epochs: usize) -> Result<EpochReport> {
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let cfg = self.model.config.clone();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.data_seed, self.epoch as u64));
        order.shuffle(&mut rng);
        let per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
        let total = per_epoch * total_epochs as u64;
        let mut reports = Vec::new();
        let mut weights = Vec::new();
        let mut lr = cfg.lr;
        for chunk in order.chunks(cfg.batch_size) {
            lr = scheduled_lr(cfg.lr_schedule, cfg.lr, self.optimizer.step, total);
            let batch: Vec<&SceneInputs> = chunk.iter().map(|&i| &data[i]).collect();
            reports.push(self.train_step(&batch, lr)?);
            weights.push(chunk.len() as f64);
        }
        self.epoch += 1;
        let n: f64 = weights.iter().sum();
        let w = |f: fn(&LossReport) -> f64| reports.iter().zip(&weights).map(|(r, k)| f(r) * k).sum::<f64>() / n;
        Ok(EpochReport {
            epoch: self.epoch,
            lr,
            loss: LossReport {
                cls: w(|r| r.cls),
                reg: w(|r| r.reg),
                stage1: w(|r| r.stage1),
                stage2: w(|r| r.stage2),
                all: w(|r| r.all),
                lambda1: cfg.lambda1,
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub stage1: MetricReport,
    pub stage2: MetricReport,
    pub loss: LossReport,
}

/// Evaluation-mode losses and metrics over scored agents, using the first
/// `k` modes of each agent.
pub fn evaluate(model: &Model, data: &[SceneInputs], threshold: f64) -> Result<EvalReport> {
    let per_scene: Vec<(Prediction, LossReport)> = data
        .par_iter()
        .map(|inputs| {
            let mut tape = Tape::eval();
            let out = model.forward(&mut tape, inputs)?;
            let loss = total_loss(&mut tape, &out, model.config.modes, &inputs.targets, model.config.lambda1)?;
            let report = LossReport::read(&tape, &loss, model.config.lambda1);
            Ok((Prediction::from_tape(&tape, &out, inputs, model.config.modes), report))
        })
        .collect::<Result<_>>()?;
    let mut s1 = MetricAccumulator::new();
    let mut s2 = MetricAccumulator::new();
    let mut losses = Vec::with_capacity(per_scene.len());
    for ((pred, loss), inputs) in per_scene.iter().zip(data) {
        for (&slot, truth) in inputs.targets.slots.iter().zip(&inputs.targets.world) {
            s1.push(&pred.world_stage1(slot), truth, threshold)?;
            s2.push(&pred.world_refined(slot), truth, threshold)?;
        }
        losses.push(*loss);
    }
    Ok(EvalReport {
        stage1: s1.report()?,
        stage2: s2.report()?,
        loss: LossReport::mean(&losses).ok_or(Error::EmptyBatch)?,
    })
}

/// Extrapolates the last observed displacement.
pub fn constant_velocity(track: &[Vec2], observed: usize, predicted: usize) -> Vec<Vec2> {
    let now = track[observed - 1];
    let prev = track[observed - 2];
    let v = [now[0] - prev[0], now[1] - prev[1]];
    (1..=predicted)
        .map(|k| [now[0] + v[0] * k as f64, now[1] + v[1] * k as f64])
        .collect()
}

/// Constant-velocity metrics over the scored agents of `data`.
pub fn constant_velocity_baseline(
    scenarios: &[Scenario],
    config: &ModelConfig,
    threshold: f64,
) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    for s in scenarios {
        for a in 0..s.num_agents() {
            if !(config.score_all_agents || s.focal.contains(&a)) || !s.valid[a][config.observed - 1] {
                continue;
            }
            if let Some(truth) = s.future(a, config.observed, config.predicted) {
                let cv = if s.valid[a][config.observed - 2] {
                    constant_velocity(&s.positions[a], config.observed, config.predicted)
                } else {
                    vec![s.positions[a][config.observed - 1]; config.predicted]
                };
                acc.push(&[cv], &truth, threshold)?;
            }
        }
    }
    acc.report()
}

/// Settings of the overfitting sanity run.
#[derive(Debug, Clone, PartialEq)]
pub struct OverfitOptions {
    pub steps: usize,
    pub lr: f64,
}

impl Default for OverfitOptions {
    fn default() -> Self {
        Self { steps: 500, lr: 2e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverfitReport {
    /// `L_all` before every step, then after the last one.
    pub losses: Vec<f64>,
    pub stage1: MetricReport,
    pub stage2: MetricReport,
}

impl OverfitReport {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }

    /// Fractional drop of `L_all` from its initial value.
    pub fn reduction(&self) -> f64 {
        1.0 - self.last() / self.initial()
    }
}

/// Full-batch training on a handful of scenes without dropout or weight
/// decay, at a constant learning rate. Returns the trained model too.
pub fn overfit(config: &ModelConfig, scenarios: &[Scenario], opts: &OverfitOptions) -> Result<(OverfitReport, Model)> {
    let mut cfg = config.clone();
    cfg.dropout = 0.0;
    cfg.weight_decay = 0.0;
    cfg.lr = opts.lr;
    cfg.lr_schedule = LrSchedule::Constant;
    let (data, _) = prepare(scenarios, &cfg)?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut trainer = Trainer::new(Model::new(&cfg)?);
    let batch: Vec<&SceneInputs> = data.iter().collect();
    let mut losses = Vec::with_capacity(opts.steps + 1);
    for _ in 0..opts.steps {
        losses.push(trainer.train_step(&batch, cfg.lr)?.all);
    }
    let eval = evaluate(&trainer.model, &data, crate::objective::MISS_THRESHOLD)?;
    // the final loss is measured the same way as the per-step ones
    let mut probe = trainer.clone();
    losses.push(probe.train_step(&batch, 0.0)?.all);
    let report = OverfitReport {
        losses,
        stage1: eval.stage1,
        stage2: eval.stage2,
    };
    Ok((report, trainer.model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Profile, SynthOptions};

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(scheduled_lr(LrSchedule::Cosine, 1.0, 0, 10), 1.0);
        assert!((scheduled_lr(LrSchedule::Cosine, 1.0, 5, 10) - 0.5).abs() < 1e-12);
        assert!(scheduled_lr(LrSchedule::Cosine, 1.0, 10, 10).abs() < 1e-12);
        assert_eq!(scheduled_lr(LrSchedule::Constant, 0.3, 7, 10), 0.3);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let w = store.filled("w", ParamKind::Weight, &[2], 1.0);
        let b = store.filled("b", ParamKind::NoDecay, &[1], 1.0);
        store.get_mut(w).grad = vec![0.5, -2.0];
        store.get_mut(b).grad = vec![3.0];
        let mut opt = AdamW::new(&store, 0.1);
        opt.update(&mut store, 0.01);
        // bias-corrected first step is lr * sign(g); decay scales by 1 - lr * wd
        let wv = store.value(w).data();
        assert!((wv[0] - (1.0 * (1.0 - 0.001) - 0.01)).abs() < 1e-9);
        assert!((wv[1] - (1.0 * (1.0 - 0.001) + 0.01)).abs() < 1e-9);
        assert!((store.value(b).data()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn constant_velocity_examples() {
        let track: Vec<Vec2> = (0..5).map(|k| [k as f64, 2.0 * k as f64]).collect();
        assert_eq!(constant_velocity(&track, 3, 2), vec![[3.0, 6.0], [4.0, 8.0]]);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ModelConfig {
            hidden: 16,
            heads: 2,
            batch_size: 2,
            ..ModelConfig::default()
        };
        let scenes: Vec<Scenario> = generate_synthetic(3, 3, Profile::Turns, &SynthOptions::default())
            .unwrap()
            .into_iter()
            .map(|s| s.scenario)
            .collect();
        let (data, _) = prepare(&scenes, &cfg).unwrap();
        let run = || {
            let mut t = Trainer::new(Model::new(&cfg).unwrap());
            let r = t.run_epoch(&data, 1).unwrap();
            (r.loss.all, t.model.params.iter().map(|(_, p)| p.value.data().to_vec()).collect::<Vec<_>>())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(pa, pb);
    }

    #[test]
    fn resumed_trainer_matches_continuous_run() {
        let cfg = ModelConfig {
            hidden: 16,
            heads: 2,
            batch_size: 2,
            ..ModelConfig::default()
        };
        let scenes: Vec<Scenario> = generate_synthetic(5, 4, Profile::Straight, &SynthOptions::default())
            .unwrap()
            .into_iter()
            .map(|s| s.scenario)
            .collect();
        let (data, _) = prepare(&scenes, &cfg).unwrap();
        let mut a = Trainer::new(Model::new(&cfg).unwrap());
        a.run_epoch(&data, 2).unwrap();
        let ckpt = Checkpoint::from_bytes(&a.checkpoint().to_bytes()).unwrap();
        let mut b = Trainer::from_checkpoint(&ckpt).unwrap();
        assert_eq!(b.epoch, 1);
        let ra = a.run_epoch(&data, 2).unwrap();
        let rb = b.run_epoch(&data, 2).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(rb.epoch, 2);
    }
}

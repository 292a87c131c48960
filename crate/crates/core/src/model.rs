//! The full predictor: encoder, global interaction, decoder and refinement
//! wired over one scene.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ModelConfig;
use crate::encoder::{
    AgentAgentEncoder, AgentLaneEncoder, Ltaa, LtaaOutput, MotionStateEncoder, LANE_FEATURE_DIM,
};
use crate::interaction_decoder::{
    pairwise_features, DecoderOutput, GlobalInteractor, MultimodalDecoder, TrajectoryDistribution,
    PAIR_FEATURE_DIM,
};
use crate::nn::{AttentionOutput, Builder};
use crate::numerics::{KeySets, NumericsError, ParamStore, Tape, Tensor, Var};
use crate::refine::{RefineOutput, Refiner};
use crate::scene::{Frame, SceneContext, SceneGeometry, Scenario, Vec2, MOTION_STATE_DIM};
use crate::{Error, Result};

/// Ground truth of the scored agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// Agent slots (rows of the model output) that are scored.
    pub slots: Vec<usize>,
    /// Future positions in each scored agent's own frame.
    pub local: Vec<Vec<Vec2>>,
    pub world: Vec<Vec<Vec2>>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Row blocks and key sets derived from one scenario, ready for a forward
/// pass. Building them is independent of the parameters.
#[derive(Debug, Clone)]
pub struct SceneInputs {
    pub scenario_id: String,
    pub context: SceneContext,
    pub center: Tensor,
    pub center_mask: Vec<f64>,
    pub neighbor: Tensor,
    pub neighbor_keys: Arc<KeySets>,
    pub step_valid: Vec<bool>,
    pub motion: Tensor,
    pub motion_keys: Arc<KeySets>,
    pub lanes: Tensor,
    pub lane_keys: Arc<KeySets>,
    pub pairs: Tensor,
    pub pair_source: Vec<usize>,
    pub pair_keys: Arc<KeySets>,
    /// `[A, T_o * 2]` observed positions in each agent's frame.
    pub observed: Tensor,
    pub targets: Targets,
}

/// Builds a row block, padding with one unreferenced zero row when empty so
/// every tensor has at least one row.
fn block(rows: Vec<f64>, width: usize) -> Tensor {
    let n = rows.len() / width;
    if n == 0 {
        Tensor::zeros(&[1, width])
    } else {
        Tensor::new(vec![n, width], rows).expect("row block")
    }
}

impl SceneInputs {
    /// Scored agents are the focal ones, or every agent when `score_all`;
    /// either way only agents with a complete future.
    pub fn build(scenario: &Scenario, config: &ModelConfig) -> Result<Self> {
        scenario.validate(config.observed, config.predicted)?;
        let to = config.observed;
        let tp = config.predicted;
        let geometry = SceneGeometry {
            observed: to,
            radius: config.radius,
        };
        let context = SceneContext::build(scenario, geometry);
        if context.is_empty() {
            return Err(Error::EmptyScene(scenario.id.clone()));
        }
        let a_count = context.len();
        let mut center = Vec::with_capacity(a_count * to * 2);
        let mut center_mask = Vec::with_capacity(a_count * to);
        let mut step_valid = Vec::with_capacity(a_count * to);
        let mut neighbor = Vec::new();
        let mut neighbor_keys = KeySets::new();
        let mut motion = Vec::new();
        let mut motion_keys = KeySets::new();
        let mut lanes = Vec::new();
        let mut lane_keys = KeySets::new();
        let mut pairs = Vec::new();
        let mut pair_source = Vec::new();
        let mut pair_keys = KeySets::new();
        let mut observed = Vec::with_capacity(a_count * to * 2);
        for ctx in &context.agents {
            for t in 0..to {
                center.extend_from_slice(&ctx.self_features[t]);
                center_mask.push(if ctx.self_valid[t] { 1.0 } else { 0.0 });
                step_valid.push(ctx.self_valid[t]);
                let start = neighbor.len() / 4;
                for n in ctx.neighbors.iter().filter(|n| n.valid[t]) {
                    neighbor.extend_from_slice(&n.displacement[t]);
                    neighbor.extend_from_slice(&n.relative[t]);
                }
                neighbor_keys.push_query(start..neighbor.len() / 4);
            }
            let start = motion.len() / MOTION_STATE_DIM;
            for n in &ctx.neighbors {
                motion.extend_from_slice(&n.motion);
            }
            motion_keys.push_query(start..motion.len() / MOTION_STATE_DIM);
            let start = lanes.len() / LANE_FEATURE_DIM;
            for l in &ctx.lanes {
                lanes.extend_from_slice(&l.to_row());
            }
            lane_keys.push_query(start..lanes.len() / LANE_FEATURE_DIM);
            let start = pair_source.len();
            for n in &ctx.neighbors {
                pairs.extend_from_slice(&pairwise_features(ctx, n));
                pair_source.push(context.slot_of[n.agent].expect("neighbors are present at T_o"));
            }
            pair_keys.push_query(start..pair_source.len());
            for p in &ctx.observed {
                observed.extend_from_slice(p);
            }
        }
        if pair_source.is_empty() {
            pair_source.push(0);
        }
        let mut targets = Targets {
            slots: Vec::new(),
            local: Vec::new(),
            world: Vec::new(),
        };
        for (slot, ctx) in context.agents.iter().enumerate() {
            let scored = config.score_all_agents || scenario.focal.contains(&ctx.agent);
            if !scored {
                continue;
            }
            if let Some(future) = scenario.future(ctx.agent, to, tp) {
                targets.slots.push(slot);
                targets.local.push(future.iter().map(|&p| ctx.frame.to_local(p)).collect());
                targets.world.push(future);
            }
        }
        Ok(Self {
            scenario_id: scenario.id.clone(),
            center: Tensor::new(vec![a_count * to, 2], center).expect("center rows"),
            center_mask,
            neighbor: block(neighbor, 4),
            neighbor_keys: Arc::new(neighbor_keys),
            step_valid,
            motion: block(motion, MOTION_STATE_DIM),
            motion_keys: Arc::new(motion_keys),
            lanes: block(lanes, LANE_FEATURE_DIM),
            lane_keys: Arc::new(lane_keys),
            pairs: block(pairs, PAIR_FEATURE_DIM),
            pair_source,
            pair_keys: Arc::new(pair_keys),
            observed: Tensor::new(vec![a_count, to * 2], observed).expect("observed rows"),
            targets,
            context,
        })
    }

    pub fn agents(&self) -> usize {
        self.context.len()
    }

    pub fn frame(&self, slot: usize) -> &Frame {
        &self.context.agents[slot].frame
    }
}

/// Every intermediate block of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub agent_agent: AttentionOutput,
    pub ltaa: LtaaOutput,
    pub motion: AttentionOutput,
    pub lane: AttentionOutput,
    pub global: AttentionOutput,
    pub decoder: DecoderOutput,
    pub refine: RefineOutput,
}

impl ForwardOutput {
    pub fn local(&self) -> Var {
        self.lane.out
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    agent_agent: AgentAgentEncoder,
    ltaa: Ltaa,
    motion: MotionStateEncoder,
    lane: AgentLaneEncoder,
    global: GlobalInteractor,
    decoder: MultimodalDecoder,
    refine: Refiner,
}

/// Parameter name prefix of the refinement stage.
pub const REFINE_PREFIX: &str = "refine.";

impl Model {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut b = Builder::new(&mut params, &mut rng);
        let d = config.hidden;
        let (h, p) = (config.heads, config.dropout);
        let agent_agent = AgentAgentEncoder::new(&mut b, d, h, p);
        let ltaa = Ltaa::new(&mut b, d, h, config.conv_kernel, config.observed, &config.box_sizes, p);
        let motion = MotionStateEncoder::new(&mut b, d, h, p);
        let lane = AgentLaneEncoder::new(&mut b, d, h, p);
        let global = GlobalInteractor::new(&mut b, d, h, p);
        let decoder = MultimodalDecoder::new(&mut b, d, 2 * d, config.modes, config.predicted);
        let refine = Refiner::new(&mut b, d, config.observed, config.predicted);
        Ok(Self {
            config: config.clone(),
            params,
            agent_agent,
            ltaa,
            motion,
            lane,
            global,
            decoder,
            refine,
        })
    }

    /// Test-only fault that lets the temporal convolutions see the future.
    pub fn set_noncausal(&mut self, on: bool) {
        self.ltaa.noncausal = on;
    }

    pub fn param_count(&self) -> usize {
        self.params.count_trainable("")
    }

    pub fn refine_param_count(&self) -> usize {
        self.params.count_trainable(REFINE_PREFIX)
    }

    pub fn ltaa(&self) -> &Ltaa {
        &self.ltaa
    }

    pub fn forward(&self, tape: &mut Tape, inputs: &SceneInputs) -> std::result::Result<ForwardOutput, NumericsError> {
        self.forward_with(tape, &self.params, inputs)
    }

    /// Forward pass with an explicit parameter store of the same layout.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        inputs: &SceneInputs,
    ) -> std::result::Result<ForwardOutput, NumericsError> {
        let m = self.config.modes;
        let a_count = inputs.agents();
        let center = tape.constant(inputs.center.clone());
        let neighbor = tape.constant(inputs.neighbor.clone());
        let agent_agent = self.agent_agent.forward(
            tape,
            params,
            center,
            neighbor,
            inputs.neighbor_keys.clone(),
            inputs.center_mask.clone(),
        )?;
        let ltaa = self.ltaa.forward(tape, params, agent_agent.out, &inputs.step_valid)?;
        let motion_rows = tape.constant(inputs.motion.clone());
        let motion = self
            .motion
            .forward(tape, params, ltaa.summary, motion_rows, inputs.motion_keys.clone())?;
        let lane_rows = tape.constant(inputs.lanes.clone());
        let lane = self
            .lane
            .forward(tape, params, motion.out, lane_rows, inputs.lane_keys.clone())?;
        let pairs = tape.constant(inputs.pairs.clone());
        let global = self.global.forward(
            tape,
            params,
            lane.out,
            pairs,
            inputs.pair_source.clone(),
            inputs.pair_keys.clone(),
        )?;
        let decoder = self.decoder.forward(tape, params, lane.out, global.out)?;
        let per_mode: Vec<usize> = (0..a_count).flat_map(|a| std::iter::repeat_n(a, m)).collect();
        let observed = tape.constant(inputs.observed.clone());
        let observed = tape.gather_rows(observed, per_mode.clone())?;
        let local = tape.gather_rows(lane.out, per_mode.clone())?;
        let glob = tape.gather_rows(global.out, per_mode)?;
        let refine = self
            .refine
            .forward(tape, params, decoder.loc, observed, local, glob)?;
        Ok(ForwardOutput {
            agent_agent,
            ltaa,
            motion,
            lane,
            global,
            decoder,
            refine,
        })
    }

    /// Evaluation-mode prediction for every agent present at the last
    /// observed step.
    pub fn predict(&self, inputs: &SceneInputs) -> std::result::Result<Prediction, NumericsError> {
        let mut tape = Tape::eval();
        let out = self.forward(&mut tape, inputs)?;
        Ok(Prediction::from_tape(&tape, &out, inputs, self.config.modes))
    }
}

/// Model outputs read back into plain arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scenario_id: String,
    /// Scenario index of each output row.
    pub agents: Vec<usize>,
    pub frames: Vec<Frame>,
    pub stage1: TrajectoryDistribution,
    /// `refined[a][m][t]` in agent-local frames.
    pub refined: Vec<Vec<Vec<Vec2>>>,
}

impl Prediction {
    pub fn from_tape(tape: &Tape, out: &ForwardOutput, inputs: &SceneInputs, modes: usize) -> Self {
        let stage1 = TrajectoryDistribution::from_tape(tape, out.decoder.loc, out.decoder.scale, out.decoder.probs, modes);
        let refined = TrajectoryDistribution::from_tape(tape, out.refine.refined, out.decoder.scale, out.decoder.probs, modes).loc;
        Self {
            scenario_id: inputs.scenario_id.clone(),
            agents: inputs.context.agents.iter().map(|c| c.agent).collect(),
            frames: inputs.context.agents.iter().map(|c| c.frame).collect(),
            stage1,
            refined,
        }
    }

    pub fn world_stage1(&self, slot: usize) -> Vec<Vec<Vec2>> {
        self.stage1.world_locations(slot, &self.frames[slot])
    }

    pub fn world_refined(&self, slot: usize) -> Vec<Vec<Vec2>> {
        self.refined[slot]
            .iter()
            .map(|m| crate::interaction_decoder::to_global_frame(m, &self.frames[slot]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Profile, SynthOptions};

    fn small_config() -> ModelConfig {
        ModelConfig {
            hidden: 16,
            heads: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_parameter_budget() {
        let m = Model::new(&ModelConfig::default()).unwrap();
        let total = m.param_count();
        let refine = m.refine_param_count();
        assert!((592_000..=986_000).contains(&total), "total {total}");
        assert!((refine as f64) < 0.2 * total as f64, "refine {refine} of {total}");
    }

    #[test]
    fn forward_shapes_and_zero_init_refinement() {
        let cfg = small_config();
        let model = Model::new(&cfg).unwrap();
        let scene = &generate_synthetic(1, 1, Profile::Intersection, &SynthOptions::default()).unwrap()[0];
        let inputs = SceneInputs::build(&scene.scenario, &cfg).unwrap();
        let pred = model.predict(&inputs).unwrap();
        let a = scene.scenario.num_agents();
        assert_eq!(pred.stage1.loc.len(), a);
        assert_eq!(pred.stage1.loc[0].len(), 6);
        assert_eq!(pred.stage1.loc[0][0].len(), 30);
        assert_eq!(pred.refined, pred.stage1.loc);
        assert_eq!(inputs.targets.len(), a);
    }

    #[test]
    fn isolated_agent_without_lanes() {
        let cfg = small_config();
        let mut s = generate_synthetic(2, 1, Profile::Straight, &SynthOptions::default()).unwrap()[0]
            .scenario
            .clone();
        s.positions.truncate(1);
        s.valid.truncate(1);
        s.agent_ids.truncate(1);
        s.focal = vec![0];
        s.lanes.clear();
        let inputs = SceneInputs::build(&s, &cfg).unwrap();
        let model = Model::new(&cfg).unwrap();
        let pred = model.predict(&inputs).unwrap();
        assert!(pred.stage1.loc.iter().flatten().flatten().all(|p| p[0].is_finite() && p[1].is_finite()));
    }
}

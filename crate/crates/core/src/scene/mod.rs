//! Scene data model and agent-centric preprocessing.
//!
//! Every feature the network consumes is expressed in the frame of a central
//! agent: translated to its current position and rotated so its last
//! displacement points along `+x`. Applying a rigid motion to the whole scene
//! therefore leaves all features unchanged.

mod features;
mod frame;

pub use features::{
    build_local_frame, lane_local_features, motion_attributes, neighbors, vectorize,
    Displacements, LaneFeature, LocalContext, MotionState, NeighborContext, SceneContext,
    SceneGeometry, MOTION_STATE_DIM,
};
pub use frame::{
    add, norm, point_segment_distance, sub, wrap_angle, Frame, Rot2, Vec2, DEGENERATE_NORM,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("scenario {scenario}: {detail}")]
    Invalid { scenario: String, detail: String },
}

pub const LANE_ATTRIBUTES: usize = 3;

/// Straight lane piece with three binary attributes: turn, intersection,
/// traffic control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneSegment {
    pub start: Vec2,
    pub end: Vec2,
    pub attributes: [f64; LANE_ATTRIBUTES],
}

impl LaneSegment {
    pub fn new(start: Vec2, end: Vec2) -> Self {
        Self {
            start,
            end,
            attributes: [0.0; LANE_ATTRIBUTES],
        }
    }

    pub fn with_flags(mut self, turn: bool, intersection: bool, traffic_control: bool) -> Self {
        self.attributes = [turn as u8 as f64, intersection as u8 as f64, traffic_control as u8 as f64];
        self
    }

    /// Attribute flags packed as bits (turn = 1, intersection = 2, control = 4).
    pub fn flag_bits(&self) -> u8 {
        self.attributes
            .iter()
            .enumerate()
            .map(|(i, &a)| if a != 0.0 { 1u8 << i } else { 0 })
            .sum()
    }

    pub fn from_flag_bits(start: Vec2, end: Vec2, bits: u8) -> Self {
        Self::new(start, end).with_flags(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0)
    }
}

/// Timestamped 2D tracks of every agent plus lane geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub agent_ids: Vec<String>,
    /// `positions[agent][step]` in meters.
    pub positions: Vec<Vec<Vec2>>,
    pub valid: Vec<Vec<bool>>,
    pub lanes: Vec<LaneSegment>,
    pub sample_rate_hz: f64,
    /// Agents scored by metrics.
    pub focal: Vec<usize>,
}

impl Scenario {
    pub fn num_agents(&self) -> usize {
        self.positions.len()
    }

    pub fn num_steps(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }

    pub fn is_valid(&self, agent: usize, step: usize) -> bool {
        self.valid[agent][step]
    }

    /// Ground-truth future of `agent` for steps `observed..observed + predicted`,
    /// or `None` if any of those steps is missing.
    pub fn future(&self, agent: usize, observed: usize, predicted: usize) -> Option<Vec<Vec2>> {
        let end = observed + predicted;
        if end > self.num_steps() || !self.valid[agent][observed..end].iter().all(|&v| v) {
            return None;
        }
        Some(self.positions[agent][observed..end].to_vec())
    }

    /// Applies `p -> R p + t` (rotation by `angle`) to every position and lane.
    pub fn transformed(&self, angle: f64, translation: Vec2) -> Scenario {
        let (s, c) = angle.sin_cos();
        let tf = |p: Vec2| [c * p[0] - s * p[1] + translation[0], s * p[0] + c * p[1] + translation[1]];
        let mut out = self.clone();
        for track in &mut out.positions {
            for p in track.iter_mut() {
                *p = tf(*p);
            }
        }
        for lane in &mut out.lanes {
            lane.start = tf(lane.start);
            lane.end = tf(lane.end);
        }
        out
    }

    /// Checks the structural invariants for a model with `observed` history
    /// steps and `predicted` future steps.
    pub fn validate(&self, observed: usize, predicted: usize) -> Result<(), SceneError> {
        let fail = |detail: String| {
            Err(SceneError::Invalid {
                scenario: self.id.clone(),
                detail,
            })
        };
        if observed < 3 {
            return fail(format!("observed horizon {observed} < 3"));
        }
        if predicted < 1 {
            return fail("predicted horizon must be at least 1".into());
        }
        let n = self.num_agents();
        if n == 0 {
            return fail("no agents".into());
        }
        if self.agent_ids.len() != n || self.valid.len() != n {
            return fail("agent id, position and mask counts differ".into());
        }
        let steps = self.num_steps();
        if steps < observed {
            return fail(format!("{steps} steps but {observed} observed steps required"));
        }
        for (a, (track, mask)) in self.positions.iter().zip(&self.valid).enumerate() {
            if track.len() != steps || mask.len() != steps {
                return fail(format!("agent {a} has a ragged track"));
            }
            if track
                .iter()
                .zip(mask)
                .any(|(p, &v)| v && !(p[0].is_finite() && p[1].is_finite()))
            {
                return fail(format!("agent {a} has a non-finite position"));
            }
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return fail(format!("bad sample rate {}", self.sample_rate_hz));
        }
        for &f in &self.focal {
            if f >= n {
                return fail(format!("focal index {f} out of range"));
            }
            if !self.valid[f][..observed].iter().all(|&v| v) {
                return fail(format!("focal agent {} missing observed steps", self.agent_ids[f]));
            }
            let r = sub(self.positions[f][observed - 1], self.positions[f][observed - 2]);
            if norm(r) <= DEGENERATE_NORM {
                return fail(format!(
                    "focal agent {} has a degenerate reference displacement",
                    self.agent_ids[f]
                ));
            }
        }
        for (l, lane) in self.lanes.iter().enumerate() {
            if lane.start == lane.end {
                return fail(format!("lane {l} has coincident endpoints"));
            }
            if lane.attributes.iter().any(|&a| a != 0.0 && a != 1.0) {
                return fail(format!("lane {l} has a non-binary attribute"));
            }
        }
        Ok(())
    }
}

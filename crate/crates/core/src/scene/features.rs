use super::frame::{norm, point_segment_distance, sub, wrap_angle, Frame, Vec2, DEGENERATE_NORM};
use super::{Scenario, LANE_ATTRIBUTES};

/// `[h_ij (2), a_j (2), jerk_j (2), relative heading (1), missing-history flag (1)]`.
pub const MOTION_STATE_DIM: usize = 8;

/// Horizon and neighborhood settings shared by all feature builders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneGeometry {
    pub observed: usize,
    pub radius: f64,
}

/// Per-step displacements; `valid[a][t]` requires positions at `t - 1` and `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Displacements {
    pub values: Vec<Vec<Vec2>>,
    pub valid: Vec<Vec<bool>>,
}

pub fn vectorize(scenario: &Scenario) -> Displacements {
    let mut values = Vec::with_capacity(scenario.num_agents());
    let mut valid = Vec::with_capacity(scenario.num_agents());
    for (track, mask) in scenario.positions.iter().zip(&scenario.valid) {
        let mut v = vec![[0.0; 2]; track.len()];
        let mut m = vec![false; track.len()];
        for t in 1..track.len() {
            if mask[t] && mask[t - 1] {
                v[t] = sub(track[t], track[t - 1]);
                m[t] = true;
            }
        }
        values.push(v);
        valid.push(m);
    }
    Displacements { values, valid }
}

/// Frame of agent `i` at the last observed step.
pub fn build_local_frame(scenario: &Scenario, i: usize, observed: usize) -> Frame {
    let now = observed - 1;
    let origin = scenario.positions[i][now];
    if now >= 1 && scenario.valid[i][now] && scenario.valid[i][now - 1] {
        Frame::from_reference(origin, sub(origin, scenario.positions[i][now - 1]))
    } else {
        Frame::identity_at(origin)
    }
}

/// High-order motion attributes of one agent at the last observed step, in
/// world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionState {
    pub acceleration: Vec2,
    pub jerk: Vec2,
    pub heading: f64,
    /// False when fewer than four consecutive valid positions end at the
    /// current step; acceleration and jerk are then zero.
    pub complete: bool,
}

/// Backward finite differences at the scenario sample rate.
pub fn motion_attributes(scenario: &Scenario, j: usize, observed: usize) -> MotionState {
    let now = observed - 1;
    let rate = scenario.sample_rate_hz;
    let track = &scenario.positions[j];
    let mask = &scenario.valid[j];
    let heading = if now >= 1 && mask[now] && mask[now - 1] {
        let d = sub(track[now], track[now - 1]);
        if norm(d) > DEGENERATE_NORM {
            d[1].atan2(d[0])
        } else {
            0.0
        }
    } else {
        0.0
    };
    if now < 3 || !mask[now - 3..=now].iter().all(|&v| v) {
        return MotionState {
            acceleration: [0.0; 2],
            jerk: [0.0; 2],
            heading,
            complete: false,
        };
    }
    let vel = |t: usize| -> Vec2 {
        let d = sub(track[t], track[t - 1]);
        [d[0] * rate, d[1] * rate]
    };
    let (v0, v1, v2) = (vel(now - 2), vel(now - 1), vel(now));
    let a_prev = [(v1[0] - v0[0]) * rate, (v1[1] - v0[1]) * rate];
    let a_now = [(v2[0] - v1[0]) * rate, (v2[1] - v1[1]) * rate];
    MotionState {
        acceleration: a_now,
        jerk: [(a_now[0] - a_prev[0]) * rate, (a_now[1] - a_prev[1]) * rate],
        heading,
        complete: true,
    }
}

/// Agents within the closed ball of `radius` around agent `i` at the last
/// observed step, valid at that step.
pub fn neighbors(scenario: &Scenario, i: usize, geometry: &SceneGeometry) -> Vec<usize> {
    let now = geometry.observed - 1;
    if !scenario.valid[i][now] {
        return Vec::new();
    }
    let pi = scenario.positions[i][now];
    (0..scenario.num_agents())
        .filter(|&j| {
            j != i
                && scenario.valid[j][now]
                && norm(sub(scenario.positions[j][now], pi)) <= geometry.radius
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneFeature {
    /// Rotated lane vector `end - start`.
    pub direction: Vec2,
    /// Rotated lane start relative to the agent.
    pub offset: Vec2,
    pub attributes: [f64; LANE_ATTRIBUTES],
}

impl LaneFeature {
    pub fn to_row(&self) -> [f64; 4 + LANE_ATTRIBUTES] {
        let a = self.attributes;
        [self.direction[0], self.direction[1], self.offset[0], self.offset[1], a[0], a[1], a[2]]
    }
}

/// Lanes whose segment comes within `radius` of the frame origin, expressed
/// in that frame.
pub fn lane_local_features(scenario: &Scenario, frame: &Frame, radius: f64) -> Vec<LaneFeature> {
    scenario
        .lanes
        .iter()
        .filter(|l| point_segment_distance(frame.origin, l.start, l.end) <= radius)
        .map(|l| LaneFeature {
            direction: frame.rotation.apply(sub(l.end, l.start)),
            offset: frame.rotation.apply(sub(l.start, frame.origin)),
            attributes: l.attributes,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborContext {
    /// Scenario index of the neighbor.
    pub agent: usize,
    /// Neighbor displacement per observed step, rotated into the central frame.
    pub displacement: Vec<Vec2>,
    /// Neighbor position minus central position per observed step, rotated.
    pub relative: Vec<Vec2>,
    /// Both agents present at the step and the neighbor displacement defined.
    pub valid: Vec<bool>,
    pub motion: [f64; MOTION_STATE_DIM],
    /// Neighbor heading minus central heading, wrapped.
    pub relative_heading: f64,
}

/// Everything the encoder consumes for one central agent.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalContext {
    pub agent: usize,
    pub frame: Frame,
    /// Rotated own displacement per observed step.
    pub self_features: Vec<Vec2>,
    pub self_valid: Vec<bool>,
    /// Own observed positions in the local frame (zero where missing).
    pub observed: Vec<Vec2>,
    pub neighbors: Vec<NeighborContext>,
    pub lanes: Vec<LaneFeature>,
}

impl LocalContext {
    pub fn build(scenario: &Scenario, disp: &Displacements, i: usize, geometry: &SceneGeometry) -> Self {
        let to = geometry.observed;
        let now = to - 1;
        let frame = build_local_frame(scenario, i, to);
        let rot = frame.rotation;
        let self_features = (0..to).map(|t| rot.apply(disp.values[i][t])).collect();
        let self_valid = disp.valid[i][..to].to_vec();
        let observed = (0..to)
            .map(|t| {
                if scenario.valid[i][t] {
                    frame.to_local(scenario.positions[i][t])
                } else {
                    [0.0; 2]
                }
            })
            .collect();
        let neighbors = neighbors(scenario, i, geometry)
            .into_iter()
            .map(|j| {
                let motion = motion_attributes(scenario, j, to);
                let relative_heading = wrap_angle(motion.heading - frame.heading);
                let valid: Vec<bool> = (0..to)
                    .map(|t| disp.valid[j][t] && scenario.valid[i][t])
                    .collect();
                let relative: Vec<Vec2> = (0..to)
                    .map(|t| {
                        if scenario.valid[i][t] && scenario.valid[j][t] {
                            rot.apply(sub(scenario.positions[j][t], scenario.positions[i][t]))
                        } else {
                            [0.0; 2]
                        }
                    })
                    .collect();
                let acc = rot.apply(motion.acceleration);
                let jerk = rot.apply(motion.jerk);
                let h = relative[now];
                NeighborContext {
                    agent: j,
                    displacement: (0..to).map(|t| rot.apply(disp.values[j][t])).collect(),
                    motion: [
                        h[0],
                        h[1],
                        acc[0],
                        acc[1],
                        jerk[0],
                        jerk[1],
                        relative_heading,
                        if motion.complete { 0.0 } else { 1.0 },
                    ],
                    relative,
                    valid,
                    relative_heading,
                }
            })
            .collect();
        let lanes = lane_local_features(scenario, &frame, geometry.radius);
        Self {
            agent: i,
            frame,
            self_features,
            self_valid,
            observed,
            neighbors,
            lanes,
        }
    }

    /// Relative position of a neighbor at the last observed step.
    pub fn current_relative(&self, neighbor: &NeighborContext) -> Vec2 {
        neighbor.relative[self.self_features.len() - 1]
    }
}

/// Local contexts of every agent present at the last observed step.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneContext {
    pub geometry: SceneGeometry,
    pub agents: Vec<LocalContext>,
    /// Scenario agent index to position in `agents`.
    pub slot_of: Vec<Option<usize>>,
}

impl SceneContext {
    pub fn build(scenario: &Scenario, geometry: SceneGeometry) -> Self {
        let disp = vectorize(scenario);
        let now = geometry.observed - 1;
        let mut slot_of = vec![None; scenario.num_agents()];
        let mut agents = Vec::new();
        for i in 0..scenario.num_agents() {
            if scenario.valid[i][now] {
                slot_of[i] = Some(agents.len());
                agents.push(LocalContext::build(scenario, &disp, i, &geometry));
            }
        }
        Self {
            geometry,
            agents,
            slot_of,
        }
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::super::LaneSegment;
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn scenario(tracks: Vec<Vec<Vec2>>) -> Scenario {
        let n = tracks.len();
        let t = tracks[0].len();
        Scenario {
            id: "test".into(),
            agent_ids: (0..n).map(|i| i.to_string()).collect(),
            valid: vec![vec![true; t]; n],
            positions: tracks,
            lanes: Vec::new(),
            sample_rate_hz: 10.0,
            focal: vec![0],
        }
    }

    fn line(start: Vec2, step: Vec2, n: usize) -> Vec<Vec2> {
        (0..n)
            .map(|k| [start[0] + step[0] * k as f64, start[1] + step[1] * k as f64])
            .collect()
    }

    #[test]
    fn stationary_agent_has_zero_displacements() {
        let s = scenario(vec![vec![[2.0, 3.0]; 5]]);
        let d = vectorize(&s);
        assert!(d.values[0].iter().all(|v| *v == [0.0, 0.0]));
    }

    #[test]
    fn displacement_definition() {
        let s = scenario(vec![vec![[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]]]);
        let d = vectorize(&s);
        assert_eq!(&d.values[0][1..], &[[1.0, 0.0], [2.0, 0.0]]);
        assert!(!d.valid[0][0]);
    }

    #[test]
    fn mask_gap_invalidates_two_displacements() {
        let mut s = scenario(vec![line([0.0, 0.0], [1.0, 0.0], 6)]);
        s.valid[0][3] = false;
        let d = vectorize(&s);
        assert_eq!(d.valid[0], vec![false, true, true, false, false, true]);
        assert_eq!(d.values[0][3], [0.0, 0.0]);
    }

    #[test]
    fn frame_along_x_is_identity() {
        let s = scenario(vec![line([0.0, 0.0], [1.0, 0.0], 4)]);
        let f = build_local_frame(&s, 0, 4);
        assert_eq!(f.heading, 0.0);
        assert_eq!(f.rotation.matrix(), [[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn frame_along_y_rotates_onto_x() {
        let s = scenario(vec![line([0.0, 0.0], [0.0, 2.0], 4)]);
        let f = build_local_frame(&s, 0, 4);
        assert!((f.heading - FRAC_PI_2).abs() < 1e-12);
        // oracle: rotation by -pi/2 maps (x, y) to (y, -x)
        let r = f.rotation.apply([0.0, 2.0]);
        assert!((r[0] - 2.0).abs() < 1e-12 && r[1].abs() < 1e-12);
    }

    #[test]
    fn degenerate_reference_falls_back_to_identity() {
        let s = scenario(vec![vec![[1.0, 1.0]; 4]]);
        let f = build_local_frame(&s, 0, 4);
        assert_eq!(f.heading, 0.0);
        assert_eq!(f.rotation, super::super::Rot2::IDENTITY);
    }

    #[test]
    fn constant_velocity_has_no_acceleration_or_jerk() {
        let s = scenario(vec![line([0.0, 0.0], [1.0, 0.0], 6)]);
        let m = motion_attributes(&s, 0, 6);
        assert_eq!(m.acceleration, [0.0, 0.0]);
        assert_eq!(m.jerk, [0.0, 0.0]);
        assert!(m.complete);
    }

    #[test]
    fn acceleration_matches_finite_difference_oracle() {
        let xs = [0.0, 0.1, 0.3, 0.6];
        // oracle: v = dx / dt, a = dv / dt at 0.1 s
        let dt = 0.1;
        let v: Vec<f64> = xs.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
        assert!(v.iter().zip([1.0, 2.0, 3.0]).all(|(a, b)| (a - b).abs() < 1e-12));
        let a: Vec<f64> = v.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
        let jerk = (a[1] - a[0]) / dt;

        let s = scenario(vec![xs.iter().map(|&x| [x, 0.0]).collect()]);
        let m = motion_attributes(&s, 0, 4);
        assert!((m.acceleration[0] - a[1]).abs() < 1e-9);
        assert!((m.acceleration[0] - 10.0).abs() < 1e-9);
        assert!((m.jerk[0] - jerk).abs() < 1e-6);
        assert_eq!(m.acceleration[1], 0.0);
    }

    #[test]
    fn short_history_sets_flag() {
        let mut s = scenario(vec![line([0.0, 0.0], [1.0, 0.0], 6)]);
        s.valid[0][3] = false;
        let m = motion_attributes(&s, 0, 6);
        assert!(!m.complete);
        assert_eq!(m.acceleration, [0.0, 0.0]);
    }

    #[test]
    fn neighbor_radius_is_a_closed_ball() {
        let geo = SceneGeometry {
            observed: 3,
            radius: 50.0,
        };
        let s = scenario(vec![
            line([0.0, 0.0], [1.0, 0.0], 3),
            line([0.0, 10.0], [1.0, 0.0], 3),
            line([0.0, -50.0], [1.0, 0.0], 3),
            line([60.0, 0.0], [1.0, 0.0], 3),
        ]);
        assert_eq!(neighbors(&s, 0, &geo), vec![1, 2]);
        assert!(neighbors(&s, 1, &geo).contains(&0));
        assert!(!neighbors(&s, 3, &geo).contains(&0));
    }

    #[test]
    fn parallel_headings_give_zero_relative_heading() {
        let geo = SceneGeometry {
            observed: 4,
            radius: 50.0,
        };
        let s = scenario(vec![
            line([0.0, 0.0], [0.0, 1.0], 4),
            line([3.0, 0.0], [0.0, 2.0], 4),
        ]);
        let ctx = SceneContext::build(&s, geo);
        assert_eq!(ctx.agents[0].neighbors[0].relative_heading, 0.0);
    }

    #[test]
    fn lane_features_in_agent_frame() {
        let len = 5.0;
        let mut s = scenario(vec![line([-2.0, 0.0], [1.0, 0.0], 3)]);
        s.lanes = vec![
            LaneSegment::new([0.0, 0.0], [len, 0.0]),
            LaneSegment::new([100.0, 0.0], [105.0, 0.0]),
        ];
        let f = build_local_frame(&s, 0, 3);
        let feats = lane_local_features(&s, &f, 50.0);
        assert_eq!(feats.len(), 1);
        assert_eq!(feats[0].direction, [len, 0.0]);
        assert_eq!(feats[0].offset, [0.0, 0.0]);

        let mut s = scenario(vec![line([0.0, -2.0], [0.0, 1.0], 3)]);
        s.lanes = vec![LaneSegment::new([0.0, 0.0], [len, 0.0])];
        let f = build_local_frame(&s, 0, 3);
        let feats = lane_local_features(&s, &f, 50.0);
        assert!(feats[0].direction[0].abs() < 1e-12);
        assert!((feats[0].direction[1] + len).abs() < 1e-12);
    }

    #[test]
    fn current_displacement_lies_on_local_x_axis() {
        let geo = SceneGeometry {
            observed: 5,
            radius: 50.0,
        };
        let s = scenario(vec![line([1.0, 2.0], [0.3, -0.8], 5)]);
        let ctx = SceneContext::build(&s, geo);
        let h = ctx.agents[0].self_features[4];
        assert!(h[1].abs() < 1e-9);
        assert!((h[0] - norm([0.3, -0.8])).abs() < 1e-9);
    }
}

//! Procedural driving scenes.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::DataError;
use crate::scene::{add, norm, sub, LaneSegment, Scenario, Vec2};

const LANE_PIECE: f64 = 5.0;
const HALF_WIDTH: f64 = 3.5;
const LANE_OFFSET: f64 = 1.75;
const ARM_LENGTH: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Profile {
    Straight,
    Turns,
    Intersection,
}

impl FromStr for Profile {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "straight" => Ok(Profile::Straight),
            "turns" => Ok(Profile::Turns),
            "intersection" => Ok(Profile::Intersection),
            other => Err(DataError::Profile(other.to_string())),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Straight => "straight",
            Profile::Turns => "turns",
            Profile::Intersection => "intersection",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Maneuver {
    Straight,
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    /// Standard deviation of the per-step position noise, meters.
    pub noise_std: f64,
    pub steps: usize,
    /// Index of the first future step; agents are placed relative to it.
    pub observed: usize,
    pub sample_rate_hz: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            noise_std: 0.05,
            steps: 50,
            observed: 20,
            sample_rate_hz: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub scenario: Scenario,
    /// Maneuver of each agent, aligned with the scenario's agents.
    pub maneuvers: Vec<Maneuver>,
}

/// Piecewise path parameterized by arc length. Negative arc lengths extend
/// the first line backwards and the last line continues without end.
#[derive(Debug, Clone)]
struct Path {
    start: Vec2,
    dir: Vec2,
    arc: Option<Arc>,
    exit_dir: Vec2,
}

#[derive(Debug, Clone, Copy)]
struct Arc {
    center: Vec2,
    radius: f64,
    start_angle: f64,
    /// +1 counter-clockwise, -1 clockwise.
    sense: f64,
    sweep: f64,
}

impl Arc {
    fn length(&self) -> f64 {
        self.radius * self.sweep
    }

    fn at(&self, s: f64) -> Vec2 {
        let a = self.start_angle + self.sense * s / self.radius;
        [
            self.center[0] + self.radius * a.cos(),
            self.center[1] + self.radius * a.sin(),
        ]
    }
}

impl Path {
    fn at(&self, s: f64) -> Vec2 {
        if s <= 0.0 {
            return add(self.start, scaled(self.dir, s));
        }
        match self.arc {
            None => add(self.start, scaled(self.dir, s)),
            Some(arc) if s <= arc.length() => arc.at(s),
            Some(arc) => add(arc.at(arc.length()), scaled(self.exit_dir, s - arc.length())),
        }
    }
}

fn scaled(v: Vec2, k: f64) -> Vec2 {
    [v[0] * k, v[1] * k]
}

fn rotate(v: Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Splits the polyline through `points` into lane pieces of at most 5 m.
fn pieces(points: &[Vec2], bits: u8, out: &mut Vec<LaneSegment>) {
    for w in points.windows(2) {
        let len = norm(sub(w[1], w[0]));
        let n = (len / LANE_PIECE).ceil().max(1.0) as usize;
        for k in 0..n {
            let a = add(w[0], scaled(sub(w[1], w[0]), k as f64 / n as f64));
            let b = add(w[0], scaled(sub(w[1], w[0]), (k + 1) as f64 / n as f64));
            out.push(LaneSegment::from_flag_bits(a, b, bits));
        }
    }
}

fn arc_points(arc: &Arc) -> Vec<Vec2> {
    let n = (arc.length() / LANE_PIECE).ceil().max(1.0) as usize;
    (0..=n).map(|k| arc.at(arc.length() * k as f64 / n as f64)).collect()
}

/// Canonical approach from the west heading `+x` in the right-hand lane.
fn intersection_path(maneuver: Maneuver) -> Path {
    let entry = [-HALF_WIDTH, -LANE_OFFSET];
    let (arc, exit_dir) = match maneuver {
        Maneuver::Straight => (None, [1.0, 0.0]),
        Maneuver::Right => (
            Some(Arc {
                center: [-HALF_WIDTH, -HALF_WIDTH],
                radius: HALF_WIDTH - LANE_OFFSET,
                start_angle: FRAC_PI_2,
                sense: -1.0,
                sweep: FRAC_PI_2,
            }),
            [0.0, -1.0],
        ),
        Maneuver::Left => (
            Some(Arc {
                center: [-HALF_WIDTH, HALF_WIDTH],
                radius: HALF_WIDTH + LANE_OFFSET,
                start_angle: -FRAC_PI_2,
                sense: 1.0,
                sweep: FRAC_PI_2,
            }),
            [0.0, 1.0],
        ),
    };
    Path {
        start: entry,
        dir: [1.0, 0.0],
        arc,
        exit_dir,
    }
}

fn intersection_lanes() -> Vec<LaneSegment> {
    let mut canonical = Vec::new();
    let approach_end = [-HALF_WIDTH, -LANE_OFFSET];
    let approach_start = [-HALF_WIDTH - ARM_LENGTH, -LANE_OFFSET];
    pieces(&[approach_start, [approach_end[0] - LANE_PIECE, approach_end[1]]], 0, &mut canonical);
    pieces(&[[approach_end[0] - LANE_PIECE, approach_end[1]], approach_end], 4, &mut canonical);
    pieces(&[[-HALF_WIDTH, LANE_OFFSET], [-HALF_WIDTH - ARM_LENGTH, LANE_OFFSET]], 0, &mut canonical);
    pieces(&[approach_end, [HALF_WIDTH, -LANE_OFFSET]], 2, &mut canonical);
    for m in [Maneuver::Left, Maneuver::Right] {
        let arc = intersection_path(m).arc.expect("turns have arcs");
        pieces(&arc_points(&arc), 3, &mut canonical);
    }
    let mut lanes = Vec::with_capacity(4 * canonical.len());
    for arm in 0..4 {
        let angle = arm as f64 * FRAC_PI_2;
        for l in &canonical {
            lanes.push(LaneSegment {
                start: rotate(l.start, angle),
                end: rotate(l.end, angle),
                attributes: l.attributes,
            });
        }
    }
    lanes
}

struct Track {
    path: Path,
    /// Arc length at the last observed step.
    s_now: f64,
    speed: f64,
    maneuver: Maneuver,
}

fn intersection_tracks(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Track>, Vec<LaneSegment>) {
    let tracks = (0..n)
        .map(|_| {
            let arm = rng.random_range(0..4);
            let maneuver = match rng.random_range(0..3) {
                0 => Maneuver::Straight,
                1 => Maneuver::Left,
                _ => Maneuver::Right,
            };
            let mut path = intersection_path(maneuver);
            let angle = arm as f64 * FRAC_PI_2;
            path.start = rotate(path.start, angle);
            path.dir = rotate(path.dir, angle);
            path.exit_dir = rotate(path.exit_dir, angle);
            if let Some(arc) = path.arc.as_mut() {
                arc.center = rotate(arc.center, angle);
                arc.start_angle += angle;
            }
            let speed = rng.random_range(5.0..10.0);
            // enters the box between 0.05 s and 1 s after the last observed step
            let s_now = -speed * rng.random_range(0.05..1.0);
            Track {
                path,
                s_now,
                speed,
                maneuver,
            }
        })
        .collect();
    (tracks, intersection_lanes())
}

fn straight_tracks(rng: &mut ChaCha8Rng, n: usize, horizon_s: f64) -> (Vec<Track>, Vec<LaneSegment>) {
    let lanes_y: Vec<f64> = (0..4).map(|k| k as f64 * 2.0 * LANE_OFFSET).collect();
    let mut tracks = Vec::with_capacity(n);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..n {
        let y = lanes_y[rng.random_range(0..lanes_y.len())];
        let x_now = rng.random_range(-20.0..20.0);
        let speed = rng.random_range(3.0..12.0);
        lo = lo.min(x_now - speed * horizon_s);
        hi = hi.max(x_now + speed * horizon_s);
        tracks.push(Track {
            path: Path {
                start: [0.0, y],
                dir: [1.0, 0.0],
                arc: None,
                exit_dir: [1.0, 0.0],
            },
            s_now: x_now,
            speed,
            maneuver: Maneuver::Straight,
        });
    }
    let (lo, hi) = ((lo / LANE_PIECE).floor() * LANE_PIECE, (hi / LANE_PIECE).ceil() * LANE_PIECE);
    let mut lanes = Vec::new();
    for y in lanes_y {
        pieces(&[[lo, y], [hi, y]], 0, &mut lanes);
    }
    (tracks, lanes)
}

fn turn_tracks(rng: &mut ChaCha8Rng, n: usize, horizon_s: f64) -> (Vec<Track>, Vec<LaneSegment>) {
    let mut tracks = Vec::with_capacity(n);
    let mut lanes = Vec::new();
    for _ in 0..n {
        let speed = rng.random_range(3.0..10.0);
        let curvature: f64 = rng.random_range(-0.08..0.08);
        let heading = rng.random_range(-PI..PI);
        let origin = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
        let maneuver = if curvature > 0.01 {
            Maneuver::Left
        } else if curvature < -0.01 {
            Maneuver::Right
        } else {
            Maneuver::Straight
        };
        let dir = [heading.cos(), heading.sin()];
        // the whole track lies on one circle; nearly straight tracks stay linear
        let path = if curvature.abs() < 1e-3 {
            Path {
                start: origin,
                dir,
                arc: None,
                exit_dir: dir,
            }
        } else {
            let radius = 1.0 / curvature.abs();
            let sense = curvature.signum();
            let normal = [-dir[1] * sense, dir[0] * sense];
            let center = add(origin, scaled(normal, radius));
            let start_angle = (origin[1] - center[1]).atan2(origin[0] - center[0]);
            let arc = Arc {
                center,
                radius,
                start_angle,
                sense,
                sweep: f64::INFINITY,
            };
            Path {
                start: origin,
                dir,
                arc: Some(arc),
                exit_dir: dir,
            }
        };
        let s_lo = -speed * horizon_s;
        let s_hi = speed * horizon_s;
        let k = ((s_hi - s_lo) / LANE_PIECE).ceil() as usize;
        let points: Vec<Vec2> = (0..=k)
            .map(|i| circle_or_line(&path, s_lo + i as f64 * LANE_PIECE))
            .collect();
        let bits = if maneuver == Maneuver::Straight { 0 } else { 1 };
        for w in points.windows(2) {
            lanes.push(LaneSegment::from_flag_bits(w[0], w[1], bits));
        }
        tracks.push(Track {
            path,
            s_now: 0.0,
            speed,
            maneuver,
        });
    }
    (tracks, lanes)
}

/// Position on a constant-curvature path, including negative arc lengths.
fn circle_or_line(path: &Path, s: f64) -> Vec2 {
    match path.arc {
        Some(arc) if arc.sweep.is_infinite() => arc.at(s),
        _ => path.at(s),
    }
}

/// Generates `n_scenes` scenes with 2 to 8 agents each. Every agent is fully
/// observed and marked focal. The same seed always yields the same bytes.
pub fn generate_synthetic(
    seed: u64,
    n_scenes: usize,
    profile: Profile,
    opts: &SynthOptions,
) -> Result<Vec<SyntheticScene>, DataError> {
    if n_scenes == 0 {
        return Err(DataError::Config("scene count must be at least 1".into()));
    }
    if opts.observed < 2 || opts.steps < opts.observed || !(opts.sample_rate_hz > 0.0) {
        return Err(DataError::Config(format!(
            "bad synthetic horizon: {} steps, {} observed",
            opts.steps, opts.observed
        )));
    }
    let noise = Normal::new(0.0, opts.noise_std.max(0.0))
        .map_err(|e| DataError::Config(format!("noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / opts.sample_rate_hz;
    let horizon_s = opts.steps as f64 * dt;
    let now = opts.observed - 1;
    let mut scenes = Vec::with_capacity(n_scenes);
    for index in 0..n_scenes {
        let n = rng.random_range(2..=8);
        let (tracks, lanes) = match profile {
            Profile::Straight => straight_tracks(&mut rng, n, horizon_s),
            Profile::Turns => turn_tracks(&mut rng, n, horizon_s),
            Profile::Intersection => intersection_tracks(&mut rng, n),
        };
        let angle = rng.random_range(-PI..PI);
        let shift = [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)];
        let mut positions = Vec::with_capacity(n);
        for t in &tracks {
            let track: Vec<Vec2> = (0..opts.steps)
                .map(|k| {
                    let s = t.s_now + t.speed * (k as f64 - now as f64) * dt;
                    let p = circle_or_line(&t.path, s);
                    let p = if opts.noise_std > 0.0 {
                        [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)]
                    } else {
                        p
                    };
                    add(rotate(p, angle), shift)
                })
                .collect();
            positions.push(track);
        }
        let lanes = lanes
            .into_iter()
            .map(|l| LaneSegment {
                start: add(rotate(l.start, angle), shift),
                end: add(rotate(l.end, angle), shift),
                attributes: l.attributes,
            })
            .collect();
        let scenario = Scenario {
            id: format!("{profile}-{seed}-{index:05}"),
            agent_ids: (0..n).map(|k| format!("a{k}")).collect(),
            valid: vec![vec![true; opts.steps]; n],
            positions,
            lanes,
            sample_rate_hz: opts.sample_rate_hz,
            focal: (0..n).collect(),
        };
        scenes.push(SyntheticScene {
            scenario,
            maneuvers: tracks.iter().map(|t| t.maneuver).collect(),
        });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_noise() -> SynthOptions {
        SynthOptions {
            noise_std: 0.0,
            ..SynthOptions::default()
        }
    }

    #[test]
    fn same_seed_same_scenes() {
        let opts = SynthOptions::default();
        for p in [Profile::Straight, Profile::Turns, Profile::Intersection] {
            let a = generate_synthetic(11, 5, p, &opts).unwrap();
            let b = generate_synthetic(11, 5, p, &opts).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn straight_zero_noise_future_is_constant_velocity() {
        let opts = zero_noise();
        for s in generate_synthetic(3, 10, Profile::Straight, &opts).unwrap() {
            let sc = &s.scenario;
            for a in 0..sc.num_agents() {
                let p = &sc.positions[a];
                let now = opts.observed - 1;
                let v = sub(p[now], p[now - 1]);
                for k in 1..=(opts.steps - opts.observed) {
                    let cv = add(p[now], scaled(v, k as f64));
                    let e = norm(sub(cv, p[now + k]));
                    assert!(e < 1e-9, "agent {a} step {k}: {e}");
                }
            }
        }
    }

    #[test]
    fn generated_scenes_validate() {
        let opts = SynthOptions::default();
        for p in [Profile::Straight, Profile::Turns, Profile::Intersection] {
            for s in generate_synthetic(5, 20, p, &opts).unwrap() {
                s.scenario.validate(20, 30).unwrap();
                let n = s.scenario.num_agents();
                assert!((2..=8).contains(&n));
                assert_eq!(s.scenario.num_steps(), 50);
            }
        }
    }

    #[test]
    fn intersection_branch_frequencies() {
        let scenes = generate_synthetic(1, 300, Profile::Intersection, &SynthOptions::default()).unwrap();
        let mut counts = [0usize; 3];
        for s in &scenes {
            for m in &s.maneuvers {
                counts[match m {
                    Maneuver::Straight => 0,
                    Maneuver::Left => 1,
                    Maneuver::Right => 2,
                }] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            let f = c as f64 / total as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.06, "{counts:?}");
        }
    }

    #[test]
    fn intersection_turns_end_on_exit_lanes() {
        let opts = zero_noise();
        let scenes = generate_synthetic(2, 30, Profile::Intersection, &opts).unwrap();
        for s in &scenes {
            let sc = &s.scenario;
            for (a, m) in s.maneuvers.iter().enumerate() {
                let p = &sc.positions[a];
                let h0 = sub(p[19], p[18]);
                let h1 = sub(p[49], p[48]);
                let cross = h0[0] * h1[1] - h0[1] * h1[0];
                let dot = h0[0] * h1[0] + h0[1] * h1[1];
                match m {
                    Maneuver::Straight => assert!(cross.abs() < 1e-9 && dot > 0.0),
                    Maneuver::Left => assert!(cross > 0.0 && dot.abs() < 1e-9),
                    Maneuver::Right => assert!(cross < 0.0 && dot.abs() < 1e-9),
                }
            }
        }
    }

    #[test]
    fn unknown_profile_rejected() {
        let err = "roundabout".parse::<Profile>().unwrap_err();
        assert!(err.to_string().contains("roundabout"));
    }
}

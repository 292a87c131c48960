//! Per-mode prediction CSV and a static SVG overlay.

use std::fmt::Write as _;

use crate::model::Prediction;
use crate::scene::{Scenario, Vec2};

pub const PREDICTION_HEADER: &str = "scenario,agent,mode,step,x,y,probability";

/// Refined world-frame trajectories, one row per agent, mode and step.
pub fn prediction_csv(pred: &Prediction, scenario: &Scenario) -> String {
    let mut out = String::from(PREDICTION_HEADER);
    out.push('\n');
    for (slot, &agent) in pred.agents.iter().enumerate() {
        let id = &scenario.agent_ids[agent];
        for (m, mode) in pred.world_refined(slot).iter().enumerate() {
            let p = pred.stage1.probs[slot][m];
            for (t, q) in mode.iter().enumerate() {
                let _ = writeln!(out, "{},{id},{m},{t},{},{},{p}", pred.scenario_id, q[0], q[1]);
            }
        }
    }
    out
}

/// Blue for likely modes fading to orange for unlikely ones.
fn mode_color(p: f64, max: f64) -> String {
    let s = if max > 0.0 { (p / max).clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * s).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(240.0, 31.0), lerp(140.0, 90.0), lerp(40.0, 200.0))
}

struct View {
    min: Vec2,
    scale: f64,
    height: f64,
}

impl View {
    fn fit(points: &[Vec2], size: f64) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for k in 0..2 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        let pad = 5.0;
        let span = (max[0] - min[0]).max(max[1] - min[1]).max(1.0) + 2.0 * pad;
        Self {
            min: [min[0] - pad, min[1] - pad],
            scale: size / span,
            height: size,
        }
    }

    fn map(&self, p: Vec2) -> (f64, f64) {
        ((p[0] - self.min[0]) * self.scale, self.height - (p[1] - self.min[1]) * self.scale)
    }

    fn points(&self, ps: &[Vec2]) -> String {
        ps.iter()
            .map(|&p| {
                let (x, y) = self.map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lanes in grey, observed histories solid, ground truth dashed and the
/// `M` refined modes of agent `slot` colored by probability.
pub fn scene_svg(pred: &Prediction, scenario: &Scenario, observed: usize, slot: usize) -> String {
    let modes = pred.world_refined(slot);
    let probs = &pred.stage1.probs[slot];
    let mut extent: Vec<Vec2> = modes.iter().flatten().copied().collect();
    for &agent in &pred.agents {
        for (t, p) in scenario.positions[agent].iter().enumerate() {
            if scenario.valid[agent][t] {
                extent.push(*p);
            }
        }
    }
    let size = 800.0;
    let view = View::fit(&extent, size);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for lane in &scenario.lanes {
        let (x1, y1) = view.map(lane.start);
        let (x2, y2) = view.map(lane.end);
        let _ = writeln!(
            svg,
            r##"<line class="lane" x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="#cccccc" stroke-width="1"/>"##
        );
    }
    let segment = |agent: usize, range: std::ops::Range<usize>| -> Vec<Vec2> {
        range
            .filter(|&t| scenario.valid[agent][t])
            .map(|t| scenario.positions[agent][t])
            .collect()
    };
    for &agent in &pred.agents {
        let hist = segment(agent, 0..observed.min(scenario.num_steps()));
        let fut = segment(agent, observed.saturating_sub(1)..scenario.num_steps());
        let _ = writeln!(
            svg,
            r#"<polyline class="observed" points="{}" fill="none" stroke="black" stroke-width="2"/>"#,
            view.points(&hist)
        );
        if fut.len() > 1 {
            let _ = writeln!(
                svg,
                r#"<polyline class="truth" points="{}" fill="none" stroke="black" stroke-width="1.5" stroke-dasharray="6 4"/>"#,
                view.points(&fut)
            );
        }
    }
    let max = probs.iter().copied().fold(0.0, f64::max);
    let start = scenario.positions[pred.agents[slot]][observed - 1];
    for (m, mode) in modes.iter().enumerate() {
        let mut pts = vec![start];
        pts.extend_from_slice(mode);
        let _ = writeln!(
            svg,
            r#"<polyline class="mode" data-mode="{m}" data-probability="{:.6}" points="{}" fill="none" stroke="{}" stroke-width="2" stroke-opacity="0.85"/>"#,
            probs[m],
            view.points(&pts),
            mode_color(probs[m], max)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, ModelConfig, Profile, SynthOptions};
    use crate::model::{Model, SceneInputs};

    fn fixture() -> (Scenario, Prediction, ModelConfig) {
        let cfg = ModelConfig {
            hidden: 16,
            heads: 2,
            ..ModelConfig::default()
        };
        let s = generate_synthetic(4, 1, Profile::Intersection, &SynthOptions::default()).unwrap()[0]
            .scenario
            .clone();
        let model = Model::new(&cfg).unwrap();
        let pred = model.predict(&SceneInputs::build(&s, &cfg).unwrap()).unwrap();
        (s, pred, cfg)
    }

    #[test]
    fn csv_has_modes_times_steps_rows_per_agent() {
        let (s, pred, cfg) = fixture();
        let csv = prediction_csv(&pred, &s);
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), pred.agents.len() * cfg.modes * cfg.predicted);
        // probabilities echoed once per mode sum to one
        let first: Vec<f64> = rows
            .iter()
            .filter(|r| r.split(',').nth(1) == Some(s.agent_ids[pred.agents[0]].as_str()))
            .filter(|r| r.split(',').nth(3) == Some("0"))
            .map(|r| r.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(first.len(), cfg.modes);
        assert!((first.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn svg_has_one_polyline_per_mode() {
        let (s, pred, cfg) = fixture();
        let svg = scene_svg(&pred, &s, cfg.observed, 0);
        assert_eq!(svg.matches(r#"class="mode""#).count(), cfg.modes);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches(r#"class="observed""#).count(), pred.agents.len());
    }

    #[test]
    fn colors_span_the_ramp() {
        assert_eq!(mode_color(1.0, 1.0), "#1f5ac8");
        assert_eq!(mode_color(0.0, 1.0), "#f08c28");
    }
}

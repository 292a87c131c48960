//! Scenario CSV files, lane files and dataset directories.
//!
//! A scenario file has the header `TIMESTAMP,TRACK_ID,OBJECT_TYPE,X,Y`; rows
//! of tracks whose type is `AGENT` are focal. A lane file holds one segment
//! per line as `x0,y0,x1,y1,flags` with flag bits turn = 1, intersection = 2,
//! traffic control = 4.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::DataError;
use crate::scene::{LaneSegment, Scenario, Vec2};

pub const CSV_HEADER: [&str; 5] = ["TIMESTAMP", "TRACK_ID", "OBJECT_TYPE", "X", "Y"];
pub const INDEX_FILE: &str = "index.csv";
const FOCAL_TYPE: &str = "AGENT";
const OTHER_TYPE: &str = "OTHERS";
const DEFAULT_RATE_HZ: f64 = 10.0;

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    match e.position() {
        Some(pos) => DataError::CsvRow {
            path: path.to_path_buf(),
            row: pos.line() as usize,
            detail: e.to_string(),
        },
        None => DataError::Csv {
            path: path.to_path_buf(),
            detail: e.to_string(),
        },
    }
}

fn open_reader(path: &Path, headers: bool) -> Result<csv::Reader<fs::File>, DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(headers)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_f64(path: &Path, row: usize, column: &str, text: &str) -> Result<f64, DataError> {
    let v: f64 = text.parse().map_err(|_| DataError::CsvRow {
        path: path.to_path_buf(),
        row,
        detail: format!("column {column}: cannot parse {text:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(DataError::CsvRow {
            path: path.to_path_buf(),
            row,
            detail: format!("column {column}: non-finite value {text:?}"),
        });
    }
    Ok(v)
}

/// Reads one scenario, without lanes. Rows are grouped by track id in order
/// of first appearance and placed on a common time grid; missing steps
/// become mask holes.
pub fn load_csv(path: &Path) -> Result<Scenario, DataError> {
    let mut reader = open_reader(path, true)?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(CSV_HEADER) {
        *slot = header.iter().position(|h| h == name).ok_or_else(|| DataError::Csv {
            path: path.to_path_buf(),
            detail: format!("missing column {name}"),
        })?;
    }
    struct Row {
        t: f64,
        track: usize,
        p: Vec2,
        line: usize,
    }
    let mut ids: Vec<String> = Vec::new();
    let mut focal_flags: Vec<bool> = Vec::new();
    let mut slot_of: HashMap<String, usize> = HashMap::new();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |c: usize| record.get(cols[c]).unwrap_or("");
        let t = parse_f64(path, line, CSV_HEADER[0], field(0))?;
        let x = parse_f64(path, line, CSV_HEADER[3], field(3))?;
        let y = parse_f64(path, line, CSV_HEADER[4], field(4))?;
        let id = field(1).to_string();
        if id.is_empty() {
            return Err(DataError::CsvRow {
                path: path.to_path_buf(),
                row: line,
                detail: "empty TRACK_ID".into(),
            });
        }
        let track = *slot_of.entry(id.clone()).or_insert_with(|| {
            ids.push(id);
            focal_flags.push(false);
            ids.len() - 1
        });
        if field(2) == FOCAL_TYPE {
            focal_flags[track] = true;
        }
        rows.push(Row {
            t,
            track,
            p: [x, y],
            line,
        });
    }
    if rows.is_empty() {
        return Err(DataError::Csv {
            path: path.to_path_buf(),
            detail: "no data rows".into(),
        });
    }
    rows.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.track.cmp(&b.track)));
    let t0 = rows[0].t;
    let mut stamps: Vec<f64> = rows.iter().map(|r| r.t).collect();
    stamps.dedup();
    let rate = stamps
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let rate = if rate.is_finite() { 1.0 / rate } else { DEFAULT_RATE_HZ };
    // printed timestamps carry rounding noise; snap to a whole rate
    let rate = if (rate - rate.round()).abs() < 1e-6 { rate.round() } else { rate };
    let steps = ((stamps[stamps.len() - 1] - t0) * rate).round() as usize + 1;
    let n = ids.len();
    let mut positions = vec![vec![[0.0; 2]; steps]; n];
    let mut valid = vec![vec![false; steps]; n];
    for r in &rows {
        let k = ((r.t - t0) * rate).round() as usize;
        if valid[r.track][k] {
            return Err(DataError::CsvRow {
                path: path.to_path_buf(),
                row: r.line,
                detail: format!("duplicate timestamp {} for track {}", r.t, ids[r.track]),
            });
        }
        positions[r.track][k] = r.p;
        valid[r.track][k] = true;
    }
    let id = path
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    Ok(Scenario {
        id,
        agent_ids: ids,
        positions,
        valid,
        lanes: Vec::new(),
        sample_rate_hz: rate,
        focal: focal_flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect(),
    })
}

pub fn write_csv(scenario: &Scenario, path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
    for t in 0..scenario.num_steps() {
        let stamp = t as f64 / scenario.sample_rate_hz;
        for a in 0..scenario.num_agents() {
            if !scenario.valid[a][t] {
                continue;
            }
            let kind = if scenario.focal.contains(&a) { FOCAL_TYPE } else { OTHER_TYPE };
            let p = scenario.positions[a][t];
            w.write_record([
                stamp.to_string(),
                scenario.agent_ids[a].clone(),
                kind.to_string(),
                p[0].to_string(),
                p[1].to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

pub fn load_lanes(path: &Path) -> Result<Vec<LaneSegment>, DataError> {
    let mut reader = open_reader(path, false)?;
    let mut lanes = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 5 {
            return Err(DataError::CsvRow {
                path: path.to_path_buf(),
                row: line,
                detail: format!("expected x0,y0,x1,y1,flags but found {} fields", record.len()),
            });
        }
        let mut v = [0.0; 4];
        for (k, name) in ["x0", "y0", "x1", "y1"].into_iter().enumerate() {
            v[k] = parse_f64(path, line, name, &record[k])?;
        }
        let bits: u8 = record[4].parse().ok().filter(|b| *b < 8).ok_or_else(|| DataError::CsvRow {
            path: path.to_path_buf(),
            row: line,
            detail: format!("flags {:?} must be an integer in 0..8", &record[4]),
        })?;
        lanes.push(LaneSegment::from_flag_bits([v[0], v[1]], [v[2], v[3]], bits));
    }
    Ok(lanes)
}

pub fn write_lanes(lanes: &[LaneSegment], path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for l in lanes {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            l.start[0],
            l.start[1],
            l.end[0],
            l.end[1],
            l.flag_bits()
        ));
    }
    fs::write(path, out).map_err(|e| DataError::io(path, e))
}

/// Loads a scenario and its optional lane file (same stem, `.lanes`), then
/// checks that at least one agent has `observed` valid steps.
pub fn load_scenario(csv_path: &Path, observed: usize) -> Result<Scenario, DataError> {
    let mut s = load_csv(csv_path)?;
    let lane_path = csv_path.with_extension("lanes");
    if lane_path.exists() {
        s.lanes = load_lanes(&lane_path)?;
    }
    let best = s
        .valid
        .iter()
        .map(|m| m.iter().filter(|&&v| v).count())
        .max()
        .unwrap_or(0);
    if best < observed {
        return Err(DataError::Csv {
            path: csv_path.to_path_buf(),
            detail: format!("every agent has fewer than {observed} valid steps (best {best})"),
        });
    }
    Ok(s)
}

/// Writes `scene_XXXXX.csv` and `.lanes` per scenario plus an index.
pub fn save_dataset(dir: &Path, scenarios: &[Scenario]) -> Result<Vec<PathBuf>, DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut index = String::from("id,file\n");
    let mut files = Vec::with_capacity(scenarios.len());
    for (i, s) in scenarios.iter().enumerate() {
        let name = format!("scene_{i:05}.csv");
        let path = dir.join(&name);
        write_csv(s, &path)?;
        write_lanes(&s.lanes, &path.with_extension("lanes"))?;
        index.push_str(&format!("{},{name}\n", s.id));
        files.push(path);
    }
    let index_path = dir.join(INDEX_FILE);
    fs::write(&index_path, index).map_err(|e| DataError::io(&index_path, e))?;
    Ok(files)
}

/// Loads every scenario listed in the directory's index, in index order.
pub fn load_dataset(dir: &Path, observed: usize) -> Result<Vec<Scenario>, DataError> {
    let index_path = dir.join(INDEX_FILE);
    let mut reader = open_reader(&index_path, true)?;
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(&index_path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let (Some(id), Some(file)) = (record.get(0), record.get(1)) else {
            return Err(DataError::CsvRow {
                path: index_path.clone(),
                row: line,
                detail: "expected id,file".into(),
            });
        };
        entries.push((id.to_string(), dir.join(file)));
    }
    entries
        .par_iter()
        .map(|(id, path)| {
            let mut s = load_scenario(path, observed)?;
            s.id = id.clone();
            Ok(s)
        })
        .collect()
}

//! Synthetic scenes, CSV datasets, configuration and checkpoints.

mod checkpoint;
mod config;
mod csv_io;
mod synth;

pub use checkpoint::{Checkpoint, OptimizerState, StoredParam, CHECKPOINT_VERSION};
pub use config::{LrSchedule, ModelConfig};
pub use csv_io::{
    load_csv, load_dataset, load_lanes, load_scenario, save_dataset, write_csv, write_lanes,
    CSV_HEADER, INDEX_FILE,
};
pub use synth::{generate_synthetic, Maneuver, Profile, SynthOptions, SyntheticScene};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::scene::SceneError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Csv { path: PathBuf, detail: String },
    #[error("{path}, row {row}: {detail}")]
    CsvRow {
        path: PathBuf,
        row: usize,
        detail: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unknown profile {0:?} (expected straight, turns or intersection)")]
    Profile(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

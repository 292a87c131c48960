//! Multi-agent trajectory prediction with local trend-aware attention, a
//! motion state encoder and lightweight proposal refinement, on a small
//! reverse-mode autodiff engine.

pub mod cli;
pub mod data;
pub mod encoder;
pub mod export;
pub mod interaction_decoder;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod objective;
pub mod refine;
pub mod scene;
pub mod train;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Scene(#[from] scene::SceneError),
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error("scenario {0}: no agent is present at the last observed step")]
    EmptyScene(String),
    #[error("empty batch: no scored agent has a complete future")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status: 2 for data problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerics(_) => 3,
            _ => 2,
        }
    }
}

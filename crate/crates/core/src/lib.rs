//! Simulated tabletop picking with a curriculum-driven TRPO learner.

pub mod curriculum;
pub mod env;
pub mod harness;
pub mod perception;
pub mod policy;
pub mod sim;
pub mod trpo;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("step called on a finished episode")]
    EpisodeOver,
    #[error("action has {got} components, expected {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("environment built without a loaded encoder")]
    EncoderNotLoaded,
    #[error("malformed file: {0}")]
    Format(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Nn(#[from] deskpick_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

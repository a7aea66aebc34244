//! Synthetic experiment worlds with exact ground-truth oracles.

pub mod geometry;
pub mod toy;
pub mod urban;

use thiserror::Error;

use crate::datasets::DataError;

pub use geometry::{Point, Rect};
pub use toy::{toy_generate, ToyData, ToySpec, ToyTarget, ToyWorld};
pub use urban::{urban_generate, UrbanData, UrbanScene, UrbanTeacher};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("position ({x}, {y}) is not in free space")]
    InvalidPosition { x: f64, y: f64 },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

//! Multi-view depth estimation with learned view aggregation, multi-level
//! refinement and point-cloud fusion, plus the synthetic scenes, file
//! formats and training loop around it.

pub mod config;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod maps;
pub mod networks;
pub mod pipeline;
pub mod pyramid;
pub mod reconstruct;
pub mod synthetic;
pub mod train;

pub use config::{RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use geometry::{Camera, DepthRange};
pub use maps::{Image, Map};
pub use networks::Model;
pub use pipeline::{DepthEstimate, View};

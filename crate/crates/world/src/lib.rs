//! Procedural driving world: geometry primitives, scene synthesis with a
//! dynamic-programming expert driver, bird's-eye sector rendering, and the
//! on-disk episode dataset.

pub mod dataset;
pub mod generate;
pub mod geometry;
pub mod render;
pub mod types;

pub use dataset::{load_dataset, load_manifest, save_dataset, DatasetError, DatasetManifest};
pub use generate::{generate_episode, GenError, EGO_SIZE};
pub use types::{
    AgentBox, Command, EgoState, Episode, Frame, LaneMap, ViewSpec, WorldConfig, WorldError, DT,
};

//! Procedural regions and an exactly reciprocal propagation oracle.
//!
//! The scenes stand in for surveyed DSM/DTM tiles and the oracle for drive
//! test measurements, so the augmentation experiments can run end to end on
//! a desktop.

mod dataset;
mod oracle;
mod scene;

pub use dataset::{generate_dataset, DatasetError, GenerationOptions, ScenarioKind, ScenarioParams, STREET_CLUTTER_M};
pub use oracle::{
    diffraction_loss_db, free_space_loss_db, knife_edge_loss_db, oracle_path_loss, OracleError, SPEED_OF_LIGHT,
};
pub use scene::{generate_scene, Scene, SceneError, SceneParams};

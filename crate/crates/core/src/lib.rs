//! Map-based path loss modeling with reflection augmentation.
//!
//! The crate turns elevation rasters and link tables into four-channel path
//! profile tensors, trains a small convolutional regressor on them, and
//! measures how well the model respects reciprocity when the Tx and Rx are
//! exchanged. A procedural scene generator and an exactly reciprocal
//! diffraction oracle supply data when no measurements are at hand.

// range checks are written as `!(x >= lo)` so that NaN fails them too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod bytes;

pub mod evaluate;
pub mod experiment;
pub mod links;
pub mod nn;
pub mod profile;
pub mod raster;
pub mod seed;
pub mod synthetic;
pub mod transforms;

pub use links::{parse_link_csv, write_link_csv, LinkRecord, LinkTable};
pub use profile::{Orientation, PathProfileTensor, ProfileConfig};
pub use raster::{parse_ascii_grid, sample_bilinear, write_ascii_grid, RasterGrid};
pub use transforms::{augment_dataset, reflect, AugmentationPlan};

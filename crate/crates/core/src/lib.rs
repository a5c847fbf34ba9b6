//! Sub-metre DEM reconstruction from pushbroom stereo imagery.
//!
//! The crate is organised as one module per processing stage:
//!
//! * [`geom`] - vectors, rigid transforms and the pushbroom sensor model
//! * [`ingest`] - metadata sidecars and the grid, image and point-cloud file formats
//! * [`kv`] - the `key = value` text format shared by config and record files
//! * [`pairsel`] - stereo pair scoring and ranking from acquisition metadata
//! * [`adjust`] - tie-point detection and robust bundle adjustment
//! * [`densematch`] - NCC block matching into a dense disparity field
//! * [`recon`] - ray triangulation and IDW gridding
//! * [`align`] - point-to-plane ICP against a reference DTM and bias removal
//! * [`mosaic`] - void filling and feathered priority blending
//! * [`validate`] - profiles, RMSE, planimetric offsets, hillshading
//! * [`synth`] - synthetic terrains and pushbroom renders used as ground truth

pub mod adjust;
pub mod align;
pub mod densematch;
pub mod error;
pub mod geom;
pub mod ingest;
pub mod kv;
pub mod mosaic;
pub mod pairsel;
pub mod recon;
pub mod synth;
pub mod validate;

pub use error::{Error, Result};

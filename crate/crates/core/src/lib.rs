//! Crowd counting by density estimation.
//!
//! Discretized per-pixel features are mapped to a person density through a
//! learned nonnegative weight per feature; integrating the density over any
//! region gives the number of persons inside it. Weights are trained by
//! minimizing a regularized MESA (maximum excess over subarrays) distance to
//! ground-truth densities with cutting planes. Motion comes from TV-L1
//! optical flow; density and motion are rectified into a metric world grid,
//! where the human-pressure map `P = ρ·Var(V)` is evaluated.
//!
//! Module map:
//! - [`grids`]: rasters, summed-area tables, boxes, CGRID files
//! - [`features`]: confidence quantization, dense descriptors, codebooks, stacking
//! - [`density`]: ground-truth rasterization, density estimation, counting
//! - [`mesa`]: 2D maximum subarray and the MESA distance
//! - [`learn`]: cutting-plane weight learning and model files
//! - [`flow`]: TV-L1 optical flow and temporal averaging
//! - [`georef`]: pixel-to-world mappings, rectification, grid export
//! - [`pressure`]: velocity variance and pressure maps
//! - [`synth`]: deterministic synthetic scenes and training sets
//! - [`analytics`]: counting error and temporal smoothness metrics

pub mod analytics;
pub mod density;
pub mod error;
pub mod features;
pub mod flow;
pub mod georef;
pub mod grids;
pub mod learn;
pub mod mesa;
pub mod pressure;
pub mod synth;

pub use error::{Error, Result};
pub use grids::{BoxRegion, Grid2D, IntegralImage};

//! Thread density estimation for plain-weave canvases.

pub mod analyzer;
pub mod dataset;
pub mod preprocess;
pub mod raster;
pub mod regnet;
pub mod spectral;
pub mod weavesim;

//! Single-step point-cloud deformation conditioned on multi-view image
//! features, trained with flow matching and geometric regularizers.

pub mod aggregation;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod flow;
pub mod geom;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod propagation;
pub mod tape;
pub mod train;

pub use error::{Error, Result};

//! Ensembles of heterogeneous 3D segmentation networks, from phantom data
//! generation through training, inference, and evaluation.

pub mod arch;
pub mod builders;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod forward;
pub mod fsio;
pub mod gradcheck;
pub mod landmarks;
pub mod losses;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod phantom;
pub mod preprocess;
pub mod reader;
pub mod sampling;
pub mod scalar;
pub mod tape;
pub mod train;
pub mod tensor;
pub mod toy;
pub mod volume;

pub use error::{EmmaError, Result};

//! End-to-end temporal sentence grounding at desk scale.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod sampler;
pub mod scada;
pub mod segment;
pub mod tensor;

pub use error::{Result, TsgError};
pub use segment::MomentSegment;

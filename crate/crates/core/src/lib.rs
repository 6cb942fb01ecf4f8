//! Block-diffusion language modeling trained with
//! a mixed-scale objective and sampled by multi-stage draft-then-revise
//! generation with snapshot-confidence remasking.

pub mod autograd;
pub mod error;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod mock;
pub mod oracle;
pub mod reference;
pub mod rng;
pub mod sampler;
pub mod train;

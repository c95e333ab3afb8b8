pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod lora;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod sae;
pub mod svg;
pub mod tensor;
pub mod tuning;

pub use error::{Error, Result};

pub mod checkpoint;
pub mod conversion;
pub mod data;
pub mod dgsa;
pub mod embedding;
pub mod error;
pub mod head;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scan;
pub mod sequence;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod graph;
pub mod losses;
pub mod maw;
pub mod mlmb;
pub mod mlpb;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

//! Training, evaluation and persistence for the joint communication and
//! sensing link built from `jcas-core`.

mod error;
pub mod checkpoint;
pub mod echo;
pub mod mimo;
pub mod system;
pub mod sweep;
pub mod trainer;

pub use error::{Result, TrainError};

//! Signal model, receivers and neural building blocks for a joint
//! communication and sensing link with a uniform linear array.

mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod constellation;
pub mod airlink;
pub mod neural;
pub mod sensing_rx;
pub mod comm_rx;
pub mod baselines;
pub mod objectives;

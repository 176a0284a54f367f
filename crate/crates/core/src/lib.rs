pub mod config;
pub mod error;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod nets;
pub mod objectives;
pub mod oracles;
pub mod pipeline;
pub mod samplers;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

pub mod adjoint;
pub mod baseline;
pub mod error;
pub mod math;
pub mod mpm;
pub mod objective;
pub mod optimizer;
pub mod scene;
pub mod skills;
pub mod task;

pub use error::{Error, Result};

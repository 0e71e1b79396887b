pub mod bench;
pub mod descriptor;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod spdnet;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};

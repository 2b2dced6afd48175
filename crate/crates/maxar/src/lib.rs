pub mod error;
pub mod gev;
pub mod grid;
pub mod normal;
pub mod optim;
pub mod par;
pub mod quad;
pub mod rng;

pub use error::{Error, ErrorKind, Result};
pub mod brown_resnick;
pub mod model;
pub mod inference;
pub mod forecast;
pub mod diagnostics;
pub mod scoring;

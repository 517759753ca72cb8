pub mod autodiff;
pub mod cvae;
pub mod error;
pub mod ilrma;
pub mod lgm;
pub mod metrics;
pub mod mixsim;
pub mod mvae;
pub mod signal;

pub use error::{Error, Result};

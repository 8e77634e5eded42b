pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod networks;
pub mod meta;
pub mod par;
pub mod selftrain;
pub mod synth;

pub use error::{Error, Result};

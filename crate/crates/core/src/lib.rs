pub mod envs;
pub mod error;
pub mod harness;
pub mod io;
pub mod policy;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};

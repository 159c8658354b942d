pub mod ccnet;
pub mod data;
pub mod document;
pub mod encoding;
pub mod error;
pub mod harness;
pub mod heads;
pub mod model;
pub mod nn;
pub mod pair_matrix;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};

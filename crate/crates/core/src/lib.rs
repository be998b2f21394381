pub mod crm;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod pipeline;
pub mod plora;
pub mod prompting;
pub mod retriever;
pub mod tiny_lm;

pub use error::{Error, Result};

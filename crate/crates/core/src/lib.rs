pub mod ctc;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod imageprep;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Backend, Model, ModelConfig, Profile};
pub use tensor::{Graph, Mode, Tensor, Var};

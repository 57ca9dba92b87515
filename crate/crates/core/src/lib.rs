mod codec;
pub mod data;
pub mod error;
pub mod harness;
pub mod layers;
pub mod params;
pub mod pooling;
pub mod serialized;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Forward, Mode, ParamId, ParamStore};
pub use tensor::{Graph, Tensor, Var};

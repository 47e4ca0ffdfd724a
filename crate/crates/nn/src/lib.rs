//! Neural network, streaming inference and training for query-anytime 4D
//! reconstruction, on a small reverse-mode autodiff engine.

pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod streaming;
pub mod training;
pub mod params;
pub mod tensor;

pub use graph::{AttnGroup, Gradients, Graph, Unary, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};

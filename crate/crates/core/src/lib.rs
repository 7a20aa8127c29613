pub mod ablate;
pub mod align;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod smoe;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Grads, Graph, Var};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::{Scalar, Tensor};

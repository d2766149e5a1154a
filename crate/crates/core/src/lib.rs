pub mod ablation;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod flow;
pub mod io;
pub mod lut;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod purifier;
pub mod tensor;
pub mod tiling;
pub mod training;

pub use autodiff::{Backend, Eager, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};

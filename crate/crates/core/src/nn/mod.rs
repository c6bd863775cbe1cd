//! Small CPU neural-network toolkit: tensors, an autodiff tape, parameter
//! storage and Adam.

pub mod adam;
pub(crate) mod conv;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::Adam;
pub use conv::Padding;
pub use graph::{Gradients, Graph, Var};
pub use params::{normal_tensor, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;

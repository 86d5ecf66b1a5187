//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Graph`] records operations in creation order; [`Graph::forward`]
//! evaluates every node against named bindings and [`Graph::backward`]
//! returns the gradient of a scalar node with respect to every parameter
//! and free input. Variable-length sequences are handled with padding and
//! explicit masks rather than by reshaping the graph.

mod array;
pub mod gradcheck;
mod graph;
mod params;

pub use array::Array;
pub use graph::{sigmoid, Gradients, Graph, Mode, NodeId, OpKind, Precision, Values, BCE_CLAMP};
pub(crate) use params::check_same_shape;
pub use params::{Bindings, Layered, ParamRole, Parameter, ParameterStore};

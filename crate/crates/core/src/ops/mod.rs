//! Differentiable operations recorded on a [`Graph`](crate::graph::Graph).

mod activation;
mod conv;
mod elementwise;
mod norm;
mod reduce;
mod resample;
mod shape;

pub use activation::Unary;
pub use conv::ConvSpec;
pub use norm::{L2_EPS, LN_EPS};

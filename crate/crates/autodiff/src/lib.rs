//! A compact `f64` tensor library with reverse-mode automatic
//! differentiation.
//!
//! Backward rules are expressed with the same graph operations as the
//! forward pass, so [`grad`] with `create_graph = true` yields gradients that
//! can be differentiated again. That is what input-gradient penalties such as
//! `||d f / d x||^2` need when they are trained against model weights.
//!
//! ```
//! use rn_autodiff::{grad, Tensor, Var};
//!
//! let x = Var::param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let y = x.square().sum(); // y = x0^2 + x1^2
//! let dx = &grad(&y, &[&x], true).unwrap()[0]; // 2x
//! let penalty = dx.square().sum(); // 4 (x0^2 + x1^2)
//! let ddx = &grad(&penalty, &[&x], false).unwrap()[0]; // 8x
//! assert_eq!(ddx.value().data(), &[8.0, 16.0]);
//! ```

mod backward;
pub mod conv;
mod tensor;
mod var;

pub use backward::grad;
pub use conv::{ConvSpec, Padding};
pub use tensor::Tensor;
pub use var::{is_grad_enabled, no_grad, NoGradGuard, Var};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, Error>;

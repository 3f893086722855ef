//! Dense tensors with a dynamic reverse-mode graph.
//!
//! A deliberately small engine: row-major `f64` (or `f32` for inference)
//! buffers, one recorded closure per op, and a single backward sweep.
//! Every differentiable op is checked against central finite differences
//! in `tests/gradients.rs`.
//!
//! ```
//! use edgenav_autodiff::Tensor;
//!
//! let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
//! x.sqr().sum().backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
//! ```

mod error;
pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod optim;
pub mod params;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::Conv2dSpec;
pub use optim::Adam;
pub use params::{Binding, Param, ParamStore};
pub use real::{DType, Real};
pub use tensor::{BackwardFn, Tensor};

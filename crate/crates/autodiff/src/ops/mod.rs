mod conv;
mod elementwise;
mod index;
mod linalg;
mod norm;
pub(crate) mod reduce;
mod softmax;

pub use conv::Conv2dSpec;
pub use elementwise::broadcast_shape;

pub(crate) use elementwise::{sigmoid_scalar, softplus_scalar};

/// Logistic function on a plain scalar.
pub fn sigmoid<T: crate::Real>(v: T) -> T {
    sigmoid_scalar(v)
}

/// `ln(1 + e^v)` on a plain scalar.
pub fn softplus<T: crate::Real>(v: T) -> T {
    softplus_scalar(v)
}

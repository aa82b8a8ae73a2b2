//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! The engine supports exactly the operations the forecasting model is built
//! from: batched matrix products, dense layers, dilated causal convolutions,
//! softmax, layer normalization, GELU, head splitting for multi-head attention
//! and the mean-squared-error loss. Everything runs single-threaded and is
//! bitwise deterministic for identical inputs.
//!
//! ```
//! use dplet::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(vec![1, 2], vec![1.0, 2.0])?);
//! let w = tape.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0])?);
//! let y = tape.matmul(x, w)?;
//! let loss = tape.sum(y)?;
//! tape.backward(loss)?;
//! assert_eq!(tape.value(y).data(), &[11.0]);
//! assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
//! # Ok::<(), dplet::Error>(())
//! ```

mod backward;
mod gemm;
mod ops;
mod tape;
mod tensor;

pub use ops::LAYER_NORM_EPS;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

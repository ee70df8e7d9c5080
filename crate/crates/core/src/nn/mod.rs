//! Minimal deterministic neural-network engine.
//!
//! Layers run on batched row-major buffers; accumulation order is fixed, so
//! identical seeds and inputs reproduce bit-identical results.

mod kernels;
mod loss;
mod model;
mod optim;

pub use loss::{argmax_rows, cross_entropy_with_label_smoothing};
pub use model::{Layer, Model};
pub use optim::{BufferMode, LrSchedule, SgdState};

//! Dynamic sparse training: a small deterministic network engine, sparse mask
//! bookkeeping, mask-update schedulers, theoretical FLOP accounting and an
//! experiment harness.

pub mod arch;
pub mod data;
pub mod error;
pub mod flops;
pub mod harness;
pub mod nn;
pub mod schedulers;
pub mod sparsity;
pub mod tensor;

pub use arch::{ArchSpec, LayerDecl, LayerKind, MaskableLayer};
pub use error::{Error, Result};
pub use flops::{FlopReport, FlopTrace};
pub use nn::{BufferMode, LrSchedule, Model, SgdState};
pub use schedulers::{Method, Scheduler, UpdateEvent, UpdatePolicy};
pub use sparsity::{Distribution, Granularity, LayerMask, MaskSet, SparsityConfig};
pub use tensor::Tensor;

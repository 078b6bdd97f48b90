//! Dense tensors, a reverse-mode tape, first-order optimizers and gradient
//! verification. Everything runs in `f64`.

mod gradcheck;
mod optim;
mod params;
mod schedule;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use optim::{AdamW, AdamWConfig, SgdMomentum};
pub use params::{xavier_uniform, Grads, ParamId, ParamStore, Rng};
pub use schedule::WarmupSchedule;
pub use tape::{Tape, TapeWarnings, Var};
pub use tensor::Tensor;

pub(crate) use tape::dropout_mask;
pub(crate) use tensor::gemm;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("step {step} outside schedule range 0..={total}")]
    ScheduleRange { step: usize, total: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Seeds a generator; all randomness in the crate flows through here.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

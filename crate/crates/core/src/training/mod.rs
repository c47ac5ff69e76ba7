//! Sparsity-regularized training with forced-global collapse mitigation.

mod eval;
mod identity;
mod loss;
mod optim;
pub mod tasks;
mod trainer;

pub use eval::{evaluate, EvalReport};
pub use identity::{verify_router_gradient_identity, IdentityCheck, IdentityReport, LayerIdentity, IDENTITY_TOL};
pub use loss::{compute_loss, LossGrad, LossParts};
pub use optim::{Optimizer, OptimizerConfig};
pub use tasks::{make_batch, make_synthetic_task, Sample, TaskKind, TaskSpec};
pub use trainer::{train, StepReport, TrainConfig, Trainer};

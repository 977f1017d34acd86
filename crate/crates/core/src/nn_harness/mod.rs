//! Small fully connected networks, their optimizer, and the training loops.

pub mod checkpoint;
pub mod mlp;
pub mod optim;
pub mod train;

pub use checkpoint::{load_logits, load_model, save_logits, save_model, CachedLogits};
pub use mlp::{Activation, Gradients, Matrix, Mlp, MlpSpec, Real};
pub use optim::{backward_and_step, OptimizerSpec, SgdMomentum};
pub use train::{
    distill, distill_cached, evaluate_top1, train_teacher, DistillSettings, EpochMetrics,
    TeacherCache, TrainOutcome,
};

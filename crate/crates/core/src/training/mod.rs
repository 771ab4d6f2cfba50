//! Losses, gradients, optimizer and the training loop.

pub mod fit;
pub mod grad;
pub mod loss;
pub mod optim;
pub mod sampling;

pub use fit::{fit, init_params, total_steps, CodecKind, FitError, FitOutcome, LogRecord, TrainConfig};
pub use grad::{batch_loss, loss_gradients, BatchLoss, DistillMode, DistillationSetup, PairSpec};
pub use loss::{balanced_bce, bce_loss, token_distill_loss, total_loss, trim_teacher_tokens};
pub use optim::{adamw_update, cosine_lr, optimizer_step, AdamState, AdamWConfig};
pub use sampling::{cube_weights, sample_lengths, sample_triplet_batch, PairExample, TrainImage, TrainSet};

//! Pre-training: recipe, augmentation, learning-rate schedule, AdamW,
//! the training step and loop, and checkpoints.

pub mod augment;
pub mod checkpoint;
pub mod optim;
pub mod recipe;
pub mod schedule;
pub mod trainer;

pub use augment::augment;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, TensorData};
pub use optim::{clip_global_norm, global_norm, AdamW};
pub use recipe::{Recipe, ScheduleKind};
pub use schedule::{lr_schedule, Schedule};
pub use trainer::{drop_path_scales, masking_plans, train_step, train_step_with_plans, StepReport, Trainer};

//! Stage schedules, optimizers, sampling and augmentation, the synthetic
//! task, and the training loop.

pub mod optim;
pub mod sampling;
pub mod schedule;
pub mod synthetic;
pub mod trainer;

pub use optim::Optimizer;
pub use sampling::{eval_multiview, sample_frames, AugmentationConfig, CropMode, CropSpec, SampleMode};
pub use schedule::{lr_at, preset, Decay, LossKind, OptimizerKind, Overrides, StageSchedule};
pub use synthetic::{make_synthetic, Dataset, Sample, SyntheticSpec};
pub use trainer::{build_clip, evaluate, eval_views, run_stage, EvalHook, EvalSpec, TrainingLog};

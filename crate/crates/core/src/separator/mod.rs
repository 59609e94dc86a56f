//! The full separator: model variants, parameter and MAC accounting,
//! training and checkpoints.

mod checkpoint;
mod data;
mod model;
mod spec;
mod train;

pub use model::{from_frames, to_frames, Forward, SeparatorModel, TRAIN_BACKWARD_CONFIG};
pub use spec::{MacCount, ModelSpec, ParamCount, Variant, FULL_SCALE_TARGETS};
pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use data::{
    load_dataset_dir, toy_dataset, toy_dataset_with, toy_scene_spec, toy_scene_spec_with, Dataset, Example, TOY_SECONDS, TOY_TARGETS,
};
pub use train::{mean_over, Adam, EpochLog, Stage, TrainConfig, TrainState, Trainer};

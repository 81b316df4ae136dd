//! Optimizer, difference maps and the two-stage training protocol.

mod diffmap;
mod optim;
mod train;

pub use diffmap::{difference_mask, generate_difference_maps, BINARIZE_AT};
pub use optim::{poly_lr, Sgd, Stage, TrainConfig};
pub use train::{run_two_stage, train, BatchOrder, LogRow, Sample, TwoStage};

//! Toy tasks, training and the configuration grid.

mod grid;
mod model;
mod optim;
mod task;
mod train;

pub use grid::{beta_grid, deformable_rows, dynamic_rows, emit_results, run_grid};
pub use model::{Model, ModelConfig, Slot, Stack};
pub use optim::{Momentum, OptimizerConfig};
pub use task::{accuracy, fixed_position_oracle, oracle, Sample, TaskConfig, TaskSpec, ToyTask};
pub use train::{beta_label, evaluate, train, train_on, ResultRecord, RunConfig, RunStatus};

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::model::{ModelConfig, Stack};
use super::optim::OptimizerConfig;
use super::task::TaskConfig;
use super::train::{beta_label, train, ResultRecord, RunConfig};
use crate::attention::{Beta, Region};
use crate::error::Result;

/// Runs every configuration (in parallel; each run is single-threaded and
/// self-contained) and returns the records sorted by task, stack, β and seed.
pub fn run_grid(configs: &[RunConfig]) -> Vec<ResultRecord> {
    let mut records: Vec<ResultRecord> = configs.par_iter().map(train).collect();
    records.sort_by_key(|a| a.config.key());
    records
}

fn run(task: &TaskConfig, model: ModelConfig, optimizer: &OptimizerConfig, seed: u64) -> RunConfig {
    RunConfig {
        task: task.clone(),
        model,
        optimizer: optimizer.clone(),
        seed,
    }
}

/// All sixteen β strings on one stack.
pub fn beta_grid(
    task: &TaskConfig,
    stack: Stack,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Vec<RunConfig> {
    Beta::all()
        .map(|b| run(task, ModelConfig::new(stack, Some(b)), optimizer, seed))
        .collect()
}

/// Deformable rows: deformable convolution alone and in front of a few
/// attention configurations, with `0010 + deformable` among them.
pub fn deformable_rows(
    task: &TaskConfig,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Vec<RunConfig> {
    let mut betas: Vec<Option<Beta>> = ["0010", "0011", "1111"]
        .iter()
        .map(|s| Some(s.parse().expect("valid β")))
        .collect();
    if task.spec.query_layout().is_none() {
        betas.insert(0, None);
    }
    betas
        .into_iter()
        .map(|b| {
            run(
                task,
                ModelConfig::new(Stack::TransformerDeformable, b),
                optimizer,
                seed,
            )
        })
        .collect()
}

/// Dynamic convolution against the windowed query-content and
/// relative-position term it is compared with.
pub fn dynamic_rows(task: &TaskConfig, optimizer: &OptimizerConfig, seed: u64) -> Vec<RunConfig> {
    let mut rows = vec![run(
        task,
        ModelConfig::new(Stack::Dynamic, None),
        optimizer,
        seed,
    )];
    if task.spec.query_layout().is_none() {
        let mut m = ModelConfig::new(Stack::Transformer, Some("0100".parse().expect("valid β")));
        m.region = Region::Window { radius: 1 };
        rows.push(run(task, m, optimizer, seed));
    }
    rows
}

#[derive(Serialize)]
struct Row<'a> {
    task: &'a str,
    stack: String,
    beta: String,
    accuracy: Option<f64>,
    macs: u64,
    wall_ms: u64,
    seed: u64,
}

/// Writes `task, stack, beta, accuracy, macs, wall_ms, seed` with a header row.
/// Failed runs have an empty accuracy.
pub fn emit_results(records: &[ResultRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        let mut beta = beta_label(&r.config.model);
        if r.config.model.region != Region::Full {
            beta.push_str("-windowed");
        }
        w.serialize(Row {
            task: r.config.task.spec.name(),
            stack: r.config.model.stack.to_string(),
            beta,
            accuracy: r.accuracy,
            macs: r.macs,
            wall_ms: r.wall_ms,
            seed: r.seed,
        })?;
    }
    w.flush()?;
    Ok(())
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use spatial_attn::attention::Beta;
use spatial_attn::complexity::{emit_table, MechanismShape};
use spatial_attn::harness::{
    beta_label, deformable_rows, dynamic_rows, emit_results, run_grid, ModelConfig,
    OptimizerConfig, RunConfig, Stack, TaskConfig, TaskSpec,
};
use spatial_attn::Layout;

#[derive(Parser)]
#[command(
    name = "spatial-attn",
    about = "Spatial attention ablations at toy scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a grid of configurations and write one CSV row per run.
    Grid {
        /// permuted-copy, salient-detection or windowed-denoise
        #[arg(long, default_value = "salient-detection")]
        task: String,
        /// attended-block, transformer, transformer-deformable or dynamic
        #[arg(long, default_value = "transformer")]
        stack: Stack,
        /// Comma-separated β strings, `-` for none, or `all`.
        #[arg(long, default_value = "all")]
        betas: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Seed of the task generator.
        #[arg(long, default_value_t = 7)]
        task_seed: u64,
        /// Also run the deformable and dynamic-convolution comparison rows.
        #[arg(long)]
        extra_rows: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// JSON file holding one run configuration or a list of them; replaces
        /// the grid built from the other flags.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
    },
    /// Print closed-form MAC counts and factor flags as CSV.
    Flops {
        /// Number of spatial elements (a sequence unless --width is given).
        #[arg(long)]
        ns: usize,
        #[arg(long)]
        c: usize,
        #[arg(long, default_value_t = 3)]
        nk: usize,
        #[arg(long, default_value_t = 16)]
        ng: usize,
        #[arg(long, default_value_t = 8)]
        m: usize,
        /// Treat the elements as a grid of this width.
        #[arg(long)]
        width: Option<usize>,
    },
    /// Run the invariant suite.
    Check,
}

fn parse_betas(s: &str) -> Result<Vec<Option<Beta>>> {
    if s == "all" {
        return Ok(Beta::all().map(Some).collect());
    }
    s.split(',')
        .map(|b| match b.trim() {
            "-" => Ok(None),
            b => Ok(Some(b.parse()?)),
        })
        .collect()
}

fn load_configs(path: &PathBuf) -> Result<Vec<RunConfig>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    Ok(if value.is_array() {
        serde_json::from_value(value)?
    } else {
        vec![serde_json::from_value(value)?]
    })
}

#[allow(clippy::too_many_arguments)]
fn grid(
    task: &str,
    stack: Stack,
    betas: &str,
    seed: u64,
    task_seed: u64,
    extra_rows: bool,
    steps: Option<usize>,
    lr: Option<f64>,
    config: Option<PathBuf>,
    out: PathBuf,
) -> Result<bool> {
    let configs = match config {
        Some(path) => load_configs(&path)?,
        None => {
            let task = TaskConfig::new(TaskSpec::from_name(task)?, task_seed);
            let mut optimizer = OptimizerConfig::default();
            optimizer.steps = steps.unwrap_or(optimizer.steps);
            optimizer.lr = lr.unwrap_or(optimizer.lr);
            let mut runs: Vec<RunConfig> = parse_betas(betas)?
                .into_iter()
                .map(|beta| RunConfig {
                    task: task.clone(),
                    model: ModelConfig::new(stack, beta),
                    optimizer: optimizer.clone(),
                    seed,
                })
                .collect();
            if extra_rows {
                runs.extend(deformable_rows(&task, &optimizer, seed));
                runs.extend(dynamic_rows(&task, &optimizer, seed));
            }
            runs
        }
    };
    if configs.is_empty() {
        bail!("no runs requested");
    }
    let records = run_grid(&configs);
    for r in &records {
        let acc = r.accuracy.map_or_else(|| "-".into(), |a| format!("{a:.4}"));
        println!(
            "{:<18} {:<22} {:<6} acc={acc:<7} macs={:<8} {}",
            r.config.task.spec.name(),
            r.config.model.stack,
            beta_label(&r.config.model),
            r.macs,
            r.status
        );
    }
    emit_results(&records, &out)?;
    eprintln!("wrote {} rows to {}", records.len(), out.display());
    Ok(records.iter().all(|r| r.ok()))
}

fn flops(ns: usize, c: usize, nk: usize, ng: usize, m: usize, width: Option<usize>) -> Result<()> {
    let layout = match width {
        Some(w) if w > 0 && ns.is_multiple_of(w) => Layout::grid(w, ns / w),
        Some(w) => bail!("--width {w} does not divide --ns {ns}"),
        None => Layout::seq(ns),
    };
    let shape = MechanismShape {
        layout,
        dim: c,
        n_k: nk,
        n_g: ng,
        heads: m,
    };
    emit_table(&shape).write_csv(std::io::stdout().lock())?;
    Ok(())
}

fn main() -> Result<ExitCode> {
    let ok = match Cli::parse().command {
        Command::Grid {
            task,
            stack,
            betas,
            seed,
            task_seed,
            extra_rows,
            steps,
            lr,
            config,
            out,
        } => grid(
            &task, stack, &betas, seed, task_seed, extra_rows, steps, lr, config, out,
        )?,
        Command::Flops {
            ns,
            c,
            nk,
            ng,
            m,
            width,
        } => {
            flops(ns, c, nk, ng, m, width)?;
            true
        }
        Command::Check => {
            let results = spatial_attn::checks::run_all();
            for r in &results {
                println!("{r}");
            }
            results.iter().all(|r| r.passed)
        }
    };
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

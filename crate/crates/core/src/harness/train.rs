use std::fmt;
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use super::optim::{Momentum, OptimizerConfig};
use super::task::{accuracy, TaskConfig, ToyTask};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskConfig,
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl RunConfig {
    /// Grid sort key: task, stack, β, seed.
    pub fn key(&self) -> (String, String, String, u64) {
        (
            self.task.spec.name().to_string(),
            self.model.stack.to_string(),
            beta_label(&self.model),
            self.seed,
        )
    }
}

/// `"-"` when the switched attention is absent.
pub fn beta_label(m: &ModelConfig) -> String {
    m.beta.map_or_else(|| "-".into(), |b| b.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", content = "detail", rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    Failed(String),
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Ok => f.write_str("ok"),
            RunStatus::Failed(why) => write!(f, "failed: {why}"),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ResultRecord {
    pub config: RunConfig,
    /// Evaluation accuracy; `None` when the run failed.
    pub accuracy: Option<f64>,
    /// Forward-pass MACs of the model on one evaluation sample.
    pub macs: u64,
    pub wall_ms: u64,
    pub seed: u64,
    pub status: RunStatus,
}

impl ResultRecord {
    pub fn ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

/// Trains one model and evaluates it. Failures, including a non-finite loss,
/// come back as a record with a failed status.
pub fn train(run: &RunConfig) -> ResultRecord {
    let start = Instant::now();
    let outcome = ToyTask::generate(run.task.clone()).and_then(|task| train_on(run, &task));
    let wall_ms = start.elapsed().as_millis() as u64;
    match outcome {
        Ok((acc, macs)) => ResultRecord {
            config: run.clone(),
            accuracy: Some(acc),
            macs,
            wall_ms,
            seed: run.seed,
            status: RunStatus::Ok,
        },
        Err(e) => ResultRecord {
            config: run.clone(),
            accuracy: None,
            macs: 0,
            wall_ms,
            seed: run.seed,
            status: RunStatus::Failed(e.to_string()),
        },
    }
}

const BATCH_STREAM: u64 = 20;

/// Trains on an already generated task; returns `(accuracy, macs)`.
pub fn train_on(run: &RunConfig, task: &ToyTask) -> Result<(f64, u64)> {
    let mut model = Model::new(run.model.clone(), *task.spec(), run.seed)?;
    let opt_cfg = &run.optimizer;
    let mut opt = Momentum::new(opt_cfg);
    let mut rng = Rng::derive(run.seed, BATCH_STREAM);
    let scales: Vec<f64> = model.slots().iter().map(|s| s.lr_scale).collect();
    if task.train.is_empty() && opt_cfg.steps > 0 {
        return Err(Error::Config("training needs samples".into()));
    }
    for step in 0..opt_cfg.steps {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let mut total = None;
        for _ in 0..opt_cfg.batch {
            let sample = &task.train[rng.below(task.train.len())];
            let logits = model.forward(&mut tape, &vars, sample)?;
            let targets: Rc<[usize]> = sample.targets.as_slice().into();
            let loss = tape.cross_entropy(logits, targets)?;
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });
        }
        let Some(total) = total else { break };
        let loss = tape.scale(total, 1.0 / opt_cfg.batch as f64);
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value} at step {step}")));
        }
        tape.backward(loss)?;
        let grads: Vec<_> = vars.iter().map(|&v| tape.grad(v)).collect();
        opt.step(model.tensors_mut(), &grads, &scales)?;
    }
    let acc = evaluate(&model, task)?;
    let macs = match task.eval.first() {
        Some(s) => model.forward_macs(s)?,
        None => 0,
    };
    Ok((acc, macs))
}

pub fn evaluate(model: &Model, task: &ToyTask) -> Result<f64> {
    let mut err = None;
    let acc = accuracy(&task.eval, |s| match model.predict(s) {
        Ok(p) => p,
        Err(e) => {
            err.get_or_insert(e);
            Vec::new()
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(acc),
    }
}

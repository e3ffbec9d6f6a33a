//! Toy tasks with known oracles.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::tensor::{Rng, Tensor};

/// Which toy problem to generate, with its sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskSpec {
    /// Source elements are `(key, value)` pairs in a fresh random order; each
    /// decoder query names a key and must output its value.
    PermutedCopy { vocab: usize, length: usize },
    /// Grid whose label is the class carried by the few marked cells.
    SalientDetection {
        extent: usize,
        channels: usize,
        classes: usize,
        marked: usize,
    },
    /// Piecewise-constant token sequence with random corruptions; every
    /// position predicts its clean token.
    WindowedDenoise {
        vocab: usize,
        length: usize,
        channels: usize,
        /// Corruption probability in thousandths.
        noise_permille: u32,
    },
}

impl TaskSpec {
    pub fn permuted_copy() -> Self {
        TaskSpec::PermutedCopy {
            vocab: 16,
            length: 8,
        }
    }

    pub fn salient_detection() -> Self {
        TaskSpec::SalientDetection {
            extent: 6,
            channels: 8,
            classes: 4,
            marked: 3,
        }
    }

    pub fn windowed_denoise() -> Self {
        TaskSpec::WindowedDenoise {
            vocab: 8,
            length: 16,
            channels: 16,
            noise_permille: 200,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::PermutedCopy { .. } => "permuted-copy",
            TaskSpec::SalientDetection { .. } => "salient-detection",
            TaskSpec::WindowedDenoise { .. } => "windowed-denoise",
        }
    }

    /// Parses a task name into its default sizes.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "permuted-copy" => Ok(Self::permuted_copy()),
            "salient-detection" => Ok(Self::salient_detection()),
            "windowed-denoise" => Ok(Self::windowed_denoise()),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }

    /// Feature width of every element, which is also the model width.
    pub fn channels(&self) -> usize {
        match *self {
            TaskSpec::PermutedCopy { vocab, length } => vocab + length,
            TaskSpec::SalientDetection { channels, .. } => channels,
            TaskSpec::WindowedDenoise { channels, .. } => channels,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            TaskSpec::PermutedCopy { vocab, .. } => vocab,
            TaskSpec::SalientDetection { classes, .. } => classes,
            TaskSpec::WindowedDenoise { vocab, .. } => vocab,
        }
    }

    pub fn source_layout(&self) -> Layout {
        match *self {
            TaskSpec::PermutedCopy { length, .. } => Layout::seq(length),
            TaskSpec::SalientDetection { extent, .. } => Layout::grid(extent, extent),
            TaskSpec::WindowedDenoise { length, .. } => Layout::seq(length),
        }
    }

    /// Layout of the decoder queries for encoder-decoder tasks.
    pub fn query_layout(&self) -> Option<Layout> {
        match *self {
            TaskSpec::PermutedCopy { length, .. } => Some(Layout::seq(length)),
            _ => None,
        }
    }

    /// One label per sample rather than per position.
    pub fn pooled(&self) -> bool {
        matches!(self, TaskSpec::SalientDetection { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            TaskSpec::PermutedCopy { vocab, length } => {
                if vocab < 4 || length < 4 {
                    return bad(format!(
                        "copy task needs vocab, length ≥ 4, got {vocab}, {length}"
                    ));
                }
                if vocab < length {
                    return bad(format!(
                        "copy values are distinct, so vocab {vocab} must cover length {length}"
                    ));
                }
            }
            TaskSpec::SalientDetection {
                extent,
                channels,
                classes,
                marked,
            } => {
                let n = extent * extent;
                if classes < 2 || channels < classes + 1 || n % classes != 0 {
                    return bad(format!(
                        "salient task needs classes ≥ 2 dividing {n} cells and {} channels",
                        classes + 1
                    ));
                }
                if marked == 0 || marked > n / classes {
                    return bad(format!("{marked} marked cells do not fit one class"));
                }
            }
            TaskSpec::WindowedDenoise {
                vocab,
                length,
                channels,
                noise_permille,
            } => {
                if vocab < 2 || length < 4 || channels < vocab || noise_permille >= 1000 {
                    return bad(
                        "denoise task needs vocab ≥ 2, length ≥ 4, channels ≥ vocab, noise < 1"
                            .into(),
                    );
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub spec: TaskSpec,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
}

impl TaskConfig {
    pub fn new(spec: TaskSpec, seed: u64) -> Self {
        TaskConfig {
            spec,
            seed,
            n_train: 2000,
            n_eval: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[N, C]` source elements (keys).
    pub source: Tensor,
    /// `[N_q, C]` decoder queries, for encoder-decoder tasks.
    pub queries: Option<Tensor>,
    /// One label per query, per position, or a single label.
    pub targets: Vec<usize>,
}

impl Sample {
    fn fingerprint(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.source.data().iter().map(|x| x.to_bits()).collect();
        if let Some(q) = &self.queries {
            v.extend(q.data().iter().map(|x| x.to_bits()));
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct ToyTask {
    pub config: TaskConfig,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

impl ToyTask {
    /// Deterministic in `config.seed`. Evaluation samples that coincide with a
    /// training sample are redrawn, so the two splits are disjoint.
    pub fn generate(config: TaskConfig) -> Result<Self> {
        config.spec.validate()?;
        let mut rng = Rng::derive(config.seed, TRAIN_STREAM);
        let train: Vec<Sample> = (0..config.n_train)
            .map(|_| draw(&config.spec, &mut rng))
            .collect::<Result<_>>()?;
        let seen: HashSet<Vec<u64>> = train.iter().map(Sample::fingerprint).collect();
        let mut rng = Rng::derive(config.seed, EVAL_STREAM);
        let mut eval = Vec::with_capacity(config.n_eval);
        let mut attempts = 0;
        while eval.len() < config.n_eval {
            attempts += 1;
            if attempts > 100 * (config.n_eval + 1) {
                return Err(Error::Config(
                    "task space too small for disjoint splits".into(),
                ));
            }
            let s = draw(&config.spec, &mut rng)?;
            if !seen.contains(&s.fingerprint()) {
                eval.push(s);
            }
        }
        Ok(ToyTask {
            config,
            train,
            eval,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.config.spec
    }

    /// Accuracy of the task-specific oracle on the evaluation split.
    pub fn oracle_accuracy(&self) -> f64 {
        let spec = self.config.spec;
        accuracy(&self.eval, |s| oracle(&spec, s))
    }

    /// Chance accuracy of a uniform guess.
    pub fn chance(&self) -> f64 {
        1.0 / self.config.spec.classes() as f64
    }
}

/// Fraction of labels predicted correctly over `samples`.
pub fn accuracy(samples: &[Sample], mut predict: impl FnMut(&Sample) -> Vec<usize>) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples {
        let p = predict(s);
        hit += p.iter().zip(&s.targets).filter(|(a, b)| a == b).count();
        total += s.targets.len();
    }
    hit as f64 / total.max(1) as f64
}

fn one_hot(row: &mut [f64], i: usize) {
    row[i] = 1.0;
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn draw(spec: &TaskSpec, rng: &mut Rng) -> Result<Sample> {
    let c = spec.channels();
    match *spec {
        TaskSpec::PermutedCopy { vocab, length } => {
            // keys are a permutation of 0..length, values distinct tokens
            let keys = rng.permutation(length);
            let values: Vec<usize> = rng.permutation(vocab).into_iter().take(length).collect();
            let order = rng.permutation(length);
            let mut source = Tensor::zeros([length, c]);
            let mut queries = Tensor::zeros([length, c]);
            let mut targets = Vec::with_capacity(length);
            for i in 0..length {
                let row = &mut source.data_mut()[i * c..(i + 1) * c];
                one_hot(row, keys[i]);
                one_hot(row, length + values[i]);
            }
            for (j, &i) in order.iter().enumerate() {
                one_hot(&mut queries.data_mut()[j * c..(j + 1) * c], keys[i]);
                targets.push(values[i]);
            }
            Ok(Sample {
                source,
                queries: Some(queries),
                targets,
            })
        }
        TaskSpec::SalientDetection {
            extent,
            classes,
            marked,
            ..
        } => {
            let n = extent * extent;
            let label = rng.below(classes);
            // every class occupies exactly n / classes cells
            let cells = rng.permutation(n);
            let per = n / classes;
            let mut source = Tensor::zeros([n, c]);
            for (slot, &cell) in cells.iter().enumerate() {
                let class = slot / per;
                let row = &mut source.data_mut()[cell * c..(cell + 1) * c];
                one_hot(row, 1 + class);
                if class == label && slot % per < marked {
                    row[0] = 1.0;
                }
                for v in &mut row[1 + classes..] {
                    *v = rng.uniform(0.0, 1.0);
                }
            }
            Ok(Sample {
                source,
                queries: None,
                targets: vec![label],
            })
        }
        TaskSpec::WindowedDenoise {
            vocab,
            length,
            noise_permille,
            ..
        } => {
            let mut clean = Vec::with_capacity(length);
            let mut prev = usize::MAX;
            while clean.len() < length {
                let mut tok = rng.below(vocab);
                while tok == prev {
                    tok = rng.below(vocab);
                }
                let run = 3 + rng.below(4);
                clean.extend(std::iter::repeat_n(tok, run.min(length - clean.len())));
                prev = tok;
            }
            let mut source = Tensor::zeros([length, c]);
            for (i, &tok) in clean.iter().enumerate() {
                let mut seen = tok;
                if rng.chance(noise_permille as f64 / 1000.0) {
                    seen = (tok + 1 + rng.below(vocab - 1)) % vocab;
                }
                one_hot(&mut source.data_mut()[i * c..(i + 1) * c], seen);
            }
            Ok(Sample {
                source,
                queries: None,
                targets: clean,
            })
        }
    }
}

/// Reference predictions that use the construction of each task.
///
/// Copy: look up the source row whose key matches the query. Salient: average
/// the class channels of marked cells. Denoise: majority token over a radius-1
/// window.
pub fn oracle(spec: &TaskSpec, s: &Sample) -> Vec<usize> {
    match *spec {
        TaskSpec::PermutedCopy { length, .. } => {
            let q = s.queries.as_ref().expect("copy samples have queries");
            (0..q.rows())
                .map(|j| {
                    let key = argmax(&q.row(j)[..length]);
                    let i = (0..s.source.rows())
                        .find(|&i| s.source.at(i, key) == 1.0)
                        .expect("every key is present");
                    argmax(&s.source.row(i)[length..])
                })
                .collect()
        }
        TaskSpec::SalientDetection { classes, .. } => {
            let mut acc = vec![0.0; classes];
            let mut count = 0.0;
            for i in 0..s.source.rows() {
                let row = s.source.row(i);
                if row[0] == 1.0 {
                    count += 1.0;
                    for (a, v) in acc.iter_mut().zip(&row[1..=classes]) {
                        *a += v;
                    }
                }
            }
            acc.iter_mut().for_each(|a| *a /= count);
            vec![argmax(&acc)]
        }
        TaskSpec::WindowedDenoise { vocab, .. } => {
            let n = s.source.rows();
            let tok = |i: usize| argmax(&s.source.row(i)[..vocab]);
            (0..n)
                .map(|q| {
                    let mut votes = vec![0usize; vocab];
                    for k in q.saturating_sub(1)..=(q + 1).min(n - 1) {
                        votes[tok(k)] += 1;
                    }
                    // ties keep the observed token
                    let best = *votes.iter().max().unwrap();
                    if votes[tok(q)] == best {
                        tok(q)
                    } else {
                        votes.iter().position(|&v| v == best).unwrap()
                    }
                })
                .collect()
        }
    }
}

/// Best accuracy of answering every copy query with the value stored at one
/// fixed source position, maximized over positions.
pub fn fixed_position_oracle(spec: &TaskSpec, samples: &[Sample]) -> Result<f64> {
    let TaskSpec::PermutedCopy { length, .. } = *spec else {
        return Err(Error::Config(
            "fixed-position oracle applies to the copy task".into(),
        ));
    };
    Ok((0..length)
        .map(|p| {
            accuracy(samples, |s| {
                let v = argmax(&s.source.row(p)[length..]);
                vec![v; s.targets.len()]
            })
        })
        .fold(0.0, f64::max))
}

//! Quick invariant suite, runnable outside the test harness (the CLI's `check`).

use std::fmt;

use crate::attention::{
    attention_weights, energy_terms, AttentionConfig, AttentionMode, Beta, TransformerAttention,
    TransformerVars,
};
use crate::complexity::{count_mechanism, measure_mechanism, Mechanism, MechanismShape};
use crate::conv::{
    bilinear_weights, deformable_forward, regular_conv_forward, regular_conv_weights,
    ConvKernelSpec, DeformableParams, DeformableVars,
};
use crate::dynconv::{dynamic_forward, dynamic_kernel, DynamicConvParams, DynamicConvVars};
use crate::error::{Error, Result};
use crate::harness::{
    fixed_position_oracle, train, ModelConfig, OptimizerConfig, RunConfig, Stack, TaskConfig,
    TaskSpec, ToyTask,
};
use crate::layout::Layout;
use crate::tensor::{finite_diff_check, Rng, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

type Check = fn() -> Result<(bool, String)>;

fn bounded(value: f64, tol: f64) -> Result<(bool, String)> {
    Ok((value <= tol, format!("{value:.3e} (tol {tol:.0e})")))
}

fn conv_matches_weights() -> Result<(bool, String)> {
    let mut rng = Rng::new(1);
    let (w, h, c) = (5, 4, 3);
    let layout = Layout::grid(w, h);
    let spec = ConvKernelSpec::square(3)?;
    let x = Tensor::uniform([w * h, c], 1.0, &mut rng);
    let kernel = Tensor::uniform([9 * c, c], 1.0, &mut rng);
    let mut t = Tape::new();
    let (xv, kv) = (t.constant(x.clone()), t.constant(kernel.clone()));
    let y = regular_conv_forward(&mut t, xv, kv, layout, &spec)?;
    let mut worst: f64 = 0.0;
    for q in 0..w * h {
        let heads = regular_conv_weights(layout, q, &spec)?;
        for o in 0..c {
            let mut s = 0.0;
            for (m, weights) in heads.iter().enumerate() {
                for &(k, a) in weights {
                    for i in 0..c {
                        s += a * x.at(k, i) * kernel.at(m * c + i, o);
                    }
                }
            }
            worst = worst.max((s - t.value(y).at(q, o)).abs());
        }
    }
    bounded(worst, 1e-10)
}

fn deformable_degenerates() -> Result<(bool, String)> {
    let mut rng = Rng::new(2);
    let layout = Layout::grid(4, 4);
    let spec = ConvKernelSpec::square(3)?;
    let p = DeformableParams::init(3, layout, &spec, &mut rng);
    let x = Tensor::uniform([16, 3], 1.0, &mut rng);
    let mut t = Tape::new();
    let vars = p.bind(&mut t, false);
    let xv = t.constant(x);
    let a = deformable_forward(&mut t, xv, &vars, layout, &spec)?;
    let b = regular_conv_forward(&mut t, xv, vars.output_proj, layout, &spec)?;
    let diff = t
        .value(a)
        .data()
        .iter()
        .zip(t.value(b).data())
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max);
    bounded(diff, 1e-12)
}

fn normalization() -> Result<(bool, String)> {
    let mut rng = Rng::new(3);
    let mut worst: f64 = 0.0;
    let l = Layout::grid(3, 3);
    for beta in Beta::all() {
        let mut cfg = AttentionConfig::uniform(2, 8)?;
        cfg.beta = beta;
        let m = TransformerAttention::init(cfg, &[l], &mut rng)?;
        let x = Tensor::uniform([9, 8], 5.0, &mut rng);
        let table = m.offset_table(l, l)?;
        let mut t = Tape::new();
        let vars = m.params.bind(&mut t, false);
        let xv = t.constant(x);
        let terms = energy_terms(&mut t, &m.config, &vars, xv, xv, &table)?;
        for w in attention_weights(&mut t, &m.config, &terms, None)? {
            for q in 0..9 {
                worst = worst.max((t.value(w).row(q).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let p = DynamicConvParams::init(8, 8, 4, ConvKernelSpec::line(5)?, &mut rng)?;
    for _ in 0..100 {
        let h: Vec<f64> = (0..8).map(|_| rng.uniform(-10.0, 10.0)).collect();
        for g in dynamic_kernel(&h, &p)? {
            worst = worst.max((g.iter().sum::<f64>() - 1.0).abs());
        }
        let loc = [rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0)];
        let s: f64 = bilinear_weights(l, &loc)?.iter().map(|(_, v)| v).sum();
        worst = worst.max((s - 1.0).abs());
    }
    bounded(worst, 1e-6)
}

fn gradients() -> Result<(bool, String)> {
    let mut rng = Rng::new(4);
    let l = Layout::seq(4);
    let m = TransformerAttention::init(AttentionConfig::new(2, 4, Beta::FULL)?, &[l], &mut rng)?;
    let mut params: Vec<Tensor> = m.params.tensors().into_iter().cloned().collect();
    params.push(Tensor::uniform([4, 4], 1.0, &mut rng));
    let attn = finite_diff_check(
        |t: &mut Tape, v: &[Var]| {
            let vars = TransformerVars::from_slice(&v[..7])?;
            m.forward(t, &vars, v[7], v[7], l, l, AttentionMode::SelfAttention)
        },
        &params,
    )?;
    let g = Layout::grid(3, 3);
    let spec = ConvKernelSpec::square(3)?;
    let mut dp = DeformableParams::init(2, g, &spec, &mut rng);
    dp.offset_pred = Tensor::uniform([2, 18], 0.3, &mut rng);
    let x = Tensor::uniform([9, 2], 1.0, &mut rng);
    let deform = finite_diff_check(
        |t: &mut Tape, v: &[Var]| {
            let vars = DeformableVars {
                offset_pred: v[0],
                output_proj: v[1],
            };
            deformable_forward(t, v[2], &vars, g, &spec)
        },
        &[dp.offset_pred.clone(), dp.output_proj.clone(), x],
    )?;
    let p = DynamicConvParams::init(4, 4, 2, ConvKernelSpec::line(3)?, &mut rng)?;
    let mut params: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
    params.push(Tensor::uniform([5, 4], 1.0, &mut rng));
    let dynamic = finite_diff_check(
        |t: &mut Tape, v: &[Var]| {
            let vars = DynamicConvVars::from_slice(&v[..6])?;
            dynamic_forward(t, v[6], &p, &vars, Layout::seq(5))
        },
        &params,
    )?;
    bounded(attn.max(deform).max(dynamic), 1e-4)
}

fn mac_counts() -> Result<(bool, String)> {
    let mut n = 0;
    for layout in [Layout::seq(10), Layout::grid(4, 3)] {
        let s = MechanismShape {
            layout,
            dim: 8,
            n_k: if layout.dims() == 1 { 3 } else { 9 },
            n_g: 4,
            heads: 2,
        };
        let mechs = [
            Mechanism::Regular,
            Mechanism::Deformable,
            Mechanism::Dynamic,
        ]
        .into_iter()
        .chain(Beta::all().map(Mechanism::Transformer));
        for m in mechs {
            let got = measure_mechanism(m, &s, 5)?.macs;
            if got != count_mechanism(m, &s) {
                return Ok((false, format!("{m} on {layout:?}: measured {got}")));
            }
            n += 1;
        }
    }
    Ok((true, format!("{n} mechanisms exact")))
}

fn task_oracles() -> Result<(bool, String)> {
    let copy = TaskSpec::permuted_copy();
    let t = ToyTask::generate(TaskConfig::new(copy, 1))?;
    let bound = fixed_position_oracle(&copy, &t.eval)?;
    let TaskSpec::PermutedCopy { length, .. } = copy else {
        return Err(Error::Config("unexpected copy spec".into()));
    };
    let s = ToyTask::generate(TaskConfig::new(TaskSpec::salient_detection(), 1))?;
    let ok = t.oracle_accuracy() == 1.0
        && s.oracle_accuracy() == 1.0
        && bound <= t.chance() + 1.0 / length as f64;
    Ok((
        ok,
        format!(
            "copy oracle {}, salient oracle {}, fixed-position {bound:.4}",
            t.oracle_accuracy(),
            s.oracle_accuracy()
        ),
    ))
}

fn determinism() -> Result<(bool, String)> {
    let run = RunConfig {
        task: TaskConfig {
            n_train: 100,
            n_eval: 50,
            ..TaskConfig::new(TaskSpec::salient_detection(), 2)
        },
        model: ModelConfig::new(Stack::TransformerDeformable, Some("0010".parse()?)),
        optimizer: OptimizerConfig {
            steps: 20,
            batch: 4,
            ..OptimizerConfig::default()
        },
        seed: 3,
    };
    let (a, b) = (train(&run), train(&run));
    let ok =
        a.ok() && a.accuracy.map(f64::to_bits) == b.accuracy.map(f64::to_bits) && a.macs == b.macs;
    Ok((ok, format!("accuracy {:?}, macs {}", a.accuracy, a.macs)))
}

/// Runs every check; a check that errors counts as failed.
pub fn run_all() -> Vec<CheckOutcome> {
    let suite: [(&'static str, Check); 7] = [
        ("convolution as attention", conv_matches_weights),
        ("deformable with zero offsets", deformable_degenerates),
        ("normalization", normalization),
        ("gradient checks", gradients),
        ("mac counts", mac_counts),
        ("task oracles", task_oracles),
        ("determinism", determinism),
    ];
    suite
        .into_iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => CheckOutcome {
                name,
                passed,
                detail,
            },
            Err(e) => CheckOutcome {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn suite_passes() {
        for c in super::run_all() {
            assert!(c.passed, "{c}");
        }
    }
}

use std::collections::HashSet;

use spatial_attn::attention::Beta;
use spatial_attn::harness::{
    beta_grid, deformable_rows, emit_results, fixed_position_oracle, oracle, run_grid, train,
    Model, ModelConfig, OptimizerConfig, RunConfig, RunStatus, Sample, Stack, TaskConfig, TaskSpec,
    ToyTask,
};
use spatial_attn::Tensor;

fn small(spec: TaskSpec, seed: u64) -> TaskConfig {
    TaskConfig {
        spec,
        seed,
        n_train: 200,
        n_eval: 100,
    }
}

fn quick(steps: usize) -> OptimizerConfig {
    OptimizerConfig {
        steps,
        batch: 4,
        ..OptimizerConfig::default()
    }
}

fn run(task: TaskConfig, stack: Stack, beta: Option<&str>, opt: OptimizerConfig) -> RunConfig {
    RunConfig {
        task,
        model: ModelConfig::new(stack, beta.map(|b| b.parse().unwrap())),
        optimizer: opt,
        seed: 3,
    }
}

fn all_specs() -> [TaskSpec; 3] {
    [
        TaskSpec::permuted_copy(),
        TaskSpec::salient_detection(),
        TaskSpec::windowed_denoise(),
    ]
}

#[test]
fn generation_is_deterministic_and_splits_disjoint() {
    for spec in all_specs() {
        let a = ToyTask::generate(small(spec, 7)).unwrap();
        let b = ToyTask::generate(small(spec, 7)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
        let c = ToyTask::generate(small(spec, 8)).unwrap();
        assert_ne!(a.train, c.train);
        let key = |s: &Sample| {
            let mut v: Vec<u64> = s.source.data().iter().map(|x| x.to_bits()).collect();
            if let Some(q) = &s.queries {
                v.extend(q.data().iter().map(|x| x.to_bits()));
            }
            v
        };
        let seen: HashSet<_> = a.train.iter().map(key).collect();
        assert!(
            a.eval.iter().all(|s| !seen.contains(&key(s))),
            "{}",
            spec.name()
        );
    }
}

#[test]
fn construction_oracles_solve_their_tasks() {
    for spec in [TaskSpec::permuted_copy(), TaskSpec::salient_detection()] {
        let t = ToyTask::generate(TaskConfig::new(spec, 1)).unwrap();
        assert_eq!(t.oracle_accuracy(), 1.0, "{}", spec.name());
    }
    let t = ToyTask::generate(TaskConfig::new(TaskSpec::windowed_denoise(), 1)).unwrap();
    assert!(t.oracle_accuracy() > t.chance() + 0.5);
}

#[test]
fn no_fixed_position_solves_the_copy_task() {
    let spec = TaskSpec::permuted_copy();
    let TaskSpec::PermutedCopy { vocab, length } = spec else {
        unreachable!()
    };
    let t = ToyTask::generate(TaskConfig::new(spec, 2)).unwrap();
    assert_eq!(t.chance(), 1.0 / vocab as f64);
    let bound = fixed_position_oracle(&spec, &t.eval).unwrap();
    assert!(bound <= t.chance() + 1.0 / length as f64, "bound {bound}");
}

#[test]
fn salient_label_ignores_unmarked_cells() {
    let spec = TaskSpec::salient_detection();
    let t = ToyTask::generate(small(spec, 4)).unwrap();
    for s in t.eval.iter().take(50) {
        let unmarked: Vec<usize> = (0..s.source.rows())
            .filter(|&i| s.source.at(i, 0) != 1.0)
            .collect();
        let mut rows: Vec<Vec<f64>> = (0..s.source.rows())
            .map(|i| s.source.row(i).to_vec())
            .collect();
        // rotate the unmarked rows among themselves
        let moved: Vec<Vec<f64>> = unmarked.iter().map(|&i| rows[i].clone()).collect();
        for (j, &i) in unmarked.iter().enumerate() {
            rows[i] = moved[(j + 1) % moved.len()].clone();
        }
        let p = Sample {
            source: Tensor::from_rows(&rows).unwrap(),
            queries: None,
            targets: s.targets.clone(),
        };
        assert_eq!(oracle(&spec, &p), s.targets);
        assert_eq!(oracle(&spec, s), s.targets);
    }
}

#[test]
fn untrained_attended_block_matches_its_backbone() {
    for spec in all_specs() {
        let task = ToyTask::generate(small(spec, 5)).unwrap();
        let base = Model::new(ModelConfig::new(Stack::AttendedBlock, None), spec, 9).unwrap();
        for beta in ["1111", "0010", "0001"] {
            let with = Model::new(
                ModelConfig::new(Stack::AttendedBlock, Some(beta.parse().unwrap())),
                spec,
                9,
            )
            .unwrap();
            for s in &task.eval {
                assert_eq!(with.predict(s).unwrap(), base.predict(s).unwrap());
            }
        }
        let a = train(&run(small(spec, 5), Stack::AttendedBlock, None, quick(0)));
        let b = train(&run(
            small(spec, 5),
            Stack::AttendedBlock,
            Some("1010"),
            quick(0),
        ));
        assert_eq!(a.accuracy, b.accuracy);
    }
}

#[test]
fn same_seed_same_record() {
    let cfg = run(
        small(TaskSpec::salient_detection(), 6),
        Stack::TransformerDeformable,
        Some("0010"),
        quick(20),
    );
    let (a, b) = (train(&cfg), train(&cfg));
    assert!(a.ok());
    assert_eq!(a.accuracy.map(f64::to_bits), b.accuracy.map(f64::to_bits));
    assert_eq!(a.macs, b.macs);
    assert_eq!(a.status, b.status);
}

#[test]
fn grid_has_sixteen_records_and_deformable_rows() {
    let task = small(TaskSpec::salient_detection(), 1);
    let configs = beta_grid(&task, Stack::AttendedBlock, &quick(2), 0);
    let records = run_grid(&configs);
    assert_eq!(records.len(), 16);
    let betas: HashSet<String> = records
        .iter()
        .map(|r| r.config.model.beta.unwrap().to_string())
        .collect();
    assert_eq!(betas.len(), 16);
    let deform = deformable_rows(&task, &quick(2), 0);
    assert!(deform
        .iter()
        .any(|r| r.model.stack == Stack::TransformerDeformable
            && r.model.beta == Some("0010".parse().unwrap())));
}

#[test]
fn failures_are_recorded_and_the_grid_continues() {
    let task = small(TaskSpec::windowed_denoise(), 1);
    let bad = run(task.clone(), Stack::Dynamic, Some("1111"), quick(2));
    let mut nan = run(task.clone(), Stack::Transformer, Some("1111"), quick(3));
    nan.optimizer.lr = f64::NAN;
    let good = run(task, Stack::Transformer, Some("0010"), quick(2));
    let records = run_grid(&[bad, nan, good]);
    assert_eq!(records.len(), 3);
    let failed = records
        .iter()
        .filter(|r| matches!(r.status, RunStatus::Failed(_)))
        .count();
    assert_eq!(failed, 2);
    assert!(records.iter().all(|r| r.ok() == r.accuracy.is_some()));
}

#[test]
fn csv_has_fixed_columns() {
    let task = small(TaskSpec::windowed_denoise(), 1);
    let records = run_grid(&[
        run(task.clone(), Stack::Transformer, Some("0010"), quick(1)),
        run(task, Stack::Dynamic, Some("0010"), quick(1)),
    ]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    emit_results(&records, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("task,stack,beta,accuracy,macs,wall_ms,seed")
    );
    assert_eq!(lines.count(), 2);
    assert!(emit_results(&records, &dir.path().join("missing/results.csv")).is_err());
}

#[test]
fn full_configuration_costs_most() {
    for spec in all_specs() {
        let task = ToyTask::generate(small(spec, 1)).unwrap();
        let sample = &task.eval[0];
        let macs = |b: Beta| {
            Model::new(ModelConfig::new(Stack::Transformer, Some(b)), spec, 0)
                .unwrap()
                .forward_macs(sample)
                .unwrap()
        };
        let full = macs(Beta::FULL);
        for b in Beta::all().filter(|&b| b != Beta::FULL) {
            assert!(full > macs(b), "{} {b}", spec.name());
        }
    }
}

#[test]
fn run_config_round_trips_through_json() {
    let cfg = run(
        small(TaskSpec::permuted_copy(), 2),
        Stack::Transformer,
        Some("1000"),
        quick(5),
    );
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    let minimal = r#"{"task":{"spec":{"kind":"salient-detection","extent":6,"channels":8,"classes":4,"marked":3},"seed":1,"n_train":10,"n_eval":10},
        "stack":"attended-block","beta":"0010","heads":2,"region":"full","n_k":null,"n_g":null,"seed":0}"#;
    let parsed: RunConfig = serde_json::from_str(minimal).unwrap();
    assert_eq!(parsed.optimizer, OptimizerConfig::default());
}

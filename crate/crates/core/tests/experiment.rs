use std::fs;
use std::path::{Path, PathBuf};

use fedcsd_core::compare::compare_runs;
use fedcsd_core::config::{ExperimentConfig, Method};
use fedcsd_core::diagnostics::{metrics_csv, parse_metrics_csv};
use fedcsd_core::datagen::ClientShard;
use fedcsd_core::engine::{read_checkpoint, FedAvg, LocalUpdate, RoundContext, RoundState, Strategy};
use fedcsd_core::experiment::{run_experiment, run_experiment_with, simulate};
use fedcsd_core::tensor_nn::Architecture;
use fedcsd_core::Error;

fn small(method: Method, out: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
method = "{}"
output_dir = "{}"

[dataset]
classes = 4
dim = 6
train_per_class = 20
test_per_class = 10

[model]
hidden = [8]

[partition]
clients = 4
beta = 0.5

[schedule]
rounds = 3
local_epochs = 1
batch_size = 16
"#,
        method.name(),
        out.display()
    );
    ExperimentConfig::parse(&text).unwrap()
}

fn read(path: PathBuf) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn zero_epochs_single_round_checkpoint_is_the_init() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(Method::Fedavg, &dir.path().join("run"));
    config.schedule.rounds = 1;
    config.schedule.local_epochs = 0;
    let artifacts = run_experiment(&config, 1).unwrap();
    let model = read_checkpoint(&artifacts.checkpoint_path()).unwrap();
    let arch = Architecture::new(config.layer_dims(), config.model.activation).unwrap();
    let init = arch.init_params(config.schedule.seed);
    assert_eq!(model.params().values(), init.values());
    assert_eq!(artifacts.metrics.len(), 1);
}

#[test]
fn run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(Method::Fedcsd, &dir.path().join("run"));
    let artifacts = run_experiment(&config, 1).unwrap();
    for name in ["config.toml", "metrics.csv", "checkpoint.bin", "manifest.toml"] {
        assert!(artifacts.dir.join(name).is_file(), "{name} missing");
    }
    let rows = parse_metrics_csv(&read(artifacts.metrics_path())).unwrap();
    assert_eq!(rows, parse_metrics_csv(&metrics_csv(&artifacts.metrics)).unwrap());
    assert_eq!(rows.iter().map(|r| r.round).collect::<Vec<_>>(), vec![1, 2, 3]);
    let echoed = ExperimentConfig::parse(&read(artifacts.dir.join("config.toml"))).unwrap();
    assert_eq!(echoed, config);
}

#[test]
fn ablation_grid_produces_distinct_labelled_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for (method, label) in [
        (Method::Fedcsd, "full"),
        (Method::Base, "base"),
        (Method::M1, "m1"),
        (Method::M2, "m2"),
        (Method::M3, "m3"),
    ] {
        let mut config = small(method, &dir.path().join(method.name()));
        config.hyper.mu = Some(0.5);
        config.hyper.tau = Some(2.0);
        let artifacts = run_experiment(&config, 1).unwrap();
        let manifest = read(artifacts.manifest_path());
        assert!(manifest.contains(&format!("variant = \"{label}\"")), "{manifest}");
        csvs.push(read(artifacts.metrics_path()));
    }
    for i in 0..csvs.len() {
        for j in i + 1..csvs.len() {
            assert_ne!(csvs[i], csvs[j], "variants {i} and {j} match");
        }
    }
}

#[test]
fn compare_reports_differences_from_the_first_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_experiment(&small(Method::Fedavg, &dir.path().join("a")), 1).unwrap();
    let mut config = small(Method::Fedprox, &dir.path().join("b"));
    config.hyper.mu = Some(0.1);
    let b = run_experiment(&config, 1).unwrap();

    let runs = compare_runs(&[a.dir.clone(), b.dir.clone()]).unwrap();
    let final_of = |m: &[fedcsd_core::diagnostics::MetricsRecord]| m.last().unwrap().global_acc;
    let best_of = |m: &[fedcsd_core::diagnostics::MetricsRecord]| {
        m.iter().map(|r| r.global_acc).fold(f64::NEG_INFINITY, f64::max)
    };
    assert_eq!(runs[0].variant, "fedavg");
    assert_eq!(runs[1].variant, "fedprox");
    assert_eq!(runs[0].delta_final, 0.0);
    assert!((runs[1].delta_final - (final_of(&b.metrics) - final_of(&a.metrics))).abs() < 1e-12);
    assert!((runs[1].delta_best - (best_of(&b.metrics) - best_of(&a.metrics))).abs() < 1e-12);

    assert!(compare_runs(std::slice::from_ref(&a.dir)).is_err());
    let mut other = small(Method::Fedavg, &dir.path().join("c"));
    other.schedule.rounds = 2;
    let c = run_experiment(&other, 1).unwrap();
    assert!(matches!(compare_runs(&[a.dir, c.dir]), Err(Error::Compare(_))));
}

struct FailsInRound(usize);

impl Strategy for FailsInRound {
    fn name(&self) -> &str {
        "fails"
    }

    fn local_train(
        &self,
        ctx: &RoundContext<'_>,
        state: &RoundState,
        shard: &ClientShard,
    ) -> fedcsd_core::Result<LocalUpdate> {
        if state.round == self.0 && shard.client_id == 1 {
            return Err(Error::InvalidArgument("injected".into()));
        }
        FedAvg.local_train(ctx, state, shard)
    }
}

#[test]
fn failure_keeps_completed_rounds_and_marks_the_run_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(Method::Fedavg, &dir.path().join("run"));
    let err = run_experiment_with(&config, 1, &FailsInRound(2)).unwrap_err();
    assert!(matches!(err, Error::Client { client: 1, .. }), "{err}");

    let run_dir = &config.output_dir;
    let rows = parse_metrics_csv(&read(run_dir.join("metrics.csv"))).unwrap();
    assert_eq!(rows.len(), 2);
    let full = simulate(&config).unwrap();
    assert_eq!(rows, parse_metrics_csv(&metrics_csv(&full.metrics[..2])).unwrap());

    let manifest = read(run_dir.join("manifest.toml"));
    assert!(manifest.contains("status = \"incomplete\""));
    assert!(manifest.contains("rounds_completed = 2"));
    assert!(!run_dir.join("checkpoint.bin").exists());

    let good = run_experiment(&small(Method::Fedavg, &dir.path().join("good")), 1).unwrap();
    assert!(compare_runs(&[good.dir, run_dir.clone()]).is_err());
}

#[test]
fn manifest_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(Method::Fedcsd, &dir.path().join("first"));
    config.partition.seed = 7;
    config.schedule.seed = 11;
    let first = run_experiment(&config, 1).unwrap();

    let mut replay = ExperimentConfig::parse(&read(first.manifest_path())).unwrap();
    assert_eq!(replay, config);
    replay.output_dir = dir.path().join("second");
    let second = run_experiment(&replay, 1).unwrap();
    assert_eq!(read(first.metrics_path()), read(second.metrics_path()));
    assert_eq!(fs::read(first.checkpoint_path()).unwrap(), fs::read(second.checkpoint_path()).unwrap());
}

#[test]
fn out_of_range_values_name_their_line() {
    let bad = ExperimentConfig::parse("method = \"fedavg\"\n[partition]\nclients = 0\n").unwrap_err();
    assert!(bad.is_config());
    assert!(bad.to_string().contains("line 3"), "{bad}");
}

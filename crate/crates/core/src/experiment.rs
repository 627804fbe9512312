//! Builds data, model and method from a config and drives the rounds,
//! writing `metrics.csv`, `checkpoint.bin`, `config.toml` and
//! `manifest.toml` into the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::baselines::{FeatureDistill, FedAvgM, FedGkd, FedNova, FedProto, FedProx, LogitDistill, Moon};
use crate::config::{ExperimentConfig, Method};
use crate::datagen::{
    dirichlet_partition, feature_skew_transforms, iid_assignment, ClientShard, Dataset, FeatureSkewSpec,
    PartitionMode, PartitionSpec, SyntheticTask,
};
use crate::diagnostics::{
    exploratory_run, filter_rate, forcible_filter_rate, metrics_csv, probe_csv, MetricsRecord, ProbeSetup, ShiftProbe,
};
use crate::engine::{run_round, write_checkpoint, CrossEntropyOnly, FedAvg, LocalRun, RoundContext, RoundOutcome, RoundState, Schedule, Strategy};
use crate::error::{Error, Result};
use crate::fedcsd::FedCsd;
use crate::format::sig9;
use crate::rng::CounterRng;
use crate::tensor_nn::{Architecture, MlpModel};

/// Data, model shape and schedule for one configured experiment.
pub struct Setup {
    pub arch: Architecture,
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<ClientShard>,
    pub schedule: Schedule,
    pub rounds: usize,
}

impl Setup {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        let d = &config.dataset;
        let task = SyntheticTask::new(d.classes, d.dim, d.margin, d.seed)?;
        let train = task.sample(d.train_per_class, 0)?;
        let mut test = task.sample(d.test_per_class, 1)?;
        let p = &config.partition;
        let shards = match p.mode {
            PartitionMode::LabelSkew => dirichlet_partition(
                &train,
                &PartitionSpec {
                    num_clients: p.clients,
                    beta: p.beta,
                    seed: p.seed,
                    mode: p.mode,
                },
            )?,
            PartitionMode::FeatureSkew => {
                // Test rows are dealt to clients the same way and carry the
                // same client transform, so test accuracy covers every domain.
                let shards = crate::datagen::feature_skew_partition(&train, p.clients, p.seed)?;
                let transforms = feature_skew_transforms(&train, p.clients, p.seed, FeatureSkewSpec::default())?;
                let mut features = test.features().clone();
                for (rows, t) in iid_assignment(&test, p.clients, p.seed).iter().zip(&transforms) {
                    for &r in rows {
                        t.apply_row(features.row_mut(r));
                    }
                }
                test = Dataset::new(features, test.labels().to_vec(), d.classes)?;
                shards
            }
        };
        Ok(Setup {
            arch: Architecture::new(config.layer_dims(), config.model.activation)?,
            train,
            test,
            shards,
            schedule: config.schedule(),
            rounds: config.schedule.rounds,
        })
    }

    pub fn context(&self) -> RoundContext<'_> {
        RoundContext {
            arch: &self.arch,
            shards: &self.shards,
            test: Some(&self.test),
            schedule: &self.schedule,
        }
    }

    pub fn initial_state(&self) -> RoundState {
        RoundState::initial(self.arch.init_params(self.schedule.seed))
    }
}

pub fn build_strategy(config: &ExperimentConfig) -> Result<Box<dyn Strategy>> {
    let h = &config.hyper;
    let mu = config.mu();
    let tau = config.tau();
    Ok(match config.method {
        Method::Fedavg => Box::new(FedAvg),
        Method::Fedprox => Box::new(FedProx { mu }),
        Method::Fednova => Box::new(FedNova),
        Method::Fedavgm => Box::new(FedAvgM {
            server_lr: h.server_lr.unwrap_or(1.0),
            server_momentum: h.server_momentum.unwrap_or(0.9),
        }),
        Method::Moon => Box::new(Moon {
            mu,
            temperature: h.moon_temperature.unwrap_or(0.5),
        }),
        Method::Fedgkd => Box::new(FedGkd {
            mu,
            tau,
            buffer_len: h.gkd_buffer.unwrap_or(3),
        }),
        Method::Fedproto => Box::new(FedProto { mu }),
        Method::LogitDistill => Box::new(LogitDistill { mu, tau }),
        Method::FeatureDistill => Box::new(FeatureDistill { mu }),
        Method::Fedcsd | Method::Base | Method::M1 | Method::M2 | Method::M3 => Box::new(FedCsd::new(config.csd_hyper())?),
    })
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Err(Error::invalid("workers must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs every round, handing each round's start state and outcome to
/// `observe`. Stops at the first error.
pub fn simulate_with(
    setup: &Setup,
    strategy: &dyn Strategy,
    observe: &mut dyn FnMut(&RoundState, &RoundOutcome) -> Result<()>,
) -> Result<RoundState> {
    let ctx = setup.context();
    let mut state = setup.initial_state();
    for _ in 0..setup.rounds {
        let outcome = run_round(&ctx, &state, strategy)?;
        observe(&state, &outcome)?;
        state = outcome.state;
    }
    Ok(state)
}

pub struct Simulation {
    pub metrics: Vec<MetricsRecord>,
    pub final_state: RoundState,
}

/// Runs a config in memory on the current thread pool.
pub fn simulate(config: &ExperimentConfig) -> Result<Simulation> {
    let setup = Setup::from_config(config)?;
    let strategy = build_strategy(config)?;
    let mut metrics = Vec::new();
    let final_state = simulate_with(&setup, strategy.as_ref(), &mut |_, o| {
        metrics.push(o.metrics.clone());
        Ok(())
    })?;
    Ok(Simulation { metrics, final_state })
}

#[derive(Serialize)]
struct RunInfo {
    version: &'static str,
    status: &'static str,
    variant: &'static str,
    rounds_completed: usize,
    rounds_planned: usize,
    dataset_seed: u64,
    partition_seed: u64,
    schedule_seed: u64,
    /// Seconds since the Unix epoch; not covered by the determinism
    /// guarantee.
    timestamp: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    run: RunInfo,
    config: &'a ExperimentConfig,
}

fn manifest_text(config: &ExperimentConfig, rounds_completed: usize, error: Option<String>) -> String {
    let manifest = Manifest {
        run: RunInfo {
            version: env!("CARGO_PKG_VERSION"),
            status: if error.is_none() { "complete" } else { "incomplete" },
            variant: config.method.variant_label(),
            rounds_completed,
            rounds_planned: config.schedule.rounds,
            dataset_seed: config.dataset.seed,
            partition_seed: config.partition.seed,
            schedule_seed: config.schedule.seed,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            error,
        },
        config,
    };
    toml::to_string(&manifest).expect("manifest is always representable as TOML")
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Paths of a finished run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub metrics: Vec<MetricsRecord>,
}

impl RunArtifacts {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.toml")
    }
}

/// Runs the configured experiment with `workers` threads. On a mid-run
/// failure the metrics gathered so far are still written and the manifest
/// is marked incomplete before the error is returned.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<RunArtifacts> {
    let strategy = build_strategy(config)?;
    run_experiment_with(config, workers, strategy.as_ref())
}

/// As [`run_experiment`] with a caller-supplied strategy in place of the
/// configured method.
pub fn run_experiment_with(config: &ExperimentConfig, workers: usize, strategy: &dyn Strategy) -> Result<RunArtifacts> {
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join("config.toml"), &config.to_toml())?;

    let mut metrics = Vec::new();
    let result = with_workers(workers, || -> Result<RoundState> {
        let setup = Setup::from_config(config)?;
        simulate_with(&setup, strategy, &mut |_, o| {
            metrics.push(o.metrics.clone());
            Ok(())
        })
    })
    .and_then(|r| r);

    write(&dir.join("metrics.csv"), &metrics_csv(&metrics))?;
    match result {
        Ok(state) => {
            let arch = Architecture::new(config.layer_dims(), config.model.activation)?;
            write_checkpoint(&dir.join("checkpoint.bin"), &arch.model(state.global)?)?;
            write(&dir.join("manifest.toml"), &manifest_text(config, metrics.len(), None))?;
            Ok(RunArtifacts { dir, metrics })
        }
        Err(e) => {
            write(&dir.join("manifest.toml"), &manifest_text(config, metrics.len(), Some(e.to_string())))?;
            Err(e)
        }
    }
}

/// Per-round filter rates of the teacher active during the round, under
/// both mask rules, over all clients' training data.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRate {
    pub round: usize,
    pub adaptive: f64,
    pub forcible: f64,
}

pub fn mask_rates(config: &ExperimentConfig) -> Result<Vec<MaskRate>> {
    let setup = Setup::from_config(config)?;
    let strategy = build_strategy(config)?;
    let parts: Vec<&Dataset> = setup.shards.iter().map(|s| &s.dataset).collect();
    let pooled = Dataset::concat(&parts)?;
    let mut rates = Vec::new();
    simulate_with(&setup, strategy.as_ref(), &mut |before, outcome| {
        let teacher = setup.arch.model(before.teacher.clone())?;
        rates.push(MaskRate {
            round: outcome.metrics.round,
            adaptive: filter_rate(&teacher, &pooled)?,
            forcible: forcible_filter_rate(&teacher, &pooled)?,
        });
        Ok(())
    })?;
    Ok(rates)
}

pub fn mask_rates_csv(rates: &[MaskRate]) -> String {
    let mut out = String::from("round,adaptive,forcible\n");
    for r in rates {
        out.push_str(&format!("{},{},{}\n", r.round, sig9(r.adaptive), sig9(r.forcible)));
    }
    out
}

pub fn run_mask_rates(config: &ExperimentConfig, workers: usize) -> Result<PathBuf> {
    let rates = with_workers(workers, || mask_rates(config))??;
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("maskrate.csv");
    write(&path, &mask_rates_csv(&rates))?;
    Ok(path)
}

/// Centralized training on the pooled client data; the starting global
/// model of the local-epoch probe.
pub fn pretrain(setup: &Setup, epochs: usize) -> Result<MlpModel> {
    let parts: Vec<&Dataset> = setup.shards.iter().map(|s| &s.dataset).collect();
    let pooled = Dataset::concat(&parts)?;
    let rng = CounterRng::from_path(setup.schedule.seed, &[u64::MAX]);
    let mut run = LocalRun::new(&setup.arch, setup.arch.init_params(setup.schedule.seed), &setup.schedule, rng)?;
    run.run_epochs(&pooled, &CrossEntropyOnly, epochs)?;
    Ok(run.into_parts().0)
}

/// The local-epoch drift probe for every configured arm.
pub fn explore(config: &ExperimentConfig) -> Result<Vec<ShiftProbe>> {
    let setup = Setup::from_config(config)?;
    let start = pretrain(&setup, config.explore.pretrain_epochs)?;
    let probe = ProbeSetup {
        arch: &setup.arch,
        shards: &setup.shards,
        test: &setup.test,
        schedule: &setup.schedule,
        start: start.params(),
        epochs: config.explore.epochs,
    };
    exploratory_run(&probe, &config.explore.probe_arms())
}

pub fn run_explore(config: &ExperimentConfig, workers: usize) -> Result<PathBuf> {
    let probes = with_workers(workers, || explore(config))??;
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("explore.csv");
    write(&path, &probe_csv(&probes))?;
    Ok(path)
}

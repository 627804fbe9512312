//! Experiment configuration: a sectioned TOML file with every key
//! documented below. Unknown keys are rejected and every error names the
//! line it refers to.
//!
//! ```toml
//! method = "fedcsd"          # closed set, see `Method`
//! output_dir = "runs/fedcsd"
//!
//! [dataset]                  # synthetic Gaussian-mixture task
//! classes = 10
//! dim = 32
//! train_per_class = 200
//! test_per_class = 100
//! margin = 3.0               # norm of each class mean
//! seed = 0
//!
//! [model]
//! hidden = [64]
//! activation = "relu"
//!
//! [partition]
//! clients = 10
//! beta = 0.5                 # Dirichlet concentration (label_skew only)
//! mode = "label_skew"        # or "feature_skew"
//! seed = 0
//!
//! [schedule]
//! rounds = 100
//! local_epochs = 5
//! batch_size = 64
//! lr = 0.1
//! momentum = 0.9
//! weight_decay = 1e-5
//! seed = 0
//!
//! [hyper]                    # every key optional
//! mu = 0.001                 # default depends on the method
//! tau = 10.0
//! alpha = 0.9
//! mask = "adaptive"          # "adaptive", "forcible" or "none"
//! use_similarity = true
//! use_tma = true
//! prototype_mean = "all_clients"   # or "present_only"
//! moon_temperature = 0.5
//! gkd_buffer = 3
//! server_lr = 1.0
//! server_momentum = 0.9
//!
//! [explore]                  # used by the `explore` subcommand
//! epochs = 20
//! pretrain_epochs = 10
//! arms = ["fedavg", "logit_distill", "feature_distill"]
//! logit_mu = 1.0
//! logit_tau = 1.0
//! feature_mu = 1.0
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::PartitionMode;
use crate::diagnostics::ProbeArm;
use crate::engine::{Participation, Schedule};
use crate::error::{Error, Result};
use crate::fedcsd::{Ablation, CsdHyper, MaskKind, PrototypeMean};
use crate::tensor_nn::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedavg,
    Fedprox,
    Fednova,
    Fedavgm,
    Moon,
    Fedgkd,
    Fedproto,
    LogitDistill,
    FeatureDistill,
    Fedcsd,
    Base,
    M1,
    M2,
    M3,
}

impl Method {
    pub const ALL: [Method; 14] = [
        Method::Fedavg,
        Method::Fedprox,
        Method::Fednova,
        Method::Fedavgm,
        Method::Moon,
        Method::Fedgkd,
        Method::Fedproto,
        Method::LogitDistill,
        Method::FeatureDistill,
        Method::Fedcsd,
        Method::Base,
        Method::M1,
        Method::M2,
        Method::M3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fedavg => "fedavg",
            Method::Fedprox => "fedprox",
            Method::Fednova => "fednova",
            Method::Fedavgm => "fedavgm",
            Method::Moon => "moon",
            Method::Fedgkd => "fedgkd",
            Method::Fedproto => "fedproto",
            Method::LogitDistill => "logit_distill",
            Method::FeatureDistill => "feature_distill",
            Method::Fedcsd => "fedcsd",
            Method::Base => "base",
            Method::M1 => "m1",
            Method::M2 => "m2",
            Method::M3 => "m3",
        }
    }

    /// The distillation ablation this method runs, if it is one.
    pub fn ablation(self) -> Option<Ablation> {
        match self {
            Method::Fedcsd => Some(Ablation::Full),
            Method::Base => Some(Ablation::Base),
            Method::M1 => Some(Ablation::M1),
            Method::M2 => Some(Ablation::M2),
            Method::M3 => Some(Ablation::M3),
            _ => None,
        }
    }

    /// Label written to the run manifest; `fedcsd` is the full variant.
    pub fn variant_label(self) -> &'static str {
        self.ablation().map_or(self.name(), Ablation::label)
    }

    pub fn default_mu(self) -> f64 {
        match self {
            Method::Fedprox => 0.001,
            Method::Moon => 1.0,
            Method::Fedgkd => 0.01,
            Method::Fedproto => 1.0,
            Method::LogitDistill => 0.001,
            Method::FeatureDistill => 0.01,
            Method::Fedcsd | Method::Base | Method::M1 | Method::M2 | Method::M3 => 0.001,
            Method::Fedavg | Method::Fednova | Method::Fedavgm => 0.0,
        }
    }

    fn uses_mu(self) -> bool {
        !matches!(self, Method::Fedavg | Method::Fednova | Method::Fedavgm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub margin: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 10,
            dim: 32,
            train_per_class: 200,
            test_per_class: 100,
            margin: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub clients: usize,
    pub beta: f64,
    pub mode: PartitionMode,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            clients: 10,
            beta: 0.5,
            mode: PartitionMode::LabelSkew,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let s = Schedule::default();
        ScheduleConfig {
            rounds: 100,
            local_epochs: s.local_epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_similarity: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_tma: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prototype_mean: Option<PrototypeMean>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moon_temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gkd_buffer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub server_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub server_momentum: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmName {
    Fedavg,
    LogitDistill,
    FeatureDistill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExploreConfig {
    pub epochs: usize,
    /// Centralized epochs on the pooled training data that produce the
    /// starting global model.
    pub pretrain_epochs: usize,
    pub arms: Vec<ArmName>,
    pub logit_mu: f64,
    pub logit_tau: f64,
    pub feature_mu: f64,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            epochs: 20,
            pretrain_epochs: 10,
            arms: vec![ArmName::Fedavg, ArmName::LogitDistill, ArmName::FeatureDistill],
            logit_mu: 1.0,
            logit_tau: 1.0,
            feature_mu: 1.0,
        }
    }
}

impl ExploreConfig {
    pub fn probe_arms(&self) -> Vec<ProbeArm> {
        self.arms
            .iter()
            .map(|a| match a {
                ArmName::Fedavg => ProbeArm::FedAvg,
                ArmName::LogitDistill => ProbeArm::LogitDistill {
                    mu: self.logit_mu,
                    tau: self.logit_tau,
                },
                ArmName::FeatureDistill => ProbeArm::FeatureDistill { mu: self.feature_mu },
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub hyper: HyperConfig,
    #[serde(default)]
    pub explore: ExploreConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/out")
}

/// A run manifest embeds the config under `[config]`; accepting it lets a
/// run directory be replayed directly.
#[derive(Deserialize)]
struct ManifestView {
    config: toml::Value,
}

struct Violation {
    section: Option<&'static str>,
    key: &'static str,
    message: String,
}

fn violation(section: Option<&'static str>, key: &'static str, message: impl Into<String>) -> Violation {
    Violation {
        section,
        key,
        message: message.into(),
    }
}

/// 1-based line of `key` inside `[section]` (or at top level), if written.
fn locate(text: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            let name = line.trim_start_matches('[').split(']').next().unwrap_or("").trim();
            let name = name.strip_prefix("config.").unwrap_or(name);
            current = if name == "config" { None } else { Some(name.to_string()) };
            continue;
        }
        if current.as_deref() != section {
            continue;
        }
        if let Some((k, _)) = line.split_once('=') {
            if k.trim() == key {
                return Some(i + 1);
            }
        }
    }
    None
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

impl ExperimentConfig {
    /// Parses and validates a config (or a run manifest). Errors read
    /// `line N: ...`.
    pub fn parse(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| de_error(text, &e))?;
        let config: ExperimentConfig = match value.get("config") {
            Some(_) if value.get("method").is_none() => {
                let view: ManifestView = toml::from_str(text).map_err(|e| de_error(text, &e))?;
                view.config.try_into().map_err(|e: toml::de::Error| Error::Config(format!("manifest config: {}", e.message())))?
            }
            _ => toml::from_str(text).map_err(|e| de_error(text, &e))?,
        };
        if let Err(v) = config.check() {
            let key = match v.section {
                Some(s) => format!("{s}.{}", v.key),
                None => v.key.to_string(),
            };
            let at = locate(text, v.section, v.key)
                .or_else(|| v.section.and_then(|s| text.lines().position(|l| l.trim() == format!("[{s}]")).map(|i| i + 1)));
            return Err(Error::Config(match at {
                Some(line) => format!("line {line}: {key}: {}", v.message),
                None => format!("line 1: {key}: {} (default value)", v.message),
            }));
        }
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    fn check(&self) -> std::result::Result<(), Violation> {
        let d = &self.dataset;
        let ds = Some("dataset");
        if d.classes < 2 {
            return Err(violation(ds, "classes", "need at least 2 classes"));
        }
        if d.dim == 0 {
            return Err(violation(ds, "dim", "must be positive"));
        }
        if d.train_per_class == 0 {
            return Err(violation(ds, "train_per_class", "must be positive"));
        }
        if d.test_per_class == 0 {
            return Err(violation(ds, "test_per_class", "must be positive"));
        }
        if !(d.margin >= 0.0 && d.margin.is_finite()) {
            return Err(violation(ds, "margin", "must be finite and >= 0"));
        }
        if self.model.hidden.contains(&0) {
            return Err(violation(Some("model"), "hidden", "layer widths must be positive"));
        }
        if self.model.hidden.len() > 16 {
            return Err(violation(Some("model"), "hidden", "at most 16 hidden layers"));
        }

        let p = &self.partition;
        let ps = Some("partition");
        if p.clients == 0 {
            return Err(violation(ps, "clients", "must be positive"));
        }
        if p.clients > d.classes * d.train_per_class {
            return Err(violation(ps, "clients", "more clients than training samples"));
        }
        if !(p.beta > 0.0 && p.beta.is_finite()) {
            return Err(violation(ps, "beta", "must be finite and > 0"));
        }
        if p.mode == PartitionMode::FeatureSkew {
            if p.clients < 2 {
                return Err(violation(ps, "clients", "feature skew needs at least 2 clients"));
            }
            if p.clients > 2 * d.dim {
                return Err(violation(ps, "clients", "feature skew supports at most 2 * dataset.dim clients"));
            }
        }

        let s = &self.schedule;
        let ss = Some("schedule");
        if s.rounds == 0 {
            return Err(violation(ss, "rounds", "must be positive"));
        }
        if s.batch_size == 0 {
            return Err(violation(ss, "batch_size", "must be positive"));
        }
        if !(s.lr >= 0.0 && s.lr.is_finite()) {
            return Err(violation(ss, "lr", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&s.momentum) {
            return Err(violation(ss, "momentum", "must lie in [0, 1)"));
        }
        if !(s.weight_decay >= 0.0 && s.weight_decay.is_finite()) {
            return Err(violation(ss, "weight_decay", "must be finite and >= 0"));
        }

        let h = &self.hyper;
        let hs = Some("hyper");
        if let Some(mu) = h.mu {
            if !self.method.uses_mu() {
                return Err(violation(hs, "mu", format!("not used by method {}", self.method)));
            }
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(violation(hs, "mu", "must be finite and >= 0"));
            }
        }
        if h.tau.is_some_and(|t| !(t > 0.0 && t.is_finite())) {
            return Err(violation(hs, "tau", "must be finite and > 0"));
        }
        if h.alpha.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
            return Err(violation(hs, "alpha", "must lie in [0, 1]"));
        }
        if h.moon_temperature.is_some_and(|t| !(t > 0.0 && t.is_finite())) {
            return Err(violation(hs, "moon_temperature", "must be finite and > 0"));
        }
        if h.gkd_buffer == Some(0) {
            return Err(violation(hs, "gkd_buffer", "must be positive"));
        }
        if h.server_lr.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
            return Err(violation(hs, "server_lr", "must be finite and > 0"));
        }
        if h.server_momentum.is_some_and(|m| !(0.0..1.0).contains(&m)) {
            return Err(violation(hs, "server_momentum", "must lie in [0, 1)"));
        }
        if let Some(ablation) = self.method.ablation().filter(|a| *a != Ablation::Full) {
            let fixed = ablation.apply(CsdHyper::default());
            if h.use_similarity.is_some_and(|v| v != fixed.use_similarity) {
                return Err(violation(hs, "use_similarity", format!("conflicts with method {}", self.method)));
            }
            if h.use_tma.is_some_and(|v| v != fixed.use_tma) {
                return Err(violation(hs, "use_tma", format!("conflicts with method {}", self.method)));
            }
            if h.mask.is_some_and(|m| (m == MaskKind::None) != (fixed.mask == MaskKind::None)) {
                return Err(violation(hs, "mask", format!("conflicts with method {}", self.method)));
            }
        }

        let e = &self.explore;
        let es = Some("explore");
        if e.arms.is_empty() {
            return Err(violation(es, "arms", "need at least one arm"));
        }
        for (key, v) in [("logit_mu", e.logit_mu), ("feature_mu", e.feature_mu)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(violation(es, key, "must be finite and >= 0"));
            }
        }
        if !(e.logit_tau > 0.0 && e.logit_tau.is_finite()) {
            return Err(violation(es, "logit_tau", "must be finite and > 0"));
        }
        Ok(())
    }

    pub fn mu(&self) -> f64 {
        self.hyper.mu.unwrap_or_else(|| self.method.default_mu())
    }

    pub fn tau(&self) -> f64 {
        self.hyper.tau.unwrap_or(10.0)
    }

    /// Distillation hyperparameters with the method's toggles applied. The
    /// mask kind may still be chosen for variants that keep a mask.
    pub fn csd_hyper(&self) -> CsdHyper {
        let h = &self.hyper;
        let defaults = CsdHyper::default();
        let mut hyper = CsdHyper {
            mu: self.mu(),
            tau: self.tau(),
            alpha: h.alpha.unwrap_or(defaults.alpha),
            mask: h.mask.unwrap_or(defaults.mask),
            use_similarity: h.use_similarity.unwrap_or(defaults.use_similarity),
            use_tma: h.use_tma.unwrap_or(defaults.use_tma),
            prototype_mean: h.prototype_mean.unwrap_or_default(),
        };
        if let Some(ablation) = self.method.ablation().filter(|a| *a != Ablation::Full) {
            let chosen = hyper.mask;
            hyper = ablation.apply(hyper);
            if hyper.mask != MaskKind::None {
                hyper.mask = chosen;
            }
        }
        hyper
    }

    pub fn schedule(&self) -> Schedule {
        let s = &self.schedule;
        Schedule {
            local_epochs: s.local_epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            seed: s.seed,
            participation: Participation::All,
        }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.dataset.dim];
        dims.extend(&self.model.hidden);
        dims.push(self.dataset.classes);
        dims
    }
}

fn de_error(text: &str, e: &toml::de::Error) -> Error {
    let line = e.span().map_or(1, |s| line_of_offset(text, s.start));
    Error::Config(format!("line {line}: {}", e.message().trim()))
}

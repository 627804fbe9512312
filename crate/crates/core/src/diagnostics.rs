//! Drift measurements: logit and feature distance to a reference model,
//! accuracy, the soft-label filter rate, per-round metric records and the
//! single-round local-epoch probe.

use rayon::prelude::*;

use crate::baselines::{FeatureDistillObjective, LogitDistillObjective};
use crate::datagen::{ClientShard, Dataset};
use crate::engine::{
    client_rng, fedavg_aggregate, CrossEntropyOnly, LocalObjective, LocalRun, LocalUpdate, RoundContext,
    RoundState, Schedule,
};
use crate::error::{Error, Result};
use crate::fedcsd::{adaptive_mask, forcible_mask};
use crate::format::sig9;
use crate::tensor_nn::{argmax, forward, kl_divergence, softmax_unchecked, Architecture, MlpModel, ParamVector};

/// Scalars recorded once per communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// Number of completed rounds (1-based).
    pub round: usize,
    pub global_acc: f64,
    pub local_acc: f64,
    pub logit_kl: f64,
    pub feat_l2: f64,
    pub filter_rate: f64,
}

pub const METRICS_HEADER: &str = "round,global_acc,local_acc,logit_kl,feat_l2,filter_rate";

/// Mean over samples of `KL(softmax(z_a) || softmax(z_b))`, temperature 1.
pub fn logit_distance(model_a: &MlpModel, model_b: &MlpModel, data: &Dataset) -> Result<f64> {
    let za = model_a.logits(data.features())?;
    let zb = model_b.logits(data.features())?;
    if za.cols() != zb.cols() {
        return Err(Error::shape("models disagree on the number of classes"));
    }
    let total: f64 = za
        .iter_rows()
        .zip(zb.iter_rows())
        .map(|(a, b)| kl_divergence(&softmax_unchecked(a, 1.0), &softmax_unchecked(b, 1.0)).max(0.0))
        .sum();
    Ok(total / data.len() as f64)
}

/// Mean Euclidean distance between the two models' latent features.
pub fn feature_distance(model_a: &MlpModel, model_b: &MlpModel, data: &Dataset) -> Result<f64> {
    let ta = forward(model_a, data.features())?;
    let tb = forward(model_b, data.features())?;
    let (ha, hb) = (ta.latent(), tb.latent());
    if ha.cols() != hb.cols() {
        return Err(Error::shape("models disagree on latent width"));
    }
    let total: f64 = ha
        .iter_rows()
        .zip(hb.iter_rows())
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .sum();
    Ok(total / data.len() as f64)
}

/// Fraction of samples whose arg-max logit (ties to the lowest index)
/// equals the label.
pub fn accuracy(model: &MlpModel, data: &Dataset) -> Result<f64> {
    let logits = model.logits(data.features())?;
    let correct = logits
        .iter_rows()
        .zip(data.labels())
        .filter(|(z, &y)| argmax(z) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Number of samples the adaptive mask drops, out of the total.
pub fn masked_count(teacher: &MlpModel, data: &Dataset) -> Result<(usize, usize)> {
    let logits = teacher.logits(data.features())?;
    let mut dropped = 0;
    for (z, &y) in logits.iter_rows().zip(data.labels()) {
        if !adaptive_mask(z, y)? {
            dropped += 1;
        }
    }
    Ok((dropped, data.len()))
}

/// Fraction of samples whose adaptive mask bit is 0.
pub fn filter_rate(teacher: &MlpModel, data: &Dataset) -> Result<f64> {
    let (dropped, total) = masked_count(teacher, data)?;
    Ok(dropped as f64 / total as f64)
}

/// Fraction of samples the arg-max rule would drop.
pub fn forcible_filter_rate(teacher: &MlpModel, data: &Dataset) -> Result<f64> {
    let logits = teacher.logits(data.features())?;
    let mut dropped = 0;
    for (z, &y) in logits.iter_rows().zip(data.labels()) {
        if !forcible_mask(z, y)? {
            dropped += 1;
        }
    }
    Ok(dropped as f64 / data.len() as f64)
}

struct ClientMetrics {
    local_acc: f64,
    logit_kl: f64,
    feat_l2: f64,
}

/// Metrics for a finished round. Distances compare each local model with
/// the round-start global model, `KL(local || global)`, on the client's own
/// shard; the filter rate uses the teacher that was active during the round.
pub(crate) fn round_metrics(
    ctx: &RoundContext<'_>,
    working: &RoundState,
    participants: &[&ClientShard],
    updates: &[LocalUpdate],
    next: &RoundState,
) -> Result<MetricsRecord> {
    let start = ctx.arch.model(working.global.clone())?;
    let teacher = ctx.arch.model(working.teacher.clone())?;
    let per_client: Vec<(ClientMetrics, (usize, usize))> = participants
        .par_iter()
        .zip(updates.par_iter())
        .map(|(shard, update)| {
            let local = ctx.arch.model(update.params.clone())?;
            let data = &shard.dataset;
            Ok((
                ClientMetrics {
                    local_acc: accuracy(&local, data)?,
                    logit_kl: logit_distance(&local, &start, data)?,
                    feat_l2: feature_distance(&local, &start, data)?,
                },
                masked_count(&teacher, data)?,
            ))
        })
        .collect::<Result<_>>()?;

    let global = ctx.arch.model(next.global.clone())?;
    let global_acc = match ctx.test {
        Some(test) => accuracy(&global, test)?,
        None => {
            let parts: Vec<&Dataset> = ctx.shards.iter().map(|s| &s.dataset).collect();
            accuracy(&global, &Dataset::concat(&parts)?)?
        }
    };
    let n = per_client.len() as f64;
    let (dropped, total) = per_client
        .iter()
        .fold((0, 0), |(d, t), (_, (dd, tt))| (d + dd, t + tt));
    Ok(MetricsRecord {
        round: working.round + 1,
        global_acc,
        local_acc: per_client.iter().map(|(m, _)| m.local_acc).sum::<f64>() / n,
        logit_kl: per_client.iter().map(|(m, _)| m.logit_kl).sum::<f64>() / n,
        feat_l2: per_client.iter().map(|(m, _)| m.feat_l2).sum::<f64>() / n,
        filter_rate: dropped as f64 / total.max(1) as f64,
    })
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.round,
            sig9(self.global_acc),
            sig9(self.local_acc),
            sig9(self.logit_kl),
            sig9(self.feat_l2),
            sig9(self.filter_rate)
        )
    }
}

/// `metrics.csv` contents: header plus one row per record.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Parses `metrics.csv`, checking the header, value ranges and that round
/// numbers strictly increase.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end_matches('\r') == METRICS_HEADER => {}
        _ => return Err(Error::Decode("line 1: missing metrics header".into())),
    }
    let mut records: Vec<MetricsRecord> = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Decode(format!("line {lineno}: expected 6 fields, found {}", fields.len())));
        }
        let round: usize = fields[0]
            .parse()
            .map_err(|_| Error::Decode(format!("line {lineno}: bad round {:?}", fields[0])))?;
        let mut vals = [0.0; 5];
        for (v, f) in vals.iter_mut().zip(&fields[1..]) {
            *v = f
                .parse()
                .ok()
                .filter(|x: &f64| x.is_finite())
                .ok_or_else(|| Error::Decode(format!("line {lineno}: bad number {f:?}")))?;
        }
        let [global_acc, local_acc, logit_kl, feat_l2, filter_rate] = vals;
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(global_acc) || !unit(local_acc) || !unit(filter_rate) || logit_kl < 0.0 || feat_l2 < 0.0 {
            return Err(Error::Decode(format!("line {lineno}: value out of range")));
        }
        if records.last().is_some_and(|r| r.round >= round) {
            return Err(Error::Decode(format!("line {lineno}: round numbers must increase")));
        }
        records.push(MetricsRecord {
            round,
            global_acc,
            local_acc,
            logit_kl,
            feat_l2,
            filter_rate,
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Local-epoch probe

/// Local objective used by one arm of the probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeArm {
    FedAvg,
    LogitDistill { mu: f64, tau: f64 },
    FeatureDistill { mu: f64 },
}

impl ProbeArm {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeArm::FedAvg => "fedavg",
            ProbeArm::LogitDistill { .. } => "logit_distill",
            ProbeArm::FeatureDistill { .. } => "feature_distill",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochProbe {
    pub epoch: usize,
    /// Client mean of `KL(local || start)` on the client's own shard.
    pub logit_kl: f64,
    pub feat_l2: f64,
    /// Test accuracy of the average of the current local models.
    pub global_acc: f64,
    /// Client mean of local-model test accuracy.
    pub local_acc: f64,
}

/// Distance series for one arm; entry 0 is the untrained starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftProbe {
    pub arm: ProbeArm,
    pub series: Vec<EpochProbe>,
}

impl ShiftProbe {
    pub fn final_probe(&self) -> &EpochProbe {
        self.series.last().expect("series holds the starting point")
    }
}

pub struct ProbeSetup<'a> {
    pub arch: &'a Architecture,
    pub shards: &'a [ClientShard],
    pub test: &'a Dataset,
    pub schedule: &'a Schedule,
    /// Global model every client starts from.
    pub start: &'a ParamVector,
    pub epochs: usize,
}

fn probe_point(setup: &ProbeSetup<'_>, start: &MlpModel, runs: &[LocalRun], epoch: usize) -> Result<EpochProbe> {
    let per_client: Vec<(f64, f64, f64)> = runs
        .par_iter()
        .zip(setup.shards.par_iter())
        .map(|(run, shard)| {
            Ok((
                logit_distance(run.model(), start, &shard.dataset)?,
                feature_distance(run.model(), start, &shard.dataset)?,
                accuracy(run.model(), setup.test)?,
            ))
        })
        .collect::<Result<_>>()?;
    let updates: Vec<LocalUpdate> = runs
        .iter()
        .zip(setup.shards)
        .map(|(run, shard)| LocalUpdate::new(shard.client_id, run.model().params().clone(), shard.len(), run.steps()))
        .collect();
    let averaged = setup.arch.model(fedavg_aggregate(&updates)?)?;
    let n = per_client.len() as f64;
    Ok(EpochProbe {
        epoch,
        logit_kl: per_client.iter().map(|p| p.0).sum::<f64>() / n,
        feat_l2: per_client.iter().map(|p| p.1).sum::<f64>() / n,
        global_acc: accuracy(&averaged, setup.test)?,
        local_acc: per_client.iter().map(|p| p.2).sum::<f64>() / n,
    })
}

/// One round of `epochs` local epochs from a shared starting model, probing
/// drift after every epoch. Each arm uses identical client random streams.
pub fn probe_arm(setup: &ProbeSetup<'_>, arm: ProbeArm) -> Result<ShiftProbe> {
    let start = setup.arch.model(setup.start.clone())?;
    let mut runs: Vec<LocalRun> = setup
        .shards
        .iter()
        .map(|s| LocalRun::new(setup.arch, setup.start.clone(), setup.schedule, client_rng(setup.schedule.seed, 0, s.client_id)))
        .collect::<Result<_>>()?;
    let mut series = vec![probe_point(setup, &start, &runs, 0)?];
    for epoch in 1..=setup.epochs {
        runs.par_iter_mut()
            .zip(setup.shards.par_iter())
            .try_for_each(|(run, shard)| {
                let objective: Box<dyn LocalObjective + Sync> = match arm {
                    ProbeArm::FedAvg => Box::new(CrossEntropyOnly),
                    ProbeArm::LogitDistill { mu, tau } => Box::new(LogitDistillObjective { teacher: &start, mu, tau }),
                    ProbeArm::FeatureDistill { mu } => Box::new(FeatureDistillObjective { teacher: &start, mu }),
                };
                run.run_epoch(&shard.dataset, objective.as_ref())
            })?;
        series.push(probe_point(setup, &start, &runs, epoch)?);
    }
    Ok(ShiftProbe { arm, series })
}

pub fn exploratory_run(setup: &ProbeSetup<'_>, arms: &[ProbeArm]) -> Result<Vec<ShiftProbe>> {
    if arms.is_empty() {
        return Err(Error::invalid("no probe arms given"));
    }
    arms.iter().map(|&arm| probe_arm(setup, arm)).collect()
}

pub const PROBE_HEADER: &str = "arm,epoch,logit_kl,feat_l2,global_acc,local_acc";

pub fn probe_csv(probes: &[ShiftProbe]) -> String {
    let mut out = String::from(PROBE_HEADER);
    out.push('\n');
    for p in probes {
        for e in &p.series {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.arm.name(),
                e.epoch,
                sig9(e.logit_kl),
                sig9(e.feat_l2),
                sig9(e.global_acc),
                sig9(e.local_acc)
            ));
        }
    }
    out
}

/// `label,h_0,...` rows of a model's latent features, for external
/// embedding plots.
pub fn feature_dump_csv(model: &MlpModel, data: &Dataset) -> Result<String> {
    let trace = forward(model, data.features())?;
    let h = trace.latent();
    let mut out = String::from("label");
    for i in 0..h.cols() {
        out.push_str(&format!(",h_{i}"));
    }
    out.push('\n');
    for (row, y) in h.iter_rows().zip(data.labels()) {
        out.push_str(&y.to_string());
        for v in row {
            out.push(',');
            out.push_str(&sig9(*v));
        }
        out.push('\n');
    }
    Ok(out)
}

//! Comparison methods. Each pairs a local objective (cross-entropy plus an
//! auxiliary term weighted by `mu`) with a server rule.

use rayon::prelude::*;

use crate::datagen::{ClientShard, Dataset};
use crate::engine::{
    advance, fedavg_aggregate, fedavgm_aggregate, fednova_aggregate, train_with_objective, AuxTerms,
    Batch, CrossEntropyOnly, LocalObjective, LocalUpdate, RoundContext, RoundState, Strategy,
};
use crate::error::{Error, Result};
use crate::fedcsd::cosine;
use crate::tensor_nn::{forward, soft_cross_entropy, ForwardTrace, Matrix, MlpModel, ParamVector};

fn check_mu(mu: f64) -> Result<()> {
    if mu >= 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("auxiliary weight must be finite and >= 0, got {mu}")))
    }
}

// ---------------------------------------------------------------------------
// FedProx

/// `CE + (mu / 2) * ||w - w_global||^2`.
pub struct ProximalObjective<'a> {
    pub anchor: &'a ParamVector,
    pub mu: f64,
}

impl LocalObjective for ProximalObjective<'_> {
    fn aux_terms(&self, params: &ParamVector, _: &ForwardTrace, _: &Batch<'_>) -> Result<AuxTerms> {
        let diff = params.sub(self.anchor)?;
        let loss = 0.5 * self.mu * diff.squared_norm();
        let mut grad = diff;
        grad.values_mut().iter_mut().for_each(|g| *g *= self.mu);
        Ok(AuxTerms {
            loss,
            grad_params: Some(grad),
            ..AuxTerms::default()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedProx {
    pub mu: f64,
}

impl Strategy for FedProx {
    fn name(&self) -> &str {
        "fedprox"
    }

    fn local_train(&self, ctx: &RoundContext<'_>, state: &RoundState, shard: &ClientShard) -> Result<LocalUpdate> {
        fedprox_local(ctx, state, shard, self.mu)
    }
}

pub fn fedprox_local(ctx: &RoundContext<'_>, state: &RoundState, shard: &ClientShard, mu: f64) -> Result<LocalUpdate> {
    check_mu(mu)?;
    let objective = ProximalObjective {
        anchor: &state.global,
        mu,
    };
    train_with_objective(ctx, state, shard, &objective)
}

// ---------------------------------------------------------------------------
// MOON

/// Model-contrastive term on latent features, per sample
/// `-log(e^{cos(h, h_g)/t} / (e^{cos(h, h_g)/t} + e^{cos(h, h_prev)/t}))`,
/// averaged over the batch and weighted by `mu`. No projection head.
pub struct ContrastiveObjective<'a> {
    pub global: &'a MlpModel,
    pub previous: &'a MlpModel,
    pub mu: f64,
    pub temperature: f64,
}

/// Gradient of `cos(h, g)` with respect to `h`; zero for zero-norm inputs.
fn cosine_grad(h: &[f64], g: &[f64]) -> Vec<f64> {
    let nh = h.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ng = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nh == 0.0 || ng == 0.0 {
        return vec![0.0; h.len()];
    }
    let cos = cosine(h, g);
    h.iter()
        .zip(g)
        .map(|(hi, gi)| gi / (nh * ng) - cos * hi / (nh * nh))
        .collect()
}

/// Per-sample contrastive loss and its gradient on `h`.
pub fn contrastive_term(h: &[f64], positive: &[f64], negative: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    let s_pos = cosine(h, positive);
    let s_neg = cosine(h, negative);
    let x = (s_neg - s_pos) / temperature;
    // softplus(x) = -log(sigmoid(-x)), computed stably
    let loss = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    let weight = 1.0 / (1.0 + (-x).exp()) / temperature;
    let gp = cosine_grad(h, positive);
    let gn = cosine_grad(h, negative);
    let grad = gp.iter().zip(&gn).map(|(p, n)| weight * (n - p)).collect();
    (loss, grad)
}

impl LocalObjective for ContrastiveObjective<'_> {
    fn aux_terms(&self, _: &ParamVector, trace: &ForwardTrace, batch: &Batch<'_>) -> Result<AuxTerms> {
        let h_global = forward(self.global, batch.features)?;
        let h_prev = forward(self.previous, batch.features)?;
        let latent = trace.latent();
        let b = latent.rows().max(1) as f64;
        let mut grad = Matrix::zeros(latent.rows(), latent.cols());
        let mut loss = 0.0;
        for r in 0..latent.rows() {
            let (l, g) = contrastive_term(
                latent.row(r),
                h_global.latent().row(r),
                h_prev.latent().row(r),
                self.temperature,
            );
            loss += l;
            for (out, gi) in grad.row_mut(r).iter_mut().zip(g) {
                *out = self.mu * gi / b;
            }
        }
        Ok(AuxTerms {
            loss: self.mu * loss / b,
            grad_latent: Some(grad),
            ..AuxTerms::default()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moon {
    pub mu: f64,
    pub temperature: f64,
}

pub fn moon_local(
    ctx: &RoundContext<'_>,
    state: &RoundState,
    shard: &ClientShard,
    mu: f64,
    temperature: f64,
) -> Result<LocalUpdate> {
    check_mu(mu)?;
    if !(temperature > 0.0) {
        return Err(Error::invalid("contrastive temperature must be positive"));
    }
    let global = ctx.arch.model(state.global.clone())?;
    // Before a client's first round its previous model is the global model.
    let previous = match state.previous_local(shard.client_id) {
        Some(p) => ctx.arch.model(p.clone())?,
        None => global.clone(),
    };
    let objective = ContrastiveObjective {
        global: &global,
        previous: &previous,
        mu,
        temperature,
    };
    train_with_objective(ctx, state, shard, &objective)
}

impl Strategy for Moon {
    fn name(&self) -> &str {
        "moon"
    }

    fn local_train(&self, ctx: &RoundContext<'_>, state: &RoundState, shard: &ClientShard) -> Result<LocalUpdate> {
        moon_local(ctx, state, shard, self.mu, self.temperature)
    }

    fn server_update(&self, _ctx: &RoundContext<'_>, state: &RoundState, updates: &[LocalUpdate]) -> Result<RoundState> {
        let mut next = advance(state, fedavg_aggregate(updates)?);
        for u in updates {
            if next.previous_locals.len() <= u.client_id {
                next.previous_locals.resize(u.client_id + 1, None);
            }
            next.previous_locals[u.client_id] = Some(u.params.clone());
        }
        Ok(next)
    }
}

// ---------------------------------------------------------------------------
// Logit distillation (FedGKD and the plain global-teacher distiller)

/// `CE + mu * tau^2 * CE(softmax(z_teacher / tau), softmax(z / tau))`.
pub struct LogitDistillObjective<'a> {
    pub teacher: &'a MlpModel,
    pub mu: f64,
    pub tau: f64,
}

impl LocalObjective for LogitDistillObjective<'_> {
    fn aux_terms(&self, _: &ParamVector, trace: &ForwardTrace, batch: &Batch<'_>) -> Result<AuxTerms> {
        let teacher_logits = self.teacher.logits(batch.features)?;
        let (loss, mut grad) = soft_cross_entropy(trace.logits(), &teacher_logits, self.tau, None)?;
        grad.data_mut().iter_mut().for_each(|g| *g *= self.mu);
        Ok(AuxTerms {
            loss: self.mu * loss,
            grad_logits: Some(grad),
            ..AuxTerms::default()
        })
    }
}

/// Distillation from the frozen round-start global model.
pub fn logit_distill_local(
    ctx: &RoundContext<'_>,
    state: &RoundState,
    shard: &ClientShard,
    mu: f64,
    tau: f64,
) -> Result<LocalUpdate> {
    check_mu(mu)?;
    let teacher = ctx.arch.model(state.global.clone())?;
    let objective = LogitDistillObjective {
        teacher: &teacher,
        mu,
        tau,
    };
    train_with_objective(ctx, state, shard, &objective)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitDistill {
    pub mu: f64,
    pub tau: f64,
}

impl Strategy for LogitDistill {
    fn name(&self) -> &str {
        "logit_distill"
    }

    fn local_train(&self, ctx: &RoundContext<'_>, state: &RoundState, shard: &ClientShard) -> Result<LocalUpdate> {
        logit_distill_local(ctx, state, shard, self.mu, self.tau)
    }
}

/// Parameter average of the buffered global models; the current global
/// when the buffer is empty.
pub fn buffer_teacher(state: &RoundState) -> Result<ParamVector> {
    if state.global_history.is_empty() {
        return Ok(state.global.clone());
    }
    let n = state.global_history.len() as f64;
    let mut avg = state.global.zeros_like();
    for p in &state.global_history {
        avg.axpy(1.0 / n, p)?;
    }
    Ok(avg)
}

/// Distillation from an ensemble (parameter average) of recent global models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedGkd {
    pub mu: f64,
    pub tau: f64,
    pub buffer_len: usize,
}

pub fn fedgkd_local(ctx: &RoundContext<'_>, state: &RoundState, shard: &ClientShard, mu: f64, tau: f64) -> Result<LocalUpdate> {
    check_mu(mu)?;
    let teacher = ctx.arch.model(state.teacher.clone())?;
    let objective = LogitDistillObjective {
        teacher: &teacher,
        mu,
        tau,
    };
    train_with_objective(ctx, state, shard, &objective)
}

impl Strategy for FedGkd {
    fn name(&self) -> &str {
        "fedgkd"
    }

    fn prepare_round(&self, _ctx: &RoundContext<'_>, state: &mut RoundState) -> Result<()> {
        state.teacher = buffer_teacher(state)?;
        Ok(())
    }

    fn local_train(&self, ctx: &RoundContext<'_>, state: &RoundState, shard: &ClientShard) -> Result<LocalUpdate> {
        fedgkd_local(ctx, state, shard, self.mu, self.tau)
    }

    fn server_update(&self, _ctx: &RoundContext<'_>, state: &RoundState, updates: &[LocalUpdate]) -> Result<RoundState> {
        if self.buffer_len == 0 {
            return Err(Error::invalid("teacher buffer length must be at least 1"));
        }
        let mut next = advance(state, fedavg_aggregate(updates)?);
        next.global_history.push_back(next.global.clone());
        while next.global_history.len() > self.buffer_len {
            next.global_history.pop_front();
        }
        Ok(next)
    }
}

// ---------------------------------------------------------------------------
// Feature distillation

/// `CE + mu * mean_i ||h_i - h_global,i||^2`.
pub struct FeatureDistillObjective<'a> {
    pub teacher: &'a MlpModel,
    pub mu: f64,
}

impl LocalObjective for FeatureDistillObjective<'_> {
    fn aux_terms(&self, _: &ParamVector, trace: &ForwardTrace, batch: &Batch<'_>) -> Result<AuxTerms> {
        let target = forward(self.teacher, batch.features)?;
        let (h, hg) = (trace.latent(), target.latent());
        let b = h.rows().max(1) as f64;
        let mut grad = Matrix::zeros(h.rows(), h.cols());
        let mut loss = 0.0;
        for ((g, a), t) in grad.data_mut().iter_mut().zip(h.data()).zip(hg.data()) {
            let d = a - t;
            loss += d * d;
            *g = 2.0 * self.mu * d / b;
        }
        Ok(AuxTerms {
            loss: self.mu * loss / b,
            grad_latent: Some(grad),
            ..AuxTerms::default()
        })
    }
}

pub fn feature_distill_local(ctx: &RoundContext<'_>, state: &RoundState, shard: &ClientShard, mu: f64) -> Result<LocalUpdate> {
    check_mu(mu)?;
    let teacher = ctx.arch.model(state.global.clone())?;
    let objective = FeatureDistillObjective { teacher: &teacher, mu };
    train_with_objective(ctx, state, shard, &objective)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureDistill {
    pub mu: f64,
}

impl Strategy for FeatureDistill {
    fn name(&self) -> &str {
        "feature_distill"
    }

    fn local_train(&self, ctx: &RoundContext<'_>, state: &RoundState, shard: &ClientShard) -> Result<LocalUpdate> {
        feature_distill_local(ctx, state, shard, self.mu)
    }
}

// ---------------------------------------------------------------------------
// FedProto

/// Per-class mean of latent features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePrototypeMatrix {
    num_classes: usize,
    width: usize,
    rows: Vec<f64>,
    present: Vec<bool>,
}

impl FeaturePrototypeMatrix {
    pub fn zeros(num_classes: usize, width: usize) -> Self {
        FeaturePrototypeMatrix {
            num_classes,
            width,
            rows: vec![0.0; num_classes * width],
            present: vec![false; num_classes],
        }
    }

    pub fn from_parts(num_classes: usize, width: usize, rows: Vec<f64>, present: Vec<bool>) -> Result<Self> {
        if rows.len() != num_classes * width || present.len() != num_classes {
            return Err(Error::shape("feature prototype must be |Y| x width"));
        }
        Ok(FeaturePrototypeMatrix {
            num_classes,
            width,
            rows,
            present,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.rows[class * self.width..(class + 1) * self.width]
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.present[class]
    }

    /// Class means of the model's latent features over `data`.
    pub fn from_model(model: &MlpModel, data: &Dataset) -> Result<Self> {
        let trace = forward(model, data.features())?;
        let h = trace.latent();
        let mut out = FeaturePrototypeMatrix::zeros(data.num_classes(), h.cols());
        let mut counts = vec![0usize; data.num_classes()];
        for (row, &y) in h.iter_rows().zip(data.labels()) {
            counts[y] += 1;
            for (acc, v) in out.rows[y * out.width..(y + 1) * out.width].iter_mut().zip(row) {
                *acc += v;
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                out.present[c] = true;
                let w = out.width;
                out.rows[c * w..(c + 1) * w].iter_mut().for_each(|v| *v /= n as f64);
            }
        }
        Ok(out)
    }

    /// Row-wise mean over the clients that observed each class; classes
    /// nobody observed stay zero and absent.
    pub fn aggregate(locals: &[FeaturePrototypeMatrix]) -> Result<Self> {
        let first = locals.first().ok_or_else(|| Error::invalid("no feature prototypes"))?;
        let (k, w) = (first.num_classes, first.width);
        if locals.iter().any(|p| p.num_classes != k || p.width != w) {
            return Err(Error::shape("feature prototypes disagree in shape"));
        }
        let mut out = FeaturePrototypeMatrix::zeros(k, w);
        for c in 0..k {
            let owners: Vec<&FeaturePrototypeMatrix> = locals.iter().filter(|p| p.present[c]).collect();
            if owners.is_empty() {
                continue;
            }
            out.present[c] = true;
            for p in &owners {
                for (acc, v) in out.rows[c * w..(c + 1) * w].iter_mut().zip(p.row(c)) {
                    *acc += v;
                }
            }
            out.rows[c * w..(c + 1) * w].iter_mut().for_each(|v| *v /= owners.len() as f64);
        }
        Ok(out)
    }
}

/// `CE + mu * mean_i ||h_i - p_{y_i}||^2`, counting only classes that have a
/// global prototype.
pub struct PrototypeAlignObjective<'a> {
    pub prototypes: Option<&'a FeaturePrototypeMatrix>,
    pub mu: f64,
}

impl LocalObjective for PrototypeAlignObjective<'_> {
    fn aux_terms(&self, _: &ParamVector, trace: &ForwardTrace, batch: &Batch<'_>) -> Result<AuxTerms> {
        let Some(protos) = self.prototypes else {
            return Ok(AuxTerms::default());
        };
        let h = trace.latent();
        if protos.width != h.cols() {
            return Err(Error::shape("feature prototype width differs from latent width"));
        }
        let b = h.rows().max(1) as f64;
        let mut grad = Matrix::zeros(h.rows(), h.cols());
        let mut loss = 0.0;
        for (r, &y) in batch.labels.iter().enumerate() {
            if y >= protos.num_classes || !protos.present[y] {
                continue;
            }
            for ((g, a), p) in grad.row_mut(r).iter_mut().zip(h.row(r)).zip(protos.row(y)) {
                let d = a - p;
                loss += d * d;
                *g = 2.0 * self.mu * d / b;
            }
        }
        Ok(AuxTerms {
            loss: self.mu * loss / b,
            grad_latent: Some(grad),
            ..AuxTerms::default()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedProto {
    pub mu: f64,
}

pub fn fedproto_local(
    ctx: &RoundContext<'_>,
    state: &RoundState,
    shard: &ClientShard,
    mu: f64,
    global_protos: Option<&FeaturePrototypeMatrix>,
) -> Result<(LocalUpdate, FeaturePrototypeMatrix)> {
    check_mu(mu)?;
    let objective = PrototypeAlignObjective {
        prototypes: global_protos,
        mu,
    };
    let update = train_with_objective(ctx, state, shard, &objective)?;
    let model = ctx.arch.model(update.params.clone())?;
    let local = FeaturePrototypeMatrix::from_model(&model, &shard.dataset)?;
    Ok((update, local))
}

impl Strategy for FedProto {
    fn name(&self) -> &str {
        "fedproto"
    }

    fn local_train(&self, ctx: &RoundContext<'_>, state: &RoundState, shard: &ClientShard) -> Result<LocalUpdate> {
        let (mut update, protos) = fedproto_local(ctx, state, shard, self.mu, state.feature_prototypes.as_ref())?;
        update.feature_prototypes = Some(protos);
        Ok(update)
    }

    fn server_update(&self, _ctx: &RoundContext<'_>, state: &RoundState, updates: &[LocalUpdate]) -> Result<RoundState> {
        let mut next = advance(state, fedavg_aggregate(updates)?);
        let locals: Vec<FeaturePrototypeMatrix> = updates
            .iter()
            .map(|u| u.feature_prototypes.clone().ok_or(Error::MissingState("client feature prototypes")))
            .collect::<Result<_>>()?;
        next.feature_prototypes = Some(FeaturePrototypeMatrix::aggregate(&locals)?);
        Ok(next)
    }
}

// ---------------------------------------------------------------------------
// Server-side variants

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedAvgM {
    pub server_lr: f64,
    pub server_momentum: f64,
}

impl Strategy for FedAvgM {
    fn name(&self) -> &str {
        "fedavgm"
    }

    fn local_train(&self, ctx: &RoundContext<'_>, state: &RoundState, shard: &ClientShard) -> Result<LocalUpdate> {
        train_with_objective(ctx, state, shard, &CrossEntropyOnly)
    }

    fn server_update(&self, _ctx: &RoundContext<'_>, state: &RoundState, updates: &[LocalUpdate]) -> Result<RoundState> {
        let (global, buf) = fedavgm_aggregate(
            updates,
            &state.global,
            state.server_momentum.as_ref(),
            self.server_lr,
            self.server_momentum,
        )?;
        let mut next = advance(state, global);
        next.server_momentum = Some(buf);
        Ok(next)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FedNova;

impl Strategy for FedNova {
    fn name(&self) -> &str {
        "fednova"
    }

    fn local_train(&self, ctx: &RoundContext<'_>, state: &RoundState, shard: &ClientShard) -> Result<LocalUpdate> {
        train_with_objective(ctx, state, shard, &CrossEntropyOnly)
    }

    fn server_update(&self, _ctx: &RoundContext<'_>, state: &RoundState, updates: &[LocalUpdate]) -> Result<RoundState> {
        Ok(advance(state, fednova_aggregate(updates, &state.global)?))
    }
}

/// Local feature prototypes for every shard under one model, in shard order.
pub fn feature_prototypes_for(model: &MlpModel, shards: &[ClientShard]) -> Result<Vec<FeaturePrototypeMatrix>> {
    shards
        .par_iter()
        .map(|s| FeaturePrototypeMatrix::from_model(model, &s.dataset))
        .collect()
}

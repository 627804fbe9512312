use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{csd_loss, DistillBatchView};
use super::mask::MaskKind;
use super::prototype::{aggregate_prototypes, local_prototype, PrototypeMatrix, PrototypeMean};
use crate::datagen::ClientShard;
use crate::engine::{
    advance, fedavg_aggregate, tma_update, train_with_objective, AuxTerms, Batch, LocalObjective,
    LocalUpdate, RoundContext, RoundState, Strategy,
};
use crate::error::{Error, Result};
use crate::tensor_nn::{ForwardTrace, MlpModel, ParamVector};

/// Hyperparameters of the distillation objective and its ablation toggles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsdHyper {
    /// Weight of the distillation term.
    pub mu: f64,
    pub tau: f64,
    /// Moving-average momentum of the teacher.
    pub alpha: f64,
    pub mask: MaskKind,
    pub use_similarity: bool,
    pub use_tma: bool,
    pub prototype_mean: PrototypeMean,
}

impl Default for CsdHyper {
    fn default() -> Self {
        CsdHyper {
            mu: 0.001,
            tau: 10.0,
            alpha: 0.9,
            mask: MaskKind::Adaptive,
            use_similarity: true,
            use_tma: true,
            prototype_mean: PrototypeMean::AllClients,
        }
    }
}

/// The component ablations: which of similarity weighting, the adaptive
/// mask and the moving-average teacher are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// None of the three: plain distillation from last round's global model.
    Base,
    /// Similarity + mask.
    M1,
    /// Similarity + moving-average teacher.
    M2,
    /// Mask + moving-average teacher.
    M3,
    Full,
}

impl Ablation {
    pub fn apply(self, hyper: CsdHyper) -> CsdHyper {
        let (use_similarity, masked, use_tma) = match self {
            Ablation::Base => (false, false, false),
            Ablation::M1 => (true, true, false),
            Ablation::M2 => (true, false, true),
            Ablation::M3 => (false, true, true),
            Ablation::Full => (true, true, true),
        };
        CsdHyper {
            use_similarity,
            use_tma,
            mask: if masked { MaskKind::Adaptive } else { MaskKind::None },
            ..hyper
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Base => "base",
            Ablation::M1 => "m1",
            Ablation::M2 => "m2",
            Ablation::M3 => "m3",
            Ablation::Full => "full",
        }
    }
}

/// Cross-entropy plus `mu` times the masked, similarity-weighted
/// distillation loss against a frozen teacher.
pub struct CsdObjective<'a> {
    pub teacher: &'a MlpModel,
    pub prototype: Option<&'a PrototypeMatrix>,
    pub hyper: CsdHyper,
}

impl CsdObjective<'_> {
    pub fn view(&self, trace: &ForwardTrace, batch: &Batch<'_>) -> Result<DistillBatchView> {
        let teacher_logits = self.teacher.logits(batch.features)?;
        DistillBatchView::build(
            trace.logits().clone(),
            teacher_logits,
            batch.labels.to_vec(),
            if self.hyper.use_similarity { self.prototype } else { None },
            self.hyper.mask,
        )
    }
}

impl LocalObjective for CsdObjective<'_> {
    fn aux_terms(&self, _: &ParamVector, trace: &ForwardTrace, batch: &Batch<'_>) -> Result<AuxTerms> {
        let view = self.view(trace, batch)?;
        let (loss, mut grad) = csd_loss(&view, self.hyper.tau)?;
        grad.data_mut().iter_mut().for_each(|g| *g *= self.hyper.mu);
        Ok(AuxTerms {
            loss: self.hyper.mu * loss,
            grad_logits: Some(grad),
            ..AuxTerms::default()
        })
    }
}

/// Local training on `CE + mu * L_CSD`, starting from the round's global
/// model, with the round's teacher and global prototype held fixed.
pub fn fedcsd_local_train(
    ctx: &RoundContext<'_>,
    state: &RoundState,
    shard: &ClientShard,
    hyper: &CsdHyper,
) -> Result<LocalUpdate> {
    let prototype = if hyper.use_similarity {
        Some(
            state
                .global_prototype
                .as_ref()
                .ok_or(Error::MissingState("global prototype"))?,
        )
    } else {
        None
    };
    let teacher = ctx.arch.model(state.teacher.clone())?;
    let objective = CsdObjective {
        teacher: &teacher,
        prototype,
        hyper: *hyper,
    };
    train_with_objective(ctx, state, shard, &objective)
}

/// Prototype exchange for a round: each client's teacher-logit class means,
/// averaged on the server.
pub fn global_prototype(ctx: &RoundContext<'_>, teacher: &ParamVector, mode: PrototypeMean) -> Result<PrototypeMatrix> {
    let model = ctx.arch.model(teacher.clone())?;
    let locals: Vec<PrototypeMatrix> = ctx
        .shards
        .par_iter()
        .map(|s| local_prototype(&model, &s.dataset))
        .collect::<Result<_>>()?;
    aggregate_prototypes(&locals, mode)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedCsd {
    pub hyper: CsdHyper,
}

impl FedCsd {
    pub fn new(hyper: CsdHyper) -> Result<Self> {
        if !(hyper.mu >= 0.0) {
            return Err(Error::invalid("mu must be >= 0"));
        }
        if !(hyper.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        if !(0.0..=1.0).contains(&hyper.alpha) {
            return Err(Error::invalid("alpha must lie in [0, 1]"));
        }
        Ok(FedCsd { hyper })
    }
}

impl Strategy for FedCsd {
    fn name(&self) -> &str {
        "fedcsd"
    }

    fn prepare_round(&self, ctx: &RoundContext<'_>, state: &mut RoundState) -> Result<()> {
        if self.hyper.use_similarity {
            state.global_prototype = Some(global_prototype(ctx, &state.teacher, self.hyper.prototype_mean)?);
        }
        Ok(())
    }

    fn local_train(&self, ctx: &RoundContext<'_>, state: &RoundState, shard: &ClientShard) -> Result<LocalUpdate> {
        fedcsd_local_train(ctx, state, shard, &self.hyper)
    }

    fn server_update(&self, _ctx: &RoundContext<'_>, state: &RoundState, updates: &[LocalUpdate]) -> Result<RoundState> {
        let global = fedavg_aggregate(updates)?;
        let mut next = advance(state, global);
        if self.hyper.use_tma {
            next.teacher = tma_update(&state.teacher, &next.global, self.hyper.alpha)?;
        }
        Ok(next)
    }
}

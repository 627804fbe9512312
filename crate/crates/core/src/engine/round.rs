use rayon::prelude::*;

use super::aggregate::fedavg_aggregate;
use super::local::{client_rng, CrossEntropyOnly, LocalObjective, LocalRun};
use super::state::{LocalUpdate, Participation, RoundState, Schedule};
use crate::datagen::{ClientShard, Dataset};
use crate::diagnostics::{self, MetricsRecord};
use crate::error::{Error, Result};
use crate::tensor_nn::{Architecture, ParamVector};

/// Read-only inputs shared by every client in a round.
#[derive(Clone, Copy)]
pub struct RoundContext<'a> {
    pub arch: &'a Architecture,
    pub shards: &'a [ClientShard],
    /// Held-out data for the global accuracy metric; the union of the shards
    /// is used when absent.
    pub test: Option<&'a Dataset>,
    pub schedule: &'a Schedule,
}

/// A federated method: how clients train locally and how the server folds
/// their updates into the next state.
pub trait Strategy: Sync {
    fn name(&self) -> &str;

    /// Server work before local training, on a private copy of the state.
    fn prepare_round(&self, _ctx: &RoundContext<'_>, _state: &mut RoundState) -> Result<()> {
        Ok(())
    }

    fn local_train(&self, ctx: &RoundContext<'_>, state: &RoundState, shard: &ClientShard) -> Result<LocalUpdate>;

    fn server_update(&self, _ctx: &RoundContext<'_>, state: &RoundState, updates: &[LocalUpdate]) -> Result<RoundState> {
        Ok(advance(state, fedavg_aggregate(updates)?))
    }
}

/// Next-round state with a new global model; the teacher follows the global.
pub fn advance(state: &RoundState, new_global: ParamVector) -> RoundState {
    let mut next = state.clone();
    next.round += 1;
    next.teacher = new_global.clone();
    next.global = new_global;
    next
}

/// Local training from the round-start global model with the given objective.
pub fn train_with_objective(
    ctx: &RoundContext<'_>,
    state: &RoundState,
    shard: &ClientShard,
    objective: &dyn LocalObjective,
) -> Result<LocalUpdate> {
    let rng = client_rng(ctx.schedule.seed, state.round, shard.client_id);
    let mut run = LocalRun::new(ctx.arch, state.global.clone(), ctx.schedule, rng)?;
    run.run_epochs(&shard.dataset, objective, ctx.schedule.local_epochs)?;
    let (model, steps) = run.into_parts();
    Ok(LocalUpdate::new(shard.client_id, model.into_params(), shard.len(), steps))
}

/// Plain federated averaging.
#[derive(Debug, Clone, Copy, Default)]
pub struct FedAvg;

impl Strategy for FedAvg {
    fn name(&self) -> &str {
        "fedavg"
    }

    fn local_train(&self, ctx: &RoundContext<'_>, state: &RoundState, shard: &ClientShard) -> Result<LocalUpdate> {
        train_with_objective(ctx, state, shard, &CrossEntropyOnly)
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub state: RoundState,
    pub updates: Vec<LocalUpdate>,
    pub metrics: MetricsRecord,
}

/// One broadcast / local-train / aggregate cycle. Clients train in parallel
/// on the current rayon pool; results do not depend on the pool size. On
/// any error the input state is left as it was.
pub fn run_round(ctx: &RoundContext<'_>, state: &RoundState, strategy: &dyn Strategy) -> Result<RoundOutcome> {
    if ctx.shards.is_empty() {
        return Err(Error::invalid("no client shards"));
    }
    if let Some(s) = ctx.shards.iter().find(|s| s.is_empty()) {
        return Err(Error::invalid(format!("client {} has no samples", s.client_id)));
    }
    let participants: Vec<&ClientShard> = match &ctx.schedule.participation {
        Participation::All => ctx.shards.iter().collect(),
        Participation::Subset(ids) => ctx.shards.iter().filter(|s| ids.contains(&s.client_id)).collect(),
    };
    if participants.is_empty() {
        return Err(Error::invalid("no participating clients"));
    }

    let mut working = state.clone();
    strategy.prepare_round(ctx, &mut working)?;

    let updates: Vec<LocalUpdate> = participants
        .par_iter()
        .map(|shard| {
            strategy
                .local_train(ctx, &working, shard)
                .map_err(|e| Error::Client {
                    client: shard.client_id,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;

    let next = strategy.server_update(ctx, &working, &updates)?;
    let metrics = diagnostics::round_metrics(ctx, &working, &participants, &updates, &next)?;
    Ok(RoundOutcome {
        state: next,
        updates,
        metrics,
    })
}

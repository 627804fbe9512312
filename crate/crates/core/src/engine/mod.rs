//! Round orchestration: broadcast, parallel local training, aggregation and
//! server-side state updates.

mod aggregate;
mod checkpoint;
mod local;
mod round;
mod state;

pub use aggregate::{fedavg_aggregate, fedavgm_aggregate, fednova_aggregate, tma_update};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use local::{
    client_rng, objective_loss_and_grad, AuxTerms, Batch, CrossEntropyOnly, LocalObjective, LocalRun,
};
pub use round::{advance, run_round, train_with_objective, FedAvg, RoundContext, RoundOutcome, Strategy};
pub use state::{LocalUpdate, Participation, RoundState, Schedule};

use std::collections::VecDeque;

use crate::baselines::FeaturePrototypeMatrix;
use crate::fedcsd::PrototypeMatrix;
use crate::tensor_nn::ParamVector;

/// Server-side state carried from one communication round to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    /// Index of the round about to run, starting at 0.
    pub round: usize,
    pub global: ParamVector,
    /// Distillation teacher. Equals `global` for methods without a moving
    /// average teacher.
    pub teacher: ParamVector,
    pub global_prototype: Option<PrototypeMatrix>,
    pub server_momentum: Option<ParamVector>,
    /// Recent global models, oldest first.
    pub global_history: VecDeque<ParamVector>,
    /// Each client's most recent local model, indexed by client id.
    pub previous_locals: Vec<Option<ParamVector>>,
    pub feature_prototypes: Option<FeaturePrototypeMatrix>,
}

impl RoundState {
    /// Round-zero state; the teacher starts as a copy of the global model.
    pub fn initial(global: ParamVector) -> Self {
        RoundState {
            round: 0,
            teacher: global.clone(),
            global,
            global_prototype: None,
            server_momentum: None,
            global_history: VecDeque::new(),
            previous_locals: Vec::new(),
            feature_prototypes: None,
        }
    }

    pub fn previous_local(&self, client_id: usize) -> Option<&ParamVector> {
        self.previous_locals.get(client_id).and_then(Option::as_ref)
    }
}

/// Result of one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub client_id: usize,
    pub params: ParamVector,
    pub num_samples: usize,
    pub local_steps: usize,
    pub feature_prototypes: Option<FeaturePrototypeMatrix>,
}

impl LocalUpdate {
    pub fn new(client_id: usize, params: ParamVector, num_samples: usize, local_steps: usize) -> Self {
        LocalUpdate {
            client_id,
            params,
            num_samples,
            local_steps,
            feature_prototypes: None,
        }
    }
}

/// Which clients train in a round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum Participation {
    #[default]
    All,
    /// Only the listed client ids. Not exercised by the experiment runner.
    Subset(Vec<usize>),
}

/// Local optimisation schedule shared by every client.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Root of all per-client random streams.
    pub seed: u64,
    pub participation: Participation,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            local_epochs: 5,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-5,
            seed: 0,
            participation: Participation::All,
        }
    }
}

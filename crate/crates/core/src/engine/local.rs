use super::state::Schedule;
use crate::datagen::Dataset;
use crate::error::Result;
use crate::rng::CounterRng;
use crate::tensor_nn::{
    backward_with_latent, cross_entropy, forward, Architecture, ForwardTrace, Matrix, MlpModel,
    ParamVector, Sgd, SgdState,
};

/// One mini-batch as seen by a local objective.
pub struct Batch<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [usize],
}

/// Auxiliary loss terms added to cross-entropy, already multiplied by the
/// method's loss weight.
#[derive(Debug, Clone, Default)]
pub struct AuxTerms {
    pub loss: f64,
    pub grad_logits: Option<Matrix>,
    pub grad_latent: Option<Matrix>,
    pub grad_params: Option<ParamVector>,
}

/// A local training objective: cross-entropy plus method-specific terms.
pub trait LocalObjective {
    fn aux_terms(&self, params: &ParamVector, trace: &ForwardTrace, batch: &Batch<'_>) -> Result<AuxTerms>;
}

/// Plain cross-entropy (FedAvg local training).
#[derive(Debug, Clone, Copy, Default)]
pub struct CrossEntropyOnly;

impl LocalObjective for CrossEntropyOnly {
    fn aux_terms(&self, _: &ParamVector, _: &ForwardTrace, _: &Batch<'_>) -> Result<AuxTerms> {
        Ok(AuxTerms::default())
    }
}

/// Value and parameter gradient of `CE + aux` on one batch.
pub fn objective_loss_and_grad(
    model: &MlpModel,
    objective: &dyn LocalObjective,
    batch: &Batch<'_>,
) -> Result<(f64, ParamVector)> {
    let trace = forward(model, batch.features)?;
    let (ce, mut grad_logits) = cross_entropy(trace.logits(), batch.labels)?;
    let aux = objective.aux_terms(model.params(), &trace, batch)?;
    if let Some(g) = &aux.grad_logits {
        grad_logits.add_scaled(g, 1.0)?;
    }
    let mut grad = backward_with_latent(model, &trace, &grad_logits, aux.grad_latent.as_ref())?;
    if let Some(g) = &aux.grad_params {
        grad.axpy(1.0, g)?;
    }
    Ok((ce + aux.loss, grad))
}

/// Stream for a client's local training in a given round.
pub fn client_rng(seed: u64, round: usize, client_id: usize) -> CounterRng {
    CounterRng::from_path(seed, &[round as u64, client_id as u64])
}

/// Mini-batch SGD over one client's data. Momentum state starts empty, so
/// every round begins from a fresh optimizer.
pub struct LocalRun {
    model: MlpModel,
    sgd: Sgd,
    sgd_state: SgdState,
    batch_size: usize,
    rng: CounterRng,
    steps: usize,
}

impl LocalRun {
    pub fn new(arch: &Architecture, init: ParamVector, schedule: &Schedule, rng: CounterRng) -> Result<Self> {
        if schedule.batch_size == 0 {
            return Err(crate::Error::invalid("batch size must be positive"));
        }
        Ok(LocalRun {
            model: arch.model(init)?,
            sgd: Sgd::new(schedule.lr, schedule.momentum, schedule.weight_decay),
            sgd_state: SgdState::new(),
            batch_size: schedule.batch_size,
            rng,
            steps: 0,
        })
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One pass over `data` in a freshly shuffled order; the last batch may
    /// be smaller.
    pub fn run_epoch(&mut self, data: &Dataset, objective: &dyn LocalObjective) -> Result<()> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.rng.shuffle(&mut order);
        for chunk in order.chunks(self.batch_size) {
            let features = data.features().select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let batch = Batch {
                features: &features,
                labels: &labels,
            };
            let (_, grad) = objective_loss_and_grad(&self.model, objective, &batch)?;
            let params = self.model.params_mut();
            self.sgd.step(params, &grad, &mut self.sgd_state)?;
            self.steps += 1;
        }
        Ok(())
    }

    pub fn run_epochs(&mut self, data: &Dataset, objective: &dyn LocalObjective, epochs: usize) -> Result<()> {
        for _ in 0..epochs {
            self.run_epoch(data, objective)?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (MlpModel, usize) {
        (self.model, self.steps)
    }
}

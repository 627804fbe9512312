use super::mlp::ParamVector;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay:
///
/// ```text
/// g' = g + weight_decay * p
/// v  = momentum * v + g'        (v = g' on the first step)
/// p  = p - lr * v
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffer; empty until the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: Option<Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        SgdState::default()
    }

    pub fn velocity(&self) -> Option<&[f64]> {
        self.velocity.as_deref()
    }
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn step(&self, params: &mut ParamVector, grad: &ParamVector, state: &mut SgdState) -> Result<()> {
        params.check_layout(grad)?;
        if let Some(v) = &state.velocity {
            if v.len() != params.len() {
                return Err(Error::LayoutMismatch);
            }
        }
        let p = params.values_mut();
        if self.momentum == 0.0 {
            for (pi, gi) in p.iter_mut().zip(grad.values()) {
                let g = gi + self.weight_decay * *pi;
                *pi -= self.lr * g;
            }
            return Ok(());
        }
        match &mut state.velocity {
            None => {
                let mut v = Vec::with_capacity(p.len());
                for (pi, gi) in p.iter_mut().zip(grad.values()) {
                    let g = gi + self.weight_decay * *pi;
                    v.push(g);
                    *pi -= self.lr * g;
                }
                state.velocity = Some(v);
            }
            Some(v) => {
                for ((pi, gi), vi) in p.iter_mut().zip(grad.values()).zip(v.iter_mut()) {
                    let g = gi + self.weight_decay * *pi;
                    *vi = self.momentum * *vi + g;
                    *pi -= self.lr * *vi;
                }
            }
        }
        Ok(())
    }
}

/// Standalone form of [`Sgd::step`].
pub fn sgd_step(
    params: &mut ParamVector,
    grad: &ParamVector,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: &mut SgdState,
) -> Result<()> {
    Sgd::new(lr, momentum, weight_decay).step(params, grad, state)
}

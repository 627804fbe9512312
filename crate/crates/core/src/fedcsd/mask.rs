use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_nn::{argmax, softmax_unchecked};

/// Which teacher soft labels take part in distillation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Keep a sample when the teacher gives its true class more than `1/|Y|`.
    #[default]
    Adaptive,
    /// Keep a sample only when the teacher's top class is the true class.
    Forcible,
    /// Keep every sample.
    None,
}

fn check_label(logits: &[f64], label: usize) -> Result<()> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: logits.len(),
        });
    }
    Ok(())
}

/// `softmax(z)[y] > 1/|Y|`, strictly, at temperature 1.
pub fn adaptive_mask(teacher_logits: &[f64], label: usize) -> Result<bool> {
    check_label(teacher_logits, label)?;
    let probs = softmax_unchecked(teacher_logits, 1.0);
    Ok(probs[label] > 1.0 / teacher_logits.len() as f64)
}

/// `argmax(z) == y`, ties resolved to the lowest class index.
pub fn forcible_mask(teacher_logits: &[f64], label: usize) -> Result<bool> {
    check_label(teacher_logits, label)?;
    Ok(argmax(teacher_logits) == label)
}

impl MaskKind {
    pub fn keep(self, teacher_logits: &[f64], label: usize) -> Result<bool> {
        match self {
            MaskKind::Adaptive => adaptive_mask(teacher_logits, label),
            MaskKind::Forcible => forcible_mask(teacher_logits, label),
            MaskKind::None => check_label(teacher_logits, label).map(|_| true),
        }
    }
}

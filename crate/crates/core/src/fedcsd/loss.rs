use super::prototype::PrototypeMatrix;
use super::similarity::{similarity_scores, weighted_teacher_logits};
use super::mask::MaskKind;
use crate::error::{Error, Result};
use crate::tensor_nn::{soft_cross_entropy, Matrix};

/// Everything the distillation loss needs for one batch. The teacher side
/// (teacher logits, scores, mask) is constant with respect to the student.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillBatchView {
    pub local_logits: Matrix,
    pub teacher_logits: Matrix,
    pub labels: Vec<usize>,
    /// Similarity scores per sample; `None` leaves teacher logits unweighted.
    pub scores: Option<Matrix>,
    pub mask: Vec<bool>,
}

impl DistillBatchView {
    /// Assembles a view, computing scores from the student logits (when a
    /// prototype is given) and mask bits from the teacher logits.
    pub fn build(
        local_logits: Matrix,
        teacher_logits: Matrix,
        labels: Vec<usize>,
        prototype: Option<&PrototypeMatrix>,
        mask_kind: MaskKind,
    ) -> Result<Self> {
        let scores = match prototype {
            Some(p) => {
                let mut s = Matrix::zeros(local_logits.rows(), local_logits.cols());
                for r in 0..local_logits.rows() {
                    s.row_mut(r).copy_from_slice(&similarity_scores(local_logits.row(r), p)?);
                }
                Some(s)
            }
            None => None,
        };
        let mask = teacher_logits
            .iter_rows()
            .zip(&labels)
            .map(|(z, &y)| mask_kind.keep(z, y))
            .collect::<Result<Vec<bool>>>()?;
        let view = DistillBatchView {
            local_logits,
            teacher_logits,
            labels,
            scores,
            mask,
        };
        view.validate()?;
        Ok(view)
    }

    pub fn validate(&self) -> Result<()> {
        let (b, k) = (self.local_logits.rows(), self.local_logits.cols());
        let same = |m: &Matrix| m.rows() == b && m.cols() == k;
        if !same(&self.teacher_logits) || self.labels.len() != b || self.mask.len() != b {
            return Err(Error::shape("distillation view has inconsistent shapes"));
        }
        if let Some(s) = &self.scores {
            if !same(s) {
                return Err(Error::shape("score matrix has the wrong shape"));
            }
        }
        Ok(())
    }

    /// Teacher logits after similarity weighting.
    pub fn weighted_teacher(&self) -> Result<Matrix> {
        match &self.scores {
            None => Ok(self.teacher_logits.clone()),
            Some(s) => {
                let mut out = Matrix::zeros(self.teacher_logits.rows(), self.teacher_logits.cols());
                for r in 0..out.rows() {
                    let w = weighted_teacher_logits(self.teacher_logits.row(r), s.row(r))?;
                    out.row_mut(r).copy_from_slice(&w);
                }
                Ok(out)
            }
        }
    }

    /// Fraction of samples whose mask bit is 0.
    pub fn filtered_fraction(&self) -> f64 {
        let dropped = self.mask.iter().filter(|m| !**m).count();
        dropped as f64 / self.mask.len().max(1) as f64
    }
}

/// Masked similarity distillation loss: batch mean of
/// `mask * tau^2 * CE(softmax(weighted_teacher / tau), softmax(local / tau))`,
/// with its gradient on the local logits.
pub fn csd_loss(view: &DistillBatchView, tau: f64) -> Result<(f64, Matrix)> {
    view.validate()?;
    let target = view.weighted_teacher()?;
    let weights: Vec<f64> = view.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    soft_cross_entropy(&view.local_logits, &target, tau, Some(&weights))
}

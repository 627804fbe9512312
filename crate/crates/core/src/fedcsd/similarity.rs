use super::prototype::PrototypeMatrix;
use crate::error::{Error, Result};
use crate::tensor_nn::softmax_unchecked;

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Softmax over classes of the cosine similarity between a logit vector
/// and each global prototype row.
pub fn similarity_scores(logits: &[f64], prototype: &PrototypeMatrix) -> Result<Vec<f64>> {
    let k = prototype.num_classes();
    if logits.len() != k {
        return Err(Error::shape(format!("{} logits for a {k}-class prototype", logits.len())));
    }
    let cosines: Vec<f64> = (0..k).map(|c| cosine(logits, prototype.row(c))).collect();
    Ok(softmax_unchecked(&cosines, 1.0))
}

/// Elementwise product `scores * teacher_logits`.
pub fn weighted_teacher_logits(teacher_logits: &[f64], scores: &[f64]) -> Result<Vec<f64>> {
    if teacher_logits.len() != scores.len() {
        return Err(Error::shape("teacher logits and scores differ in length"));
    }
    Ok(teacher_logits.iter().zip(scores).map(|(z, s)| z * s).collect())
}

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Temperature softmax, stabilised by subtracting the maximum logit.
pub fn softmax_t(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(softmax_unchecked(logits, tau))
}

pub(crate) fn softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Log of the temperature softmax.
pub fn log_softmax_t(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(log_softmax_unchecked(logits, tau))
}

pub(crate) fn log_softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = logits
        .iter()
        .map(|z| ((z - max) / tau).exp())
        .sum::<f64>()
        .ln();
    logits.iter().map(|z| (z - max) / tau - log_total).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= num_classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
        None => Ok(()),
    }
}

/// Batch-mean cross-entropy and its gradient on the logits,
/// `(softmax(z) - onehot(y)) / B`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    check_labels(labels, logits.cols())?;
    let batch = labels.len().max(1) as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (r, (z, &y)) in logits.iter_rows().zip(labels).enumerate() {
        let log_q = log_softmax_unchecked(z, 1.0);
        loss -= log_q[y];
        let g = grad.row_mut(r);
        for (gc, lq) in g.iter_mut().zip(&log_q) {
            *gc = lq.exp() / batch;
        }
        g[y] -= 1.0 / batch;
    }
    Ok((loss / batch, grad))
}

/// `KL(p || q)` for probability vectors; terms with `p = 0` contribute zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Batch-mean temperature-scaled distillation loss
/// `tau^2 * sum_c -q_teacher,c log q_student,c` and its gradient on the
/// student logits, `tau * (q_student - q_teacher) / B`. Rows with weight 0
/// are skipped; `weights = None` keeps every row.
pub fn soft_cross_entropy(
    student: &Matrix,
    teacher: &Matrix,
    tau: f64,
    weights: Option<&[f64]>,
) -> Result<(f64, Matrix)> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if student.rows() != teacher.rows() || student.cols() != teacher.cols() {
        return Err(Error::shape("student and teacher logits differ in shape"));
    }
    if let Some(w) = weights {
        if w.len() != student.rows() {
            return Err(Error::shape("one weight per row required"));
        }
    }
    let batch = student.rows().max(1) as f64;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    let mut loss = 0.0;
    for r in 0..student.rows() {
        let w = weights.map_or(1.0, |w| w[r]);
        if w == 0.0 {
            continue;
        }
        let q_t = softmax_unchecked(teacher.row(r), tau);
        let log_q_s = log_softmax_unchecked(student.row(r), tau);
        let ce: f64 = q_t.iter().zip(&log_q_s).map(|(t, ls)| -t * ls).sum();
        loss += w * tau * tau * ce;
        for ((g, t), ls) in grad.row_mut(r).iter_mut().zip(&q_t).zip(&log_q_s) {
            *g = w * tau * (ls.exp() - t) / batch;
        }
    }
    Ok((loss / batch, grad))
}

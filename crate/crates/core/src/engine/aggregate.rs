use super::state::LocalUpdate;
use crate::error::{Error, Result};
use crate::tensor_nn::ParamVector;

fn sorted_by_client(updates: &[LocalUpdate]) -> Result<Vec<&LocalUpdate>> {
    let first = updates
        .first()
        .ok_or_else(|| Error::invalid("no updates to aggregate"))?;
    let mut sorted: Vec<&LocalUpdate> = updates.iter().collect();
    for u in &sorted {
        first.params.check_layout(&u.params)?;
        if u.num_samples == 0 {
            return Err(Error::invalid(format!("client {} reported zero samples", u.client_id)));
        }
    }
    // Summing in client-id order makes the result independent of arrival order.
    sorted.sort_by_key(|u| u.client_id);
    Ok(sorted)
}

fn sample_weights(updates: &[&LocalUpdate]) -> Vec<f64> {
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    updates
        .iter()
        .map(|u| u.num_samples as f64 / total as f64)
        .collect()
}

/// Sample-weighted parameter average, `sum_k gamma_k w_k`.
///
/// Evaluated as `w_0 + sum_k gamma_k (w_k - w_0)` around the lowest client
/// id, so identical updates average to themselves bit for bit.
pub fn fedavg_aggregate(updates: &[LocalUpdate]) -> Result<ParamVector> {
    let sorted = sorted_by_client(updates)?;
    let weights = sample_weights(&sorted);
    let anchor = &sorted[0].params;
    let mut out = anchor.clone();
    for (u, w) in sorted.iter().zip(&weights).skip(1) {
        for ((o, a), x) in out.values_mut().iter_mut().zip(anchor.values()).zip(u.params.values()) {
            *o += w * (x - a);
        }
    }
    Ok(out)
}

/// Server momentum on the pseudo-gradient `prev_global - fedavg(updates)`:
/// `buf = m * buf + delta; w = prev_global - server_lr * buf`.
pub fn fedavgm_aggregate(
    updates: &[LocalUpdate],
    prev_global: &ParamVector,
    momentum_buf: Option<&ParamVector>,
    server_lr: f64,
    server_momentum: f64,
) -> Result<(ParamVector, ParamVector)> {
    let averaged = fedavg_aggregate(updates)?;
    let delta = prev_global.sub(&averaged)?;
    let buf = match momentum_buf {
        Some(prev) => {
            prev.check_layout(prev_global)?;
            let mut b = prev.clone();
            b.values_mut().iter_mut().for_each(|v| *v *= server_momentum);
            b.axpy(1.0, &delta)?;
            b
        }
        None => delta,
    };
    let mut global = prev_global.clone();
    global.axpy(-server_lr, &buf)?;
    Ok((global, buf))
}

/// Normalised averaging: `d_k = (prev - w_k) / steps_k`,
/// `w = prev - (sum_k gamma_k steps_k) * (sum_k gamma_k d_k)`.
/// Step counts are taken from each update's `local_steps`.
pub fn fednova_aggregate(updates: &[LocalUpdate], prev_global: &ParamVector) -> Result<ParamVector> {
    let sorted = sorted_by_client(updates)?;
    if let Some(u) = sorted.iter().find(|u| u.local_steps == 0) {
        return Err(Error::invalid(format!("client {} took zero local steps", u.client_id)));
    }
    let weights = sample_weights(&sorted);
    let tau_eff: f64 = sorted
        .iter()
        .zip(&weights)
        .map(|(u, w)| w * u.local_steps as f64)
        .sum();
    let mut direction = prev_global.zeros_like();
    for (u, w) in sorted.iter().zip(&weights) {
        let d = prev_global.sub(&u.params)?;
        direction.axpy(w / u.local_steps as f64, &d)?;
    }
    let mut global = prev_global.clone();
    global.axpy(-tau_eff, &direction)?;
    Ok(global)
}

/// Moving-average teacher: `alpha * teacher + (1 - alpha) * new_global`.
pub fn tma_update(teacher: &ParamVector, new_global: &ParamVector, alpha: f64) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    teacher.check_layout(new_global)?;
    let values = teacher
        .values()
        .iter()
        .zip(new_global.values())
        .map(|(t, g)| alpha * t + (1.0 - alpha) * g)
        .collect();
    ParamVector::from_values(teacher.layout().clone(), values)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::tensor_nn::Layout;

    fn pv(values: Vec<f64>) -> ParamVector {
        let layout = Arc::new(Layout::from_dims(&[values.len() - 1, 1]));
        ParamVector::from_values(layout, values).unwrap()
    }

    fn upd(id: usize, values: Vec<f64>, n: usize, steps: usize) -> LocalUpdate {
        LocalUpdate::new(id, pv(values), n, steps)
    }

    #[test]
    fn weighted_mean_of_zeros_and_ones() {
        let out = fedavg_aggregate(&[upd(0, vec![0.0; 4], 1, 1), upd(1, vec![1.0; 4], 3, 1)]).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.75));
    }

    #[test]
    fn identical_updates_are_a_fixed_point() {
        let v = vec![0.3, -1.1, 2.5];
        let out = fedavg_aggregate(&[upd(0, v.clone(), 5, 1), upd(1, v.clone(), 2, 1), upd(2, v.clone(), 9, 1)]).unwrap();
        for (a, b) in out.values().iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_and_mismatched_rejected() {
        assert!(fedavg_aggregate(&[]).is_err());
        let r = fedavg_aggregate(&[upd(0, vec![0.0; 3], 1, 1), upd(1, vec![0.0; 4], 1, 1)]);
        assert!(matches!(r, Err(Error::LayoutMismatch)));
    }

    #[test]
    fn fedavgm_without_momentum_is_fedavg() {
        let ups = [upd(0, vec![1.0, 2.0], 2, 1), upd(1, vec![-1.0, 0.5], 3, 1)];
        let prev = pv(vec![0.2, 0.1]);
        let (g, _) = fedavgm_aggregate(&ups, &prev, None, 1.0, 0.0).unwrap();
        let avg = fedavg_aggregate(&ups).unwrap();
        for (a, b) in g.values().iter().zip(avg.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fedavgm_zero_delta_keeps_global() {
        let prev = pv(vec![0.2, 0.1]);
        let ups = [upd(0, vec![0.2, 0.1], 2, 1)];
        let (g, buf) = fedavgm_aggregate(&ups, &prev, Some(&prev.zeros_like()), 1.0, 0.9).unwrap();
        assert_eq!(g, prev);
        assert!(buf.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fedavgm_two_rounds_unrolled() {
        let (lr, m) = (0.5, 0.9);
        let w0 = 1.0;
        let a1 = 0.4; // round-1 average
        let prev = pv(vec![w0, 0.0]);
        let (w1, b1) = fedavgm_aggregate(&[upd(0, vec![a1, 0.0], 1, 1)], &prev, None, lr, m).unwrap();
        let a2 = 0.1;
        let (w2, _) = fedavgm_aggregate(&[upd(0, vec![a2, 0.0], 1, 1)], &w1, Some(&b1), lr, m).unwrap();
        let buf1 = w0 - a1;
        let e1 = w0 - lr * buf1;
        let buf2 = m * buf1 + (e1 - a2);
        let e2 = e1 - lr * buf2;
        assert!((w1.values()[0] - e1).abs() < 1e-12);
        assert!((w2.values()[0] - e2).abs() < 1e-12);
    }

    #[test]
    fn fednova_equal_steps_collapses_to_fedavg() {
        let ups = [upd(0, vec![1.0, 2.0], 2, 7), upd(1, vec![-1.0, 0.5], 3, 7)];
        let prev = pv(vec![0.2, 0.1]);
        let nova = fednova_aggregate(&ups, &prev).unwrap();
        let avg = fedavg_aggregate(&ups).unwrap();
        for (a, b) in nova.values().iter().zip(avg.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fednova_single_client_returns_its_model() {
        let prev = pv(vec![0.2, 0.1]);
        let nova = fednova_aggregate(&[upd(4, vec![3.0, -2.0], 10, 13)], &prev).unwrap();
        assert!((nova.values()[0] - 3.0).abs() < 1e-12);
        assert!((nova.values()[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn fednova_asymmetric_steps_scalar() {
        // prev = 1, client A: w = 0.5 after 5 steps, n = 1; client B: w = 0.0 after 10 steps, n = 1
        let prev = pv(vec![1.0, 0.0]);
        let ups = [upd(0, vec![0.5, 0.0], 1, 5), upd(1, vec![0.0, 0.0], 1, 10)];
        let nova = fednova_aggregate(&ups, &prev).unwrap();
        let tau_eff = 0.5 * 5.0 + 0.5 * 10.0;
        let d = 0.5 * (0.5 / 5.0) + 0.5 * (1.0 / 10.0);
        assert!((nova.values()[0] - (1.0 - tau_eff * d)).abs() < 1e-12);
        assert!((nova.values()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn fednova_zero_steps_rejected() {
        let prev = pv(vec![1.0, 0.0]);
        assert!(fednova_aggregate(&[upd(0, vec![0.5, 0.0], 1, 0)], &prev).is_err());
    }

    #[test]
    fn tma_endpoints_and_default() {
        let t = pv(vec![1.0, 4.0]);
        let g = pv(vec![2.0, 0.0]);
        assert_eq!(tma_update(&t, &g, 0.0).unwrap(), g);
        assert_eq!(tma_update(&t, &g, 1.0).unwrap(), t);
        let mid = tma_update(&t, &g, 0.9).unwrap();
        assert!((mid.values()[0] - 1.1).abs() < 1e-12);
        assert!(tma_update(&t, &g, 1.5).is_err());
        assert!(tma_update(&t, &g, -0.1).is_err());
    }
}

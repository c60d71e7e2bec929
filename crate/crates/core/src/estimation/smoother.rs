use nalgebra::{DMatrix, DVector};

use super::kalman::FilterStep;
use crate::linalg::symmetrize;
use crate::vehicle::DiscreteAugmentedModel;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedState {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
}

/// Smoother gains `H(k) = P(k|k) A^T P(k+1|k)^-1` for `k = 0 .. T-2`.
fn smoother_gains(model: &DiscreteAugmentedModel, steps: &[FilterStep]) -> Result<Vec<DMatrix<f64>>> {
    let at = model.a.transpose();
    steps
        .windows(2)
        .map(|pair| {
            let (cur, next) = (&pair[0], &pair[1]);
            // H^T = P(k+1|k)^-1 A P(k|k), P symmetric.
            let rhs = &model.a * &cur.p_upd;
            let ht = match next.p_pred.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => next
                    .p_pred
                    .clone()
                    .lu()
                    .solve(&rhs)
                    .ok_or(Error::SingularPrediction { step: next.k })?,
            };
            let h = ht.transpose();
            debug_assert_eq!(h.shape(), at.shape());
            Ok(h)
        })
        .collect()
}

fn backward_step(
    gain: &DMatrix<f64>,
    cur: &FilterStep,
    next: &FilterStep,
    later: &SmoothedState,
) -> SmoothedState {
    let x = &cur.x_upd + gain * (&later.x - &next.x_pred);
    let mut p = &cur.p_upd + gain * (&later.p - &next.p_pred) * gain.transpose();
    symmetrize(&mut p);
    SmoothedState { x, p }
}

/// Fixed-interval Rauch-Tung-Striebel smoothing of a complete filter run.
pub fn rts_smooth(model: &DiscreteAugmentedModel, steps: &[FilterStep]) -> Result<Vec<SmoothedState>> {
    let Some(last) = steps.last() else {
        return Err(Error::Dimension("cannot smooth an empty run".into()));
    };
    let gains = smoother_gains(model, steps)?;
    let mut out = vec![
        SmoothedState {
            x: last.x_upd.clone(),
            p: last.p_upd.clone(),
        };
        steps.len()
    ];
    for k in (0..steps.len() - 1).rev() {
        out[k] = backward_step(&gains[k], &steps[k], &steps[k + 1], &out[k + 1]);
    }
    Ok(out)
}

/// Fixed-lag smoothing: the estimate at step `k` conditions on measurements
/// up to `min(k + lag, T - 1)`, computed as an RTS pass over that window.
pub fn fixed_lag_smooth(
    model: &DiscreteAugmentedModel,
    steps: &[FilterStep],
    lag: usize,
) -> Result<Vec<SmoothedState>> {
    if steps.is_empty() {
        return Err(Error::Dimension("cannot smooth an empty run".into()));
    }
    if lag > steps.len() {
        return Err(Error::param(
            "lag",
            format!("must not exceed the run length {}, got {lag}", steps.len()),
        ));
    }
    let gains = smoother_gains(model, steps)?;
    let t = steps.len();
    let mut out = Vec::with_capacity(t);
    for k in 0..t {
        let end = (k + lag).min(t - 1);
        let mut s = SmoothedState {
            x: steps[end].x_upd.clone(),
            p: steps[end].p_upd.clone(),
        };
        for j in (k..end).rev() {
            s = backward_step(&gains[j], &steps[j], &steps[j + 1], &s);
        }
        out.push(s);
    }
    Ok(out)
}

//! Hamilton-Jacobi optimality indicators along simulated trajectories.
//! They only observe; training never differentiates them.

use ndarray::{Array2, ArrayView2};

use crate::autodiff::Tape;
use crate::divergence::Discriminator;
use crate::flow::{field_gradients, Field, FlowError, MetricsRecord, StopRule, TrajectoryBatch};

/// Sign of the time derivative in the residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualSign {
    /// `-d_t U + |grad U|^2 / (2 lambda)`, the optimality condition for
    /// `v = -grad U / lambda`.
    #[default]
    Optimality,
    /// `d_t U + |grad U|^2 / (2 lambda)`.
    Printed,
}

/// `(h / M) sum_m sum_k | -+d_t U(Y_k, k h) + |grad U(Y_k, k h)|^2 / (2 lambda) |`.
///
/// One batched gradient evaluation per time step, so `K M` point
/// evaluations in total.
pub fn hj_residual<F: Field + ?Sized>(u: &F, traj: &TrajectoryBatch, lambda: f64, sign: ResidualSign) -> Result<f64, FlowError> {
    let m = traj.len();
    if m == 0 {
        return Ok(0.0);
    }
    let time_sign = match sign {
        ResidualSign::Optimality => -1.0,
        ResidualSign::Printed => 1.0,
    };
    let mut total = 0.0;
    for k in 0..traj.steps() {
        let tape = Tape::new();
        let y = tape.constant(traj.points[k].clone());
        let (g, dt) = field_gradients(|a, b| u.eval(a, b), y, k as f64 * traj.step, true)?;
        let g = g.value();
        let dt = dt.expect("time derivative requested").value();
        for i in 0..m {
            let norm_sq: f64 = g.row(i).iter().map(|v| v * v).sum();
            total += (time_sign * dt[[i, 0]] + norm_sq / (2.0 * lambda)).abs();
        }
    }
    Ok(traj.step * total / m as f64)
}

/// `(1/M) sum_m |grad U(Y_K, T) - grad phi(Y_K)|`.
pub fn terminal_error<F: Field + ?Sized>(
    u: &F,
    disc: &Discriminator,
    endpoints: ArrayView2<'_, f64>,
    horizon: f64,
) -> Result<f64, FlowError> {
    let m = endpoints.nrows();
    if m == 0 {
        return Ok(0.0);
    }
    if endpoints.ncols() != u.dim() {
        return Err(FlowError::DimensionMismatch {
            expected: u.dim(),
            got: endpoints.ncols(),
        });
    }
    let tape = Tape::new();
    let y = tape.constant(endpoints.to_owned());
    let (gu, _) = field_gradients(|a, b| u.eval(a, b), y, horizon, false)?;
    let gphi = disc.input_gradient(endpoints)?;
    let diff: Array2<f64> = &gu.value() - &gphi;
    Ok(diff.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / m as f64)
}

/// True when, for each of the last `window + 1` records, both indicators are
/// present and below their thresholds.
pub fn should_stop(history: &[MetricsRecord], rule: &StopRule) -> bool {
    let need = rule.window + 1;
    if history.len() < need {
        return false;
    }
    history[history.len() - need..].iter().all(|r| {
        matches!(r.hj_residual, Some(v) if v < rule.residual) && matches!(r.terminal_error, Some(v) if v < rule.terminal)
    })
}

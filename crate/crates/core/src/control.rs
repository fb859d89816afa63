//! Feedback synthesis from solved Lyapunov matrices and closed-loop
//! system assembly.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::linalg::inverse;
use crate::model::{CostWeights, RegimeSystem};
use crate::riccati::{GainSet, RiccatiError};
use crate::simulate::FeedbackLaw;

/// Optimal state feedback per (regime, interval): `F = D^-1 B' G`,
/// applied as `u = -F x`.
pub fn synthesize_feedback(
    system: &RegimeSystem,
    weights: &CostWeights,
    gains: &GainSet,
) -> Result<FeedbackLaw, RiccatiError> {
    let nk = weights.n_intervals().max(gains.n_intervals());
    let mut out = Vec::with_capacity(system.n_regimes);
    for i in 0..system.n_regimes {
        let mut row = Vec::with_capacity(nk);
        for k in 0..nk {
            let d_inv = inverse(weights.control_weight(i, k))
                .ok_or(RiccatiError::SingularControlWeight { regime: i, interval: k })?;
            row.push(d_inv * system.input[i].transpose() * gains.gain(i, k));
        }
        out.push(row);
    }
    Ok(FeedbackLaw { gains: out })
}

/// Substitutes `u = -F x` into the dynamics: the drift becomes
/// `A - B F` (using each regime's interval-0 feedback) and the input
/// channel is removed. Diffusion, jumps and switching are untouched.
pub fn closed_loop(system: &RegimeSystem, law: &FeedbackLaw) -> RegimeSystem {
    let mut cl = system.clone();
    for i in 0..system.n_regimes {
        cl.drift[i] = &system.drift[i] - &system.input[i] * law.gain(i, 0);
        cl.input[i] = DMatrix::zeros(system.state_dim, system.control_dim);
    }
    cl
}

/// Lyapunov function value `x' G_ik x`.
pub fn lyapunov_value(gains: &GainSet, x: &DVector<f64>, regime: usize, interval: usize) -> f64 {
    (x.transpose() * gains.gain(regime, interval) * x)[(0, 0)]
}

//! Monte Carlo estimation of the quadratic cost functional
//! `E int_0^inf (x'Mx + u'Du) dt` along simulated closed-loop paths.
//!
//! The integral is truncated at the simulation horizon; the reported
//! tail estimate extrapolates the running-cost decay measured over the
//! last decade of the horizon.

use alloc::vec::Vec;

use nalgebra::DVector;
#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use thiserror::Error;

use crate::linalg::mean_and_std_error;
use crate::model::{CostWeights, RegimeSystem};
use crate::simulate::{integrate, FeedbackLaw, IntegrateConfig, Node, SimulateError};
use crate::stochastic::SeededStream;

/// `W(x, u) = x'Mx + u'Du` for the weights of (regime, interval).
pub fn running_cost(
    weights: &CostWeights,
    regime: usize,
    interval: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    let m = weights.state_weight(regime, interval);
    let d = weights.control_weight(regime, interval);
    (x.transpose() * m * x)[(0, 0)] + (u.transpose() * d * u)[(0, 0)]
}

/// Neumaier compensated accumulator; deterministic and insensitive to
/// magnitude ordering of the terms.
#[derive(Debug, Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Trapezoidal cost of one simulated path together with the running
/// cost averaged over the two halves of the horizon's last decade
/// (used for the tail extrapolation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathCost {
    pub cost: f64,
    /// Time-average of W over [0.8 T, 0.9 T].
    pub w_early: f64,
    /// Time-average of W over [0.9 T, T].
    pub w_late: f64,
}

/// Simulates one path and integrates the running cost along it by the
/// trapezoid rule. On a step from `a` to `b` the left value uses the
/// post-jump state and the control at `a`; the right value uses the
/// pre-jump state at `b` with the control and regime held from `a`.
#[allow(clippy::too_many_arguments)]
pub fn path_cost(
    system: &RegimeSystem,
    weights: &CostWeights,
    law: Option<&FeedbackLaw>,
    x0: &DVector<f64>,
    y0: usize,
    horizon: f64,
    dt: f64,
    stream: SeededStream,
) -> Result<PathCost, SimulateError> {
    let cfg = IntegrateConfig {
        system,
        law,
        x0,
        y0,
        eta0: system.det_switch.eta_init,
        t_start: 0.0,
        t_end: horizon,
        dt,
    };
    let mut total = Compensated::default();
    let mut early = Compensated::default();
    let mut late = Compensated::default();
    let t_early = 0.8 * horizon;
    let t_late = 0.9 * horizon;

    let mut prev: Option<(f64, f64, DVector<f64>, usize, usize)> = None;
    integrate(&cfg, stream, &mut |node: &Node| {
        if let Some((t_a, w_a, ref u_a, regime_a, interval_a)) = prev {
            let h = node.t - t_a;
            let w_b = running_cost(weights, regime_a, interval_a, node.x_pre, u_a);
            debug_assert_eq!(regime_a, node.regime_pre);
            let piece = 0.5 * h * (w_a + w_b);
            total.add(piece);
            let mid = 0.5 * (t_a + node.t);
            if mid >= t_late {
                late.add(piece);
            } else if mid >= t_early {
                early.add(piece);
            }
        }
        let w = running_cost(weights, node.regime, node.interval, node.x, node.u);
        prev = Some((node.t, w, node.u.clone(), node.regime, node.interval));
    })?;

    let window = t_late - t_early;
    Ok(PathCost {
        cost: total.value(),
        w_early: early.value() / window,
        w_late: late.value() / (horizon - t_late),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub n_divergent: usize,
    pub horizon: f64,
    pub dt: f64,
    /// Extrapolated contribution of `[T, inf)`; infinite when the
    /// running cost shows no decay over the last horizon decade.
    pub tail_estimate: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("{n_divergent} of {n_paths} paths diverged; refusing to aggregate")]
    TooManyDivergent { n_divergent: usize, n_paths: usize },
    #[error("need at least 2 paths, got {0}")]
    TooFewPaths(usize),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
}

/// Extrapolated tail from the last-decade window averages: with decay
/// rate `r = ln(w_early / w_late) / gap` the tail is `w_late / r`.
fn tail_from_windows(w_early: f64, w_late: f64, horizon: f64) -> f64 {
    if w_late <= 0.0 {
        return 0.0;
    }
    if w_early <= w_late {
        return f64::INFINITY;
    }
    let rate = (w_early / w_late).ln() / (0.1 * horizon);
    w_late / rate
}

/// Aggregates `path_cost` over independent paths. Divergent paths are
/// counted and tolerated up to 1% of the batch; path `p` uses stream
/// id `p`, so the estimate does not depend on evaluation order.
#[allow(clippy::too_many_arguments)]
pub fn estimate_cost(
    system: &RegimeSystem,
    weights: &CostWeights,
    law: Option<&FeedbackLaw>,
    x0: &DVector<f64>,
    y0: usize,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    root_seed: u64,
) -> Result<CostEstimate, CostError> {
    if n_paths < 2 {
        return Err(CostError::TooFewPaths(n_paths));
    }
    let results: Vec<Option<PathCost>> = (0..n_paths)
        .map(|p| {
            path_cost(system, weights, law, x0, y0, horizon, dt, SeededStream::new(root_seed, p as u64))
                .ok()
        })
        .collect();
    aggregate_costs(&results, horizon, dt)
}

/// Order-independent reduction of per-path results (`None` marks a
/// divergent path). Shared by the sequential driver and callers that
/// evaluate paths in parallel.
pub fn aggregate_costs(
    results: &[Option<PathCost>],
    horizon: f64,
    dt: f64,
) -> Result<CostEstimate, CostError> {
    let n_paths = results.len();
    let n_divergent = results.iter().filter(|r| r.is_none()).count();
    if n_divergent * 100 > n_paths {
        return Err(CostError::TooManyDivergent { n_divergent, n_paths });
    }
    let costs: Vec<f64> = results.iter().flatten().map(|pc| pc.cost).collect();
    if costs.len() < 2 {
        return Err(CostError::TooFewPaths(costs.len()));
    }
    let (mean, std_error) = mean_and_std_error(&costs);
    let earlies: Vec<f64> = results.iter().flatten().map(|pc| pc.w_early).collect();
    let lates: Vec<f64> = results.iter().flatten().map(|pc| pc.w_late).collect();
    let w_early = mean_and_std_error(&earlies).0;
    let w_late = mean_and_std_error(&lates).0;
    Ok(CostEstimate {
        mean,
        std_error,
        n_paths: costs.len(),
        n_divergent,
        horizon,
        dt,
        tail_estimate: tail_from_windows(w_early, w_late, horizon),
    })
}

/// Paired cost comparison of two laws under common random numbers:
/// path `p` reuses the same stream for both, so the difference is a
/// low-variance estimate of `cost(a) - cost(b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostComparison {
    pub mean_a: f64,
    pub mean_b: f64,
    pub diff_mean: f64,
    pub diff_std_error: f64,
    pub n_paths: usize,
    pub n_divergent: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn compare_costs(
    system: &RegimeSystem,
    weights: &CostWeights,
    law_a: Option<&FeedbackLaw>,
    law_b: Option<&FeedbackLaw>,
    x0: &DVector<f64>,
    y0: usize,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    root_seed: u64,
) -> Result<CostComparison, CostError> {
    if n_paths < 2 {
        return Err(CostError::TooFewPaths(n_paths));
    }
    let mut a_costs = Vec::with_capacity(n_paths);
    let mut b_costs = Vec::with_capacity(n_paths);
    let mut diffs = Vec::with_capacity(n_paths);
    let mut n_divergent = 0;
    for p in 0..n_paths {
        let stream = SeededStream::new(root_seed, p as u64);
        let ca = path_cost(system, weights, law_a, x0, y0, horizon, dt, stream);
        let cb = path_cost(system, weights, law_b, x0, y0, horizon, dt, stream);
        match (ca, cb) {
            (Ok(ca), Ok(cb)) => {
                a_costs.push(ca.cost);
                b_costs.push(cb.cost);
                diffs.push(ca.cost - cb.cost);
            }
            _ => n_divergent += 1,
        }
    }
    if n_divergent * 100 > n_paths {
        return Err(CostError::TooManyDivergent { n_divergent, n_paths });
    }
    if diffs.len() < 2 {
        return Err(CostError::TooFewPaths(diffs.len()));
    }
    let (diff_mean, diff_std_error) = mean_and_std_error(&diffs);
    Ok(CostComparison {
        mean_a: mean_and_std_error(&a_costs).0,
        mean_b: mean_and_std_error(&b_costs).0,
        diff_mean,
        diff_std_error,
        n_paths: diffs.len(),
        n_divergent,
    })
}

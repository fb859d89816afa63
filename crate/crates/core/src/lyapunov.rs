//! Statistical verification of the stability apparatus behind the
//! synthesized feedback: the one-step discrete Lyapunov operator, the
//! supermartingale property of `v` along switch times, a second-moment
//! growth bound between switches, and stability in probability.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DVector;
#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use rand_distr::{Distribution, StandardNormal};

use crate::control::lyapunov_value;
use crate::linalg::mean_and_std_error;
use crate::model::RegimeSystem;
use crate::riccati::GainSet;
use crate::simulate::{
    integrate, FeedbackLaw, IntegrateConfig, Node, SimulateError, TrajectoryPath,
};
use crate::stochastic::SeededStream;

/// 97.5% normal quantile, for two-sided 95% intervals.
pub const Z_95: f64 = 1.959963984540054;

/// Monte Carlo estimate of the discrete Lyapunov operator at one
/// state: `E[v_{k+1}(y', h', x(t_{k+1}))] - v_k(y, h, x)`, taking the
/// switch at `t_{k+1}` into account. `k` indexes the inter-switch
/// interval, so `t_k` is 0 for `k = 0` and `times[k-1]` otherwise.
#[allow(clippy::too_many_arguments)]
pub fn estimate_discrete_operator(
    system: &RegimeSystem,
    law: Option<&FeedbackLaw>,
    gains: &GainSet,
    x: &DVector<f64>,
    y0: usize,
    eta0: usize,
    k: usize,
    dt: f64,
    n_samples: usize,
    root_seed: u64,
) -> Result<(f64, f64), SimulateError> {
    assert!(k < system.det_switch.times.len(), "k+1 must be a switch index");
    assert!(n_samples >= 2, "need at least 2 samples");
    let t_start = if k == 0 { 0.0 } else { system.det_switch.times[k - 1] };
    let t_end = system.det_switch.times[k];
    let v_here = lyapunov_value(gains, x, y0, k);

    let mut values = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let cfg = IntegrateConfig {
            system,
            law,
            x0: x,
            y0,
            eta0,
            t_start,
            t_end,
            dt,
        };
        let mut last: Option<(DVector<f64>, usize)> = None;
        integrate(&cfg, SeededStream::new(root_seed, s as u64), &mut |node: &Node| {
            last = Some((node.x.clone(), node.regime));
        })?;
        let (x_next, regime) = last.expect("at least one node");
        values.push(lyapunov_value(gains, &x_next, regime, k + 1) - v_here);
    }
    Ok(mean_and_std_error(&values))
}

/// Per-checkpoint statistics of `v` along a batch of paths and the
/// supermartingale verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct SupermartingaleReport {
    /// Checkpoints: 0, each switch time within the horizon, and the
    /// final time.
    pub times: Vec<f64>,
    pub means: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// True iff each step is non-increasing within two pooled
    /// standard errors.
    pub verdict: bool,
}

/// Evaluates `v_k` at every checkpoint of every path (post-switch
/// state and interval) and checks that the mean sequence is
/// non-increasing within statistical noise.
pub fn supermartingale_check(
    paths: &[TrajectoryPath],
    gains: &GainSet,
    system: &RegimeSystem,
) -> SupermartingaleReport {
    let horizon = paths
        .first()
        .and_then(|p| p.grid.last().copied())
        .unwrap_or(0.0);
    let mut times = vec![0.0];
    times.extend(
        system
            .det_switch
            .times
            .iter()
            .copied()
            .filter(|&t| t > 0.0 && t < horizon),
    );
    if horizon > 0.0 {
        times.push(horizon);
    }

    let tol = 1e-9 * (1.0 + horizon);
    let mut means = Vec::with_capacity(times.len());
    let mut std_errors = Vec::with_capacity(times.len());
    for (j, &t) in times.iter().enumerate() {
        let interval = system.det_switch.interval_of(t - tol)
            + usize::from(system.det_switch.times.iter().any(|&s| (s - t).abs() <= tol));
        let values: Vec<f64> = paths
            .iter()
            .filter_map(|p| {
                let idx = p.grid_index_at(t, tol)?;
                Some(lyapunov_value(gains, &p.states[idx], p.regimes[idx], interval))
            })
            .collect();
        let (mean, se) = mean_and_std_error(&values);
        means.push(mean);
        std_errors.push(se);
        let _ = j;
    }

    let verdict = means
        .windows(2)
        .zip(std_errors.windows(2))
        .all(|(m, s)| {
            let pooled = (s[0] * s[0] + s[1] * s[1]).sqrt();
            m[1] <= m[0] + 2.0 * pooled
        });
    SupermartingaleReport { times, means, std_errors, verdict }
}

/// Second-moment growth bound between consecutive switch times:
/// `7 E|x(t_k)|^2 exp(7 L^2 (Delta + 8))` must dominate the empirical
/// supremum of `E|x(t)|^2` over the interval.
pub fn second_moment_growth_bound(second_moment_at_start: f64, lipschitz: f64, delta: f64) -> f64 {
    7.0 * second_moment_at_start * (7.0 * lipschitz * lipschitz * (delta + 8.0)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBoundRow {
    pub k: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Supremum over the base grid of the mean squared state norm.
    pub empirical_sup: f64,
    pub bound: f64,
    pub satisfied: bool,
}

/// Checks the growth bound on each inter-switch interval of a batch.
/// Only base grid times (multiples of `dt`) are compared, since event
/// insertions differ across paths.
pub fn growth_bound_check(
    paths: &[TrajectoryPath],
    system: &RegimeSystem,
    lipschitz: f64,
    dt: f64,
) -> Vec<IntervalBoundRow> {
    let horizon = match paths.first().and_then(|p| p.grid.last().copied()) {
        Some(t) => t,
        None => return Vec::new(),
    };
    let mut boundaries = vec![0.0];
    boundaries.extend(
        system
            .det_switch
            .times
            .iter()
            .copied()
            .filter(|&t| t > 0.0 && t < horizon),
    );
    boundaries.push(horizon);

    let tol = dt * 1e-6;
    let n_steps = (horizon / dt).round() as usize;
    // Mean |x|^2 on the shared base grid; pointer scan per path.
    let mut sums = vec![0.0_f64; n_steps + 1];
    for path in paths {
        let mut idx = 0;
        for (j, sum) in sums.iter_mut().enumerate() {
            let target = j as f64 * dt;
            while idx + 1 < path.grid.len() && path.grid[idx] < target - tol {
                idx += 1;
            }
            if (path.grid[idx] - target).abs() <= tol {
                *sum += path.states[idx].norm_squared();
            }
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / paths.len() as f64).collect();

    boundaries
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let (t_a, t_b) = (w[0], w[1]);
            let j_a = (t_a / dt).ceil() as usize;
            let j_b = ((t_b / dt).floor() as usize).min(n_steps);
            let start_moment = means[j_a.min(n_steps)];
            let empirical_sup = means[j_a..=j_b].iter().copied().fold(0.0, f64::max);
            let bound = second_moment_growth_bound(start_moment, lipschitz, t_b - t_a);
            IntervalBoundRow {
                k,
                t_start: t_a,
                t_end: t_b,
                empirical_sup,
                bound,
                satisfied: empirical_sup <= bound,
            }
        })
        .collect()
}

/// Wilson-score 95% upper confidence bound for a binomial proportion.
pub fn wilson_upper(successes: usize, trials: usize) -> f64 {
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z_95 * Z_95;
    let denom = 1.0 + z2 / n;
    let center = p + z2 / (2.0 * n);
    let half = Z_95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center + half) / denom).min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExceedanceRow {
    pub x0: DVector<f64>,
    pub regime: usize,
    pub n_exceed: usize,
    pub n_paths: usize,
    pub probability: f64,
    pub wilson_upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub rows: Vec<ExceedanceRow>,
    /// Worst-case Wilson upper bound over the sampled initial states.
    pub max_exceed_prob: f64,
    pub threshold: f64,
    pub radius: f64,
    pub horizon: f64,
}

/// Estimates `P{ sup_{t <= T} |x(t)| > eps1 }` from initial states
/// sampled uniformly on the sphere of radius `delta` (regimes sampled
/// uniformly). Divergent paths count as exceedances.
#[allow(clippy::too_many_arguments)]
pub fn stability_probability_estimate(
    system: &RegimeSystem,
    law: Option<&FeedbackLaw>,
    eps1: f64,
    delta: f64,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    n_x0: usize,
    root_seed: u64,
) -> Result<StabilityReport, SimulateError> {
    assert!(eps1 > 0.0 && delta > 0.0, "threshold and radius must be positive");
    let m = system.state_dim;
    let mut rows = Vec::with_capacity(n_x0);
    for idx in 0..n_x0 {
        let base = SeededStream::new(root_seed, idx as u64);
        let mut init_rng = base.substream(0).rng();
        let mut x0 = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut init_rng));
        let norm = x0.norm();
        if norm == 0.0 {
            x0[0] = 1.0;
        } else {
            x0.unscale_mut(norm);
        }
        x0.scale_mut(delta);
        let regime = {
            let u: f64 = rand::Rng::random(&mut init_rng);
            ((u * system.n_regimes as f64) as usize).min(system.n_regimes - 1)
        };

        let mut n_exceed = 0;
        for p in 0..n_paths {
            let cfg = IntegrateConfig {
                system,
                law,
                x0: &x0,
                y0: regime,
                eta0: system.det_switch.eta_init,
                t_start: 0.0,
                t_end: horizon,
                dt,
            };
            let mut sup = 0.0_f64;
            let run = integrate(&cfg, base.substream(1 + p as u64), &mut |node: &Node| {
                sup = sup.max(node.x.norm()).max(node.x_pre.norm());
            });
            match run {
                Ok(()) => {
                    if sup > eps1 {
                        n_exceed += 1;
                    }
                }
                Err(SimulateError::Diverged { .. }) => n_exceed += 1,
                Err(other) => return Err(other),
            }
        }
        rows.push(ExceedanceRow {
            x0,
            regime,
            n_exceed,
            n_paths,
            probability: n_exceed as f64 / n_paths as f64,
            wilson_upper: wilson_upper(n_exceed, n_paths),
        });
    }
    let max_exceed_prob = rows.iter().map(|r| r.wilson_upper).fold(0.0, f64::max);
    Ok(StabilityReport {
        rows,
        max_exceed_prob,
        threshold: eps1,
        radius: delta,
        horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{closed_loop, synthesize_feedback};
    use crate::model::{CostWeights, DeterministicSwitchSpec};
    use crate::riccati::{solve_coupled_care, SolveOptions};
    use crate::simulate::simulate_batch;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn with_switches(mut system: RegimeSystem, times: Vec<f64>) -> RegimeSystem {
        let m = system.state_dim;
        system.det_switch = DeterministicSwitchSpec {
            times,
            jump_maps: vec![DMatrix::identity(m, m)],
            ..DeterministicSwitchSpec::empty(m)
        };
        system
    }

    fn scalar_closed_loop() -> (RegimeSystem, CostWeights, GainSet, FeedbackLaw) {
        let (mut system, weights) = crate::simulate::tests::scalar_decay_system();
        system.input[0] = DMatrix::from_element(1, 1, 1.0);
        let gains = solve_coupled_care(&system, &weights, &SolveOptions::default()).unwrap();
        let law = synthesize_feedback(&system, &weights, &gains).unwrap();
        let cl = closed_loop(&system, &law);
        (cl, weights, gains, law)
    }

    #[test]
    fn frozen_system_has_zero_operator_and_flat_martingale() {
        let (base, _) = crate::simulate::tests::scalar_decay_system();
        let mut system = with_switches(base, vec![1.0, 2.0, 3.0]);
        system.drift[0][(0, 0)] = 0.0;
        let gains = GainSet::new(vec![vec![DMatrix::from_element(1, 1, 1.0)]]);
        let x = DVector::from_element(1, 1.0);
        let (est, se) =
            estimate_discrete_operator(&system, None, &gains, &x, 0, 0, 0, 0.01, 16, 5).unwrap();
        assert_eq!(est, 0.0);
        assert_eq!(se, 0.0);

        let paths = simulate_batch(&system, None, &x, 0, 3.0, 0.01, 8, 5).unwrap();
        let report = supermartingale_check(&paths, &gains, &system);
        assert!(report.verdict);
        assert!(report.means.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn stable_closed_loop_operator_is_negative() {
        let (cl, _, gains, law) = scalar_closed_loop();
        let mut system = with_switches(cl, vec![1.0]);
        system.diffusion[0] = vec![DMatrix::from_element(1, 1, 0.2)];
        let x = DVector::from_element(1, 1.0);
        let (est, se) = estimate_discrete_operator(
            &system, Some(&law), &gains, &x, 0, 0, 0, 1e-3, 400, 9,
        )
        .unwrap();
        assert!(est + 3.0 * se < 0.0, "estimate {est} +/- {se}");
    }

    #[test]
    fn operator_estimate_is_linear_in_the_gain() {
        let (cl, _, gains, law) = scalar_closed_loop();
        let system = with_switches(cl, vec![1.0]);
        let doubled = GainSet::new(
            gains
                .gains
                .iter()
                .map(|row| row.iter().map(|g| g.scale(2.0)).collect())
                .collect(),
        );
        let x = DVector::from_element(1, 1.0);
        let (a, _) = estimate_discrete_operator(
            &system, Some(&law), &gains, &x, 0, 0, 0, 1e-2, 50, 21,
        )
        .unwrap();
        let (b, _) = estimate_discrete_operator(
            &system, Some(&law), &doubled, &x, 0, 0, 0, 1e-2, 50, 21,
        )
        .unwrap();
        assert_relative_eq!(b, 2.0 * a, epsilon = 1e-12);
    }

    #[test]
    fn closed_loop_v_sequence_decreases_and_open_loop_fails() {
        let (cl, _, gains, law) = scalar_closed_loop();
        let system = with_switches(cl, (1..=5).map(f64::from).collect());
        let x = DVector::from_element(1, 1.0);
        let paths = simulate_batch(&system, Some(&law), &x, 0, 5.0, 1e-3, 4, 0).unwrap();
        let report = supermartingale_check(&paths, &gains, &system);
        assert!(report.verdict);
        assert!(report.means.windows(2).all(|w| w[1] < w[0]));

        let (base, _) = crate::simulate::tests::scalar_decay_system();
        let mut unstable = with_switches(base, (1..=5).map(f64::from).collect());
        unstable.drift[0][(0, 0)] = 1.0;
        let ones = GainSet::new(vec![vec![DMatrix::from_element(1, 1, 1.0)]]);
        let paths = simulate_batch(&unstable, None, &x, 0, 5.0, 1e-3, 4, 0).unwrap();
        let report = supermartingale_check(&paths, &ones, &unstable);
        assert!(!report.verdict);
    }

    #[test]
    fn growth_bound_dominates_and_is_monotone_in_the_gap() {
        let (system, _) = crate::simulate::tests::scalar_decay_system();
        let system = with_switches(system, vec![1.0, 2.0]);
        let x = DVector::from_element(1, 1.0);
        let paths = simulate_batch(&system, None, &x, 0, 3.0, 0.01, 4, 0).unwrap();
        let rows = growth_bound_check(&paths, &system, 1.0, 0.01);
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.satisfied));
        assert!(rows[0].bound > rows[0].empirical_sup * 100.0);
        assert!(second_moment_growth_bound(1.0, 1.0, 2.0) > second_moment_growth_bound(1.0, 1.0, 1.0));
    }

    #[test]
    fn unreachable_threshold_gives_zero_probability() {
        let (cl, _, _, law) = scalar_closed_loop();
        let report = stability_probability_estimate(
            &cl, Some(&law), 1e15, 0.01, 2.0, 0.01, 20, 3, 7,
        )
        .unwrap();
        assert!(report.rows.iter().all(|r| r.n_exceed == 0));
        assert!(report.max_exceed_prob < 0.2); // Wilson bound at 0/20
    }

    #[test]
    fn unstable_open_loop_exceeds_with_certainty() {
        let (base, _) = crate::simulate::tests::scalar_decay_system();
        let mut system = base;
        system.drift[0][(0, 0)] = 1.0;
        let report = stability_probability_estimate(
            &system, None, 1.0, 0.5, 10.0, 0.01, 10, 2, 7,
        )
        .unwrap();
        assert!(report.rows.iter().all(|r| r.probability == 1.0));
        assert!(report.max_exceed_prob > 0.99);
    }

    #[test]
    fn wilson_bound_behaves_at_the_extremes() {
        assert!(wilson_upper(0, 1000) < 0.004);
        assert_eq!(wilson_upper(1000, 1000), 1.0);
        let half = wilson_upper(500, 1000);
        assert!(half > 0.5 && half < 0.54);
    }
}

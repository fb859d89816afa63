//! Coupled Riccati-type equations for the optimal quadratic Lyapunov
//! matrices: the autonomous algebraic system and the finite-horizon
//! backward ODE.
//!
//! The algebraic equation per (regime i, interval k) reads
//!
//! ```text
//! G A + A'G - G S G + sum_l Sigma' G Sigma + sum_j pi C' G C
//!   + sum_{j != i} q_ij [K_ij' G_jk K_ij + sum_s Qs' G_jk Qs - G_ik] + M = 0
//! ```
//!
//! with `S = B D^-1 B'`. Cross-regime coupling uses `G_jk` (the value
//! after the jump is evaluated in the target regime).

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use thiserror::Error;

use crate::linalg::{
    inverse, lyapunov_like_operator, solve_vectorized, symmetric_eigen_bounds, symmetrize,
};
use crate::model::{CostWeights, RegimeSystem};

/// Quadratic Lyapunov matrices per (regime, interval) with the
/// Frobenius residual of the defining equation.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSet {
    /// `G[i][k]`, symmetric m x m.
    pub gains: Vec<Vec<DMatrix<f64>>>,
    /// Frobenius norm of the equation residual per (i, k); empty when
    /// unknown (e.g. for assembled series).
    pub residual: Vec<Vec<f64>>,
}

impl GainSet {
    pub fn new(gains: Vec<Vec<DMatrix<f64>>>) -> Self {
        Self { gains, residual: Vec::new() }
    }

    pub fn gain(&self, regime: usize, interval: usize) -> &DMatrix<f64> {
        let row = &self.gains[regime];
        &row[interval.min(row.len() - 1)]
    }

    pub fn n_regimes(&self) -> usize {
        self.gains.len()
    }

    pub fn n_intervals(&self) -> usize {
        self.gains.iter().map(|r| r.len()).max().unwrap_or(0)
    }

    /// Eigenvalue sandwich constants (c1, c2) of `x'Gx` for one block:
    /// `c1 |x|^2 <= x'Gx <= c2 |x|^2`.
    pub fn quadratic_bounds(&self, regime: usize, interval: usize) -> (f64, f64) {
        symmetric_eigen_bounds(self.gain(regime, interval))
    }

    pub fn is_positive_definite(&self) -> bool {
        self.gains
            .iter()
            .flatten()
            .all(|g| symmetric_eigen_bounds(g).0 > 0.0)
    }

    pub fn max_asymmetry(&self) -> f64 {
        self.gains
            .iter()
            .flatten()
            .map(|g| (g - g.transpose()).amax())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Residual tolerance in Frobenius norm.
    pub tol: f64,
    /// Outer (cross-regime sweep) iteration cap.
    pub max_outer: usize,
    /// Damping factor in (0, 1] applied to outer updates.
    pub relaxation: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_outer: 500, relaxation: 1.0 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RiccatiError {
    #[error("solver did not converge within the iteration cap (residual {residual:e})")]
    NonConvergence { residual: f64 },
    #[error("Newton iterate lost positive definiteness at regime {regime}, interval {interval}")]
    IndefiniteIterate { regime: usize, interval: usize },
    #[error("control weight D is singular at regime {regime}, interval {interval}")]
    SingularControlWeight { regime: usize, interval: usize },
    #[error("linearized system is singular")]
    SingularLinearization,
    #[error("Riccati ODE diverged at t = {time}")]
    OdeDivergence { time: f64 },
}

/// `S[i][k] = B_i D_ik^-1 B_i'` for every (regime, interval).
pub(crate) fn control_quadratic_terms(
    system: &RegimeSystem,
    weights: &CostWeights,
) -> Result<Vec<Vec<DMatrix<f64>>>, RiccatiError> {
    let nk = weights.n_intervals();
    let mut out = Vec::with_capacity(system.n_regimes);
    for i in 0..system.n_regimes {
        let mut row = Vec::with_capacity(nk);
        for k in 0..nk {
            let d_inv = inverse(weights.control_weight(i, k))
                .ok_or(RiccatiError::SingularControlWeight { regime: i, interval: k })?;
            row.push(&system.input[i] * d_inv * system.input[i].transpose());
        }
        out.push(row);
    }
    Ok(out)
}

/// Cross-regime coupling constant for regime `i` at interval `k`,
/// holding the other regimes' gains fixed:
/// `sum_{j != i} q_ij [K_ij' G_jk K_ij + sum_s Qs' G_jk Qs]`.
fn frozen_coupling(
    system: &RegimeSystem,
    gains: &[Vec<DMatrix<f64>>],
    i: usize,
    k: usize,
) -> DMatrix<f64> {
    let m = system.state_dim;
    let mut acc = DMatrix::zeros(m, m);
    for j in 0..system.n_regimes {
        if j == i {
            continue;
        }
        let q_ij = system.generator[(i, j)];
        if q_ij == 0.0 {
            continue;
        }
        let g_j = &gains[j][k.min(gains[j].len() - 1)];
        let k_ij = &system.regime_jump.transition_maps[i][j];
        acc += (k_ij.transpose() * g_j * k_ij).scale(q_ij);
        for qs in &system.regime_jump.random_maps {
            acc += (qs.transpose() * g_j * qs).scale(q_ij);
        }
    }
    acc
}

/// Residual matrices of the coupled algebraic system for a candidate
/// gain set, one per (regime, interval).
pub fn care_residual(
    system: &RegimeSystem,
    weights: &CostWeights,
    gains: &GainSet,
) -> Result<Vec<Vec<DMatrix<f64>>>, RiccatiError> {
    let s_mats = control_quadratic_terms(system, weights)?;
    Ok(residual_matrices(system, weights, &s_mats, &gains.gains))
}

fn residual_matrices(
    system: &RegimeSystem,
    weights: &CostWeights,
    s_mats: &[Vec<DMatrix<f64>>],
    gains: &[Vec<DMatrix<f64>>],
) -> Vec<Vec<DMatrix<f64>>> {
    let nk = gains.iter().map(|r| r.len()).max().unwrap_or(1);
    let mut out = Vec::with_capacity(system.n_regimes);
    for i in 0..system.n_regimes {
        let a = &system.drift[i];
        let mut row = Vec::with_capacity(nk);
        for k in 0..nk {
            let g = &gains[i][k.min(gains[i].len() - 1)];
            let s = &s_mats[i][k.min(s_mats[i].len() - 1)];
            let mut res = g * a + a.transpose() * g - g * s * g;
            for sigma in &system.diffusion[i] {
                res += sigma.transpose() * g * sigma;
            }
            for mark in &system.poisson[i] {
                res += (mark.coeff.transpose() * g * &mark.coeff).scale(mark.weight);
            }
            res += frozen_coupling(system, gains, i, k);
            // -G_ik sum_{j != i} q_ij = q_ii G_ik
            res += g.scale(system.generator[(i, i)]);
            res += weights.state_weight(i, k);
            row.push(res);
        }
        out.push(row);
    }
    out
}

pub(crate) fn max_frobenius(mats: &[Vec<DMatrix<f64>>]) -> f64 {
    mats.iter()
        .flatten()
        .map(|m| m.norm())
        .fold(0.0, f64::max)
}

/// Ingredients of one regime's equation with cross-regime coupling
/// frozen into the constant term.
struct RegimeEquation<'a> {
    drift: &'a DMatrix<f64>,
    s: &'a DMatrix<f64>,
    diffusion: &'a [DMatrix<f64>],
    poisson: &'a [crate::model::PoissonMark],
    /// Coefficient of the identity-shift term (`q_ii` in the coupled
    /// system, 0 for a fully decoupled equation).
    shift: f64,
    /// Constant term: `M` plus frozen coupling.
    constant: DMatrix<f64>,
}

impl RegimeEquation<'_> {
    fn residual(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let mut res = g * self.drift + self.drift.transpose() * g - g * self.s * g;
        for sigma in self.diffusion {
            res += sigma.transpose() * g * sigma;
        }
        for mark in self.poisson {
            res += (mark.coeff.transpose() * g * &mark.coeff).scale(mark.weight);
        }
        res += g.scale(self.shift);
        res += &self.constant;
        res
    }

    fn quad_terms(&self) -> Vec<(f64, &DMatrix<f64>)> {
        let mut terms: Vec<(f64, &DMatrix<f64>)> =
            self.diffusion.iter().map(|s| (1.0, s)).collect();
        terms.extend(self.poisson.iter().map(|mk| (mk.weight, &mk.coeff)));
        terms
    }

    /// Warm start: follow the backward Riccati flow `dG/ds = R(G)`
    /// from `G = 0` until the residual is small enough for Newton.
    fn flow_warm_start(&self) -> DMatrix<f64> {
        let m = self.drift.nrows();
        let scale = self.drift.norm()
            + self.s.norm()
            + self.diffusion.iter().map(|s| s.norm() * s.norm()).sum::<f64>()
            + self
                .poisson
                .iter()
                .map(|mk| mk.weight * mk.coeff.norm() * mk.coeff.norm())
                .sum::<f64>()
            + self.shift.abs()
            + 1.0;
        let target = 1e-2 * (1.0 + self.constant.norm());
        let mut g = DMatrix::zeros(m, m);
        let mut h = 0.2 / scale;
        for _ in 0..200_000 {
            let k1 = self.residual(&g);
            if k1.norm() <= target {
                break;
            }
            let k2 = self.residual(&(&g + k1.scale(0.5 * h)));
            let k3 = self.residual(&(&g + k2.scale(0.5 * h)));
            let k4 = self.residual(&(&g + k3.scale(h)));
            let step = (k1 + k2.scale(2.0) + k3.scale(2.0) + k4).scale(h / 6.0);
            if !step.iter().all(|v| v.is_finite()) {
                h *= 0.5;
                continue;
            }
            g = symmetrize(&(&g + step));
        }
        g
    }

    /// Newton iteration: each step solves the linearized
    /// Lyapunov-type equation through the m^2 x m^2 system.
    fn solve_newton(
        &self,
        init: Option<&DMatrix<f64>>,
        tol: f64,
        location: (usize, usize),
    ) -> Result<DMatrix<f64>, RiccatiError> {
        let mut g = match init {
            Some(g0) => g0.clone(),
            None => self.flow_warm_start(),
        };
        let mut res_norm = self.residual(&g).norm();
        if res_norm > 1e-1 * (1.0 + self.constant.norm()) && init.is_some() {
            // A poor caller-provided iterate: restart from the flow.
            let flow = self.flow_warm_start();
            if self.residual(&flow).norm() < res_norm {
                g = flow;
                res_norm = self.residual(&g).norm();
            }
        }
        let quad = self.quad_terms();
        for _ in 0..100 {
            if res_norm <= tol {
                return Ok(g);
            }
            let a_cl = self.drift - self.s * &g;
            let op = lyapunov_like_operator(&a_cl, &quad, self.shift);
            let rhs = -(&self.constant + &g * self.s * &g);
            let next = solve_vectorized(&op, &rhs).ok_or(RiccatiError::SingularLinearization)?;
            // Damped update: halve the step while the residual grows.
            let mut alpha = 1.0;
            let mut candidate = next.clone();
            let mut cand_norm = self.residual(&candidate).norm();
            let mut halvings = 0;
            while (!cand_norm.is_finite() || cand_norm > res_norm) && halvings < 40 {
                alpha *= 0.5;
                candidate = &g + (&next - &g).scale(alpha);
                cand_norm = self.residual(&candidate).norm();
                halvings += 1;
            }
            if !cand_norm.is_finite() {
                return Err(RiccatiError::IndefiniteIterate {
                    regime: location.0,
                    interval: location.1,
                });
            }
            if cand_norm >= res_norm && res_norm > tol {
                // Stalled: accept only if already essentially converged.
                if res_norm <= tol * 10.0 {
                    return Ok(g);
                }
                return Err(RiccatiError::NonConvergence { residual: res_norm });
            }
            g = candidate;
            res_norm = cand_norm;
        }
        if res_norm <= tol * 10.0 {
            Ok(g)
        } else {
            Err(RiccatiError::NonConvergence { residual: res_norm })
        }
    }
}

fn regime_equation<'a>(
    system: &'a RegimeSystem,
    s_mats: &'a [Vec<DMatrix<f64>>],
    i: usize,
    k: usize,
    shift: f64,
    constant: DMatrix<f64>,
) -> RegimeEquation<'a> {
    RegimeEquation {
        drift: &system.drift[i],
        s: &s_mats[i][k.min(s_mats[i].len() - 1)],
        diffusion: &system.diffusion[i],
        poisson: &system.poisson[i],
        shift,
        constant,
    }
}

/// Solves one regime's equation with frozen coupling; used by the
/// perturbation module for decoupled leading-order solves.
#[allow(clippy::too_many_arguments)]
pub(crate) fn solve_frozen_regime(
    system: &RegimeSystem,
    s_mats: &[Vec<DMatrix<f64>>],
    i: usize,
    k: usize,
    shift: f64,
    constant: DMatrix<f64>,
    init: Option<&DMatrix<f64>>,
    tol: f64,
) -> Result<DMatrix<f64>, RiccatiError> {
    regime_equation(system, s_mats, i, k, shift, constant).solve_newton(init, tol, (i, k))
}

/// Gauss-Seidel solve of the coupled algebraic system: each sweep
/// freezes the cross-regime coupling and solves every regime's own
/// equation by Newton, until the joint residual meets `tol`.
pub fn solve_coupled_care(
    system: &RegimeSystem,
    weights: &CostWeights,
    opts: &SolveOptions,
) -> Result<GainSet, RiccatiError> {
    let s_mats = control_quadratic_terms(system, weights)?;
    let nk = weights.n_intervals();
    let n = system.n_regimes;
    let inner_tol = (opts.tol * 0.1).max(1e-14);

    // Init: per-regime solves with coupling dropped entirely.
    let mut gains: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(nk);
        for k in 0..nk {
            let eq = regime_equation(system, &s_mats, i, k, 0.0, weights.state_weight(i, k).clone());
            let g0 = eq
                .solve_newton(None, inner_tol, (i, k))
                .unwrap_or_else(|_| weights.state_weight(i, k).clone());
            row.push(g0);
        }
        gains.push(row);
    }

    let mut last_residual = f64::INFINITY;
    for _ in 0..opts.max_outer {
        let res = max_frobenius(&residual_matrices(system, weights, &s_mats, &gains));
        if res <= opts.tol {
            let residual = residual_matrices(system, weights, &s_mats, &gains)
                .iter()
                .map(|row| row.iter().map(|m| m.norm()).collect())
                .collect();
            return Ok(GainSet { gains, residual });
        }
        last_residual = res;
        for i in 0..n {
            for k in 0..nk {
                let mut constant = weights.state_weight(i, k).clone();
                constant += frozen_coupling(system, &gains, i, k);
                let eq =
                    regime_equation(system, &s_mats, i, k, system.generator[(i, i)], constant);
                let g_new = eq.solve_newton(Some(&gains[i][k]), inner_tol, (i, k))?;
                if opts.relaxation < 1.0 {
                    let step = (&g_new - &gains[i][k]).scale(opts.relaxation);
                    gains[i][k] += step;
                } else {
                    gains[i][k] = g_new;
                }
            }
        }
    }
    let res = max_frobenius(&residual_matrices(system, weights, &s_mats, &gains));
    if res <= opts.tol {
        let residual = residual_matrices(system, weights, &s_mats, &gains)
            .iter()
            .map(|row| row.iter().map(|m| m.norm()).collect())
            .collect();
        return Ok(GainSet { gains, residual });
    }
    Err(RiccatiError::NonConvergence { residual: res.min(last_residual) })
}

/// Finite-horizon backward solution of the Riccati ODE with terminal
/// condition `G(T) = 0`, returned on an ascending time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiOdeSolution {
    pub times: Vec<f64>,
    /// `gains[j]` holds the gain set at `times[j]`.
    pub gains: Vec<GainSet>,
}

impl RiccatiOdeSolution {
    /// Gain set at t = 0 (the infinite-horizon surrogate).
    pub fn initial(&self) -> &GainSet {
        &self.gains[0]
    }
}

/// Integrates `dG/dt = -R(G)` backwards from `G(T) = 0` by classical
/// RK4 on a uniform grid of step at most `dt_g`.
pub fn solve_riccati_ode(
    system: &RegimeSystem,
    weights: &CostWeights,
    horizon: f64,
    dt_g: f64,
) -> Result<RiccatiOdeSolution, RiccatiError> {
    assert!(horizon > 0.0 && dt_g > 0.0, "horizon and step must be positive");
    let s_mats = control_quadratic_terms(system, weights)?;
    let nk = weights.n_intervals();
    let n = system.n_regimes;
    let m = system.state_dim;
    let n_steps = (horizon / dt_g).ceil() as usize;
    let h = horizon / n_steps as f64;

    let zero: Vec<Vec<DMatrix<f64>>> = vec![vec![DMatrix::zeros(m, m); nk]; n];
    let deriv = |g: &Vec<Vec<DMatrix<f64>>>| residual_matrices(system, weights, &s_mats, g);
    let axpy = |g: &Vec<Vec<DMatrix<f64>>>, d: &Vec<Vec<DMatrix<f64>>>, c: f64| -> Vec<Vec<DMatrix<f64>>> {
        g.iter()
            .zip(d)
            .map(|(gr, dr)| gr.iter().zip(dr).map(|(gm, dm)| gm + dm.scale(c)).collect())
            .collect()
    };

    let mut g = zero;
    let mut stored: Vec<GainSet> = Vec::with_capacity(n_steps + 1);
    stored.push(GainSet::new(g.clone()));
    for step in 0..n_steps {
        // Backward in t equals forward in s = T - t with dG/ds = R(G).
        let k1 = deriv(&g);
        let k2 = deriv(&axpy(&g, &k1, 0.5 * h));
        let k3 = deriv(&axpy(&g, &k2, 0.5 * h));
        let k4 = deriv(&axpy(&g, &k3, h));
        for i in 0..n {
            for k in 0..nk {
                let incr = (&k1[i][k]
                    + k2[i][k].scale(2.0)
                    + k3[i][k].scale(2.0)
                    + &k4[i][k])
                    .scale(h / 6.0);
                g[i][k] += incr;
                g[i][k] = symmetrize(&g[i][k]);
                if !g[i][k].iter().all(|v| v.is_finite()) {
                    return Err(RiccatiError::OdeDivergence {
                        time: horizon - (step + 1) as f64 * h,
                    });
                }
            }
        }
        stored.push(GainSet::new(g.clone()));
    }
    // stored[j] holds G at s = j h, i.e. t = T - j h; flip to ascending t.
    stored.reverse();
    let times = (0..=n_steps).map(|j| j as f64 * h).collect();
    Ok(RiccatiOdeSolution { times, gains: stored })
}

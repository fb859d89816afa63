//! Small-parameter series solutions of the coupled gain equations and
//! the majorant estimate of the convergence radius.
//!
//! Two regimes of smallness are supported:
//!
//! * Case I — rare regime transitions: the generator is `eps * r`.
//!   Substituting `G = sum_r eps^r G^(r)` and matching powers of eps
//!   decouples the leading order into per-regime algebraic equations;
//!   every higher order is a linear Lyapunov-type solve whose
//!   right-hand side collects the coupling applied to `G^(r-1)` and
//!   the quadratic convolution `sum_q G^(q) S G^(r-q)`.
//! * Case II — small state jumps: `K = I + eps*K_hat`,
//!   `Qs = eps*Q_hat`. The leading order keeps the full transition
//!   intensities (coupling `sum_j q_ij (G_j - G_i)`); higher orders
//!   form one joint linear system over all regimes, with the jump
//!   maps contributing through `G^(r-1)` and `G^(r-2)`.
//!
//! Convergence is certified by a scalar majorant: with
//! `L_r = max_{i,k} ||G^(r)||_F` and the smallest `c` satisfying
//! `L_r <= c [sum_{q=1}^{r-1} L_q L_{r-q} + L_{r-1}]`, the generating
//! function of the majorant sequence solves
//! `rho^2 + (a + eps) rho + b = 0` with `a = -(1/c + 2 L0)` and
//! `b = L0/c + L0^2`; both roots stay real for
//! `eps <= radius = -a - 2 sqrt(b)`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use thiserror::Error;

use crate::linalg::{lyapunov_like_operator, solve_vectorized, symmetrize, unvectorize, vectorize};
use crate::model::{CostWeights, RegimeJumpSpec, RegimeSystem};
use crate::riccati::{
    control_quadratic_terms, solve_coupled_care, solve_frozen_regime, GainSet, RiccatiError,
    SolveOptions,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Majorant {
    /// Frobenius norm of the leading-order block, maximized over
    /// (regime, interval).
    pub l0: f64,
    /// Smallest constant bounding the coefficient recursion.
    pub c: f64,
    pub a: f64,
    pub b: f64,
    /// Smaller root of the quadratic at eps = 0; equals `l0`.
    pub rho0: f64,
    /// Largest eps keeping the majorant roots real.
    pub radius: f64,
}

/// Majorant data from the leading norm and recursion constant.
pub fn majorant_radius(l0: f64, c: f64) -> Majorant {
    assert!(l0 > 0.0 && c > 0.0, "majorant inputs must be positive");
    let a = -(1.0 / c + 2.0 * l0);
    let b = l0 / c + l0 * l0;
    let disc = (a * a / 4.0 - b).max(0.0);
    Majorant {
        l0,
        c,
        a,
        b,
        rho0: -a / 2.0 - disc.sqrt(),
        radius: -a - 2.0 * b.sqrt(),
    }
}

/// Majorant sequence `rho_0 = L0`,
/// `rho_r = c [sum_{q=1}^{r-1} rho_q rho_{r-q} + rho_{r-1}]`; it
/// dominates the coefficient norms by construction of `c`.
pub fn majorant_sequence(maj: &Majorant, order: usize) -> Vec<f64> {
    let mut rho = vec![maj.l0];
    for r in 1..=order {
        let conv: f64 = (1..r).map(|q| rho[q] * rho[r - q]).sum();
        rho.push(maj.c * (conv + rho[r - 1]));
    }
    rho
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSolution {
    /// `coeffs[r][i][k]` is the order-r coefficient for (regime i,
    /// interval k).
    pub coeffs: Vec<Vec<Vec<DMatrix<f64>>>>,
    pub eps: f64,
    pub order: usize,
    pub majorant: Majorant,
}

impl SeriesSolution {
    /// `L_r` per order.
    pub fn coefficient_norms(&self) -> Vec<f64> {
        self.coeffs
            .iter()
            .map(|blocks| {
                blocks
                    .iter()
                    .flatten()
                    .map(|g| g.norm())
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PerturbError {
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error("system does not match the assumed eps-decomposition: {0}")]
    DecompositionMismatch(&'static str),
    #[error("singular linear operator at series order {order}")]
    SingularOrder { order: usize },
    #[error("leading-order solution is not positive definite")]
    IndefiniteLeadingOrder,
}

const DECOMPOSITION_TOL: f64 = 1e-12;

fn majorant_from_norms(norms: &[f64]) -> Majorant {
    let l0 = norms.first().copied().unwrap_or(0.0);
    if l0 <= 0.0 {
        // Degenerate series (zero leading order): every coefficient
        // vanishes, so any eps converges.
        return Majorant { l0: 0.0, c: 0.0, a: 0.0, b: 0.0, rho0: 0.0, radius: f64::INFINITY };
    }
    let mut c = 0.0_f64;
    for r in 1..norms.len() {
        let conv: f64 = (1..r).map(|q| norms[q] * norms[r - q]).sum();
        let denom = conv + norms[r - 1];
        if denom > 0.0 {
            c = c.max(norms[r] / denom);
        }
    }
    if c <= 0.0 {
        // No higher-order growth observed; pick a unit constant so the
        // majorant is still well defined.
        c = 1.0;
    }
    majorant_radius(l0, c)
}

/// Case I series: rare transitions, `generator = eps * r_intensities`.
pub fn solve_case1(
    system: &RegimeSystem,
    weights: &CostWeights,
    r_intensities: &DMatrix<f64>,
    eps: f64,
    order: usize,
    opts: &SolveOptions,
) -> Result<SeriesSolution, PerturbError> {
    let scaled = r_intensities.scale(eps);
    if (&system.generator - &scaled).amax() > DECOMPOSITION_TOL {
        return Err(PerturbError::DecompositionMismatch(
            "generator is not eps times the given intensities",
        ));
    }
    let s_mats = control_quadratic_terms(system, weights)?;
    let nk = weights.n_intervals();
    let n = system.n_regimes;
    let m = system.state_dim;
    let inner_tol = (opts.tol * 0.1).max(1e-14);

    // Leading order: fully decoupled algebraic equations.
    let mut order0 = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(nk);
        for k in 0..nk {
            let g = solve_frozen_regime(
                system,
                &s_mats,
                i,
                k,
                0.0,
                weights.state_weight(i, k).clone(),
                None,
                inner_tol,
            )?;
            row.push(symmetrize(&g));
        }
        order0.push(row);
    }
    let mut coeffs = vec![order0];

    for r in 1..=order {
        let mut blocks = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::with_capacity(nk);
            for k in 0..nk {
                let s = &s_mats[i][k];
                let a_cl = &system.drift[i] - s * &coeffs[0][i][k];
                let mut quads: Vec<(f64, &DMatrix<f64>)> =
                    system.diffusion[i].iter().map(|sg| (1.0, sg)).collect();
                quads.extend(system.poisson[i].iter().map(|mk| (mk.weight, &mk.coeff)));
                let op = lyapunov_like_operator(&a_cl, &quads, 0.0);

                let mut rhs = DMatrix::zeros(m, m);
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let r_ij = r_intensities[(i, j)];
                    if r_ij == 0.0 {
                        continue;
                    }
                    let g_prev_j = &coeffs[r - 1][j][k];
                    let k_ij = &system.regime_jump.transition_maps[i][j];
                    let mut jumped = k_ij.transpose() * g_prev_j * k_ij;
                    for qs in &system.regime_jump.random_maps {
                        jumped += qs.transpose() * g_prev_j * qs;
                    }
                    jumped -= &coeffs[r - 1][i][k];
                    rhs -= jumped.scale(r_ij);
                }
                for q in 1..r {
                    rhs += &coeffs[q][i][k] * s * &coeffs[r - q][i][k];
                }
                let g = solve_vectorized(&op, &symmetrize(&rhs))
                    .ok_or(PerturbError::SingularOrder { order: r })?;
                row.push(g);
            }
            blocks.push(row);
        }
        coeffs.push(blocks);
    }

    let mut sol = SeriesSolution { coeffs, eps, order, majorant: majorant_radius(1.0, 1.0) };
    sol.majorant = majorant_from_norms(&sol.coefficient_norms());
    Ok(sol)
}

/// Case II series: small state jumps, `K_ij = I + eps*K_hat_ij` and
/// `Qs = eps*Q_hat_s`.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub fn solve_case2(
    system: &RegimeSystem,
    weights: &CostWeights,
    k_hat: &[Vec<DMatrix<f64>>],
    q_hat: &[DMatrix<f64>],
    eps: f64,
    order: usize,
    opts: &SolveOptions,
) -> Result<SeriesSolution, PerturbError> {
    let n = system.n_regimes;
    let m = system.state_dim;
    let eye = DMatrix::identity(m, m);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let expected = &eye + k_hat[i][j].scale(eps);
            if (&system.regime_jump.transition_maps[i][j] - expected).amax() > DECOMPOSITION_TOL {
                return Err(PerturbError::DecompositionMismatch(
                    "transition maps are not identity plus eps times K_hat",
                ));
            }
        }
    }
    if system.regime_jump.random_maps.len() != q_hat.len() {
        return Err(PerturbError::DecompositionMismatch(
            "random map count differs from Q_hat",
        ));
    }
    for (qs, qh) in system.regime_jump.random_maps.iter().zip(q_hat) {
        if (qs - qh.scale(eps)).amax() > DECOMPOSITION_TOL {
            return Err(PerturbError::DecompositionMismatch(
                "random maps are not eps times Q_hat",
            ));
        }
    }

    // Leading order: the coupled system with identity jumps.
    let mut base = system.clone();
    base.regime_jump = RegimeJumpSpec::identity(n, m);
    let order0_sol = solve_coupled_care(&base, weights, opts)?;
    if !order0_sol.is_positive_definite() {
        return Err(PerturbError::IndefiniteLeadingOrder);
    }
    let s_mats = control_quadratic_terms(system, weights)?;
    let nk = weights.n_intervals();
    let mut coeffs = vec![order0_sol.gains];

    let dim = m * m;
    for r in 1..=order {
        let mut blocks: Vec<Vec<DMatrix<f64>>> = vec![Vec::with_capacity(nk); n];
        for k in 0..nk {
            // One joint linear system over all regimes.
            let mut op = DMatrix::zeros(n * dim, n * dim);
            let mut rhs = DVector::zeros(n * dim);
            for i in 0..n {
                let s = &s_mats[i][k];
                let a_cl = &system.drift[i] - s * &coeffs[0][i][k];
                let mut quads: Vec<(f64, &DMatrix<f64>)> =
                    system.diffusion[i].iter().map(|sg| (1.0, sg)).collect();
                quads.extend(system.poisson[i].iter().map(|mk| (mk.weight, &mk.coeff)));
                let diag = lyapunov_like_operator(&a_cl, &quads, system.generator[(i, i)]);
                op.view_mut((i * dim, i * dim), (dim, dim)).copy_from(&diag);
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let q_ij = system.generator[(i, j)];
                    if q_ij != 0.0 {
                        op.view_mut((i * dim, j * dim), (dim, dim))
                            .copy_from(&DMatrix::identity(dim, dim).scale(q_ij));
                    }
                }

                let mut phi = DMatrix::zeros(m, m);
                for q in 1..r {
                    phi += &coeffs[q][i][k] * s * &coeffs[r - q][i][k];
                }
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let q_ij = system.generator[(i, j)];
                    if q_ij == 0.0 {
                        continue;
                    }
                    let kh = &k_hat[i][j];
                    let g1 = &coeffs[r - 1][j][k];
                    let mut jumped = kh.transpose() * g1 + g1 * kh;
                    if r >= 2 {
                        let g2 = &coeffs[r - 2][j][k];
                        jumped += kh.transpose() * g2 * kh;
                        for qh in q_hat {
                            jumped += qh.transpose() * g2 * qh;
                        }
                    }
                    phi -= jumped.scale(q_ij);
                }
                rhs.rows_mut(i * dim, dim)
                    .copy_from(&vectorize(&symmetrize(&phi)));
            }
            let solved = op
                .lu()
                .solve(&rhs)
                .ok_or(PerturbError::SingularOrder { order: r })?;
            for (i, block) in blocks.iter_mut().enumerate() {
                let g = unvectorize(&solved.rows(i * dim, dim).into_owned(), m);
                block.push(symmetrize(&g));
            }
        }
        coeffs.push(blocks);
    }

    let mut sol = SeriesSolution { coeffs, eps, order, majorant: majorant_radius(1.0, 1.0) };
    sol.majorant = majorant_from_norms(&sol.coefficient_norms());
    Ok(sol)
}

/// `G = sum_r eps^r G^(r)` by Horner evaluation. The caller should
/// compare `sol.eps` with `sol.majorant.radius` before trusting the
/// truncation.
pub fn assemble_series(sol: &SeriesSolution) -> GainSet {
    let n = sol.coeffs[0].len();
    let nk = sol.coeffs[0][0].len();
    let mut gains = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(nk);
        for k in 0..nk {
            let mut g = sol.coeffs[sol.order][i][k].clone();
            for r in (0..sol.order).rev() {
                g = g.scale(sol.eps) + &sol.coeffs[r][i][k];
            }
            row.push(g);
        }
        gains.push(row);
    }
    GainSet::new(gains)
}

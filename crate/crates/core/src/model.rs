//! System definition and validation for linear regime-switching jump
//! diffusions with Poisson marks, regime-transition state jumps and
//! deterministic-time switches.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::linalg::{operator_norm, symmetric_eigen_bounds};

pub const GENERATOR_ROW_TOL: f64 = 1e-12;
pub const STOCHASTIC_ROW_TOL: f64 = 1e-12;
pub const SYMMETRY_TOL: f64 = 1e-12;
pub const PSD_EIG_TOL: f64 = -1e-10;

/// One mark of the finite Poisson measure: intensity per unit time and
/// the state coefficient applied at each jump of that mark.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonMark {
    pub weight: f64,
    pub coeff: DMatrix<f64>,
}

/// Law of the scalar coefficients multiplying the random jump
/// components at a regime transition. Both have mean 0, variance 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XiLaw {
    Rademacher,
    StandardNormal,
}

/// State jump applied when the regime chain moves from `i` to `j`:
/// `x <- K[i][j] x + sum_s xi_s Qs[s] x` with fresh `xi_s` draws.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeJumpSpec {
    /// `K[i][j]`, m x m; `K[i][i]` must be the identity.
    pub transition_maps: Vec<Vec<DMatrix<f64>>>,
    /// Random jump components `Qs`, each m x m.
    pub random_maps: Vec<DMatrix<f64>>,
    pub xi_law: XiLaw,
}

impl RegimeJumpSpec {
    pub fn identity(n_regimes: usize, state_dim: usize) -> Self {
        let eye = DMatrix::identity(state_dim, state_dim);
        Self {
            transition_maps: vec![vec![eye; n_regimes]; n_regimes],
            random_maps: Vec::new(),
            xi_law: XiLaw::Rademacher,
        }
    }
}

/// Deterministic-time switches: at each `times[k]` the chain eta makes
/// one step under `eta_transition` and the state jumps through the
/// linear map of the new eta state, `x <- J[eta] x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicSwitchSpec {
    /// Strictly increasing switch times; may be empty.
    pub times: Vec<f64>,
    pub eta_states: usize,
    /// Row-stochastic eta transition matrix, `eta_states` square.
    pub eta_transition: DMatrix<f64>,
    pub eta_init: usize,
    /// Per-eta-state jump map `J`, m x m each.
    pub jump_maps: Vec<DMatrix<f64>>,
    /// Lower bound on the gap between consecutive switch times.
    pub min_gap: f64,
    /// Upper bound on the gap between consecutive switch times.
    pub max_gap: f64,
}

impl DeterministicSwitchSpec {
    /// No switches: a single eta state with identity jump map.
    pub fn empty(state_dim: usize) -> Self {
        Self {
            times: Vec::new(),
            eta_states: 1,
            eta_transition: DMatrix::identity(1, 1),
            eta_init: 0,
            jump_maps: vec![DMatrix::identity(state_dim, state_dim)],
            min_gap: 1e-9,
            max_gap: f64::INFINITY,
        }
    }

    /// Interval index of time `t`: the number of switch times `<= t`.
    pub fn interval_of(&self, t: f64) -> usize {
        self.times.iter().take_while(|&&tk| tk <= t).count()
    }
}

/// Full model: per-regime linear coefficients, regime generator, jump
/// rules and deterministic switching.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSystem {
    pub state_dim: usize,
    pub control_dim: usize,
    pub n_regimes: usize,
    /// `A_i`, m x m per regime.
    pub drift: Vec<DMatrix<f64>>,
    /// `B_i`, m x r per regime.
    pub input: Vec<DMatrix<f64>>,
    /// Diffusion channels per regime; each entry multiplies the state
    /// and one independent scalar Wiener increment.
    pub diffusion: Vec<Vec<DMatrix<f64>>>,
    /// Finite marked Poisson measure per regime (compensated driver).
    pub poisson: Vec<Vec<PoissonMark>>,
    /// Generator of the regime chain; rows sum to zero.
    pub generator: DMatrix<f64>,
    pub regime_jump: RegimeJumpSpec,
    pub det_switch: DeterministicSwitchSpec,
}

/// Running-cost weights `x' M x + u' D u`, indexed by (regime,
/// interval). A single interval entry is reused for every interval.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    /// `M[i][k]`, symmetric m x m, positive semidefinite.
    pub state: Vec<Vec<DMatrix<f64>>>,
    /// `D[i][k]`, symmetric r x r, positive definite.
    pub control: Vec<Vec<DMatrix<f64>>>,
    /// Smallest admissible eigenvalue of each `D[i][k]`.
    pub d_min: f64,
}

impl CostWeights {
    /// Autonomous weights: one (M, D) pair per regime.
    pub fn autonomous(state: Vec<DMatrix<f64>>, control: Vec<DMatrix<f64>>) -> Self {
        Self {
            state: state.into_iter().map(|m| vec![m]).collect(),
            control: control.into_iter().map(|d| vec![d]).collect(),
            d_min: 1e-10,
        }
    }

    pub fn n_intervals(&self) -> usize {
        self.state.iter().map(|v| v.len()).max().unwrap_or(1)
    }

    /// `M[i][k]`, clamping `k` to the last provided interval.
    pub fn state_weight(&self, regime: usize, interval: usize) -> &DMatrix<f64> {
        let row = &self.state[regime];
        &row[interval.min(row.len() - 1)]
    }

    /// `D[i][k]`, clamping `k` to the last provided interval.
    pub fn control_weight(&self, regime: usize, interval: usize) -> &DMatrix<f64> {
        let row = &self.control[regime];
        &row[interval.min(row.len() - 1)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

/// Outcome of `validate`: all violations plus the derived growth
/// constants of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Lipschitz constant of the linear coefficients: max over regimes
    /// of ||A_i|| + sum_l ||Sigma_il|| + sum_j pi_j ||C_ij||, plus
    /// max_h ||J_h|| when deterministic switches are present.
    pub lipschitz: f64,
    /// Constant C of the boundedness condition; zero for linear
    /// coefficients vanishing at the origin.
    pub offset_bound: f64,
    /// Largest gap between consecutive deterministic switch times
    /// (first gap measured from 0); zero without switches.
    pub max_switch_gap: f64,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn check_shape(
    violations: &mut Vec<Violation>,
    mat: &DMatrix<f64>,
    rows: usize,
    cols: usize,
    location: &str,
) -> bool {
    if mat.nrows() != rows || mat.ncols() != cols {
        violations.push(Violation {
            location: String::from(location),
            message: format!(
                "expected {}x{} matrix, got {}x{}",
                rows,
                cols,
                mat.nrows(),
                mat.ncols()
            ),
        });
        return false;
    }
    if mat.iter().any(|v| !v.is_finite()) {
        violations.push(Violation {
            location: String::from(location),
            message: String::from("non-finite entry"),
        });
        return false;
    }
    true
}

fn check_symmetric(violations: &mut Vec<Violation>, mat: &DMatrix<f64>, location: &str) -> bool {
    let asym = (mat - mat.transpose()).amax();
    if asym > SYMMETRY_TOL {
        violations.push(Violation {
            location: String::from(location),
            message: format!("not symmetric (max asymmetry {asym:.3e})"),
        });
        return false;
    }
    true
}

/// Checks every structural invariant of the model and derives the
/// growth constants. Problems are report entries, never panics.
pub fn validate(system: &RegimeSystem, weights: &CostWeights) -> ValidationReport {
    let mut violations = Vec::new();
    let (m, r, n) = (system.state_dim, system.control_dim, system.n_regimes);

    if m == 0 {
        violations.push(Violation {
            location: String::from("m"),
            message: String::from("state dimension must be positive"),
        });
    }
    if r == 0 {
        violations.push(Violation {
            location: String::from("r"),
            message: String::from("control dimension must be positive"),
        });
    }
    if n == 0 {
        violations.push(Violation {
            location: String::from("N"),
            message: String::from("number of regimes must be positive"),
        });
    }

    let counts = [
        ("A", system.drift.len()),
        ("B", system.input.len()),
        ("Sigma", system.diffusion.len()),
        ("PoissonJump", system.poisson.len()),
    ];
    for (name, len) in counts {
        if len != n {
            violations.push(Violation {
                location: String::from(name),
                message: format!("expected {n} per-regime entries, got {len}"),
            });
        }
    }

    for (i, a) in system.drift.iter().enumerate() {
        check_shape(&mut violations, a, m, m, &format!("A[{i}]"));
    }
    for (i, b) in system.input.iter().enumerate() {
        check_shape(&mut violations, b, m, r, &format!("B[{i}]"));
    }
    for (i, sigmas) in system.diffusion.iter().enumerate() {
        for (l, s) in sigmas.iter().enumerate() {
            check_shape(&mut violations, s, m, m, &format!("Sigma[{i}][{l}]"));
        }
    }
    for (i, marks) in system.poisson.iter().enumerate() {
        for (j, mark) in marks.iter().enumerate() {
            check_shape(&mut violations, &mark.coeff, m, m, &format!("PoissonJump[{i}][{j}].C"));
            #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
            if !(mark.weight >= 0.0) {
                violations.push(Violation {
                    location: format!("PoissonJump[{i}][{j}].weight"),
                    message: format!("mark weight must be >= 0, got {}", mark.weight),
                });
            }
        }
    }

    // Generator: rows sum to zero, off-diagonal nonnegative.
    if check_shape(&mut violations, &system.generator, n, n, "Q") {
        for i in 0..n {
            let row_sum: f64 = system.generator.row(i).iter().sum();
            if row_sum.abs() > GENERATOR_ROW_TOL {
                violations.push(Violation {
                    location: format!("Q[{i}]"),
                    message: format!("row {i} sums to {row_sum:e}"),
                });
            }
            for j in 0..n {
                if i != j && system.generator[(i, j)] < 0.0 {
                    violations.push(Violation {
                        location: format!("Q[{i}][{j}]"),
                        message: format!(
                            "off-diagonal entry {} is negative",
                            system.generator[(i, j)]
                        ),
                    });
                }
            }
        }
    }

    // Regime jump spec.
    let jump = &system.regime_jump;
    if jump.transition_maps.len() != n {
        violations.push(Violation {
            location: String::from("regime_jump.K"),
            message: format!("expected {n} rows, got {}", jump.transition_maps.len()),
        });
    }
    for (i, row) in jump.transition_maps.iter().enumerate() {
        if row.len() != n {
            violations.push(Violation {
                location: format!("regime_jump.K[{i}]"),
                message: format!("expected {n} entries, got {}", row.len()),
            });
            continue;
        }
        for (j, k_ij) in row.iter().enumerate() {
            if check_shape(&mut violations, k_ij, m, m, &format!("regime_jump.K[{i}][{j}]"))
                && i == j
            {
                let dev = (k_ij - DMatrix::<f64>::identity(m, m)).amax();
                if dev > SYMMETRY_TOL {
                    violations.push(Violation {
                        location: format!("regime_jump.K[{i}][{i}]"),
                        message: format!("diagonal jump map must be identity (deviation {dev:.3e})"),
                    });
                }
            }
        }
    }
    for (s, q) in jump.random_maps.iter().enumerate() {
        check_shape(&mut violations, q, m, m, &format!("regime_jump.Qs[{s}]"));
    }

    // Deterministic switches.
    let sw = &system.det_switch;
    let mut prev = 0.0;
    let mut max_gap = 0.0_f64;
    for (k, &t) in sw.times.iter().enumerate() {
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
        if !(t > prev) {
            violations.push(Violation {
                location: format!("det_switch.times[{k}]"),
                message: format!("times must be strictly increasing, got {t} after {prev}"),
            });
        }
        let gap = t - prev;
        if k > 0 && gap < sw.min_gap {
            violations.push(Violation {
                location: format!("det_switch.times[{k}]"),
                message: format!("gap {gap:e} below the configured minimum {:e}", sw.min_gap),
            });
        }
        if k > 0 && gap > sw.max_gap {
            violations.push(Violation {
                location: format!("det_switch.times[{k}]"),
                message: format!("gap {gap:e} above the configured maximum {:e}", sw.max_gap),
            });
        }
        max_gap = max_gap.max(gap);
        prev = t;
    }
    if sw.eta_states == 0 {
        violations.push(Violation {
            location: String::from("det_switch.H"),
            message: String::from("eta state space must be non-empty"),
        });
    }
    if check_shape(
        &mut violations,
        &sw.eta_transition,
        sw.eta_states,
        sw.eta_states,
        "det_switch.P_H",
    ) {
        for h in 0..sw.eta_states {
            let row_sum: f64 = sw.eta_transition.row(h).iter().sum();
            if (row_sum - 1.0).abs() > STOCHASTIC_ROW_TOL {
                violations.push(Violation {
                    location: format!("det_switch.P_H[{h}]"),
                    message: format!("row {h} sums to {row_sum}"),
                });
            }
            for h2 in 0..sw.eta_states {
                if sw.eta_transition[(h, h2)] < 0.0 {
                    violations.push(Violation {
                        location: format!("det_switch.P_H[{h}][{h2}]"),
                        message: String::from("negative transition probability"),
                    });
                }
            }
        }
    }
    if sw.eta_init >= sw.eta_states.max(1) {
        violations.push(Violation {
            location: String::from("det_switch.h0"),
            message: format!("initial eta state {} out of range", sw.eta_init),
        });
    }
    if sw.jump_maps.len() != sw.eta_states {
        violations.push(Violation {
            location: String::from("det_switch.J"),
            message: format!(
                "expected {} jump maps, got {}",
                sw.eta_states,
                sw.jump_maps.len()
            ),
        });
    }
    for (h, j_h) in sw.jump_maps.iter().enumerate() {
        check_shape(&mut violations, j_h, m, m, &format!("det_switch.J[{h}]"));
    }

    // Cost weights.
    for (name, table, dim) in [("M", &weights.state, m), ("D", &weights.control, r)] {
        if table.len() != n {
            violations.push(Violation {
                location: String::from(name),
                message: format!("expected {n} per-regime entries, got {}", table.len()),
            });
        }
        for (i, row) in table.iter().enumerate() {
            if row.is_empty() {
                violations.push(Violation {
                    location: format!("{name}[{i}]"),
                    message: String::from("at least one interval entry required"),
                });
            }
            for (k, w) in row.iter().enumerate() {
                let loc = format!("{name}[{i}][{k}]");
                if !check_shape(&mut violations, w, dim, dim, &loc) {
                    continue;
                }
                if !check_symmetric(&mut violations, w, &loc) {
                    continue;
                }
                let (lo, _hi) = symmetric_eigen_bounds(w);
                if name == "M" && lo < PSD_EIG_TOL {
                    violations.push(Violation {
                        location: loc,
                        message: format!("M not positive semidefinite (min eigenvalue {lo:e})"),
                    });
                } else if name == "D" && lo < weights.d_min {
                    violations.push(Violation {
                        location: loc,
                        message: format!("D not positive definite (min eigenvalue {lo:e})"),
                    });
                }
            }
        }
    }

    let lipschitz = derived_lipschitz(system);

    ValidationReport {
        violations,
        lipschitz,
        offset_bound: 0.0,
        max_switch_gap: max_gap,
    }
}

/// Lipschitz constant of the linear coefficient maps, in operator norm.
fn derived_lipschitz(system: &RegimeSystem) -> f64 {
    let mut l = 0.0_f64;
    for i in 0..system.n_regimes {
        let mut li = system
            .drift
            .get(i)
            .map(operator_norm)
            .unwrap_or(0.0);
        if let Some(sigmas) = system.diffusion.get(i) {
            li += sigmas.iter().map(operator_norm).sum::<f64>();
        }
        if let Some(marks) = system.poisson.get(i) {
            li += marks
                .iter()
                .map(|mk| mk.weight * operator_norm(&mk.coeff))
                .sum::<f64>();
        }
        l = l.max(li);
    }
    if !system.det_switch.times.is_empty() {
        let j_norm = system
            .det_switch
            .jump_maps
            .iter()
            .map(operator_norm)
            .fold(0.0_f64, f64::max);
        l += j_norm;
    }
    l
}

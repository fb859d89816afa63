//! Euler-Maruyama integration of the controlled jump diffusion with
//! compensated Poisson marks, regime-transition state jumps and
//! deterministic-time switches. Event times are inserted into the grid
//! so jumps are applied at their exact times.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use rand_distr::{Distribution, Poisson, StandardNormal};
use thiserror::Error;

use crate::model::RegimeSystem;
use crate::stochastic::{sample_ctmc, sample_xi, step_eta, SeededStream};

/// Paths whose state norm exceeds this are reported as divergent.
pub const STATE_EXPLOSION_LIMIT: f64 = 1e12;

// Independent draw lanes per path stream. Poisson counts live on
// their own lane so that disabling marks leaves every other draw
// unchanged.
const LANE_WIENER: u64 = 0;
const LANE_POISSON: u64 = 1;
const LANE_XI: u64 = 2;
const LANE_ETA: u64 = 3;
const LANE_CTMC: u64 = 4;

/// Linear state feedback `u = -F[i][k] x` per (regime, interval).
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackLaw {
    /// `F[i][k]`, r x m. A single interval entry is reused for all k.
    pub gains: Vec<Vec<DMatrix<f64>>>,
}

impl FeedbackLaw {
    pub fn zero(system: &RegimeSystem) -> Self {
        Self {
            gains: vec![
                vec![DMatrix::zeros(system.control_dim, system.state_dim)];
                system.n_regimes
            ],
        }
    }

    pub fn gain(&self, regime: usize, interval: usize) -> &DMatrix<f64> {
        let row = &self.gains[regime];
        &row[interval.min(row.len() - 1)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    /// `count` arrivals of one Poisson mark within the step ending at
    /// the event time.
    Poisson { mark: usize, count: u64 },
    RegimeJump { from: usize, to: usize },
    DetSwitch { eta: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
}

/// Recorded trajectory. `states[j]` is the state immediately after any
/// jump at `grid[j]`; `states_pre[j]` the value immediately before.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPath {
    pub grid: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub states_pre: Vec<DVector<f64>>,
    pub regimes: Vec<usize>,
    pub etas: Vec<usize>,
    /// Control applied on the step starting at each grid point.
    pub controls: Vec<DVector<f64>>,
    pub events: Vec<Event>,
}

impl TrajectoryPath {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("non-empty trajectory")
    }

    /// Index of the grid point at time `t`, within `tol`.
    pub fn grid_index_at(&self, t: f64, tol: f64) -> Option<usize> {
        self.grid.iter().position(|&g| (g - t).abs() <= tol)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimulateError {
    #[error("state diverged at t = {time}{}", match path { Some(p) => alloc::format!(" (path {p})"), None => alloc::string::String::new() })]
    Diverged { time: f64, path: Option<usize> },
    #[error("invalid simulation parameter: {0}")]
    InvalidParameter(&'static str),
}

/// One grid node as seen by an integration visitor.
pub(crate) struct Node<'a> {
    pub t: f64,
    pub x_pre: &'a DVector<f64>,
    pub x: &'a DVector<f64>,
    /// Regime over the step that ended at `t` (before any jump here).
    pub regime_pre: usize,
    pub regime: usize,
    pub eta: usize,
    pub interval: usize,
    /// Control applied on the step starting at `t`.
    pub u: &'a DVector<f64>,
    pub events: &'a [Event],
}

pub(crate) struct IntegrateConfig<'a> {
    pub system: &'a RegimeSystem,
    pub law: Option<&'a FeedbackLaw>,
    pub x0: &'a DVector<f64>,
    pub y0: usize,
    pub eta0: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
}

/// Time-steps the SDE, calling `visit` at every grid node (including
/// the initial one). Events strictly inside `(t_start, t_end]` are
/// applied; the integrator steps exactly onto each event time.
pub(crate) fn integrate<F: FnMut(&Node)>(
    cfg: &IntegrateConfig,
    stream: SeededStream,
    visit: &mut F,
) -> Result<(), SimulateError> {
    let system = cfg.system;
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
    if !(cfg.dt > 0.0) {
        return Err(SimulateError::InvalidParameter("dt must be positive"));
    }
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
    if !(cfg.t_end > cfg.t_start) {
        return Err(SimulateError::InvalidParameter("horizon must exceed start time"));
    }

    let mut wiener_rng = stream.substream(LANE_WIENER).rng();
    let mut poisson_rng = stream.substream(LANE_POISSON).rng();
    let mut xi_rng = stream.substream(LANE_XI).rng();
    let mut eta_rng = stream.substream(LANE_ETA).rng();

    let regime_path = sample_ctmc(
        &system.generator,
        cfg.y0,
        cfg.t_end - cfg.t_start,
        stream.substream(LANE_CTMC),
    );
    let mut regime_jumps = regime_path
        .jumps
        .iter()
        .map(|&(tau, j)| (cfg.t_start + tau, j))
        .filter(|&(tau, _)| tau <= cfg.t_end)
        .peekable();
    let mut det_times = system
        .det_switch
        .times
        .iter()
        .copied()
        .filter(|&tk| tk > cfg.t_start && tk <= cfg.t_end)
        .peekable();

    let time_tol = cfg.dt * 1e-9;
    let mut t = cfg.t_start;
    let mut x = cfg.x0.clone();
    let mut x_pre = x.clone();
    let mut regime = cfg.y0;
    let mut eta = cfg.eta0;
    let mut interval = system.det_switch.interval_of(cfg.t_start);
    let mut base_step: u64 = 0;

    let m = system.state_dim;
    let r = system.control_dim;
    let mut u = DVector::zeros(r);
    let mut x_next = DVector::zeros(m);
    let mut tmp = DVector::zeros(m);
    let mut tmp2 = DVector::zeros(m);
    let mut events: Vec<Event> = Vec::new();

    let compute_control = |law: Option<&FeedbackLaw>, regime: usize, interval: usize,
                           x: &DVector<f64>, u: &mut DVector<f64>| {
        match law {
            Some(law) => {
                law.gain(regime, interval).mul_to(x, u);
                u.neg_mut();
            }
            None => u.fill(0.0),
        }
    };

    compute_control(cfg.law, regime, interval, &x, &mut u);
    visit(&Node {
        t,
        x_pre: &x,
        x: &x,
        regime_pre: regime,
        regime,
        eta,
        interval,
        u: &u,
        events: &events,
    });

    while t < cfg.t_end - time_tol {
        let next_base = (cfg.t_start + (base_step + 1) as f64 * cfg.dt).min(cfg.t_end);
        let mut t_next = next_base;
        if let Some(&(tau, _)) = regime_jumps.peek() {
            t_next = t_next.min(tau);
        }
        if let Some(&tk) = det_times.peek() {
            t_next = t_next.min(tk);
        }
        let h = t_next - t;
        events.clear();

        let regime_pre = regime;
        if h > 0.0 {
            compute_control(cfg.law, regime, interval, &x, &mut u);

            // x_next = x + (A x + B u) h
            system.drift[regime].mul_to(&x, &mut tmp);
            x_next.copy_from(&x);
            x_next.axpy(h, &tmp, 1.0);
            system.input[regime].mul_to(&u, &mut tmp);
            x_next.axpy(h, &tmp, 1.0);

            // Diffusion channels: + Sigma_l x sqrt(h) z_l
            let sqrt_h = h.sqrt();
            for sigma in &system.diffusion[regime] {
                let z: f64 = StandardNormal.sample(&mut wiener_rng);
                sigma.mul_to(&x, &mut tmp);
                x_next.axpy(sqrt_h * z, &tmp, 1.0);
            }

            // Compensated Poisson marks: ((I + C)^n - I) x - pi h C x.
            for (mark_idx, mark) in system.poisson[regime].iter().enumerate() {
                let lambda = mark.weight * h;
                if lambda > 0.0 {
                    let count = Poisson::new(lambda)
                        .map(|d| d.sample(&mut poisson_rng) as u64)
                        .unwrap_or(0);
                    if count > 0 {
                        tmp.copy_from(&x);
                        for _ in 0..count {
                            mark.coeff.mul_to(&tmp, &mut tmp2);
                            tmp += &tmp2;
                        }
                        tmp -= &x;
                        x_next += &tmp;
                        events.push(Event {
                            time: t_next,
                            kind: EventKind::Poisson { mark: mark_idx, count },
                        });
                    }
                    mark.coeff.mul_to(&x, &mut tmp);
                    x_next.axpy(-lambda, &tmp, 1.0);
                }
            }

            let norm = x_next.norm();
            if !norm.is_finite() || norm > STATE_EXPLOSION_LIMIT {
                return Err(SimulateError::Diverged { time: t_next, path: None });
            }
            x.copy_from(&x_next);
        }

        t = t_next;
        x_pre.copy_from(&x);

        // Regime-transition jump: x <- K_ij x + sum_s xi_s Qs x.
        if let Some(&(tau, to)) = regime_jumps.peek() {
            if (tau - t).abs() <= time_tol {
                regime_jumps.next();
                let spec = &system.regime_jump;
                let xi = sample_xi(spec.xi_law, spec.random_maps.len(), &mut xi_rng);
                spec.transition_maps[regime][to].mul_to(&x_pre, &mut tmp);
                for (coef, qs) in xi.iter().zip(&spec.random_maps) {
                    qs.mul_to(&x_pre, &mut tmp2);
                    tmp.axpy(*coef, &tmp2, 1.0);
                }
                x.copy_from(&tmp);
                events.push(Event {
                    time: t,
                    kind: EventKind::RegimeJump { from: regime, to },
                });
                regime = to;
            }
        }

        // Deterministic switch: eta steps, then x <- J_eta x.
        if let Some(&tk) = det_times.peek() {
            if (tk - t).abs() <= time_tol {
                det_times.next();
                eta = step_eta(&system.det_switch.eta_transition, eta, &mut eta_rng);
                system.det_switch.jump_maps[eta].mul_to(&x, &mut tmp);
                x.copy_from(&tmp);
                events.push(Event { time: t, kind: EventKind::DetSwitch { eta } });
                interval += 1;
            }
        }

        let norm = x.norm();
        if !norm.is_finite() || norm > STATE_EXPLOSION_LIMIT {
            return Err(SimulateError::Diverged { time: t, path: None });
        }

        if (t - next_base).abs() <= time_tol {
            base_step += 1;
        }

        compute_control(cfg.law, regime, interval, &x, &mut u);
        visit(&Node {
            t,
            x_pre: &x_pre,
            x: &x,
            regime_pre,
            regime,
            eta,
            interval,
            u: &u,
            events: &events,
        });
    }

    Ok(())
}

/// Simulates a single path and records it on the full grid.
pub fn simulate_path(
    system: &RegimeSystem,
    law: Option<&FeedbackLaw>,
    x0: &DVector<f64>,
    y0: usize,
    horizon: f64,
    dt: f64,
    stream: SeededStream,
) -> Result<TrajectoryPath, SimulateError> {
    let mut path = TrajectoryPath {
        grid: Vec::new(),
        states: Vec::new(),
        states_pre: Vec::new(),
        regimes: Vec::new(),
        etas: Vec::new(),
        controls: Vec::new(),
        events: Vec::new(),
    };
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
    integrate(&cfg, stream, &mut |node: &Node| {
        path.grid.push(node.t);
        path.states.push(node.x.clone());
        path.states_pre.push(node.x_pre.clone());
        path.regimes.push(node.regime);
        path.etas.push(node.eta);
        path.controls.push(node.u.clone());
        path.events.extend_from_slice(node.events);
    })?;
    Ok(path)
}

/// Simulates `n_paths` independent paths; path `p` uses stream id `p`
/// under `root_seed`, so the result is independent of scheduling.
#[allow(clippy::too_many_arguments)]
pub fn simulate_batch(
    system: &RegimeSystem,
    law: Option<&FeedbackLaw>,
    x0: &DVector<f64>,
    y0: usize,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    root_seed: u64,
) -> Result<Vec<TrajectoryPath>, SimulateError> {
    (0..n_paths)
        .map(|p| {
            simulate_path(system, law, x0, y0, horizon, dt, SeededStream::new(root_seed, p as u64))
                .map_err(|e| match e {
                    SimulateError::Diverged { time, .. } => {
                        SimulateError::Diverged { time, path: Some(p) }
                    }
                    other => other,
                })
        })
        .collect()
}

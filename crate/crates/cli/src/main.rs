//! Command-line interface: model validation, gain synthesis,
//! simulation, cost estimation and stability checks.
//!
//! Exit codes: 0 on success, 1 on numeric/solver failure, 2 on I/O or
//! usage errors.

use stochstab::schema;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use stochstab_core::cost::{aggregate_costs, path_cost};
use stochstab_core::lyapunov::stability_probability_estimate;
use stochstab_core::model::{validate, CostWeights, RegimeSystem};
use stochstab_core::perturb::{assemble_series, solve_case1, solve_case2, SeriesSolution};
use stochstab_core::riccati::{care_residual, solve_coupled_care, solve_riccati_ode, GainSet, SolveOptions};
use stochstab_core::simulate::{simulate_path, FeedbackLaw};
use stochstab_core::stochastic::SeededStream;
use stochstab_core::synthesize_feedback;

#[derive(Parser)]
#[command(name = "stochstab", version, about = "Optimal stabilization of regime-switching stochastic systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a model file against all structural invariants.
    Validate(ValidateArgs),
    /// Solve for the quadratic Lyapunov gains and the feedback law.
    Synthesize(SynthesizeArgs),
    /// Simulate closed- or open-loop trajectories.
    Simulate(SimulateArgs),
    /// Monte Carlo estimate of the quadratic cost functional.
    EstimateCost(EstimateCostArgs),
    /// Estimate the probability of leaving a threshold ball.
    CheckStability(CheckStabilityArgs),
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    /// Coupled algebraic solve (Gauss-Seidel + Newton).
    Care,
    /// Finite-horizon backward ODE, gains at t = 0.
    RiccatiOde,
    /// Series in the transition-intensity scale.
    Perturb1,
    /// Series in the jump-map deviation scale.
    Perturb2,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    method: Method,
    /// Residual tolerance (Frobenius norm).
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Horizon for the ODE method.
    #[arg(long, default_value_t = 20.0)]
    horizon: f64,
    /// Integration step for the ODE method.
    #[arg(long, default_value_t = 0.01)]
    dt_g: f64,
    /// Small parameter for the perturbation methods.
    #[arg(long)]
    eps: Option<f64>,
    /// Series truncation order for the perturbation methods.
    #[arg(long, default_value_t = 2)]
    order: usize,
    #[arg(long)]
    out: PathBuf,
    /// Optional series coefficient dump (perturbation methods only).
    #[arg(long)]
    series_out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Gain file; omitted means open loop (u = 0).
    #[arg(long)]
    gains: Option<PathBuf>,
    /// Initial state, comma-separated.
    #[arg(long)]
    x0: String,
    /// Initial regime.
    #[arg(long, default_value_t = 0)]
    y0: usize,
    #[arg(long = "T")]
    horizon: f64,
    #[arg(long)]
    dt: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    paths: usize,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateCostArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    gains: PathBuf,
    /// Alternative gain file for a paired common-random-numbers
    /// comparison.
    #[arg(long)]
    compare_gains: Option<PathBuf>,
    #[arg(long)]
    x0: String,
    #[arg(long, default_value_t = 0)]
    y0: usize,
    #[arg(long = "T")]
    horizon: f64,
    #[arg(long)]
    dt: f64,
    #[arg(long)]
    paths: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckStabilityArgs {
    #[arg(long)]
    model: PathBuf,
    /// Gain file; omitted means open loop.
    #[arg(long)]
    gains: Option<PathBuf>,
    /// Exceedance threshold on |x|.
    #[arg(long)]
    eps1: f64,
    /// Radius of the initial-state sphere.
    #[arg(long)]
    delta: f64,
    #[arg(long = "T")]
    horizon: f64,
    #[arg(long)]
    dt: f64,
    #[arg(long)]
    paths: usize,
    #[arg(long, default_value_t = 5)]
    x0_samples: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Failures that should exit 1 (numeric) versus 2 (I/O or usage).
enum Failure {
    Numeric(anyhow::Error),
    Usage(anyhow::Error),
}

trait IntoFailure<T> {
    fn or_numeric(self) -> Result<T, Failure>;
    fn or_usage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> IntoFailure<T> for Result<T, E> {
    fn or_numeric(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Numeric(e.into()))
    }
    fn or_usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Validate(args) => cmd_validate(args),
        Command::Synthesize(args) => cmd_synthesize(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::EstimateCost(args) => cmd_estimate_cost(args),
        Command::CheckStability(args) => cmd_check_stability(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Numeric(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn parse_x0(spec: &str, dim: usize) -> Result<DVector<f64>> {
    let vals: Vec<f64> = spec
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| anyhow!("bad x0 entry {s:?}: {e}")))
        .collect::<Result<_>>()?;
    if vals.len() != dim {
        bail!("x0 has {} entries, state dimension is {dim}", vals.len());
    }
    Ok(DVector::from_vec(vals))
}

fn write_out(path: &PathBuf, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    builder.build().context("cannot build thread pool")
}

fn cmd_validate(args: ValidateArgs) -> Result<(), Failure> {
    let (system, weights, _) = schema::load_model(&args.model).or_usage()?;
    let report = validate(&system, &weights);
    println!("lipschitz_constant: {}", report.lipschitz);
    println!("max_switch_gap: {}", report.max_switch_gap);
    if report.ok() {
        println!("model ok");
        Ok(())
    } else {
        for v in &report.violations {
            println!("violation at {}: {}", v.location, v.message);
        }
        Err(Failure::Numeric(anyhow!(
            "{} violation(s) found",
            report.violations.len()
        )))
    }
}

fn checked_model(path: &Path) -> Result<(RegimeSystem, CostWeights, String), Failure> {
    let (system, weights, hash) = schema::load_model(path).or_usage()?;
    let report = validate(&system, &weights);
    if !report.ok() {
        let first = &report.violations[0];
        return Err(Failure::Numeric(anyhow!(
            "invalid model ({} violations; first: {} - {})",
            report.violations.len(),
            first.location,
            first.message
        )));
    }
    Ok((system, weights, hash))
}

fn load_law(
    path: &Path,
    system: &RegimeSystem,
    weights: &CostWeights,
) -> Result<(GainSet, FeedbackLaw), Failure> {
    let (gains, _) = schema::load_gains(path, system.state_dim).or_usage()?;
    let law = synthesize_feedback(system, weights, &gains).or_numeric()?;
    Ok((gains, law))
}

fn cmd_synthesize(args: SynthesizeArgs) -> Result<(), Failure> {
    let (system, weights, hash) = checked_model(&args.model)?;
    let opts = SolveOptions { tol: args.tol, ..SolveOptions::default() };
    let needs_eps = matches!(args.method, Method::Perturb1 | Method::Perturb2);
    if needs_eps && args.eps.is_none() {
        return Err(Failure::Usage(anyhow!("--eps is required for the perturbation methods")));
    }

    let mut series: Option<SeriesSolution> = None;
    let mut gains = match args.method {
        Method::Care => solve_coupled_care(&system, &weights, &opts).or_numeric()?,
        Method::RiccatiOde => {
            let sol = solve_riccati_ode(&system, &weights, args.horizon, args.dt_g).or_numeric()?;
            sol.initial().clone()
        }
        Method::Perturb1 => {
            let eps = args.eps.unwrap();
            let intensities = if eps != 0.0 {
                system.generator.scale(1.0 / eps)
            } else {
                system.generator.clone()
            };
            let sol =
                solve_case1(&system, &weights, &intensities, eps, args.order, &opts).or_numeric()?;
            let g = assemble_series(&sol);
            series = Some(sol);
            g
        }
        Method::Perturb2 => {
            let eps = args.eps.unwrap();
            let n = system.n_regimes;
            let eye = DMatrix::identity(system.state_dim, system.state_dim);
            let k_hat: Vec<Vec<DMatrix<f64>>> = (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            let dev = &system.regime_jump.transition_maps[i][j] - &eye;
                            if eps != 0.0 { dev.unscale(eps) } else { dev }
                        })
                        .collect()
                })
                .collect();
            let q_hat: Vec<DMatrix<f64>> = system
                .regime_jump
                .random_maps
                .iter()
                .map(|qs| if eps != 0.0 { qs.unscale(eps) } else { qs.clone() })
                .collect();
            let sol = solve_case2(&system, &weights, &k_hat, &q_hat, eps, args.order, &opts)
                .or_numeric()?;
            let g = assemble_series(&sol);
            series = Some(sol);
            g
        }
    };

    // Residual of the full coupled equations for whatever method
    // produced the gains.
    let residual_mats = care_residual(&system, &weights, &gains).or_numeric()?;
    gains.residual = residual_mats
        .iter()
        .map(|row| row.iter().map(|m| m.norm()).collect())
        .collect();
    let max_residual = gains
        .residual
        .iter()
        .flatten()
        .copied()
        .fold(0.0_f64, f64::max);
    let pd = gains.is_positive_definite();
    println!("max_residual: {max_residual:e}");
    println!("positive_definite: {pd}");
    if let Some(sol) = &series {
        println!(
            "series: order {} eps {} convergence_radius {}",
            sol.order, sol.eps, sol.majorant.radius
        );
        if sol.eps > sol.majorant.radius {
            println!("warning: eps exceeds the majorant convergence radius");
        }
    }

    let law = synthesize_feedback(&system, &weights, &gains).or_numeric()?;
    let meta = schema::Meta::new(hash);
    let file = schema::gain_file(&gains, Some(&law), args.tol, Some(meta.clone()));
    let json = serde_json::to_string_pretty(&file).or_usage()?;
    write_out(&args.out, &json).or_usage()?;

    if let Some(series_path) = &args.series_out {
        let sol = series.as_ref().ok_or_else(|| {
            Failure::Usage(anyhow!("--series-out only applies to the perturbation methods"))
        })?;
        let sfile = schema::series_file(sol, Some(meta));
        let json = serde_json::to_string_pretty(&sfile).or_usage()?;
        write_out(series_path, &json).or_usage()?;
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let (system, weights, hash) = checked_model(&args.model)?;
    let x0 = parse_x0(&args.x0, system.state_dim).or_usage()?;
    if args.y0 >= system.n_regimes {
        return Err(Failure::Usage(anyhow!("y0 out of range")));
    }
    let law = match &args.gains {
        Some(path) => Some(load_law(path, &system, &weights)?.1),
        None => None,
    };
    let meta = schema::Meta::new(hash);
    let pool = thread_pool(args.threads).or_usage()?;
    let paths = pool.install(|| {
        (0..args.paths)
            .into_par_iter()
            .map(|p| {
                simulate_path(
                    &system,
                    law.as_ref(),
                    &x0,
                    args.y0,
                    args.horizon,
                    args.dt,
                    SeededStream::new(args.seed, p as u64),
                )
            })
            .collect::<Result<Vec<_>, _>>()
    });
    let paths: Vec<_> = paths.or_numeric()?;
    let csv = if args.paths == 1 {
        schema::trajectory_csv(&paths[0], &meta.csv_header())
    } else {
        schema::batch_csv(&paths, &meta.csv_header())
    };
    write_out(&args.out, &csv).or_usage()?;
    println!("wrote {} path(s) to {}", paths.len(), args.out.display());
    Ok(())
}

fn cmd_estimate_cost(args: EstimateCostArgs) -> Result<(), Failure> {
    let (system, weights, hash) = checked_model(&args.model)?;
    let x0 = parse_x0(&args.x0, system.state_dim).or_usage()?;
    if args.y0 >= system.n_regimes {
        return Err(Failure::Usage(anyhow!("y0 out of range")));
    }
    let (_, law) = load_law(&args.gains, &system, &weights)?;
    let closed = stochstab_core::closed_loop(&system, &law);

    let pool = thread_pool(args.threads).or_usage()?;
    let results: Vec<_> = pool.install(|| {
        (0..args.paths)
            .into_par_iter()
            .map(|p| {
                path_cost(
                    &closed,
                    &weights,
                    Some(&law),
                    &x0,
                    args.y0,
                    args.horizon,
                    args.dt,
                    SeededStream::new(args.seed, p as u64),
                )
                .ok()
            })
            .collect()
    });
    let estimate = aggregate_costs(&results, args.horizon, args.dt).or_numeric()?;
    println!(
        "cost: {} +/- {} ({} paths, {} divergent, tail {:e})",
        estimate.mean,
        estimate.std_error,
        estimate.n_paths,
        estimate.n_divergent,
        estimate.tail_estimate
    );

    let comparison = match &args.compare_gains {
        None => None,
        Some(path) => {
            let (_, other_law) = load_law(path, &system, &weights)?;
            let other_closed = stochstab_core::closed_loop(&system, &other_law);
            // Both laws run on their own closed loop with shared
            // streams per path index.
            let mut a = Vec::with_capacity(args.paths);
            let mut b = Vec::with_capacity(args.paths);
            let cmp = compare_costs_two_systems(
                (&closed, Some(&law)),
                (&other_closed, Some(&other_law)),
                &weights,
                &x0,
                args.y0,
                args.horizon,
                args.dt,
                args.paths,
                args.seed,
                &mut a,
                &mut b,
            )
            .or_numeric()?;
            println!(
                "compare: other mean {} diff {} +/- {}",
                cmp.mean_b, cmp.diff_mean, cmp.diff_std_error
            );
            Some(cmp)
        }
    };

    let meta = schema::Meta::new(hash);
    let file = schema::estimate_file(&estimate, comparison.as_ref(), Some(meta));
    let json = serde_json::to_string_pretty(&file).or_usage()?;
    write_out(&args.out, &json).or_usage()?;
    Ok(())
}

/// Paired comparison where each law runs on its own closed-loop
/// system but path `p` shares one stream across both.
#[allow(clippy::too_many_arguments)]
fn compare_costs_two_systems(
    a: (&RegimeSystem, Option<&FeedbackLaw>),
    b: (&RegimeSystem, Option<&FeedbackLaw>),
    weights: &CostWeights,
    x0: &DVector<f64>,
    y0: usize,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
    a_costs: &mut Vec<f64>,
    b_costs: &mut Vec<f64>,
) -> Result<stochstab_core::cost::CostComparison> {
    let mut diffs = Vec::with_capacity(n_paths);
    let mut n_divergent = 0;
    for p in 0..n_paths {
        let stream = SeededStream::new(seed, p as u64);
        let ca = path_cost(a.0, weights, a.1, x0, y0, horizon, dt, stream);
        let cb = path_cost(b.0, weights, b.1, x0, y0, horizon, dt, stream);
        match (ca, cb) {
            (Ok(ca), Ok(cb)) => {
                a_costs.push(ca.cost);
                b_costs.push(cb.cost);
                diffs.push(ca.cost - cb.cost);
            }
            _ => n_divergent += 1,
        }
    }
    if n_divergent * 100 > n_paths || diffs.len() < 2 {
        bail!("{n_divergent} of {n_paths} comparison paths diverged");
    }
    let (diff_mean, diff_std_error) = stochstab_core::linalg::mean_and_std_error(&diffs);
    Ok(stochstab_core::cost::CostComparison {
        mean_a: stochstab_core::linalg::mean_and_std_error(a_costs).0,
        mean_b: stochstab_core::linalg::mean_and_std_error(b_costs).0,
        diff_mean,
        diff_std_error,
        n_paths: diffs.len(),
        n_divergent,
    })
}

fn cmd_check_stability(args: CheckStabilityArgs) -> Result<(), Failure> {
    let (system, weights, hash) = checked_model(&args.model)?;
    let (closed, law) = match &args.gains {
        Some(path) => {
            let (_, law) = load_law(path, &system, &weights)?;
            (stochstab_core::closed_loop(&system, &law), Some(law))
        }
        None => (system.clone(), None),
    };
    let report = stability_probability_estimate(
        &closed,
        law.as_ref(),
        args.eps1,
        args.delta,
        args.horizon,
        args.dt,
        args.paths,
        args.x0_samples,
        args.seed,
    )
    .or_numeric()?;
    println!("max_exceed_prob (Wilson 95% upper): {}", report.max_exceed_prob);
    let meta = schema::Meta::new(hash);
    let csv = schema::stability_csv(&report, &meta.csv_header());
    write_out(&args.out, &csv).or_usage()?;
    Ok(())
}

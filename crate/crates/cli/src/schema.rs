//! File formats: the JSON model schema, gain/series/estimate exports
//! and trajectory CSV. All conversions validate dimensions and name
//! the offending field.

use anyhow::{bail, ensure, Context, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stochstab_core::cost::{CostComparison, CostEstimate};
use stochstab_core::lyapunov::StabilityReport;
use stochstab_core::model::{
    CostWeights, DeterministicSwitchSpec, PoissonMark, RegimeJumpSpec, RegimeSystem, XiLaw,
};
use stochstab_core::perturb::{Majorant, SeriesSolution};
use stochstab_core::riccati::GainSet;
use stochstab_core::simulate::{EventKind, FeedbackLaw, TrajectoryPath};

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub m: usize,
    pub r: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub regimes: Vec<RegimeFile>,
    #[serde(rename = "Q")]
    pub q: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime_jump: Option<RegimeJumpFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub det_switch: Option<DetSwitchFile>,
    pub weights: WeightsFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeFile {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B")]
    pub b: Rows,
    #[serde(rename = "Sigma", default, skip_serializing_if = "Vec::is_empty")]
    pub sigma: Vec<Rows>,
    #[serde(rename = "PoissonJump", default, skip_serializing_if = "Vec::is_empty")]
    pub poisson_jump: Vec<PoissonJumpFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoissonJumpFile {
    pub weight: f64,
    #[serde(rename = "C")]
    pub c: Rows,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeJumpFile {
    /// `K[i][j]`, an N x N table of m x m matrices.
    #[serde(rename = "K")]
    pub k: Vec<Vec<Rows>>,
    #[serde(rename = "Qs", default, skip_serializing_if = "Vec::is_empty")]
    pub qs: Vec<Rows>,
    #[serde(default = "default_xi_law")]
    pub xi_law: String,
}

fn default_xi_law() -> String {
    "rademacher".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetSwitchFile {
    pub times: Vec<f64>,
    #[serde(rename = "P_H")]
    pub p_h: Rows,
    #[serde(default)]
    pub h0: usize,
    #[serde(rename = "J")]
    pub j: Vec<Rows>,
}

/// Per-regime weight entry: one matrix reused for all intervals, or an
/// explicit per-interval list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixOrPerK {
    One(Rows),
    PerK(Vec<Rows>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsFile {
    #[serde(rename = "M")]
    pub m: Vec<MatrixOrPerK>,
    #[serde(rename = "D")]
    pub d: Vec<MatrixOrPerK>,
}

fn to_matrix(rows: &Rows, nrows: usize, ncols: usize, name: &str) -> Result<DMatrix<f64>> {
    ensure!(
        rows.len() == nrows && rows.iter().all(|r| r.len() == ncols),
        "{name} must be {nrows}x{ncols}, got {}x{}",
        rows.len(),
        rows.first().map_or(0, Vec::len),
    );
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn weight_blocks(
    entries: &[MatrixOrPerK],
    dim: usize,
    label: &str,
) -> Result<Vec<Vec<DMatrix<f64>>>> {
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| match e {
            MatrixOrPerK::One(rows) => {
                Ok(vec![to_matrix(rows, dim, dim, &format!("{label}[{i}]"))?])
            }
            MatrixOrPerK::PerK(list) => list
                .iter()
                .enumerate()
                .map(|(k, rows)| to_matrix(rows, dim, dim, &format!("{label}[{i}][{k}]")))
                .collect(),
        })
        .collect()
}

/// Converts the JSON form into the core system and weights.
pub fn file_to_model(file: &ModelFile) -> Result<(RegimeSystem, CostWeights)> {
    let (m, r, n) = (file.m, file.r, file.n);
    ensure!(m > 0 && r > 0 && n > 0, "m, r, N must be positive");
    ensure!(
        file.regimes.len() == n,
        "regimes has {} entries, N = {n}",
        file.regimes.len()
    );

    let mut drift = Vec::with_capacity(n);
    let mut input = Vec::with_capacity(n);
    let mut diffusion = Vec::with_capacity(n);
    let mut poisson = Vec::with_capacity(n);
    for (i, reg) in file.regimes.iter().enumerate() {
        drift.push(to_matrix(&reg.a, m, m, &format!("regimes[{i}].A"))?);
        input.push(to_matrix(&reg.b, m, r, &format!("regimes[{i}].B"))?);
        diffusion.push(
            reg.sigma
                .iter()
                .enumerate()
                .map(|(l, s)| to_matrix(s, m, m, &format!("regimes[{i}].Sigma[{l}]")))
                .collect::<Result<Vec<_>>>()?,
        );
        poisson.push(
            reg.poisson_jump
                .iter()
                .enumerate()
                .map(|(j, pj)| {
                    Ok(PoissonMark {
                        weight: pj.weight,
                        coeff: to_matrix(&pj.c, m, m, &format!("regimes[{i}].PoissonJump[{j}].C"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        );
    }

    let generator = to_matrix(&file.q, n, n, "Q")?;

    let regime_jump = match &file.regime_jump {
        None => RegimeJumpSpec::identity(n, m),
        Some(rj) => {
            ensure!(
                rj.k.len() == n && rj.k.iter().all(|row| row.len() == n),
                "regime_jump.K must be an {n}x{n} table of matrices"
            );
            let transition_maps = rj
                .k
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(j, rows)| to_matrix(rows, m, m, &format!("regime_jump.K[{i}][{j}]")))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let random_maps = rj
                .qs
                .iter()
                .enumerate()
                .map(|(s, rows)| to_matrix(rows, m, m, &format!("regime_jump.Qs[{s}]")))
                .collect::<Result<Vec<_>>>()?;
            let xi_law = match rj.xi_law.as_str() {
                "rademacher" => XiLaw::Rademacher,
                "standard_normal" => XiLaw::StandardNormal,
                other => bail!("regime_jump.xi_law: unknown law {other:?}"),
            };
            RegimeJumpSpec { transition_maps, random_maps, xi_law }
        }
    };

    let det_switch = match &file.det_switch {
        None => DeterministicSwitchSpec::empty(m),
        Some(ds) => {
            let eta_states = ds.p_h.len().max(1);
            let eta_transition =
                to_matrix(&ds.p_h, eta_states, eta_states, "det_switch.P_H")?;
            ensure!(
                ds.j.len() == eta_states,
                "det_switch.J has {} maps for {eta_states} eta states",
                ds.j.len()
            );
            let jump_maps = ds
                .j
                .iter()
                .enumerate()
                .map(|(h, rows)| to_matrix(rows, m, m, &format!("det_switch.J[{h}]")))
                .collect::<Result<Vec<_>>>()?;
            ensure!(ds.h0 < eta_states, "det_switch.h0 out of range");
            DeterministicSwitchSpec {
                times: ds.times.clone(),
                eta_states,
                eta_transition,
                eta_init: ds.h0,
                jump_maps,
                ..DeterministicSwitchSpec::empty(m)
            }
        }
    };

    let system = RegimeSystem {
        state_dim: m,
        control_dim: r,
        n_regimes: n,
        drift,
        input,
        diffusion,
        poisson,
        generator,
        regime_jump,
        det_switch,
    };

    ensure!(file.weights.m.len() == n, "weights.M needs one entry per regime");
    ensure!(file.weights.d.len() == n, "weights.D needs one entry per regime");
    let weights = CostWeights {
        state: weight_blocks(&file.weights.m, m, "weights.M")?,
        control: weight_blocks(&file.weights.d, r, "weights.D")?,
        d_min: 1e-10,
    };
    Ok((system, weights))
}

/// Inverse of `file_to_model`, for programmatic model generation and
/// round-trip tests.
pub fn model_to_file(system: &RegimeSystem, weights: &CostWeights) -> ModelFile {
    let regimes = (0..system.n_regimes)
        .map(|i| RegimeFile {
            a: matrix_rows(&system.drift[i]),
            b: matrix_rows(&system.input[i]),
            sigma: system.diffusion[i].iter().map(matrix_rows).collect(),
            poisson_jump: system.poisson[i]
                .iter()
                .map(|mk| PoissonJumpFile { weight: mk.weight, c: matrix_rows(&mk.coeff) })
                .collect(),
        })
        .collect();
    let regime_jump = Some(RegimeJumpFile {
        k: system
            .regime_jump
            .transition_maps
            .iter()
            .map(|row| row.iter().map(matrix_rows).collect())
            .collect(),
        qs: system.regime_jump.random_maps.iter().map(matrix_rows).collect(),
        xi_law: match system.regime_jump.xi_law {
            XiLaw::Rademacher => "rademacher".into(),
            XiLaw::StandardNormal => "standard_normal".into(),
        },
    });
    let det_switch = if system.det_switch.times.is_empty() {
        None
    } else {
        Some(DetSwitchFile {
            times: system.det_switch.times.clone(),
            p_h: matrix_rows(&system.det_switch.eta_transition),
            h0: system.det_switch.eta_init,
            j: system.det_switch.jump_maps.iter().map(matrix_rows).collect(),
        })
    };
    let per_regime = |blocks: &Vec<Vec<DMatrix<f64>>>| -> Vec<MatrixOrPerK> {
        blocks
            .iter()
            .map(|row| {
                if row.len() == 1 {
                    MatrixOrPerK::One(matrix_rows(&row[0]))
                } else {
                    MatrixOrPerK::PerK(row.iter().map(matrix_rows).collect())
                }
            })
            .collect()
    };
    ModelFile {
        m: system.state_dim,
        r: system.control_dim,
        n: system.n_regimes,
        regimes,
        q: matrix_rows(&system.generator),
        regime_jump,
        det_switch,
        weights: WeightsFile {
            m: per_regime(&weights.state),
            d: per_regime(&weights.control),
        },
    }
}

/// Reads and parses a model file; also returns the SHA-256 of its
/// bytes for provenance metadata.
pub fn load_model(path: &std::path::Path) -> Result<(RegimeSystem, CostWeights, String)> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot read model {}", path.display()))?;
    let hash = hex(&Sha256::digest(&bytes));
    let file: ModelFile = serde_json::from_slice(&bytes)
        .with_context(|| format!("cannot parse model {}", path.display()))?;
    let (system, weights) = file_to_model(&file)?;
    Ok((system, weights, hash))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance block attached to every output artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub version: String,
    pub command: Vec<String>,
    pub model_sha256: String,
}

impl Meta {
    pub fn new(model_sha256: String) -> Self {
        // Scheduling flags don't affect results, so they are dropped
        // from the recorded command to keep artifacts byte-identical
        // across thread counts.
        let mut command = Vec::new();
        let mut args = std::env::args();
        while let Some(arg) = args.next() {
            if arg == "--threads" {
                args.next();
            } else if !arg.starts_with("--threads=") {
                command.push(arg);
            }
        }
        Self {
            version: env!("CARGO_PKG_VERSION").into(),
            command,
            model_sha256,
        }
    }

    /// CSV comment header carrying the same provenance.
    pub fn csv_header(&self) -> String {
        format!(
            "# version={}\n# command={}\n# model_sha256={}\n",
            self.version,
            self.command.join(" "),
            self.model_sha256
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainFile {
    /// `G[i][k]` as row-major nested arrays.
    #[serde(rename = "G")]
    pub g: Vec<Vec<Rows>>,
    pub residual: Vec<Vec<f64>>,
    pub tol: f64,
    /// Feedback `F[i][k] = D^-1 B' G`.
    #[serde(rename = "F", default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<Vec<Rows>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_definite: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<Meta>,
}

pub fn gain_file(
    gains: &GainSet,
    law: Option<&FeedbackLaw>,
    tol: f64,
    meta: Option<Meta>,
) -> GainFile {
    GainFile {
        g: gains
            .gains
            .iter()
            .map(|row| row.iter().map(matrix_rows).collect())
            .collect(),
        residual: gains.residual.clone(),
        tol,
        f: law.map(|l| {
            l.gains
                .iter()
                .map(|row| row.iter().map(matrix_rows).collect())
                .collect()
        }),
        positive_definite: Some(gains.is_positive_definite()),
        meta,
    }
}

pub fn load_gains(path: &std::path::Path, state_dim: usize) -> Result<(GainSet, GainFile)> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot read gains {}", path.display()))?;
    let file: GainFile = serde_json::from_slice(&bytes)
        .with_context(|| format!("cannot parse gains {}", path.display()))?;
    let gains = file
        .g
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(k, rows)| to_matrix(rows, state_dim, state_dim, &format!("G[{i}][{k}]")))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = GainSet::new(gains);
    set.residual = file.residual.clone();
    Ok((set, file))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MajorantBlock {
    pub l0: f64,
    pub c: f64,
    pub a: f64,
    pub b: f64,
    pub rho0: f64,
    pub radius: f64,
}

impl From<&Majorant> for MajorantBlock {
    fn from(m: &Majorant) -> Self {
        Self { l0: m.l0, c: m.c, a: m.a, b: m.b, rho0: m.rho0, radius: m.radius }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesFile {
    /// `coeffs[r][i][k]`.
    pub coeffs: Vec<Vec<Vec<Rows>>>,
    pub eps: f64,
    pub order: usize,
    pub majorant: MajorantBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<Meta>,
}

pub fn series_file(sol: &SeriesSolution, meta: Option<Meta>) -> SeriesFile {
    SeriesFile {
        coeffs: sol
            .coeffs
            .iter()
            .map(|blocks| {
                blocks
                    .iter()
                    .map(|row| row.iter().map(matrix_rows).collect())
                    .collect()
            })
            .collect(),
        eps: sol.eps,
        order: sol.order,
        majorant: (&sol.majorant).into(),
        meta,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareBlock {
    pub mean_other: f64,
    pub diff_mean: f64,
    pub diff_std_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateFile {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub n_divergent: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub dt: f64,
    pub tail_estimate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<Meta>,
}

pub fn estimate_file(
    est: &CostEstimate,
    compare: Option<&CostComparison>,
    meta: Option<Meta>,
) -> EstimateFile {
    EstimateFile {
        mean: est.mean,
        std_error: est.std_error,
        n_paths: est.n_paths,
        n_divergent: est.n_divergent,
        horizon: est.horizon,
        dt: est.dt,
        tail_estimate: est.tail_estimate,
        compare: compare.map(|c| CompareBlock {
            mean_other: c.mean_b,
            diff_mean: c.diff_mean,
            diff_std_error: c.diff_std_error,
        }),
        meta,
    }
}

fn event_label(kind: &EventKind) -> String {
    match kind {
        EventKind::Poisson { mark, count } => format!("poisson:mark={mark},count={count}"),
        EventKind::RegimeJump { from, to } => format!("regime:{from}->{to}"),
        EventKind::DetSwitch { eta } => format!("switch:eta={eta}"),
    }
}

/// Full-path CSV: time, state, regime, eta, control, event markers.
pub fn trajectory_csv(path: &TrajectoryPath, header: &str) -> String {
    let m = path.states.first().map_or(0, |x| x.len());
    let r = path.controls.first().map_or(0, |u| u.len());
    let mut out = String::from(header);
    out.push_str("time");
    for j in 0..m {
        out.push_str(&format!(",x_{j}"));
    }
    out.push_str(",regime,eta");
    for j in 0..r {
        out.push_str(&format!(",u_{j}"));
    }
    out.push_str(",event_kind\n");
    for (idx, &t) in path.grid.iter().enumerate() {
        out.push_str(&format!("{t}"));
        for j in 0..m {
            out.push_str(&format!(",{}", path.states[idx][j]));
        }
        out.push_str(&format!(",{},{}", path.regimes[idx], path.etas[idx]));
        for j in 0..r {
            out.push_str(&format!(",{}", path.controls[idx][j]));
        }
        let labels: Vec<String> = path
            .events
            .iter()
            .filter(|e| (e.time - t).abs() <= f64::EPSILON.max(1e-12 * t.abs()))
            .map(|e| event_label(&e.kind))
            .collect();
        out.push(',');
        out.push_str(&labels.join(";"));
        out.push('\n');
    }
    out
}

/// Batch summary CSV: one row per path.
pub fn batch_csv(paths: &[TrajectoryPath], header: &str) -> String {
    let m = paths
        .first()
        .and_then(|p| p.states.first())
        .map_or(0, |x| x.len());
    let mut out = String::from(header);
    out.push_str("path,time");
    for j in 0..m {
        out.push_str(&format!(",x_{j}"));
    }
    out.push_str(",regime,eta,n_events\n");
    for (p, path) in paths.iter().enumerate() {
        let last = path.grid.len() - 1;
        out.push_str(&format!("{p},{}", path.grid[last]));
        for j in 0..m {
            out.push_str(&format!(",{}", path.states[last][j]));
        }
        out.push_str(&format!(
            ",{},{},{}\n",
            path.regimes[last],
            path.etas[last],
            path.events.len()
        ));
    }
    out
}

/// Stability table CSV: one row per sampled initial state.
pub fn stability_csv(report: &StabilityReport, header: &str) -> String {
    let m = report.rows.first().map_or(0, |r| r.x0.len());
    let mut out = String::from(header);
    out.push_str(&format!(
        "# eps1={} delta={} T={}\n",
        report.threshold, report.radius, report.horizon
    ));
    for j in 0..m {
        out.push_str(&format!("x0_{j},"));
    }
    out.push_str("regime,n_exceed,n_paths,probability,wilson_upper\n");
    for row in &report.rows {
        for j in 0..m {
            out.push_str(&format!("{},", row.x0[j]));
        }
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.regime, row.n_exceed, row.n_paths, row.probability, row.wilson_upper
        ));
    }
    out
}

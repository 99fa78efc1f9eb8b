//! The build → certify → grid → validate steps, independent of file handling.

use std::sync::Arc;

use koopman_roa::dynsys::VectorField;
use koopman_roa::generator::{assemble, left_eigenpairs, solve_all, SolveOptions};
use koopman_roa::kernel::{CollocationSet, TaylorKernel, CONDITION_WARNING};
use koopman_roa::lyapunov::{build_candidate, LyapunovCandidate};
use koopman_roa::lyapunov::EvaluatedSample;
use koopman_roa::odeint::{classify_batch, filter_collocation, Outcome};
use koopman_roa::scenario::{certify, epsilon_bound, sample_uniform, violation_fraction_of, Certificate, CertifyOptions, ScenarioSample, SUPPORT_SIZE};
use serde::{Deserialize, Serialize};

use crate::config::Resolved;
use crate::CliError;

fn num(e: koopman_roa::Error) -> CliError {
    CliError::Numerical(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexValue {
    pub re: f64,
    pub im: f64,
}

impl From<num_complex::Complex64> for ComplexValue {
    fn from(z: num_complex::Complex64) -> Self {
        Self { re: z.re, im: z.im }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenfunctionReport {
    pub lambda: ComplexValue,
    pub weight: f64,
    pub residual: f64,
    pub fallback_used: bool,
    pub solve_bits: u32,
    pub log10_condition: f64,
    /// `φ(0)`, the coefficient sum.
    pub origin_value: ComplexValue,
    /// Working precision for evaluation, `None` for double precision.
    pub eval_bits: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub system: String,
    pub dim: usize,
    pub spectrum: Vec<ComplexValue>,
    pub collocation_requested: usize,
    pub collocation_used: usize,
    pub filtered: bool,
    pub gram_bits: u32,
    pub gram_log10_condition: f64,
    pub eigenfunctions: Vec<EigenfunctionReport>,
    pub max_residual: f64,
    pub warnings: Vec<String>,
}

pub struct BuildOutput {
    pub candidate: LyapunovCandidate,
    pub report: BuildReport,
}

/// Samples (and optionally filters) collocation points, solves every
/// eigenfunction and assembles the Lyapunov candidate.
pub fn run_build(r: &Resolved) -> Result<BuildOutput, CliError> {
    let cfg = &r.config;
    let raw = sample_uniform(&r.collocation_box, cfg.m, cfg.seeds.collocation).map_err(num)?;
    let set = if cfg.collocation_filter {
        filter_collocation(&r.vf, raw, &r.integration).map_err(num)?
    } else {
        CollocationSet::new(raw, r.vf.domain()).map_err(num)?
    };
    let used = set.len();
    let kernel = TaylorKernel::new(cfg.eta).map_err(num)?;
    let mats = assemble(&r.vf, kernel, Arc::new(set)).map_err(num)?;
    let spectrum = left_eigenpairs(mats.jac()).map_err(num)?;
    let opts = SolveOptions {
        singular_rtol: cfg.solver.singular_rtol,
        center: cfg.solver.center,
    };
    let efs = solve_all(&mats, &spectrum, &opts).map_err(num)?;
    let candidate = build_candidate(&r.vf, &spectrum, efs).map_err(num)?;
    let mut warnings = Vec::new();
    if mats.gram().ill_conditioned() {
        warnings.push(format!(
            "Gram condition estimate 1e{:.1} exceeds {CONDITION_WARNING:e}; entries are kept in {}-bit arithmetic",
            mats.gram().log10_condition(),
            mats.gram().bits()
        ));
    }
    let eigenfunctions: Vec<EigenfunctionReport> = candidate
        .terms()
        .iter()
        .map(|t| {
            let ef = &t.eigenfunction;
            EigenfunctionReport {
                lambda: ef.lambda().into(),
                weight: t.weight,
                residual: ef.residual(),
                fallback_used: ef.fallback_used(),
                solve_bits: ef.solve_bits(),
                log10_condition: ef.log10_condition(),
                origin_value: ef.offset().into(),
                eval_bits: ef.expansion().eval_bits(),
            }
        })
        .collect();
    for e in eigenfunctions.iter().filter(|e| e.fallback_used) {
        warnings.push(format!("least-squares fallback used for λ = {} + {}i", e.lambda.re, e.lambda.im));
    }
    let max_residual = eigenfunctions.iter().map(|e| e.residual).fold(0.0, f64::max);
    let report = BuildReport {
        system: r.vf.name().to_string(),
        dim: r.vf.dim(),
        spectrum: spectrum.eigenvalues().into_iter().map(Into::into).collect(),
        collocation_requested: cfg.m,
        collocation_used: used,
        filtered: cfg.collocation_filter,
        gram_bits: mats.gram().bits(),
        gram_log10_condition: mats.gram().log10_condition(),
        eigenfunctions,
        max_residual,
        warnings,
    };
    Ok(BuildOutput { candidate, report })
}

/// Checks that a loaded candidate matches the configured system's spectrum.
pub fn check_compatible(vf: &VectorField, candidate: &LyapunovCandidate) -> Result<(), CliError> {
    let spectrum = left_eigenpairs(&vf.jacobian_at_origin().map_err(num)?).map_err(num)?;
    let reps: Vec<_> = spectrum.representatives().map(|p| p.lambda).collect();
    let ok = reps.len() == candidate.terms().len()
        && reps
            .iter()
            .zip(candidate.terms())
            .all(|(l, t)| (l - t.eigenfunction.lambda()).norm() <= 1e-12 * (1.0 + l.norm()));
    if ok {
        Ok(())
    } else {
        Err(CliError::Input("candidate eigenvalues do not match the configured system".into()))
    }
}

/// Draws `N` scenarios on the system domain and certifies the best shell.
pub fn run_certify(r: &Resolved, candidate: &LyapunovCandidate) -> Result<Certificate, CliError> {
    let cfg = &r.config;
    let sample = ScenarioSample::draw(candidate, r.vf.domain(), cfg.n_scenarios, cfg.seeds.scenario).map_err(num)?;
    let opts = CertifyOptions {
        beta: cfg.beta,
        xi: r.xi,
        force_origin_shell: cfg.force_origin_shell,
    };
    certify(&sample, &opts).map_err(num)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub axes: [usize; 2],
    pub resolution: usize,
    pub file: String,
    pub truth_file: Option<String>,
    pub in_shell: usize,
}

pub struct GridOutput {
    pub report: GridReport,
    pub grid_csv: String,
    pub truth_csv: Option<String>,
}

/// Grid node `k` of `res` spanning `[lo, hi]`; a single node sits at the center.
fn node(lo: f64, hi: f64, k: usize, res: usize) -> f64 {
    if res == 1 {
        0.5 * (lo + hi)
    } else {
        lo + (hi - lo) * k as f64 / (res - 1) as f64
    }
}

/// Evaluates `V`, `V̇` and shell membership on a 2-D cross-section through
/// the origin; with `oracle`, also labels every node by integration.
pub fn run_grid(r: &Resolved, candidate: &LyapunovCandidate, cert: &Certificate, axes: [usize; 2], resolution: usize, oracle: bool) -> Result<GridOutput, CliError> {
    let n = r.vf.dim();
    if axes.iter().any(|a| *a == 0 || *a > n) || axes[0] == axes[1] {
        return Err(CliError::config("grid.axes", format!("need two distinct indices in 1..={n}")));
    }
    if resolution == 0 {
        return Err(CliError::config("grid.resolution", "must be positive"));
    }
    let (a, b) = (axes[0] - 1, axes[1] - 1);
    let (lo, hi) = (r.vf.domain().lower(), r.vf.domain().upper());
    let mut points = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            let mut x = vec![0.0; n];
            x[a] = node(lo[a], hi[a], i, resolution);
            x[b] = node(lo[b], hi[b], j, resolution);
            points.push(x);
        }
    }
    let sample = candidate.batch_eval(points).map_err(num)?;
    let csv_err = |e: csv::Error| CliError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["u", "v", "V", "Vdot", "in_shell"]).map_err(csv_err)?;
    let mut in_shell = 0;
    for ((x, v), d) in sample.points.iter().zip(&sample.v).zip(&sample.vdot) {
        let inside = cert.contains(*v);
        in_shell += usize::from(inside);
        w.write_record([
            format!("{:e}", x[a]),
            format!("{:e}", x[b]),
            format!("{v:e}"),
            format!("{d:e}"),
            u8::from(inside).to_string(),
        ])
        .map_err(csv_err)?;
    }
    let grid_csv = String::from_utf8(w.into_inner().map_err(|e| CliError::Io(e.to_string()))?).expect("csv is utf-8");
    let name = format!("{}_{}", axes[0], axes[1]);
    let truth_csv = if oracle {
        let labels = classify_batch(&r.vf, &sample.points, &r.integration).map_err(num)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["u", "v", "label", "t_final"]).map_err(csv_err)?;
        for (x, l) in sample.points.iter().zip(&labels) {
            w.write_record([format!("{:e}", x[a]), format!("{:e}", x[b]), l.outcome.as_str().to_string(), format!("{:e}", l.t_final)])
                .map_err(csv_err)?;
        }
        Some(String::from_utf8(w.into_inner().map_err(|e| CliError::Io(e.to_string()))?).expect("csv is utf-8"))
    } else {
        None
    };
    Ok(GridOutput {
        report: GridReport {
            axes,
            resolution,
            file: format!("grid_{name}.csv"),
            truth_file: oracle.then(|| format!("truth_{name}.csv")),
            in_shell,
        },
        grid_csv,
        truth_csv,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    /// Shell points for the converged fraction: fresh validation points in
    /// the shell first, then further uniform draws until `oracle_points`.
    pub shell_points: usize,
    pub converged: usize,
    pub escaped: usize,
    pub undecided: usize,
    /// `converged / (converged + escaped)`; undecided points are excluded.
    pub converged_fraction: Option<f64>,
    /// Uniform draws scanned: the validation sample plus the extra draws.
    pub draws: usize,
    /// Scanned draws inside the shell; every one of them is integrated.
    pub draws_in_shell: usize,
    pub box_volume: f64,
    /// `Vol · #(in shell, escaping) / draws`; undecided points are not counted.
    pub volume_outside_roa: f64,
    /// `Vol · #(in shell, V̇ ≥ 0) / draws`.
    pub volume_violation: f64,
    /// `ε(2) · Vol`.
    pub volume_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub seed: u64,
    pub points: usize,
    pub violation_fraction: f64,
    pub epsilon: f64,
    pub within_bound: bool,
    pub oracle: Option<OracleReport>,
}

/// Cap on the extra uniform draws used to collect oracle shell points.
const MAX_ORACLE_DRAWS: usize = 10_000_000;

/// Estimates the violation probability on fresh points and, with `oracle`,
/// checks shell points against integrated trajectories.
pub fn run_validate(r: &Resolved, candidate: &LyapunovCandidate, cert: &Certificate, oracle: bool) -> Result<ValidationReport, CliError> {
    let cfg = &r.config;
    if cfg.seeds.validation == cfg.seeds.scenario {
        return Err(CliError::config("seeds.validation", "must differ from seeds.scenario"));
    }
    let fresh = sample_uniform(r.vf.domain(), r.validation_points, cfg.seeds.validation).map_err(num)?;
    let values = candidate.batch_eval(fresh).map_err(num)?;
    let violation = violation_fraction_of(&values, cert).map_err(num)?;
    let epsilon = epsilon_bound(SUPPORT_SIZE, cert.n_scenarios, cert.beta).map_err(num)?;
    let oracle = if oracle { Some(trajectory_oracle(r, candidate, cert, &values, epsilon)?) } else { None };
    Ok(ValidationReport {
        seed: cfg.seeds.validation,
        points: values.len(),
        violation_fraction: violation,
        epsilon,
        within_bound: violation <= epsilon,
        oracle,
    })
}

fn trajectory_oracle(r: &Resolved, candidate: &LyapunovCandidate, cert: &Certificate, fresh: &EvaluatedSample, epsilon: f64) -> Result<OracleReport, CliError> {
    let mut shell: Vec<Vec<f64>> = Vec::new();
    let mut violating = 0usize;
    let mut take_shell = |vals: &EvaluatedSample, shell: &mut Vec<Vec<f64>>| {
        for i in 0..vals.len() {
            if cert.contains(vals.v[i]) {
                violating += usize::from(!(vals.vdot[i] < 0.0));
                shell.push(vals.points[i].clone());
            }
        }
    };
    take_shell(fresh, &mut shell);
    let mut draws = fresh.len();
    let target = r.oracle_points;
    // a stream distinct from the validation sample
    let seed = r.config.seeds.validation ^ 0x9e37_79b9_7f4a_7c15;
    let mut batch = 10_000usize;
    let mut round = 0u64;
    while shell.len() < target && draws < fresh.len() + MAX_ORACLE_DRAWS {
        let pts = sample_uniform(r.vf.domain(), batch, seed.wrapping_add(round)).map_err(num)?;
        let vals = candidate.batch_eval(pts).map_err(num)?;
        draws += vals.len();
        take_shell(&vals, &mut shell);
        round += 1;
        batch = (batch * 2).min(1_000_000);
    }
    let labels = classify_batch(&r.vf, &shell, &r.integration).map_err(num)?;
    let all_escaped = labels.iter().filter(|l| l.outcome == Outcome::Escaped).count();
    let first = &labels[..labels.len().min(target)];
    let count = |o| first.iter().filter(|l| l.outcome == o).count();
    let (converged, escaped, undecided) = (count(Outcome::Converged), count(Outcome::Escaped), count(Outcome::Undecided));
    let decided = converged + escaped;
    let box_volume = r.vf.domain().volume();
    let per_draw = box_volume / draws as f64;
    Ok(OracleReport {
        shell_points: first.len(),
        converged,
        escaped,
        undecided,
        converged_fraction: (decided > 0).then(|| converged as f64 / decided as f64),
        draws,
        draws_in_shell: shell.len(),
        box_volume,
        volume_outside_roa: all_escaped as f64 * per_draw,
        volume_violation: violating as f64 * per_draw,
        volume_bound: epsilon * box_volume,
    })
}

//! Command-line surface: argument parsing, file layout and stage sequencing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use koopman_roa::lyapunov::LyapunovCandidate;
use koopman_roa::scenario::Certificate;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Resolved};
use crate::pipeline::{self, BuildReport, GridReport, ValidationReport};
use crate::{candidate_io, CliError};

pub const CANDIDATE_FILE: &str = "candidate.txt";
pub const CERTIFICATE_FILE: &str = "certificate.json";
pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Parser)]
#[command(name = "kroa", version, about = "Kernel Koopman Lyapunov candidates with scenario-certified regions of attraction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: GlobalOpts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Solve the eigenfunctions and write candidate.txt.
    Build,
    /// Certify a shell for the stored candidate and write certificate.json.
    Certify,
    /// Write the configured 2-D cross-section as grid_<a>_<b>.csv.
    Grid,
    /// Estimate the violation probability on fresh samples.
    Validate,
    /// Run build, certify, grid (when configured) and validate.
    All,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalOpts {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true, value_name = "PATH", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration: example1, example2 or example3.
    #[arg(long, global = true, value_name = "NAME")]
    pub preset: Option<String>,
    /// Seed for the collocation sample
    #[arg(long, global = true, value_name = "INT")]
    pub seed_collocation: Option<u64>,
    /// Seed for the certification scenarios
    #[arg(long, global = true, value_name = "INT")]
    pub seed_scenario: Option<u64>,
    /// Seed for the fresh validation sample
    #[arg(long, global = true, value_name = "INT")]
    pub seed_validation: Option<u64>,
    /// Restrict the certified shell to the one adjacent to the origin.
    #[arg(long, global = true)]
    pub force_origin_shell: bool,
    /// Label grid nodes and shell samples by integrating trajectories.
    #[arg(long, global = true)]
    pub trajectory_oracle: bool,
    /// Output directory, overriding `outputs` in the config.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Contents of `report.json`. Everything here is a deterministic function of
/// the echoed configuration; wall-clock timings go to `timing.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: Option<ExperimentConfig>,
    pub build: Option<BuildReport>,
    pub certificate: Option<Certificate>,
    pub grid: Option<GridReport>,
    pub validation: Option<ValidationReport>,
}

impl GlobalOpts {
    /// The configuration after applying command-line overrides.
    pub fn experiment(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(p), None) => ExperimentConfig::load(p)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => return Err(CliError::Config("give --config <path> or --preset <name>".into())),
            (Some(_), Some(_)) => return Err(CliError::Config("--config and --preset are mutually exclusive".into())),
        };
        if let Some(s) = self.seed_collocation {
            cfg.seeds.collocation = s;
        }
        if let Some(s) = self.seed_scenario {
            cfg.seeds.scenario = s;
        }
        if let Some(s) = self.seed_validation {
            cfg.seeds.validation = s;
        }
        if self.force_origin_shell {
            cfg.force_origin_shell = true;
        }
        if let Some(out) = &self.out {
            cfg.outputs = out.clone();
        }
        Ok(cfg)
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io(path, e))
}

fn read_input(path: &Path, what: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {what} {}: {e} (run the earlier stage first)", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report values serialize") + "\n"
}

/// One experiment run against an output directory.
pub struct Session {
    resolved: Resolved,
    out: PathBuf,
    oracle: bool,
    report: Report,
    timing: BTreeMap<String, f64>,
}

impl Session {
    pub fn new(opts: &GlobalOpts) -> Result<Self, CliError> {
        let cfg = opts.experiment()?;
        let resolved = cfg.resolve()?;
        let out = cfg.outputs.clone();
        std::fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
        let report = match std::fs::read_to_string(out.join(REPORT_FILE)) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => Report::default(),
        };
        let timing = match std::fs::read_to_string(out.join(TIMING_FILE)) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        Ok(Self {
            report: Report { config: Some(cfg), ..report },
            resolved,
            out,
            oracle: opts.trajectory_oracle,
            timing,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn report(&self) -> &Report {
        &self.report
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&Self) -> Result<T, CliError>) -> Result<T, CliError> {
        let start = Instant::now();
        let r = f(self)?;
        self.timing.insert(stage.to_string(), start.elapsed().as_secs_f64());
        Ok(r)
    }

    fn save(&self) -> Result<(), CliError> {
        write_file(&self.out.join(REPORT_FILE), &to_json(&self.report))?;
        write_file(&self.out.join(TIMING_FILE), &to_json(&self.timing))
    }

    pub fn build(&mut self) -> Result<LyapunovCandidate, CliError> {
        let built = self.timed("build", |s| pipeline::run_build(&s.resolved))?;
        write_file(&self.out.join(CANDIDATE_FILE), &candidate_io::write(&built.candidate))?;
        // downstream results belong to the previous candidate
        self.report.build = Some(built.report);
        self.report.certificate = None;
        self.report.grid = None;
        self.report.validation = None;
        self.save()?;
        Ok(built.candidate)
    }

    pub fn load_candidate(&self) -> Result<LyapunovCandidate, CliError> {
        let text = read_input(&self.out.join(CANDIDATE_FILE), "candidate")?;
        let candidate = candidate_io::parse(&text)?.attach(&self.resolved.vf)?;
        pipeline::check_compatible(&self.resolved.vf, &candidate)?;
        Ok(candidate)
    }

    pub fn certify(&mut self, candidate: &LyapunovCandidate) -> Result<Certificate, CliError> {
        let cert = self.timed("certify", |s| pipeline::run_certify(&s.resolved, candidate))?;
        write_file(&self.out.join(CERTIFICATE_FILE), &to_json(&cert))?;
        self.report.certificate = Some(cert.clone());
        self.report.grid = None;
        self.report.validation = None;
        self.save()?;
        Ok(cert)
    }

    pub fn load_certificate(&self) -> Result<Certificate, CliError> {
        let path = self.out.join(CERTIFICATE_FILE);
        let text = read_input(&path, "certificate")?;
        let cert: Certificate = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if cert.n_scenarios != self.resolved.config.n_scenarios || cert.beta != self.resolved.config.beta {
            return Err(CliError::Input("certificate was produced with a different N or beta than the configuration".into()));
        }
        Ok(cert)
    }

    pub fn has_grid(&self) -> bool {
        self.resolved.config.grid.is_some()
    }

    pub fn grid(&mut self, candidate: &LyapunovCandidate, cert: &Certificate) -> Result<GridReport, CliError> {
        let g = self
            .resolved
            .config
            .grid
            .clone()
            .ok_or_else(|| CliError::config("grid", "required by the grid subcommand"))?;
        let out = self.timed("grid", |s| pipeline::run_grid(&s.resolved, candidate, cert, g.axes, g.resolution, s.oracle))?;
        write_file(&self.out.join(&out.report.file), &out.grid_csv)?;
        if let (Some(name), Some(csv)) = (&out.report.truth_file, &out.truth_csv) {
            write_file(&self.out.join(name), csv)?;
        }
        self.report.grid = Some(out.report.clone());
        self.save()?;
        Ok(out.report)
    }

    pub fn validate(&mut self, candidate: &LyapunovCandidate, cert: &Certificate) -> Result<ValidationReport, CliError> {
        let v = self.timed("validate", |s| pipeline::run_validate(&s.resolved, candidate, cert, s.oracle))?;
        self.report.validation = Some(v.clone());
        self.save()?;
        Ok(v)
    }
}

/// Runs one subcommand to completion.
pub fn run(cli: &Cli) -> Result<Session, CliError> {
    let mut s = Session::new(&cli.opts)?;
    match cli.command {
        Command::Build => {
            s.build()?;
        }
        Command::Certify => {
            let c = s.load_candidate()?;
            s.certify(&c)?;
        }
        Command::Grid => {
            let c = s.load_candidate()?;
            let cert = s.load_certificate()?;
            s.grid(&c, &cert)?;
        }
        Command::Validate => {
            let c = s.load_candidate()?;
            let cert = s.load_certificate()?;
            s.validate(&c, &cert)?;
        }
        Command::All => {
            let c = s.build()?;
            let cert = s.certify(&c)?;
            if s.has_grid() {
                s.grid(&c, &cert)?;
            }
            s.validate(&c, &cert)?;
        }
    }
    Ok(s)
}

/// Human-readable summary of what a run produced.
pub fn summary(s: &Session) -> String {
    let r = s.report();
    let mut lines = vec![format!("outputs in {}", s.out_dir().display())];
    if let Some(b) = &r.build {
        lines.push(format!("built {} eigenfunctions on {} collocation points, max residual {:.3e}", b.eigenfunctions.len(), b.collocation_used, b.max_residual));
        lines.extend(b.warnings.iter().map(|w| format!("warning: {w}")));
    }
    if let Some(c) = &r.certificate {
        lines.push(format!("shell [{:.6e}, {:.6e}], epsilon {:.3e}", c.theta1, c.theta2, c.epsilon));
        lines.extend(c.warnings.iter().map(|w| format!("warning: {w}")));
    }
    if let Some(g) = &r.grid {
        lines.push(format!("grid {} ({} of {} nodes in the shell)", g.file, g.in_shell, g.resolution * g.resolution));
    }
    if let Some(v) = &r.validation {
        lines.push(format!("violation fraction {:.3e} on {} fresh points", v.violation_fraction, v.points));
    }
    lines.join("\n")
}

//! Scenario files, run orchestration and artifact emission.
//!
//! A scenario is a TOML document with the sections `[model]`, `[initial]`,
//! `[controller]`, `[solver]`, `[outputs]` and `[expect]`; see the
//! built-in files under `scenarios/` for complete examples.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    boundary_residuals, constraint_audit, decay_bound_check, eta_drift_error, ConstraintReport,
    DecayBound,
};
use crate::controllers::{ControlError, Controller, ControllerKind, ControllerSpec, Gains};
use crate::equilibrium::{
    build_equilibrium, certify_assumption1, default_lambda_grid, CertError, Equilibrium,
    EquilibriumError, KernelCert,
};
use crate::exprfn::ParseError;
use crate::lyapunov::{self, DerivativeCheck, LyapReport, RATE_MARGIN};
use crate::model::{AgeFunction, AgeGrid, FunctionSource, ModelError, ModelParams};
use crate::solver::{simulate, SolverConfig, SolverError, Trajectory};
use crate::transforms::pi_projection;

pub const BUILTIN: [(&str, &str); 6] = [
    ("fig1", include_str!("../scenarios/fig1.toml")),
    ("fig2", include_str!("../scenarios/fig2.toml")),
    ("fig3", include_str!("../scenarios/fig3.toml")),
    ("fig4", include_str!("../scenarios/fig4.toml")),
    ("sec7", include_str!("../scenarios/sec7.toml")),
    ("sec7-bounded", include_str!("../scenarios/sec7-bounded.toml")),
];

/// Relative output error regarded as converged.
pub const Y_TOL: f64 = 0.01;
/// Tolerance of the projection identity `η(t) − η(0) = ∫(D* − D)`.
pub const ETA_TOL: f64 = 1e-4;
/// Largest admissible exponential-envelope constant.
pub const ENVELOPE_MAX: f64 = 1e3;
/// Relative agreement required between finite-difference and analytic V̇.
pub const VDOT_TOL: f64 = 0.02;
/// `V_θ` values below this are excluded from the derivative comparison.
pub const VTHETA_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("unknown scenario `{0}` (not a built-in name or readable file)")]
    UnknownScenario(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario `{name}`: {source}")]
    Toml {
        name: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("scenario `{name}`: expression for `{key}`: {source}")]
    Expr {
        name: String,
        key: String,
        #[source]
        source: ParseError,
    },
    #[error("scenario `{name}`: {message}")]
    Invalid { name: String, message: String },
    #[error("scenario `{name}`: {source}")]
    Model {
        name: String,
        #[source]
        source: ModelError,
    },
    #[error("scenario `{name}`: {source}")]
    Equilibrium {
        name: String,
        #[source]
        source: EquilibriumError,
    },
    #[error("scenario `{name}`: {source}; set solver.sigma to run without a certificate")]
    Certificate {
        name: String,
        #[source]
        source: CertError,
    },
    #[error("scenario `{name}`: {source}")]
    Controller {
        name: String,
        #[source]
        source: ControlError,
    },
    #[error("scenario `{name}`: {source}")]
    Solver {
        name: String,
        #[source]
        source: SolverError,
    },
}

// ---- file schema ----

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum FunctionValue {
    Number(f64),
    Expr(String),
    Table(Vec<(f64, f64)>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    #[serde(rename = "A")]
    max_age: f64,
    n: usize,
    mu: FunctionValue,
    k: FunctionValue,
    p: FunctionValue,
    #[serde(rename = "M", default = "default_scale")]
    scale: f64,
}

fn default_scale() -> f64 {
    8.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mode {
    pub amplitude: f64,
    pub omega: f64,
    pub sigma: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialFile {
    f0: FunctionValue,
    mode: Option<Mode>,
    #[serde(rename = "D0")]
    d0: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControllerFile {
    variant: String,
    nominal: Option<String>,
    k1: Option<f64>,
    k2: Option<f64>,
    k3: Option<f64>,
    c1: Option<f64>,
    c2: Option<f64>,
    theta: Option<f64>,
    d_lo: Option<f64>,
    d_hi: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverFile {
    t_end: f64,
    #[serde(default = "default_stride")]
    record_stride: usize,
    #[serde(default = "default_tol_bc")]
    tol_bc: f64,
    sigma: Option<f64>,
}

fn default_stride() -> usize {
    10
}

fn default_tol_bc() -> f64 {
    crate::model::DEFAULT_TOL_BC
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputsFile {
    dir: Option<PathBuf>,
    #[serde(default)]
    profile_times: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    /// The run must (true) or must not (false) drive D below zero.
    pub negative_dilution: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: Option<String>,
    model: ModelFile,
    initial: InitialFile,
    controller: ControllerFile,
    solver: SolverFile,
    #[serde(default)]
    outputs: OutputsFile,
    #[serde(default)]
    expect: Expectations,
}

// ---- validated scenario ----

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub max_age: f64,
    pub cells: usize,
    pub mu: FunctionSource,
    pub k: FunctionSource,
    pub p: FunctionSource,
    pub scale: f64,
    pub f0: FunctionSource,
    pub mode: Option<Mode>,
    pub d0: f64,
    pub controller: ControllerSpec,
    pub t_end: f64,
    pub record_stride: usize,
    pub tol_bc: f64,
    pub sigma: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub profile_times: Vec<f64>,
    pub expect: Expectations,
}

impl Scenario {
    pub fn from_toml(text: &str, fallback_name: &str) -> Result<Self, CliError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|source| CliError::Toml {
            name: fallback_name.to_string(),
            source,
        })?;
        let name = file.name.clone().unwrap_or_else(|| fallback_name.to_string());
        let invalid = |message: String| CliError::Invalid {
            name: name.clone(),
            message,
        };
        let source = |key: &str, v: &FunctionValue| -> Result<FunctionSource, CliError> {
            match v {
                FunctionValue::Number(c) => Ok(FunctionSource::constant(*c)),
                FunctionValue::Expr(s) => FunctionSource::parse(s).map_err(|e| CliError::Expr {
                    name: name.clone(),
                    key: key.to_string(),
                    source: e,
                }),
                FunctionValue::Table(t) => Ok(FunctionSource::Table(t.clone())),
            }
        };
        let c = &file.controller;
        let kind: ControllerKind = c.variant.parse().map_err(invalid)?;
        let defaults = Gains::default();
        let gains = Gains {
            k1: c.k1.unwrap_or(defaults.k1),
            k2: c.k2.unwrap_or(defaults.k2),
            k3: c.k3.unwrap_or(defaults.k3),
            c1: c.c1.unwrap_or(defaults.c1),
            c2: c.c2.unwrap_or(defaults.c2),
            theta: c.theta.unwrap_or(defaults.theta),
        };
        let mut spec = ControllerSpec::new(kind, gains);
        if let Some(nominal) = &c.nominal {
            spec = spec.with_nominal(nominal.parse().map_err(invalid)?);
        }
        match (c.d_lo, c.d_hi) {
            (Some(lo), hi) => {
                let hi = hi.unwrap_or(f64::INFINITY);
                if !(lo < hi) {
                    return Err(invalid(format!("d_lo = {lo} must be below d_hi = {hi}")));
                }
                spec = spec.with_bounds(lo, hi);
            }
            (None, Some(_)) => return Err(invalid("d_hi given without d_lo".into())),
            (None, None) => {}
        }
        spec.validate_gains()
            .map_err(|source| CliError::Controller { name: name.clone(), source })?;

        let s = &file.solver;
        if !(s.t_end.is_finite() && s.t_end > 0.0) {
            return Err(invalid(format!("t_end must be positive, got {}", s.t_end)));
        }
        if s.record_stride == 0 {
            return Err(invalid("record_stride must be positive".into()));
        }
        if !(s.tol_bc > 0.0) {
            return Err(invalid(format!("tol_bc must be positive, got {}", s.tol_bc)));
        }
        if let Some(sigma) = s.sigma {
            if !(sigma.is_finite() && sigma > 0.0) {
                return Err(invalid(format!("sigma must be positive, got {sigma}")));
            }
        }
        if let Some(t) = file.outputs.profile_times.iter().find(|t| !(**t >= 0.0 && **t <= s.t_end)) {
            return Err(invalid(format!("profile time {t} outside [0, {}]", s.t_end)));
        }
        if !file.initial.d0.is_finite() {
            return Err(invalid("D0 must be finite".into()));
        }
        let m = &file.model;
        AgeGrid::new(m.max_age, m.n).map_err(|source| CliError::Model { name: name.clone(), source })?;
        Ok(Scenario {
            mu: source("mu", &m.mu)?,
            k: source("k", &m.k)?,
            p: source("p", &m.p)?,
            f0: source("f0", &file.initial.f0)?,
            name: name.clone(),
            max_age: m.max_age,
            cells: m.n,
            scale: m.scale,
            mode: file.initial.mode,
            d0: file.initial.d0,
            controller: spec,
            t_end: s.t_end,
            record_stride: s.record_stride,
            tol_bc: s.tol_bc,
            sigma: s.sigma,
            out_dir: file.outputs.dir.clone(),
            profile_times: file.outputs.profile_times.clone(),
            expect: file.expect,
        })
    }

    pub fn with_grid(mut self, cells: usize) -> Self {
        self.cells = cells;
        self
    }
}

pub fn builtin_names() -> Vec<&'static str> {
    BUILTIN.iter().map(|(n, _)| *n).collect()
}

pub fn builtin(name: &str) -> Option<Scenario> {
    BUILTIN
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, text)| Scenario::from_toml(text, n).expect("built-in scenarios are valid"))
}

/// A built-in name or a path to a scenario file.
pub fn load_scenario(arg: &str) -> Result<Scenario, CliError> {
    if let Some(s) = builtin(arg) {
        return Ok(s);
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(CliError::UnknownScenario(arg.to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario");
    Scenario::from_toml(&text, stem)
}

// ---- preparation ----

/// Everything needed to run a scenario, built once.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub eq: Equilibrium,
    pub cert: Option<KernelCert>,
    pub sigma: f64,
    pub controller: Controller,
    pub f0: AgeFunction,
    pub cfg: SolverConfig,
    pub warnings: Vec<String>,
}

pub fn build_params(s: &Scenario) -> Result<ModelParams, CliError> {
    let grid = AgeGrid::new(s.max_age, s.cells).map_err(|source| CliError::Model {
        name: s.name.clone(),
        source,
    })?;
    ModelParams::from_sources(grid, &s.mu, &s.k, &s.p, s.scale).map_err(|source| CliError::Model {
        name: s.name.clone(),
        source,
    })
}

pub fn equilibrium_for(s: &Scenario) -> Result<Equilibrium, CliError> {
    build_equilibrium(&build_params(s)?).map_err(|source| CliError::Equilibrium {
        name: s.name.clone(),
        source,
    })
}

/// Initial profile: the `f0` source plus the optional equilibrium-shaped
/// mode `A sin(ωa) e^{σa} f*(a)/f*(0)`.
pub fn initial_profile(s: &Scenario, eq: &Equilibrium) -> Result<AgeFunction, CliError> {
    let grid = *eq.params().grid();
    let base = s.f0.sample("f0", &grid).map_err(|source| CliError::Model {
        name: s.name.clone(),
        source,
    })?;
    let fs = eq.fstar();
    let f = match s.mode {
        Some(m) => {
            let v = grid
                .nodes()
                .zip(base.values().iter().zip(fs.values()))
                .map(|(a, (b, f))| {
                    b + m.amplitude * (m.omega * a).sin() * (m.sigma * a).exp() * f / fs.first()
                })
                .collect();
            AgeFunction::from_values(grid, v)
        }
        None => Ok(base),
    };
    f.map_err(|source| CliError::Model {
        name: s.name.clone(),
        source,
    })
}

pub fn prepare(s: &Scenario) -> Result<Prepared, CliError> {
    let eq = equilibrium_for(s)?;
    let mut warnings = Vec::new();
    let cert = match certify_assumption1(&eq, &default_lambda_grid()) {
        Ok(c) => Some(c),
        Err(source) if s.sigma.is_none() => {
            return Err(CliError::Certificate {
                name: s.name.clone(),
                source,
            })
        }
        Err(e) => {
            warnings.push(format!("{e}; using solver.sigma"));
            None
        }
    };
    let sigma = s.sigma.or(cert.map(|c| c.sigma)).expect("one of the two is set");
    let controller = s.controller.prepare(&eq).map_err(|source| CliError::Controller {
        name: s.name.clone(),
        source,
    })?;
    let f0 = initial_profile(s, &eq)?;

    let (_, simpson) = boundary_residuals(eq.fstar(), &eq);
    if simpson > s.tol_bc {
        warnings.push(format!(
            "renewal quadrature under-resolved on n = {}: Simpson residual of f* is {simpson:.3e} > tol_bc = {:.1e}",
            s.cells, s.tol_bc
        ));
    }
    let mismatch = boundary_residuals(&f0, &eq).0;
    if mismatch > s.tol_bc {
        warnings.push(format!(
            "initial profile violates the renewal condition by {mismatch:.3e} (relative); it is used as given"
        ));
    }
    let mut cfg = SolverConfig::new(*eq.params().grid(), s.t_end, sigma);
    cfg.record_stride = s.record_stride;
    cfg.tol_bc = s.tol_bc;
    cfg.profile_times = s.profile_times.clone();
    Ok(Prepared {
        scenario: s.clone(),
        eq,
        cert,
        sigma,
        controller,
        f0,
        cfg,
        warnings,
    })
}

// ---- checks and summary ----

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            pass: value <= threshold,
            value,
            threshold,
        }
    }

    fn below(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            pass: value < threshold,
            value,
            threshold,
        }
    }

    fn flag(name: &str, pass: bool) -> Self {
        Self {
            name: name.into(),
            pass,
            value: if pass { 1.0 } else { 0.0 },
            threshold: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumSummary {
    pub dstar: f64,
    pub ystar: f64,
    pub c1: f64,
    pub rinv: f64,
    pub pi0: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Envelope {
    pub measure: String,
    #[serde(flatten)]
    pub bound: DecayBound,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub scenario: String,
    pub controller: String,
    pub cells: usize,
    pub dt: f64,
    pub t_end: f64,
    pub equilibrium: EquilibriumSummary,
    pub certificate: Option<KernelCert>,
    pub sigma: f64,
    pub d0: f64,
    pub pi_f0: f64,
    pub initial_bc_mismatch: f64,
    pub final_d: f64,
    pub final_y_rel_err: f64,
    pub final_r1: f64,
    pub final_r2: Option<f64>,
    pub eta_drift: f64,
    pub constraints: ConstraintReport,
    pub decay: Vec<LyapReport>,
    pub envelopes: Vec<Envelope>,
    pub v_theta_derivative: Option<DerivativeCheck>,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
    pub elapsed_s: f64,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

pub struct RunOutcome {
    pub prepared: Prepared,
    pub trajectory: Trajectory,
    pub summary: Summary,
}

fn backstep_rate(kind: ControllerKind, g: &Gains, sigma: f64) -> Option<(f64, &'static str)> {
    match kind {
        ControllerKind::BackstepFull | ControllerKind::BackstepConstPMu => {
            Some((lyapunov::v1_rate(g, sigma), "V1"))
        }
        ControllerKind::RelaxedOutput => Some((lyapunov::v2_rate(g, sigma), "V2")),
        _ => None,
    }
}

/// Runs a prepared scenario and evaluates every audit that applies to its
/// controller.
pub fn execute(p: Prepared) -> Result<RunOutcome, CliError> {
    let start = Instant::now();
    let s = &p.scenario;
    let tr = simulate(&p.f0, s.d0, &p.controller, &p.eq, &p.cfg).map_err(|source| CliError::Solver {
        name: s.name.clone(),
        source,
    })?;
    let elapsed = start.elapsed();
    let summary = summarize(&p, &tr, elapsed);
    Ok(RunOutcome {
        prepared: p,
        trajectory: tr,
        summary,
    })
}

pub fn summarize(p: &Prepared, tr: &Trajectory, elapsed: Duration) -> Summary {
    let s = &p.scenario;
    let eq = &p.eq;
    let kind = p.controller.kind();
    let g = p.controller.gains();
    let times = tr.times();
    let ds = tr.series(|r| r.d);
    let last = tr.records.last().expect("at least one record");
    let mut checks = Vec::new();
    let mut decay = Vec::new();
    let mut envelopes = Vec::new();

    let y_err = (last.y - eq.ystar()).abs() / eq.ystar();
    checks.push(Check::below("output_converged", y_err, Y_TOL));
    let eta_drift = eta_drift_error(&tr.records);
    checks.push(Check::at_most("eta_identity", eta_drift, ETA_TOL));

    let bounds = p.controller.bounds().filter(|b| b.is_bounded()).map(|b| (b.lo(), b.hi()));
    let k3 = (kind == ControllerKind::SafetyFiltered).then_some(g.k3);
    let constraints = constraint_audit(&times, &ds, bounds, k3);
    if let Some(inside) = constraints.within_bounds {
        checks.push(Check::flag("dilution_within_bounds", inside));
    }
    if let Some(env) = constraints.safety_envelope {
        checks.push(Check::flag("dilution_positive", constraints.positive));
        checks.push(Check::flag("safety_envelope", env));
    }
    if let Some(neg) = s.expect.negative_dilution {
        checks.push(Check::flag("negative_dilution_expected", (constraints.d_min < 0.0) == neg));
    }

    if let Some((rate, name)) = backstep_rate(kind, g, p.sigma) {
        let series = tr.optional_series(|r| if name == "V1" { r.v1_lyap } else { r.v2_lyap });
        if let Some(v) = series {
            if let Ok(rep) = lyapunov::decay_audit(name, &times, &v, rate, RATE_MARGIN) {
                checks.push(Check::at_most(&format!("{name}_slope"), rep.slope, -rate * (1.0 - RATE_MARGIN)));
                decay.push(rep);
            } else {
                checks.push(Check::flag(&format!("{name}_slope"), false));
            }
        }
        let gs = tr.series(|r| r.g);
        match lyapunov::decay_audit("G", &times, &gs, p.sigma, RATE_MARGIN) {
            Ok(rep) => {
                checks.push(Check::at_most("G_slope", rep.slope, -p.sigma * (1.0 - RATE_MARGIN)));
                decay.push(rep);
            }
            Err(_) => checks.push(Check::flag("G_slope", false)),
        }
        let r1 = tr.series(|r| r.r1);
        let bound = decay_bound_check(&times, &r1, rate / 2.0);
        checks.push(Check::flag("R1_envelope", bound.pass));
        checks.push(Check::below("R1_envelope_constant", bound.constant, ENVELOPE_MAX));
        envelopes.push(Envelope {
            measure: "R1".into(),
            bound,
        });
    }

    if matches!(kind, ControllerKind::ConstrainedOutput | ControllerKind::PositiveOnly) {
        let rate = (g.k1 / 2.0).min(g.k2 / 2.0).min(g.k3 / 2.0).min(p.sigma) / 2.0;
        if let Some(r2) = tr.optional_series(|r| r.r2) {
            let bound = decay_bound_check(&times, &r2, rate);
            checks.push(Check::flag("R2_envelope", bound.pass));
            checks.push(Check::below("R2_envelope_constant", bound.constant, ENVELOPE_MAX));
            envelopes.push(Envelope {
                measure: "R2".into(),
                bound,
            });
        }
        if let Some(u3) = tr.optional_series(|r| r.u3) {
            let env = lyapunov::u3_envelope(u3[0], tr.records[0].g, g, p.sigma, s.max_age);
            let worst = u3.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            checks.push(Check::at_most("U3_envelope", worst, env));
        }
    }

    let mut v_theta_derivative = None;
    if let (Some(v), Some(vdot)) = (
        tr.optional_series(|r| r.v_theta),
        tr.optional_series(|r| r.v_theta_rate),
    ) {
        let c = lyapunov::derivative_agreement(&times, &v, &vdot, VTHETA_FLOOR);
        checks.push(Check::flag("V_theta_decreasing", c.strictly_decreasing));
        checks.push(Check::at_most("V_theta_rate_match", c.max_relative_error, VDOT_TOL));
        v_theta_derivative = Some(c);
    }

    Summary {
        scenario: s.name.clone(),
        controller: kind.name().into(),
        cells: s.cells,
        dt: p.cfg.dt(),
        t_end: s.t_end,
        equilibrium: EquilibriumSummary {
            dstar: eq.dstar(),
            ystar: eq.ystar(),
            c1: eq.c1(),
            rinv: eq.rinv(),
            pi0: eq.pi().first(),
        },
        certificate: p.cert,
        sigma: p.sigma,
        d0: s.d0,
        pi_f0: pi_projection(&p.f0, eq),
        initial_bc_mismatch: tr.initial_bc_mismatch,
        final_d: last.d,
        final_y_rel_err: y_err,
        final_r1: last.r1,
        final_r2: last.r2,
        eta_drift,
        constraints,
        decay,
        envelopes,
        v_theta_derivative,
        checks,
        warnings: p.warnings.clone(),
        elapsed_s: elapsed.as_secs_f64(),
    }
}

pub fn run_scenario(s: &Scenario) -> Result<RunOutcome, CliError> {
    execute(prepare(s)?)
}

// ---- emission ----

const TIMESERIES_COLUMNS: [(&str, &str); 23] = [
    ("t", "time"),
    ("D", "dilution rate, 1/time"),
    ("u", "input dD/dt, 1/time^2"),
    ("y", "output integral of p f"),
    ("eta", "ln Pi(f)"),
    ("int_dev", "integral of (D* - D), dimensionless"),
    ("eta_drift", "eta - eta(0) - int_dev"),
    ("delta", "D - D* - k1 ln(y/y*)"),
    ("zeta", "Phi^-1(D)"),
    ("z", "zeta - c1 eta"),
    ("v", "ln(1 + integral of g psi)"),
    ("v1", "output-derivative remainder"),
    ("G", "weighted sup of psi"),
    ("U1", "backstepping ODE part"),
    ("V1", "full-state backstepping functional"),
    ("V2", "output-feedback functional"),
    ("U3", "constrained-output function"),
    ("V_theta", "full-state Lyapunov function"),
    ("V_theta_rate", "analytic dV_theta/dt"),
    ("R1", "max|ln f/f*| + |D - D*|"),
    ("R2", "max|ln f/f*| + |Phi^-1(D)|"),
    ("bc_residual", "|f(0) - integral of k f| / f(0)"),
    ("psi_renewal", "psi(0) - integral of ktilde psi"),
];

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn timeseries_csv(tr: &Trajectory) -> String {
    let mut out = String::new();
    let doc: Vec<String> = TIMESERIES_COLUMNS
        .iter()
        .map(|(n, d)| format!("{n} [{d}]"))
        .collect();
    writeln!(out, "# {}; empty field = not defined for this controller", doc.join("; ")).unwrap();
    let names: Vec<&str> = TIMESERIES_COLUMNS.iter().map(|(n, _)| *n).collect();
    writeln!(out, "{}", names.join(",")).unwrap();
    for r in &tr.records {
        let row = [
            r.t.to_string(),
            r.d.to_string(),
            r.u.to_string(),
            r.y.to_string(),
            r.eta.to_string(),
            r.int_dev.to_string(),
            r.eta_drift.to_string(),
            opt(r.delta),
            opt(r.zeta),
            opt(r.z),
            r.v.to_string(),
            r.v1.to_string(),
            r.g.to_string(),
            opt(r.u1),
            opt(r.v1_lyap),
            opt(r.v2_lyap),
            opt(r.u3),
            opt(r.v_theta),
            opt(r.v_theta_rate),
            r.r1.to_string(),
            opt(r.r2),
            r.bc_residual.to_string(),
            r.psi_renewal.to_string(),
        ];
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    out
}

pub fn profiles_csv(tr: &Trajectory) -> String {
    let mut snaps: Vec<&crate::model::SimState> = tr.profiles.iter().collect();
    if snaps.last().map(|s| s.t) != Some(tr.final_state.t) {
        snaps.push(&tr.final_state);
    }
    let mut out = String::new();
    writeln!(out, "# a [age]; f(a, t) [density] at the listed times").unwrap();
    let header: Vec<String> = std::iter::once("a".to_string())
        .chain(snaps.iter().map(|s| format!("t={}", s.t)))
        .collect();
    writeln!(out, "{}", header.join(",")).unwrap();
    let grid = *tr.final_state.f.grid();
    for (i, a) in grid.nodes().enumerate() {
        let row: Vec<String> = std::iter::once(a.to_string())
            .chain(snaps.iter().map(|s| s.f.values()[i].to_string()))
            .collect();
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    out
}

/// Writes `<name>.timeseries.csv`, `<name>.profiles.csv` and
/// `<name>.summary.json` into `dir`.
pub fn write_outputs(outcome: &RunOutcome, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CliError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let name = &outcome.summary.scenario;
    let files = [
        (dir.join(format!("{name}.timeseries.csv")), timeseries_csv(&outcome.trajectory)),
        (dir.join(format!("{name}.profiles.csv")), profiles_csv(&outcome.trajectory)),
        (
            dir.join(format!("{name}.summary.json")),
            serde_json::to_string_pretty(&outcome.summary).expect("summary serializes") + "\n",
        ),
    ];
    let mut written = Vec::new();
    for (path, text) in files {
        std::fs::write(&path, text).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}

/// Human-readable equilibrium report.
pub fn equilibrium_report(eq: &Equilibrium, cert: &Result<KernelCert, CertError>) -> String {
    let mut out = String::new();
    writeln!(out, "D*      = {:.10}", eq.dstar()).unwrap();
    writeln!(out, "y*      = {:.10}", eq.ystar()).unwrap();
    writeln!(out, "c1      = {:.10}", eq.c1()).unwrap();
    writeln!(out, "rinv    = {:.10}", eq.rinv()).unwrap();
    out.push_str(&certificate_report(cert));
    out
}

pub fn certificate_report(cert: &Result<KernelCert, CertError>) -> String {
    match cert {
        Ok(c) => format!(
            "lambda  = {:.2}\nsigma   = {:.10}\nrho0    = {:.10}\nrho_sig = {:.10}\n",
            c.lambda, c.sigma, c.rho0, c.rho_sigma
        ),
        Err(e) => format!("certificate: FAILED ({e})\n"),
    }
}

/// One line per check, for terminal output.
pub fn check_lines(summary: &Summary) -> String {
    let mut out = String::new();
    for c in &summary.checks {
        writeln!(
            out,
            "  [{}] {:<28} value = {:<12.4e} threshold = {:.4e}",
            if c.pass { "pass" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse() {
        for name in builtin_names() {
            let s = builtin(name).unwrap();
            assert_eq!(s.name, name);
            assert_eq!(s.cells, 2000);
        }
        let fig4 = builtin("fig4").unwrap();
        assert_eq!(fig4.controller.kind, ControllerKind::ConstrainedOutput);
        assert_eq!((fig4.controller.gains.k1, fig4.controller.gains.k2, fig4.controller.gains.k3), (1.0, 10.0, 1.0));
        assert_eq!(fig4.controller.bounds, Some((0.1, 1.5)));
        let fig1 = builtin("fig1").unwrap();
        assert_eq!(fig1.controller.kind, ControllerKind::BackstepFull);
        assert_eq!((fig1.controller.gains.k1, fig1.controller.gains.k2), (1.0, 2.0));
    }

    fn with(text: &str, from: &str, to: &str) -> String {
        assert!(text.contains(from), "{from}");
        text.replacen(from, to, 1)
    }

    #[test]
    fn validation_errors() {
        let base = BUILTIN[0].1;
        let bad_gain = with(base, "k2 = 2.0", "k2 = 0.0");
        assert!(matches!(
            Scenario::from_toml(&bad_gain, "x"),
            Err(CliError::Controller { source: ControlError::BadGain { name: "k2", .. }, .. })
        ));
        let bad_expr = with(base, "k = \"a\"", "k = \"a +\"");
        assert!(matches!(Scenario::from_toml(&bad_expr, "x"), Err(CliError::Expr { .. })));
        let unknown_key = with(base, "M = 8.0", "M = 8.0\nq = 1");
        let err = Scenario::from_toml(&unknown_key, "x").unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
        let bad_variant = with(base, "backstep_full", "pid");
        assert!(matches!(Scenario::from_toml(&bad_variant, "x"), Err(CliError::Invalid { .. })));
        let bad_time = with(base, "20.0]", "25.0]");
        assert!(matches!(Scenario::from_toml(&bad_time, "x"), Err(CliError::Invalid { .. })));
        assert!(matches!(load_scenario("no-such-scenario"), Err(CliError::UnknownScenario(_))));
    }

    #[test]
    fn tables_and_numbers_are_accepted() {
        let base = BUILTIN[1].1;
        let t = with(base, "p = \"1 + a^2/10\"", "p = [[0.0, 1.0], [2.0, 1.4]]");
        let t = with(&t, "mu = \"1/(20 - 5*a)\"", "mu = 0.05");
        let s = Scenario::from_toml(&t, "x").unwrap();
        assert!(matches!(s.p, FunctionSource::Table(_)));
        let eq = equilibrium_for(&s.with_grid(100)).unwrap();
        assert!((eq.params().p().last() - 1.4).abs() < 1e-15);
    }

    #[test]
    fn bounds_are_checked_against_dstar() {
        let s = builtin("fig4").unwrap().with_grid(100);
        let mut s2 = s.clone();
        s2.controller.bounds = Some((0.6, 1.5));
        assert!(matches!(prepare(&s2), Err(CliError::Controller { .. })));
        assert!(prepare(&s).is_ok());
    }

    #[test]
    fn coarse_grid_warns_and_runs() {
        let mut s = builtin("fig2").unwrap().with_grid(16);
        s.t_end = 2.0;
        s.profile_times = vec![0.0, 1.0];
        let p = prepare(&s).unwrap();
        assert!(p.warnings.iter().any(|w| w.contains("under-resolved")), "{:?}", p.warnings);
        let out = execute(p).unwrap();
        assert_eq!(out.trajectory.final_state.t, 2.0);
    }

    #[test]
    fn csv_layout() {
        let mut s = builtin("fig4").unwrap().with_grid(40);
        s.t_end = 1.0;
        s.profile_times = vec![0.0, 0.5];
        let out = run_scenario(&s).unwrap();
        let ts = timeseries_csv(&out.trajectory);
        let mut lines = ts.lines();
        assert!(lines.next().unwrap().starts_with('#'));
        let header = lines.next().unwrap();
        assert_eq!(header.split(',').count(), TIMESERIES_COLUMNS.len());
        for l in lines {
            assert_eq!(l.split(',').count(), TIMESERIES_COLUMNS.len());
        }
        let prof = profiles_csv(&out.trajectory);
        let rows: Vec<&str> = prof.lines().collect();
        assert_eq!(rows.len(), 2 + 41);
        assert_eq!(rows[1], "a,t=0,t=0.5,t=1");
    }
}

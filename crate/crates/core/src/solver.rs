//! Closed-loop time integration. Transport is solved exactly along
//! characteristics with `Δt = Δa`, the renewal condition by a scalar solve
//! of the trapezoid rule, and `Ḋ = u` by Heun's method with the controller
//! re-evaluated at the predictor.

use thiserror::Error;

use crate::analysis::{DiagContext, Diagnostics};
use crate::controllers::{ControlError, Controller};
use crate::equilibrium::Equilibrium;
use crate::model::{check_positive, AgeFunction, AgeGrid, ModelError, SimState, DEFAULT_TOL_BC};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("renewal solve is singular: 1 - w0·k(0) = {0} (grid too coarse)")]
    SingularRenewal(f64),
    #[error("positivity lost at step {step} (t = {t}): {source}")]
    Positivity {
        step: usize,
        t: f64,
        #[source]
        source: ModelError,
    },
    #[error("controller failed at step {step} (t = {t}): {source}")]
    Control {
        step: usize,
        t: f64,
        #[source]
        source: ControlError,
    },
    #[error("dilution became non-finite at step {step} (t = {t})")]
    NonFinite { step: usize, t: f64 },
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub grid: AgeGrid,
    pub t_end: f64,
    pub tol_bc: f64,
    pub record_stride: usize,
    /// Decay rate used inside `G`.
    pub sigma: f64,
    /// Times at which full profiles are kept.
    pub profile_times: Vec<f64>,
}

impl SolverConfig {
    pub fn new(grid: AgeGrid, t_end: f64, sigma: f64) -> Self {
        Self {
            grid,
            t_end,
            tol_bc: DEFAULT_TOL_BC,
            record_stride: 10,
            sigma,
            profile_times: Vec::new(),
        }
    }

    /// The time step, locked to the age step.
    pub fn dt(&self) -> f64 {
        self.grid.step()
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt()).round() as usize
    }

    fn validate(&self) -> Result<(), SolverError> {
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return Err(SolverError::Config(format!("t_end must be ≥ 0, got {}", self.t_end)));
        }
        if self.record_stride == 0 {
            return Err(SolverError::Config("record_stride must be positive".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(SolverError::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Precomputed per-cell transport data for one equilibrium and grid.
#[derive(Debug, Clone)]
pub struct Stepper<'a> {
    eq: &'a Equilibrium,
    controller: &'a Controller,
    dt: f64,
    /// `exp(−Δt·μ̄ᵢ)` for cells `i = 1..=n` (index 0 unused).
    decay: Vec<f64>,
    /// Trapezoid weights times `k`.
    wk: Vec<f64>,
    renewal_den: f64,
}

impl<'a> Stepper<'a> {
    pub fn new(eq: &'a Equilibrium, controller: &'a Controller) -> Result<Self, SolverError> {
        let grid = *eq.params().grid();
        let dt = grid.step();
        let mu = eq.params().mu().values();
        let k = eq.params().k().values();
        let mut decay = vec![1.0; grid.len()];
        for i in 1..grid.len() {
            decay[i] = (-dt * 0.5 * (mu[i - 1] + mu[i])).exp();
        }
        let wk: Vec<f64> = (0..grid.len()).map(|i| grid.weight(i) * k[i]).collect();
        let renewal_den = 1.0 - wk[0];
        if !(renewal_den > 0.0) {
            return Err(SolverError::SingularRenewal(renewal_den));
        }
        Ok(Self {
            eq,
            controller,
            dt,
            decay,
            wk,
            renewal_den,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Shifts the profile one cell along the characteristics with average
    /// dilution `d_bar` and closes it with the renewal condition.
    pub fn transport(&self, f: &AgeFunction, d_bar: f64) -> AgeFunction {
        let v = f.values();
        let n = v.len();
        let e = (-self.dt * d_bar).exp();
        let mut out = vec![0.0; n];
        for i in 1..n {
            out[i] = v[i - 1] * self.decay[i] * e;
        }
        let s: f64 = (1..n).map(|i| self.wk[i] * out[i]).sum();
        out[0] = s / self.renewal_den;
        AgeFunction::from_raw(*f.grid(), out)
    }

    pub fn input(&self, f: &AgeFunction, d: f64) -> Result<f64, ControlError> {
        self.controller.input(f, d, self.eq)
    }

    /// One Heun step. Returns the new profile, the new dilution, and the
    /// step-average dilution used in transport.
    pub fn step(&self, f: &AgeFunction, d: f64, u: f64) -> Result<(AgeFunction, f64, f64), ControlError> {
        let dp = d + self.dt * u;
        let fp = self.transport(f, 0.5 * (d + dp));
        let up = self.input(&fp, dp)?;
        let dn = d + 0.5 * self.dt * (u + up);
        let d_bar = 0.5 * (d + dn);
        Ok((self.transport(f, d_bar), dn, d_bar))
    }
}

/// One controlled step from a validated state.
pub fn step(
    state: &SimState,
    controller: &Controller,
    eq: &Equilibrium,
) -> Result<SimState, SolverError> {
    let stepper = Stepper::new(eq, controller)?;
    let u = stepper.input(&state.f, state.dilution).map_err(|source| SolverError::Control {
        step: 0,
        t: state.t,
        source,
    })?;
    let (f, d, _) = stepper.step(&state.f, state.dilution, u).map_err(|source| SolverError::Control {
        step: 0,
        t: state.t,
        source,
    })?;
    let t = state.t + stepper.dt();
    check_positive(&f).map_err(|source| SolverError::Positivity { step: 1, t, source })?;
    Ok(SimState { f, dilution: d, t })
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<Diagnostics>,
    /// Profiles kept at the configured times, plus the final state.
    pub profiles: Vec<SimState>,
    pub final_state: SimState,
    /// Relative renewal mismatch of the initial profile.
    pub initial_bc_mismatch: f64,
    pub steps: usize,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.series(|r| r.t)
    }

    pub fn series(&self, f: impl Fn(&Diagnostics) -> f64) -> Vec<f64> {
        self.records.iter().map(f).collect()
    }

    pub fn optional_series(&self, f: impl Fn(&Diagnostics) -> Option<f64>) -> Option<Vec<f64>> {
        self.records.iter().map(f).collect()
    }
}

/// Runs the closed loop from `(f0, D0)` to `cfg.t_end`.
pub fn simulate(
    f0: &AgeFunction,
    d0: f64,
    controller: &Controller,
    eq: &Equilibrium,
    cfg: &SolverConfig,
) -> Result<Trajectory, SolverError> {
    cfg.validate()?;
    if f0.grid() != eq.params().grid() || cfg.grid != *eq.params().grid() {
        return Err(SolverError::Config("grid differs from the equilibrium grid".into()));
    }
    let initial = SimState::initial(f0.clone(), d0, 0.0)
        .map_err(|source| SolverError::Positivity { step: 0, t: 0.0, source })?;
    let initial_bc_mismatch = initial.boundary_residual(eq.params().k())? / initial.f.first();

    let stepper = Stepper::new(eq, controller)?;
    let dt = stepper.dt();
    let steps = cfg.steps();
    let ctx = DiagContext {
        eq,
        controller,
        sigma: cfg.sigma,
        eta0: crate::transforms::pi_projection(f0, eq).ln(),
    };
    let profile_steps: Vec<usize> = cfg
        .profile_times
        .iter()
        .map(|t| ((t / dt).round() as usize).min(steps))
        .collect();

    let mut f = initial.f;
    let mut d = d0;
    let mut int_dev = 0.0;
    let mut records = Vec::with_capacity(steps / cfg.record_stride + 2);
    let mut profiles = Vec::new();
    for n in 0..=steps {
        let t = n as f64 * dt;
        let u = stepper
            .input(&f, d)
            .map_err(|source| SolverError::Control { step: n, t, source })?;
        if n % cfg.record_stride == 0 || n == steps {
            records.push(ctx.evaluate(&f, d, u, t, int_dev));
        }
        if profile_steps.contains(&n) {
            profiles.push(SimState { f: f.clone(), dilution: d, t });
        }
        if n == steps {
            break;
        }
        let (fnew, dnew, d_bar) = stepper
            .step(&f, d, u)
            .map_err(|source| SolverError::Control { step: n, t, source })?;
        if !dnew.is_finite() {
            return Err(SolverError::NonFinite { step: n + 1, t: t + dt });
        }
        check_positive(&fnew).map_err(|source| SolverError::Positivity {
            step: n + 1,
            t: t + dt,
            source,
        })?;
        int_dev += dt * (eq.dstar() - d_bar);
        f = fnew;
        d = dnew;
    }
    let final_state = SimState {
        f,
        dilution: d,
        t: steps as f64 * dt,
    };
    Ok(Trajectory {
        records,
        profiles,
        final_state,
        initial_bc_mismatch,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::{ControllerKind, ControllerSpec, Gains};
    use crate::equilibrium::build_equilibrium;
    use crate::model::{FunctionSource, ModelParams};
    use crate::transforms::pi_projection;

    fn reference(n: usize) -> Equilibrium {
        let g = AgeGrid::new(2.0, n).unwrap();
        let p = ModelParams::from_sources(
            g,
            &FunctionSource::parse("1/(20-5*a)").unwrap(),
            &FunctionSource::parse("a").unwrap(),
            &FunctionSource::parse("1 + a^2/10").unwrap(),
            8.0,
        )
        .unwrap();
        build_equilibrium(&p).unwrap()
    }

    fn f0(eq: &Equilibrium) -> AgeFunction {
        let fs = eq.fstar();
        let v = fs
            .grid()
            .nodes()
            .zip(fs.values())
            .map(|(a, f)| 8.0 - 3.0 * a + (3.82 * a).sin() * (0.91 * a).exp() * f / fs.first())
            .collect();
        AgeFunction::from_values(*fs.grid(), v).unwrap()
    }

    fn relaxed(eq: &Equilibrium) -> Controller {
        ControllerSpec::new(ControllerKind::RelaxedOutput, Gains::default())
            .prepare(eq)
            .unwrap()
    }

    #[test]
    fn equilibrium_is_stationary() {
        let eq = reference(400);
        let c = relaxed(&eq);
        let mut s = SimState::initial(eq.fstar().clone(), eq.dstar(), 0.0).unwrap();
        for _ in 0..400 {
            let next = step(&s, &c, &eq).unwrap();
            let rel = next
                .f
                .zip_with(&s.f, |a, b| (a - b).abs() / b)
                .unwrap()
                .max();
            assert!(rel < 1e-12, "{rel}");
            assert!((next.dilution - eq.dstar()).abs() < 1e-14);
            s = next;
        }
    }

    #[test]
    fn open_loop_projection_slope() {
        // transport only, D held fixed
        let eq = reference(400);
        let c = relaxed(&eq);
        let st = Stepper::new(&eq, &c).unwrap();
        let d = eq.dstar() + 0.1;
        let mut f = eq.fstar().clone();
        let steps = 1000;
        for _ in 0..steps {
            f = st.transport(&f, d);
        }
        let slope = pi_projection(&f, &eq).ln() / (steps as f64 * st.dt());
        assert!((slope + 0.1).abs() < 1e-12, "{slope}");
    }

    #[test]
    fn one_step_converges_under_refinement() {
        // one unit of time from f₀ under the relaxed law; successive
        // halvings of Δa shrink the change in y
        let y = |n: usize| {
            let eq = reference(n);
            let c = relaxed(&eq);
            let cfg = SolverConfig::new(*eq.params().grid(), 1.0, 0.3);
            eq.output(&simulate(&f0(&eq), 1.0, &c, &eq, &cfg).unwrap().final_state.f)
        };
        let (a, b, c) = (y(100), y(200), y(400));
        let ratio = (a - b).abs() / (b - c).abs();
        assert!(ratio > 3.0, "{ratio}");
    }

    #[test]
    fn records_and_profiles() {
        let eq = reference(100);
        let c = relaxed(&eq);
        let mut cfg = SolverConfig::new(*eq.params().grid(), 1.0, 0.3);
        cfg.record_stride = 7;
        cfg.profile_times = vec![0.0, 0.5];
        let tr = simulate(&f0(&eq), 1.0, &c, &eq, &cfg).unwrap();
        assert_eq!(tr.steps, 50);
        let t = tr.times();
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(*t.last().unwrap(), 1.0);
        assert_eq!(tr.records.len(), 50 / 7 + 2);
        assert_eq!(tr.profiles.len(), 2);
        assert!(tr.initial_bc_mismatch > 1e-3);
        assert!(crate::analysis::eta_drift_error(&tr.records) < 1e-4);
    }

    #[test]
    fn config_validation() {
        let eq = reference(100);
        let c = relaxed(&eq);
        let mut cfg = SolverConfig::new(*eq.params().grid(), 1.0, 0.3);
        cfg.record_stride = 0;
        assert!(matches!(
            simulate(eq.fstar(), 0.5, &c, &eq, &cfg),
            Err(SolverError::Config(_))
        ));
        let cfg = SolverConfig::new(AgeGrid::new(2.0, 50).unwrap(), 1.0, 0.3);
        assert!(simulate(eq.fstar(), 0.5, &c, &eq, &cfg).is_err());
        let cfg = SolverConfig::new(*eq.params().grid(), 1.0, 0.3);
        let bad = eq.fstar().map(|v| v - 100.0);
        assert!(matches!(
            simulate(&bad, 0.5, &c, &eq, &cfg),
            Err(SolverError::Positivity { step: 0, .. })
        ));
    }
}

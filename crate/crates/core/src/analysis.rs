//! Stability measures, per-record diagnostics, exponential-envelope checks
//! and constraint audits.

use serde::Serialize;

use crate::controllers::{Controller, ControllerKind};
use crate::equilibrium::Equilibrium;
use crate::lyapunov;
use crate::model::{simpson_weighted, AgeFunction};
use crate::transforms::{
    g_functional, pi_projection, psi_history, renewal_defect, v1_functional, v_functional,
    DilutionBounds, TransformError,
};

/// `max|ln(f/f*)|`.
pub fn log_deviation(f: &AgeFunction, eq: &Equilibrium) -> f64 {
    f.values()
        .iter()
        .zip(eq.fstar().values())
        .fold(0.0f64, |m, (f, fs)| m.max((f / fs).ln().abs()))
}

/// `R₁ = max|ln(f/f*)| + |D − D*|`.
pub fn measure_r1(f: &AgeFunction, d: f64, eq: &Equilibrium) -> f64 {
    log_deviation(f, eq) + (d - eq.dstar()).abs()
}

/// `R₂ = max|ln(f/f*)| + |Φ⁻¹(D)|`.
pub fn measure_r2(
    f: &AgeFunction,
    d: f64,
    eq: &Equilibrium,
    bounds: &DilutionBounds,
) -> Result<f64, TransformError> {
    Ok(log_deviation(f, eq) + bounds.phi_inv(d)?.abs())
}

/// Relative renewal residual `|f(0) − ∫kf| / f(0)` with the trapezoid rule,
/// and the same quantity with Simpson's rule as an accuracy probe.
pub fn boundary_residuals(f: &AgeFunction, eq: &Equilibrium) -> (f64, f64) {
    let k = eq.params().k();
    let trap = crate::model::weighted_quad(k, f).expect("same grid");
    let simp = simpson_weighted(k, f).expect("same grid");
    let f0 = f.first();
    ((f0 - trap).abs() / f0, (f0 - simp).abs() / f0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayBound {
    pub rate: f64,
    pub constant: f64,
    pub t_argmax: f64,
    pub attained_early: bool,
    pub pass: bool,
}

/// Smallest `C` with `m(t) ≤ C e^{−rate·t}` on the records. The envelope
/// passes when `C` is finite and attained in the first half of the run; a
/// measure that does not decay at `rate` attains it at the end.
pub fn decay_bound_check(times: &[f64], values: &[f64], rate: f64) -> DecayBound {
    let mut constant = f64::NEG_INFINITY;
    let mut t_argmax = f64::NAN;
    for (&t, &v) in times.iter().zip(values) {
        let c = v * (rate * t).exp();
        if !(c <= constant) {
            constant = c;
            t_argmax = t;
        }
    }
    let (t0, t1) = (times.first().copied().unwrap_or(0.0), times.last().copied().unwrap_or(0.0));
    let attained_early = t_argmax - t0 <= 0.5 * (t1 - t0);
    DecayBound {
        rate,
        constant,
        t_argmax,
        attained_early,
        pass: constant.is_finite() && attained_early,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConstraintReport {
    pub d_min: f64,
    pub d_max: f64,
    pub positive: bool,
    pub within_bounds: Option<bool>,
    /// `D(t) ≥ D(0)e^{−k₃t}(1 − 1e−6)` at every record.
    pub safety_envelope: Option<bool>,
}

pub const ENVELOPE_TOL: f64 = 1e-6;

pub fn constraint_audit(
    times: &[f64],
    dilution: &[f64],
    bounds: Option<(f64, f64)>,
    k3: Option<f64>,
) -> ConstraintReport {
    let d_min = dilution.iter().copied().fold(f64::INFINITY, f64::min);
    let d_max = dilution.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let d0 = dilution.first().copied().unwrap_or(f64::NAN);
    ConstraintReport {
        d_min,
        d_max,
        positive: d_min > 0.0,
        within_bounds: bounds.map(|(lo, hi)| d_min > lo && d_max < hi),
        safety_envelope: k3.map(|k3| {
            times
                .iter()
                .zip(dilution)
                .all(|(t, d)| *d >= d0 * (-k3 * t).exp() * (1.0 - ENVELOPE_TOL))
        }),
    }
}

/// Everything recorded at one sample of a trajectory. Quantities that do
/// not apply to the running controller are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub t: f64,
    pub d: f64,
    pub u: f64,
    pub y: f64,
    pub eta: f64,
    /// `∫₀ᵗ (D* − D)`, accumulated with the solver's own step averages.
    pub int_dev: f64,
    /// `η(t) − η(0) − ∫₀ᵗ(D* − D)`.
    pub eta_drift: f64,
    pub delta: Option<f64>,
    pub zeta: Option<f64>,
    pub z: Option<f64>,
    pub v: f64,
    pub v1: f64,
    pub g: f64,
    pub u1: Option<f64>,
    pub v1_lyap: Option<f64>,
    pub v2_lyap: Option<f64>,
    pub u3: Option<f64>,
    pub v_theta: Option<f64>,
    pub v_theta_rate: Option<f64>,
    pub r1: f64,
    pub r2: Option<f64>,
    pub bc_residual: f64,
    pub psi_renewal: f64,
}

/// Fixed data needed to evaluate [`Diagnostics`] along one run.
#[derive(Debug, Clone)]
pub struct DiagContext<'a> {
    pub eq: &'a Equilibrium,
    pub controller: &'a Controller,
    pub sigma: f64,
    pub eta0: f64,
}

impl DiagContext<'_> {
    pub fn evaluate(&self, f: &AgeFunction, d: f64, u: f64, t: f64, int_dev: f64) -> Diagnostics {
        let eq = self.eq;
        let gains = self.controller.gains();
        let kind = self.controller.kind();
        let max_age = f.grid().max_age();
        let y = eq.output(f);
        let eta = pi_projection(f, eq).ln();
        let psi = psi_history(f, eq);
        let v = v_functional(&psi, eq).unwrap_or(f64::NAN);
        let v1 = v1_functional(&psi, eq);
        let g = g_functional(&psi, self.sigma);

        let backstep = matches!(
            kind,
            ControllerKind::BackstepFull
                | ControllerKind::BackstepConstPMu
                | ControllerKind::RelaxedOutput
                | ControllerKind::SafetyFiltered
        );
        let lyap_family = matches!(
            kind,
            ControllerKind::LyapFullState | ControllerKind::LyapFullStateBounded
        );
        let delta = backstep.then(|| d - eq.dstar() - gains.k1 * (y / eq.ystar()).ln());
        let bounds = match self.controller.bounds() {
            Some(b) => Some(*b),
            None if lyap_family => DilutionBounds::positive(eq.dstar()).ok(),
            None => None,
        };
        let zeta = bounds.and_then(|b| b.phi_inv(d).ok());
        let z = if lyap_family { zeta.map(|zeta| zeta - gains.c1 * eta) } else { None };

        let (u1v, v1l, v2l) = match delta {
            Some(delta) => {
                let c1 = lyapunov::v1_coefficients(gains, self.sigma, max_age);
                let c2 = lyapunov::v2_coefficients(gains, self.sigma, max_age, eq.c1());
                (
                    Some(lyapunov::u1(eta, delta, c1.0)),
                    Some(lyapunov::v_backstep(eta, delta, g, c1)),
                    Some(lyapunov::v_backstep(eta, delta, g, c2)),
                )
            }
            None => (None, None, None),
        };
        let u3 = match (kind, zeta) {
            (ControllerKind::ConstrainedOutput | ControllerKind::PositiveOnly, Some(zeta)) => {
                Some(lyapunov::u3(eta, zeta, gains))
            }
            _ => None,
        };
        let (vt, vtr) = match (lyap_family, zeta, bounds) {
            (true, Some(zeta), Some(b)) => (
                Some(lyapunov::v_theta(eta, zeta, gains)),
                Some(lyapunov::v_theta_rate(eta, zeta, gains, &b)),
            ),
            _ => (None, None),
        };
        let r2 = self
            .controller
            .bounds()
            .and_then(|b| measure_r2(f, d, eq, b).ok());
        Diagnostics {
            t,
            d,
            u,
            y,
            eta,
            int_dev,
            eta_drift: eta - self.eta0 - int_dev,
            delta,
            zeta,
            z,
            v,
            v1,
            g,
            u1: u1v,
            v1_lyap: v1l,
            v2_lyap: v2l,
            u3,
            v_theta: vt,
            v_theta_rate: vtr,
            r1: measure_r1(f, d, eq),
            r2,
            bc_residual: boundary_residuals(f, eq).0,
            psi_renewal: renewal_defect(&psi, eq),
        }
    }
}

/// Largest `|η(t) − η(0) − ∫(D* − D)|` relative to `1 + |η(0)|`.
pub fn eta_drift_error(records: &[Diagnostics]) -> f64 {
    let eta0 = records.first().map(|r| r.eta).unwrap_or(0.0);
    records
        .iter()
        .map(|r| r.eta_drift.abs() / (1.0 + eta0.abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::build_equilibrium;
    use crate::model::{AgeGrid, FunctionSource, ModelParams};
    use std::sync::OnceLock;

    fn eq() -> &'static Equilibrium {
        static EQ: OnceLock<Equilibrium> = OnceLock::new();
        EQ.get_or_init(|| {
            let g = AgeGrid::new(2.0, 400).unwrap();
            let p = ModelParams::from_sources(
                g,
                &FunctionSource::parse("1/(20-5*a)").unwrap(),
                &FunctionSource::parse("a").unwrap(),
                &FunctionSource::parse("1 + a^2/10").unwrap(),
                8.0,
            )
            .unwrap();
            build_equilibrium(&p).unwrap()
        })
    }

    #[test]
    fn r1_examples() {
        let eq = eq();
        let ds = eq.dstar();
        assert_eq!(measure_r1(eq.fstar(), ds, eq), 0.0);
        assert!((measure_r1(&eq.fstar().scale(2.0), ds, eq) - 2f64.ln()).abs() < 1e-15);
        assert!((measure_r1(eq.fstar(), ds + 0.3, eq) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn r2_examples() {
        let eq = eq();
        let ds = eq.dstar();
        let b = DilutionBounds::new(0.1, 1.5, ds).unwrap();
        assert_eq!(measure_r2(eq.fstar(), ds, eq, &b).unwrap(), 0.0);
        let d = 0.5 * (ds + 1.5);
        let beta = (1.5 - ds) / (ds - 0.1);
        let expect = (beta * (d - 0.1) / (1.5 - d)).ln().abs();
        assert!((measure_r2(eq.fstar(), d, eq, &b).unwrap() - expect).abs() < 1e-14);
        let seq: Vec<f64> = (1..12)
            .map(|j| measure_r2(eq.fstar(), 1.5 - 10f64.powi(-j), eq, &b).unwrap())
            .collect();
        assert!(seq.windows(2).all(|w| w[1] > w[0]));
        assert!(measure_r2(eq.fstar(), 1.5, eq, &b).is_err());
        // R₂ − R₁ depends on D only
        let f = eq.fstar().map(|v| v * 1.1);
        let f2 = eq.fstar().map(|v| v * 0.7);
        let diff1 = measure_r2(&f, 0.9, eq, &b).unwrap() - measure_r1(&f, 0.9, eq);
        let diff2 = measure_r2(&f2, 0.9, eq, &b).unwrap() - measure_r1(&f2, 0.9, eq);
        assert!((diff1 - diff2).abs() < 1e-14);
    }

    #[test]
    fn r1_is_grid_stable() {
        let r = |n: usize| {
            let g = AgeGrid::new(2.0, n).unwrap();
            let fs = AgeFunction::from_fn(g, |a| (-0.5 * a).exp());
            let f = AgeFunction::from_fn(g, |a| (-0.5 * a).exp() * (1.0 + 0.3 * (2.1 * a).sin()));
            f.zip_with(&fs, |f, s| (f / s).ln().abs()).unwrap().max()
        };
        assert!((r(400) - r(800)).abs() < 1e-4);
    }

    #[test]
    fn envelope_checks() {
        let t: Vec<f64> = (0..101).map(|i| i as f64 * 0.2).collect();
        let decaying: Vec<f64> = t.iter().map(|t| 3.0 * (-0.5 * t).exp()).collect();
        let r = decay_bound_check(&t, &decaying, 0.25);
        assert!(r.pass && (r.constant - 3.0).abs() < 1e-12 && r.t_argmax == 0.0);
        let flat = vec![2.0; t.len()];
        assert!(!decay_bound_check(&t, &flat, 0.01).pass);
        let r0 = decay_bound_check(&t, &flat, 0.0);
        assert!(r0.pass && r0.constant == 2.0);
    }

    #[test]
    fn constraint_examples() {
        let t = [0.0, 1.0, 2.0];
        let r = constraint_audit(&t, &[1.0, -0.1, 0.5], Some((0.1, 1.5)), Some(1.0));
        assert!(!r.positive);
        assert_eq!(r.within_bounds, Some(false));
        assert_eq!(r.safety_envelope, Some(false));
        let e1 = (-1.0f64).exp();
        let r = constraint_audit(&t, &[1.0, e1, 0.2], None, Some(1.0));
        assert!(r.positive && r.safety_envelope == Some(true) && r.within_bounds.is_none());
    }

    #[test]
    fn boundary_probe_flags_coarse_grids() {
        let g = AgeGrid::new(2.0, 16).unwrap();
        let p = ModelParams::from_sources(
            g,
            &FunctionSource::parse("1/(20-5*a)").unwrap(),
            &FunctionSource::parse("a").unwrap(),
            &FunctionSource::parse("1 + a^2/10").unwrap(),
            8.0,
        )
        .unwrap();
        let eq = build_equilibrium(&p).unwrap();
        let (trap, simp) = boundary_residuals(eq.fstar(), &eq);
        assert!(trap < 1e-12);
        assert!(simp > 1e-4, "{simp}");
    }
}

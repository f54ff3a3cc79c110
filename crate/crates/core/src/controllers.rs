//! Feedback laws for the dilution rate. Each law maps a snapshot `(f, D)`
//! to the input `u = Ḋ`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equilibrium::Equilibrium;
use crate::model::{weighted_sum, AgeFunction, ModelParams};
use crate::transforms::{pi_projection, DilutionBounds, TransformError};

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("output y = {0} is not positive")]
    NonPositiveOutput(f64),
    #[error("dilution D = {0} must be positive for this law")]
    NonPositiveDilution(f64),
    #[error(transparent)]
    Bounds(#[from] TransformError),
    #[error("{0} needs dilution bounds")]
    MissingBounds(ControllerKind),
    #[error("gain {name} must be positive and finite, got {value}")]
    BadGain { name: &'static str, value: f64 },
    #[error("{0} must be constant in age for the constant-p/μ law")]
    NotConstant(&'static str),
    #[error("{0} cannot be used as the nominal law of the safety filter")]
    BadNominal(ControllerKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    BackstepFull,
    BackstepConstPMu,
    RelaxedOutput,
    SafetyFiltered,
    ConstrainedOutput,
    PositiveOnly,
    LyapFullState,
    LyapFullStateBounded,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 8] = [
        ControllerKind::BackstepFull,
        ControllerKind::BackstepConstPMu,
        ControllerKind::RelaxedOutput,
        ControllerKind::SafetyFiltered,
        ControllerKind::ConstrainedOutput,
        ControllerKind::PositiveOnly,
        ControllerKind::LyapFullState,
        ControllerKind::LyapFullStateBounded,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::BackstepFull => "backstep_full",
            ControllerKind::BackstepConstPMu => "backstep_const_pmu",
            ControllerKind::RelaxedOutput => "relaxed_output",
            ControllerKind::SafetyFiltered => "safety_filtered",
            ControllerKind::ConstrainedOutput => "constrained_output",
            ControllerKind::PositiveOnly => "positive_only",
            ControllerKind::LyapFullState => "lyap_full_state",
            ControllerKind::LyapFullStateBounded => "lyap_full_state_bounded",
        }
    }

    pub fn needs_bounds(self) -> bool {
        matches!(
            self,
            ControllerKind::ConstrainedOutput | ControllerKind::LyapFullStateBounded
        )
    }

    fn gain_names(self) -> &'static [&'static str] {
        match self {
            ControllerKind::BackstepFull
            | ControllerKind::BackstepConstPMu
            | ControllerKind::RelaxedOutput => &["k1", "k2"],
            ControllerKind::SafetyFiltered
            | ControllerKind::ConstrainedOutput
            | ControllerKind::PositiveOnly => &["k1", "k2", "k3"],
            ControllerKind::LyapFullState | ControllerKind::LyapFullStateBounded => {
                &["c1", "c2", "theta"]
            }
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ControllerKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown controller `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gains {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub c1: f64,
    pub c2: f64,
    pub theta: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Self {
            k1: 1.0,
            k2: 2.0,
            k3: 1.0,
            c1: 1.0,
            c2: 1.0,
            theta: 1.0,
        }
    }
}

impl Gains {
    fn get(&self, name: &str) -> f64 {
        match name {
            "k1" => self.k1,
            "k2" => self.k2,
            "k3" => self.k3,
            "c1" => self.c1,
            "c2" => self.c2,
            "theta" => self.theta,
            _ => unreachable!("unknown gain {name}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    pub gains: Gains,
    /// `(D_lo, D_hi)`; `D_hi` may be infinite.
    pub bounds: Option<(f64, f64)>,
    /// Nominal law wrapped by the safety filter.
    pub nominal: ControllerKind,
}

impl ControllerSpec {
    pub fn new(kind: ControllerKind, gains: Gains) -> Self {
        Self {
            kind,
            gains,
            bounds: None,
            nominal: ControllerKind::BackstepFull,
        }
    }

    pub fn with_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.bounds = Some((lo, hi));
        self
    }

    pub fn with_nominal(mut self, nominal: ControllerKind) -> Self {
        self.nominal = nominal;
        self
    }

    /// Checks the nominal law and every gain the law uses, independent of
    /// any model.
    pub fn validate_gains(&self) -> Result<(), ControlError> {
        let mut names: Vec<&'static str> = self.kind.gain_names().to_vec();
        if self.kind == ControllerKind::SafetyFiltered
            && !matches!(
                self.nominal,
                ControllerKind::BackstepFull
                    | ControllerKind::BackstepConstPMu
                    | ControllerKind::RelaxedOutput
            )
        {
            return Err(ControlError::BadNominal(self.nominal));
        }
        names.sort_unstable();
        for name in names {
            let value = self.gains.get(name);
            if !(value.is_finite() && value > 0.0) {
                return Err(ControlError::BadGain { name, value });
            }
        }
        Ok(())
    }

    /// Validates gains, bounds and model requirements against an
    /// equilibrium.
    pub fn prepare(&self, eq: &Equilibrium) -> Result<Controller, ControlError> {
        self.validate_gains()?;
        let bounds = match (self.kind, self.bounds) {
            (ControllerKind::PositiveOnly, _) => Some(DilutionBounds::positive(eq.dstar())?),
            (ControllerKind::LyapFullState, _) => None,
            (k, Some((lo, hi))) if k.needs_bounds() => Some(DilutionBounds::new(lo, hi, eq.dstar())?),
            (k, None) if k.needs_bounds() => return Err(ControlError::MissingBounds(k)),
            _ => None,
        };
        let uses_const = self.kind == ControllerKind::BackstepConstPMu
            || (self.kind == ControllerKind::SafetyFiltered
                && self.nominal == ControllerKind::BackstepConstPMu);
        let constants = if uses_const {
            let p = ModelParams::constant_value(eq.params().p())
                .ok_or(ControlError::NotConstant("p"))?;
            let mu = ModelParams::constant_value(eq.params().mu())
                .ok_or(ControlError::NotConstant("mu"))?;
            Some((p, mu))
        } else {
            None
        };
        Ok(Controller {
            spec: *self,
            bounds,
            constants,
        })
    }
}

/// A validated controller bound to one equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    spec: ControllerSpec,
    bounds: Option<DilutionBounds>,
    constants: Option<(f64, f64)>,
}

impl Controller {
    pub fn spec(&self) -> &ControllerSpec {
        &self.spec
    }

    pub fn kind(&self) -> ControllerKind {
        self.spec.kind
    }

    pub fn gains(&self) -> &Gains {
        &self.spec.gains
    }

    pub fn bounds(&self) -> Option<&DilutionBounds> {
        self.bounds.as_ref()
    }

    pub fn input(&self, f: &AgeFunction, d: f64, eq: &Equilibrium) -> Result<f64, ControlError> {
        let g = &self.spec.gains;
        match self.spec.kind {
            ControllerKind::SafetyFiltered => {
                let u0 = self.nominal_input(self.spec.nominal, f, d, eq)?;
                Ok(u_safety_filtered(u0, d, g.k3))
            }
            kind => self.nominal_input(kind, f, d, eq),
        }
    }

    fn nominal_input(
        &self,
        kind: ControllerKind,
        f: &AgeFunction,
        d: f64,
        eq: &Equilibrium,
    ) -> Result<f64, ControlError> {
        let g = &self.spec.gains;
        match kind {
            ControllerKind::BackstepFull => u_backstep_full(f, d, eq, g),
            ControllerKind::BackstepConstPMu => {
                let (p, mu) = self.constants.expect("checked in prepare");
                u_backstep_const_pmu(f, d, eq, g, p, mu)
            }
            ControllerKind::RelaxedOutput => u_relaxed_output(output(f, eq)?, d, eq, g),
            ControllerKind::ConstrainedOutput | ControllerKind::PositiveOnly => {
                let b = self.bounds.as_ref().expect("checked in prepare");
                u_constrained_output(output(f, eq)?, d, eq, g, b)
            }
            ControllerKind::LyapFullState => u_lyap_fullstate(f, d, eq, g),
            ControllerKind::LyapFullStateBounded => {
                let b = self.bounds.as_ref().expect("checked in prepare");
                u_lyap_fullstate_bounded(f, d, eq, g, b)
            }
            ControllerKind::SafetyFiltered => Err(ControlError::BadNominal(kind)),
        }
    }
}

fn output(f: &AgeFunction, eq: &Equilibrium) -> Result<f64, ControlError> {
    let y = eq.output(f);
    if y > 0.0 {
        Ok(y)
    } else {
        Err(ControlError::NonPositiveOutput(y))
    }
}

fn u_stabilizing(d: f64, y: f64, eq: &Equilibrium, g: &Gains) -> f64 {
    -g.k2 * (d - eq.dstar() - g.k1 * (y / eq.ystar()).ln())
}

/// Backstepping law with full-profile cancellation,
/// `u = −k₁D − (k₁/y)[p(A)f(A) − p(0)f(0) − ∫p̃f] − k₂(D − D* − k₁ ln(y/y*))`.
pub fn u_backstep_full(
    f: &AgeFunction,
    d: f64,
    eq: &Equilibrium,
    g: &Gains,
) -> Result<f64, ControlError> {
    let y = output(f, eq)?;
    let p = eq.params().p();
    let b = p.last() * f.last()
        - p.first() * f.first()
        - weighted_sum(f.grid(), eq.ptilde().values(), f.values());
    let uc = -g.k1 * d - g.k1 / y * b;
    Ok(uc + u_stabilizing(d, y, eq, g))
}

/// Backstepping law for constant `p` and `μ`.
pub fn u_backstep_const_pmu(
    f: &AgeFunction,
    d: f64,
    eq: &Equilibrium,
    g: &Gains,
    p: f64,
    mu: f64,
) -> Result<f64, ControlError> {
    let y = output(f, eq)?;
    let uc = -g.k1 * d - g.k1 * p / y * (f.last() - f.first()) - g.k1 * mu;
    Ok(uc + u_stabilizing(d, y, eq, g))
}

/// `u = −(k₁+k₂)(D − D*) + k₁k₂ ln(y/y*)`.
pub fn u_relaxed_output(y: f64, d: f64, eq: &Equilibrium, g: &Gains) -> Result<f64, ControlError> {
    if !(y > 0.0) {
        return Err(ControlError::NonPositiveOutput(y));
    }
    Ok(-(g.k1 + g.k2) * (d - eq.dstar()) + g.k1 * g.k2 * (y / eq.ystar()).ln())
}

/// `u = u₀ + max{0, −u₀ − k₃D}`.
pub fn u_safety_filtered(u0: f64, d: f64, k3: f64) -> f64 {
    u0 + (-u0 - k3 * d).max(0.0)
}

/// Output feedback keeping `D` in `(D_lo, D_hi)`:
/// `u = [(D−D_lo)(D_hi−D)/(D_hi−D_lo)]·[(k₁+k₂)(D*−D) − k₃(Φ⁻¹(D) − k₂ ln(y/y*))]`.
/// With `(0, ∞)` bounds this is the positivity-only law.
pub fn u_constrained_output(
    y: f64,
    d: f64,
    eq: &Equilibrium,
    g: &Gains,
    bounds: &DilutionBounds,
) -> Result<f64, ControlError> {
    if !(y > 0.0) {
        return Err(ControlError::NonPositiveOutput(y));
    }
    let zeta = bounds.phi_inv(d)?;
    let bracket =
        (g.k1 + g.k2) * (eq.dstar() - d) - g.k3 * (zeta - g.k2 * (y / eq.ystar()).ln());
    Ok(bounds.barrier(d) * bracket)
}

/// `u = D[(k₁+k₂)(D*−D) + k₃ ln((D*/D)(y/y*)^{k₂})]`.
pub fn u_positive_only(y: f64, d: f64, eq: &Equilibrium, g: &Gains) -> Result<f64, ControlError> {
    if !(d > 0.0) {
        return Err(ControlError::NonPositiveDilution(d));
    }
    let b = DilutionBounds::positive(eq.dstar())?;
    u_constrained_output(y, d, eq, g, &b)
}

/// Full-state Lyapunov law,
/// `u = D*D{c₁[θ(Π^{c₁} − 1) + 1 − D/D*] + c₂((D*/D)Π^{c₁} − 1)}`.
pub fn u_lyap_fullstate(
    f: &AgeFunction,
    d: f64,
    eq: &Equilibrium,
    g: &Gains,
) -> Result<f64, ControlError> {
    if !(d > 0.0) {
        return Err(ControlError::NonPositiveDilution(d));
    }
    let ds = eq.dstar();
    let e = pi_projection(f, eq).powf(g.c1);
    Ok(ds * d * (g.c1 * (g.theta * (e - 1.0) + 1.0 - d / ds) + g.c2 * (ds / d * e - 1.0)))
}

/// Full-state Lyapunov law with dilution bounds, written in `(Π, D)`.
pub fn u_lyap_fullstate_bounded(
    f: &AgeFunction,
    d: f64,
    eq: &Equilibrium,
    g: &Gains,
    bounds: &DilutionBounds,
) -> Result<f64, ControlError> {
    if !bounds.contains(d) {
        return Err(TransformError::OutsideBounds {
            d,
            lo: bounds.lo(),
            hi: bounds.hi(),
        }
        .into());
    }
    let e = pi_projection(f, eq).powf(g.c1);
    Ok(bounds.barrier(d) * bounded_zeta_rate(e, d, eq.dstar(), g, bounds))
}

/// `ζ̇` of the bounded law as a function of `E = Π^{c₁}` and `D`.
fn bounded_zeta_rate(e: f64, d: f64, ds: f64, g: &Gains, b: &DilutionBounds) -> f64 {
    let (lo, hi, n, d1) = (b.lo(), b.hi(), b.n(), b.delta1());
    if !b.is_bounded() {
        let ez = (d - lo) / (ds - lo);
        return ds
            * (g.c1 * d1 * (1.0 - ez)
                + g.theta * g.c1 * d1 * (e - 1.0)
                + g.c2 * (e / ez - 1.0));
    }
    // e^ζ = (D − D_lo)/(n(D_hi − D)), 1 + n e^ζ = (D_hi − D_lo)/(D_hi − D)
    let ez = (d - lo) / (n * (hi - d));
    let one_nez = (hi - lo) / (hi - d);
    ds * (g.c1 * d1 * (1.0 - ez) / one_nez
        + g.theta * g.c1 * d1 * (1.0 + n) * (e - 1.0) / (one_nez * (1.0 + n * e))
        + g.c2 * (e * n * (hi - d) / (d - lo) - 1.0))
}

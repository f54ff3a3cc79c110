//! Lyapunov functions and functionals, and decay audits over recorded
//! series.

use serde::Serialize;
use thiserror::Error;

use crate::controllers::Gains;
use crate::transforms::DilutionBounds;

/// Values at or below this are excluded from log-slope fits.
pub const FIT_FLOOR: f64 = 1e-10;
/// Relative slack on theoretical decay rates.
pub const RATE_MARGIN: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum AuditError {
    #[error("series `{0}` has fewer than two usable points above the fit floor")]
    Degenerate(String),
    #[error("series `{0}` has mismatched lengths")]
    Length(String),
}

/// `½(η² + b₁δ²)`.
pub fn u1(eta: f64, delta: f64, b1: f64) -> f64 {
    0.5 * (eta * eta + b1 * delta * delta)
}

/// Coefficients `(b₁, b₂)` of the first backstepping functional.
pub fn v1_coefficients(g: &Gains, sigma: f64, max_age: f64) -> (f64, f64) {
    let b1 = 2.0 / (g.k1 * g.k2);
    let b2 = g.k1 / sigma * (2.0 * sigma * max_age).exp();
    (b1, b2)
}

/// Coefficients `(b₁, b₂)` of the output-feedback functional; `c1` is the
/// equilibrium's remainder constant.
pub fn v2_coefficients(g: &Gains, sigma: f64, max_age: f64, c1: f64) -> (f64, f64) {
    let b1 = 4.0 / (g.k1 * g.k2);
    let b2 = (g.k1 / sigma + b1 * c1 * g.k1 * g.k1 / (sigma * g.k2)) * (2.0 * sigma * max_age).exp();
    (b1, b2)
}

/// `U₁(η, δ) + ½ b₂ G²` with the given coefficients.
pub fn v_backstep(eta: f64, delta: f64, g_val: f64, (b1, b2): (f64, f64)) -> f64 {
    u1(eta, delta, b1) + 0.5 * b2 * g_val * g_val
}

/// Decay rate guaranteed for the first functional.
pub fn v1_rate(g: &Gains, sigma: f64) -> f64 {
    (g.k1 / 2.0).min(g.k2).min(sigma)
}

/// Decay rate guaranteed for the output-feedback functional.
pub fn v2_rate(g: &Gains, sigma: f64) -> f64 {
    (g.k1 / 2.0).min(g.k2 / 2.0).min(sigma)
}

/// `½η² + (b₁/2)(ζ − k₂η)²` with `b₁ = 1/(k₁k₂)`.
pub fn u3(eta: f64, zeta: f64, g: &Gains) -> f64 {
    let b1 = 1.0 / (g.k1 * g.k2);
    let w = zeta - g.k2 * eta;
    0.5 * eta * eta + 0.5 * b1 * w * w
}

/// Upper envelope `U₃(0) + (b₁k₂²k₃/(2σ)) e^{2σA} G(ψ₀)²`.
pub fn u3_envelope(u3_0: f64, g0: f64, g: &Gains, sigma: f64, max_age: f64) -> f64 {
    let b1 = 1.0 / (g.k1 * g.k2);
    u3_0 + b1 * g.k2 * g.k2 * g.k3 / (2.0 * sigma) * (2.0 * sigma * max_age).exp() * g0 * g0
}

/// `ω(z) = e^z − 1 − z`.
pub fn omega(z: f64) -> f64 {
    z.exp_m1() - z
}

/// `sinh²(z/2)`.
pub fn mu_z(z: f64) -> f64 {
    let s = (0.5 * z).sinh();
    s * s
}

/// `θω(−c₁η) + ω(ζ − c₁η)`.
pub fn v_theta(eta: f64, zeta: f64, g: &Gains) -> f64 {
    g.theta * omega(-g.c1 * eta) + omega(zeta - g.c1 * eta)
}

/// Closed-loop derivative of [`v_theta`] under the full-state Lyapunov
/// laws: `−4D*[θc₁δ₁/(1 + nΠ^{c₁})·μ(−c₁η) + c₂μ(ζ − c₁η)]`.
pub fn v_theta_rate(eta: f64, zeta: f64, g: &Gains, bounds: &DilutionBounds) -> f64 {
    let e = (g.c1 * eta).exp();
    let w = g.theta * g.c1 * bounds.delta1() / (1.0 + bounds.n() * e);
    -4.0 * bounds.dstar() * (w * mu_z(-g.c1 * eta) + g.c2 * mu_z(zeta - g.c1 * eta))
}

/// Least-squares slope of `ln v` against `t` over points with
/// `v > FIT_FLOOR`.
pub fn fit_log_slope(times: &[f64], values: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(_, v)| **v > FIT_FLOOR && v.is_finite())
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mt, my) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), (t, y)| (a + t / n, b + y / n));
    let (sxy, sxx) = pts.iter().fold((0.0, 0.0), |(sxy, sxx), (t, y)| {
        (sxy + (t - mt) * (y - my), sxx + (t - mt) * (t - mt))
    });
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapReport {
    pub name: String,
    pub slope: f64,
    pub theoretical_rate: f64,
    pub margin: f64,
    /// Largest forward-difference logarithmic rate between consecutive
    /// records above the floor.
    pub max_forward_rate: f64,
    pub initial: f64,
    pub fit_points: usize,
    pub pass: bool,
}

/// Fits `ln V` and checks `slope ≤ −rate·(1 − margin)`.
pub fn decay_audit(
    name: &str,
    times: &[f64],
    values: &[f64],
    rate: f64,
    margin: f64,
) -> Result<LyapReport, AuditError> {
    if times.len() != values.len() {
        return Err(AuditError::Length(name.into()));
    }
    let slope = fit_log_slope(times, values).ok_or_else(|| AuditError::Degenerate(name.into()))?;
    let mut max_forward_rate = f64::NEG_INFINITY;
    for i in 0..times.len().saturating_sub(1) {
        let (v0, v1) = (values[i], values[i + 1]);
        if v0 > FIT_FLOOR && v1 > FIT_FLOOR {
            max_forward_rate = max_forward_rate.max((v1 / v0).ln() / (times[i + 1] - times[i]));
        }
    }
    Ok(LyapReport {
        name: name.into(),
        slope,
        theoretical_rate: rate,
        margin,
        max_forward_rate,
        initial: values.first().copied().unwrap_or(f64::NAN),
        fit_points: values.iter().filter(|v| **v > FIT_FLOOR).count(),
        pass: slope <= -rate * (1.0 - margin),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivativeCheck {
    pub max_relative_error: f64,
    pub points: usize,
    pub strictly_decreasing: bool,
}

/// Compares the central difference of `values` with `analytic` at interior
/// records where the value is at least `floor`. Also reports whether the
/// series is strictly decreasing while above the floor.
pub fn derivative_agreement(
    times: &[f64],
    values: &[f64],
    analytic: &[f64],
    floor: f64,
) -> DerivativeCheck {
    let mut worst = 0.0f64;
    let mut points = 0;
    let mut strictly_decreasing = true;
    for i in 1..values.len().saturating_sub(1) {
        if values[i + 1] < floor {
            break;
        }
        let fd = (values[i + 1] - values[i - 1]) / (times[i + 1] - times[i - 1]);
        let rel = (fd - analytic[i]).abs() / analytic[i].abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        points += 1;
    }
    for i in 0..values.len().saturating_sub(1) {
        if values[i] < floor {
            break;
        }
        if !(values[i + 1] < values[i]) {
            strictly_decreasing = false;
        }
    }
    DerivativeCheck {
        max_relative_error: worst,
        points,
        strictly_decreasing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn u1_examples() {
        assert_eq!(u1(0.0, 0.0, 3.0), 0.0);
        assert_eq!(u1(1.0, 1.0, 2.0), 1.5);
        let g = Gains { k1: 1.0, k2: 2.0, ..Gains::default() };
        assert_eq!(v1_coefficients(&g, 0.3, 2.0).0, 1.0);
        assert_eq!(v2_coefficients(&g, 0.3, 2.0, 5.0).0, 2.0);
    }

    #[test]
    fn backstep_functional_examples() {
        let g = Gains::default();
        let c = v1_coefficients(&g, 0.31, 2.0);
        assert_eq!(v_backstep(0.0, 0.0, 0.0, c), 0.0);
        assert_eq!(v_backstep(1.0, 0.0, 0.0, c), 0.5);
        let (_, b2) = c;
        assert!((b2 - 1.0 / 0.31 * (1.24f64).exp()).abs() < 1e-12);
        let (_, b2) = v2_coefficients(&g, 0.31, 2.0, 4.0);
        let expect = (1.0 / 0.31 + 2.0 * 4.0 / (0.31 * 2.0)) * 1.24f64.exp();
        assert!((b2 - expect).abs() < 1e-12);
        assert_eq!(v1_rate(&g, 0.31), 0.31);
        assert_eq!(v2_rate(&Gains { k2: 0.4, ..g }, 0.31), 0.2);
    }

    #[test]
    fn u3_examples() {
        let g = Gains { k1: 1.0, k2: 10.0, ..Gains::default() };
        assert_eq!(u3(0.0, 0.0, &g), 0.0);
        assert_eq!(u3(1.0, 10.0, &g), 0.5);
        assert!((u3(0.0, 1.0, &g) - 0.05).abs() < 1e-15);
        assert_eq!(u3_envelope(0.2, 0.0, &g, 0.3, 2.0), 0.2);
    }

    #[test]
    fn omega_and_mu() {
        assert_eq!(omega(0.0), 0.0);
        assert_eq!(mu_z(0.0), 0.0);
        assert!((omega(1.0) - (std::f64::consts::E - 2.0)).abs() < 1e-15);
        for z in [-2.0f64, 0.3, 5.0] {
            let lhs = z.exp_m1() * (-z).exp_m1();
            assert!((lhs + 4.0 * mu_z(z)).abs() < 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn v_theta_examples() {
        let g = Gains::default();
        assert_eq!(v_theta(0.0, 0.0, &g), 0.0);
        let v = v_theta(-1.0, 0.0, &g);
        assert!((v - 2.0 * (std::f64::consts::E - 2.0)).abs() < 1e-14);
        let b = DilutionBounds::positive(0.5).unwrap();
        assert_eq!(v_theta_rate(0.0, 0.0, &g, &b), 0.0);
        assert!(v_theta_rate(0.3, -0.2, &g, &b) < 0.0);
    }

    #[test]
    fn exact_exponential_slope() {
        let t: Vec<f64> = (0..200).map(|i| i as f64 * 0.05).collect();
        let v: Vec<f64> = t.iter().map(|t| (-2.0 * t).exp()).collect();
        let r = decay_audit("exp", &t, &v, 2.0, RATE_MARGIN).unwrap();
        assert!((r.slope + 2.0).abs() < 1e-3);
        assert!(r.pass);
        assert!((r.max_forward_rate + 2.0).abs() < 1e-9);
        let flat = vec![1.0; t.len()];
        assert!(!decay_audit("flat", &t, &flat, 0.1, RATE_MARGIN).unwrap().pass);
    }

    #[test]
    fn floor_is_excluded() {
        let t: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let v: Vec<f64> = t.iter().map(|t| (-t).exp().max(1e-16)).collect();
        let slope = fit_log_slope(&t, &v).unwrap();
        assert!((slope + 1.0).abs() < 1e-9);
        assert_eq!(
            decay_audit("tiny", &t, &vec![1e-12; 100], 1.0, 0.1),
            Err(AuditError::Degenerate("tiny".into()))
        );
    }

    #[test]
    fn derivative_check_on_known_series() {
        let t: Vec<f64> = (0..1000).map(|i| i as f64 * 0.01).collect();
        let v: Vec<f64> = t.iter().map(|t| (-t).exp()).collect();
        let d: Vec<f64> = v.iter().map(|v| -v).collect();
        let c = derivative_agreement(&t, &v, &d, 1e-8);
        assert!(c.max_relative_error < 1e-4);
        assert!(c.strictly_decreasing);
        assert_eq!(c.points, 998);
    }

    proptest! {
        #[test]
        fn functionals_are_nonnegative(eta in -5.0f64..5.0, zeta in -5.0f64..5.0, delta in -5.0f64..5.0, gv in 0.0f64..5.0) {
            let g = Gains::default();
            prop_assert!(u1(eta, delta, 1.0) >= 0.0);
            prop_assert!(v_backstep(eta, delta, gv, v1_coefficients(&g, 0.3, 2.0)) >= 0.0);
            prop_assert!(u3(eta, zeta, &g) >= 0.0);
            prop_assert!(v_theta(eta, zeta, &g) >= 0.0);
            let b = DilutionBounds::new(0.1, 1.5, 0.48).unwrap();
            prop_assert!(v_theta_rate(eta, zeta, &g, &b) <= 0.0);
        }
    }
}

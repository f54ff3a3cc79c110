//! Ergodic change of variables `f ↦ (η, ψ)` and the functionals built on
//! it, plus the dilution-rate diffeomorphism used by the bounded laws.

use thiserror::Error;

use crate::equilibrium::{left_sum, Equilibrium};
use crate::model::{weighted_sum, AgeFunction};

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("v(ψ) undefined: 1 + ∫gψ = {0} ≤ 0")]
    LogDomain(f64),
    #[error("dilution {d} outside ({lo}, {hi})")]
    OutsideBounds { d: f64, lo: f64, hi: f64 },
    #[error("bounds must satisfy 0 ≤ D_lo < D* < D_hi, got D_lo = {lo}, D* = {dstar}, D_hi = {hi}")]
    BadBounds { lo: f64, dstar: f64, hi: f64 },
}

/// `Π(f) = ∫πf / ∫πf*`.
pub fn pi_projection(f: &AgeFunction, eq: &Equilibrium) -> f64 {
    left_sum(eq.pi(), f) / eq.pi_norm()
}

/// `ψ(t − a) = f(a)/(f*(a) Π(f)) − 1`, indexed by age.
pub fn psi_history(f: &AgeFunction, eq: &Equilibrium) -> AgeFunction {
    let pi = pi_projection(f, eq);
    f.zip_with(eq.fstar(), |f, fs| f / (fs * pi) - 1.0)
        .expect("profile and equilibrium share the grid")
}

/// `P(ψ) = ∫ψ(a)∫ₐᴬk̃ da / ∫a k̃`, in the quadrature paired with Π.
pub fn p_functional(psi: &AgeFunction, eq: &Equilibrium) -> f64 {
    left_sum(eq.adjoint_tail(), psi) / eq.rinv()
}

/// `ψ(0) − ∫k̃ψ`, the renewal defect of a history.
pub fn renewal_defect(psi: &AgeFunction, eq: &Equilibrium) -> f64 {
    psi.first() - weighted_sum(psi.grid(), eq.ktilde().values(), psi.values())
}

/// `v(ψ) = ln(1 + ∫gψ)`.
pub fn v_functional(psi: &AgeFunction, eq: &Equilibrium) -> Result<f64, TransformError> {
    let arg = 1.0 + weighted_sum(psi.grid(), eq.g().values(), psi.values());
    if arg > 0.0 {
        Ok(arg.ln())
    } else {
        Err(TransformError::LogDomain(arg))
    }
}

/// The output-derivative remainder `v₁(ψ)`; zero at ψ ≡ 0 and at any
/// constant ψ.
pub fn v1_functional(psi: &AgeFunction, eq: &Equilibrium) -> f64 {
    let grid = psi.grid();
    let fs = eq.fstar();
    let p = eq.params().p();
    let pf: Vec<f64> = p.values().iter().zip(fs.values()).map(|(p, f)| p * f).collect();
    let ptf: Vec<f64> = eq.ptilde().values().iter().zip(fs.values()).map(|(p, f)| p * f).collect();
    let ys = eq.ystar();
    let int_pf_psi = weighted_sum(grid, &pf, psi.values());
    let t4 = int_pf_psi / ys;
    let int_ptf = ptf.iter().enumerate().map(|(i, v)| v * grid.weight(i)).sum::<f64>();
    let int_ptf_psi = weighted_sum(grid, &ptf, psi.values());
    let (pa, p0) = (pf[pf.len() - 1], pf[0]);
    let t3 = pa * (t4 - psi.last()) - p0 * (t4 - psi.first()) - int_ptf * t4 + int_ptf_psi;
    t3 / (ys + int_pf_psi)
}

/// `G(ψ) = max|ψ(a)|e^{−σa} / (1 + min(0, min ψ))`.
pub fn g_functional(psi: &AgeFunction, sigma: f64) -> f64 {
    let num = psi
        .grid()
        .nodes()
        .zip(psi.values())
        .fold(0.0f64, |m, (a, v)| m.max(v.abs() * (-sigma * a).exp()));
    num / (1.0 + psi.min().min(0.0))
}

/// `(η, ψ)` for a density profile.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedState {
    pub eta: f64,
    pub psi: AgeFunction,
}

impl TransformedState {
    pub fn new(f: &AgeFunction, eq: &Equilibrium) -> Self {
        Self {
            eta: pi_projection(f, eq).ln(),
            psi: psi_history(f, eq),
        }
    }
}

/// Admissible dilution interval `(D_lo, D_hi)` around D*. `D_hi` may be
/// infinite.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct DilutionBounds {
    lo: f64,
    hi: f64,
    dstar: f64,
}

impl DilutionBounds {
    pub fn new(lo: f64, hi: f64, dstar: f64) -> Result<Self, TransformError> {
        if !(lo >= 0.0 && lo < dstar && dstar < hi && lo.is_finite() && !hi.is_nan()) {
            return Err(TransformError::BadBounds { lo, dstar, hi });
        }
        Ok(Self { lo, hi, dstar })
    }

    /// `(0, ∞)`.
    pub fn positive(dstar: f64) -> Result<Self, TransformError> {
        Self::new(0.0, f64::INFINITY, dstar)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn dstar(&self) -> f64 {
        self.dstar
    }

    pub fn is_bounded(&self) -> bool {
        self.hi.is_finite()
    }

    pub fn alpha(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn beta(&self) -> f64 {
        (self.hi - self.dstar) / (self.dstar - self.lo)
    }

    pub fn delta1(&self) -> f64 {
        (self.dstar - self.lo) / self.dstar
    }

    /// `(D* − D_lo)/(D_hi − D*)`, zero when `D_hi = ∞`.
    pub fn n(&self) -> f64 {
        if self.is_bounded() {
            (self.dstar - self.lo) / (self.hi - self.dstar)
        } else {
            0.0
        }
    }

    pub fn contains(&self, d: f64) -> bool {
        d > self.lo && d < self.hi
    }

    /// `(D − D_lo)(D_hi − D)/(D_hi − D_lo)`, or `D − D_lo` when unbounded.
    pub fn barrier(&self, d: f64) -> f64 {
        if self.is_bounded() {
            (d - self.lo) * (self.hi - d) / self.alpha()
        } else {
            d - self.lo
        }
    }

    pub fn phi(&self, zeta: f64) -> f64 {
        if self.is_bounded() {
            // α e^ζ/(β + e^ζ), written to avoid overflow for large ζ
            let s = if zeta > 0.0 {
                1.0 / (1.0 + self.beta() * (-zeta).exp())
            } else {
                let e = zeta.exp();
                e / (self.beta() + e)
            };
            self.lo + self.alpha() * s
        } else {
            self.lo + (self.dstar - self.lo) * zeta.exp()
        }
    }

    pub fn phi_inv(&self, d: f64) -> Result<f64, TransformError> {
        if !self.contains(d) {
            return Err(TransformError::OutsideBounds {
                d,
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(if self.is_bounded() {
            (self.beta() * (d - self.lo) / (self.hi - d)).ln()
        } else {
            ((d - self.lo) / (self.dstar - self.lo)).ln()
        })
    }
}

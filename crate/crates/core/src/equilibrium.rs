//! Steady state of the age-structured chemostat: the Lotka–Sharpe root D*,
//! the equilibrium profile f*, the adjoint eigenfunction π, normalized
//! kernels, and a numerical certificate for the kernel contraction
//! condition.
//!
//! Everything is computed with the same trapezoid rule the solver uses, so
//! `(f*, D*)` is an exact fixed point of the discrete dynamics. π is the
//! left eigenvector of the discrete transport-renewal step, which makes
//! `ln Π` advance by exactly `Δt(D* − D̄)` per step.

use thiserror::Error;

use crate::model::{quad, weighted_sum, AgeFunction, ModelError, ModelParams};

/// Target accuracy of the Lotka–Sharpe residual.
pub const LOTKA_SHARPE_TOL: f64 = 1e-10;
/// Default upper end of the decay-rate search.
pub const SIGMA_MAX: f64 = 5.0;
/// Contraction margin required of a certificate.
pub const CERT_MARGIN: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum EquilibriumError {
    #[error(
        "population is not viable: ∫k·exp(-∫μ) = {value} < 1, no nonnegative equilibrium dilution"
    )]
    NonViable { value: f64 },
    #[error("grid too coarse for the renewal condition: Δa/2·k(0) = {0} ≥ 1")]
    CoarseGrid(f64),
    #[error("could not bracket the Lotka–Sharpe root (reached D = {0})")]
    NoBracket(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error, PartialEq)]
pub enum CertError {
    #[error("empty λ grid")]
    EmptyGrid,
    #[error("kernel condition not verified: best ρ(λ={lambda}, σ=0) = {rho0} is not below 1 - {margin}")]
    NotCertified { lambda: f64, rho0: f64, margin: f64 },
}

/// Survival-weighted birth integral `∫ k(a) exp(−D a − ∫₀ᵃ μ) da`.
pub fn lotka_sharpe_integral(params: &ModelParams, dilution: f64) -> f64 {
    let grid = params.grid();
    let cm = params.mu().cumulative();
    let survival: Vec<f64> = grid
        .nodes()
        .zip(cm.values())
        .map(|(a, c)| (-dilution * a - c).exp())
        .collect();
    weighted_sum(grid, params.k().values(), &survival)
}

/// Solves `∫ k e^{−D a − ∫μ} = 1` for `D ≥ 0` by bisection.
pub fn solve_lotka_sharpe(params: &ModelParams) -> Result<f64, EquilibriumError> {
    let w0k0 = params.grid().weight(0) * params.k().first();
    if w0k0 >= 1.0 {
        return Err(EquilibriumError::CoarseGrid(w0k0));
    }
    let residual = |d: f64| lotka_sharpe_integral(params, d) - 1.0;
    let r0 = residual(0.0);
    if r0 < -LOTKA_SHARPE_TOL {
        return Err(EquilibriumError::NonViable { value: r0 + 1.0 });
    }
    if r0 <= LOTKA_SHARPE_TOL {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    while residual(hi) > 0.0 {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(EquilibriumError::NoBracket(hi));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let r = residual(mid);
        if r > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    // pick the bracket end with the smaller residual
    let (rl, rh) = (residual(lo).abs(), residual(hi).abs());
    Ok(if rl <= rh { lo } else { hi })
}

#[derive(Debug, Clone)]
pub struct Equilibrium {
    params: ModelParams,
    dstar: f64,
    fstar: AgeFunction,
    ystar: f64,
    pi: AgeFunction,
    pi_norm: f64,
    ktilde: AgeFunction,
    tail: AgeFunction,
    adjoint_tail: AgeFunction,
    g: AgeFunction,
    ptilde: AgeFunction,
    rinv: f64,
    c1: f64,
}

pub fn build_equilibrium(params: &ModelParams) -> Result<Equilibrium, EquilibriumError> {
    let dstar = solve_lotka_sharpe(params)?;
    let grid = *params.grid();
    let m = params.scale();
    let cm = params.mu().cumulative();
    let fstar = AgeFunction::from_values(
        grid,
        grid.nodes()
            .zip(cm.values())
            .map(|(a, c)| m * (-dstar * a - c).exp())
            .collect(),
    )?;
    let ystar = weighted_sum(&grid, params.p().values(), fstar.values());
    let kf = params.k().zip_with(&fstar, |k, f| k * f)?;
    let ktilde = kf.scale(1.0 / m);
    let tail = ktilde.tail();
    // Σ_{i>j} wᵢ k̃ᵢ: the tail seen by the discrete adjoint
    let adjoint_tail = {
        let v = ktilde.values();
        let mut out = vec![0.0; v.len()];
        for j in (0..v.len() - 1).rev() {
            out[j] = out[j + 1] + grid.weight(j + 1) * v[j + 1];
        }
        AgeFunction::from_values(grid, out)?
    };
    let pi0 = adjoint_tail.first();
    let pi = adjoint_tail.zip_with(&fstar, |t, f| m * t / (pi0 * f))?;
    let pi_norm = left_sum(&pi, &fstar);
    let g = params.p().zip_with(&fstar, |p, f| p * f / ystar)?;
    let ptilde = params.ptilde();
    let rinv = {
        let a = AgeFunction::from_fn(grid, |a| a);
        weighted_sum(&grid, a.values(), ktilde.values())
    };
    let abs_pt_f = weighted_sum(
        &grid,
        &ptilde.values().iter().map(|v| v.abs()).collect::<Vec<_>>(),
        fstar.values(),
    );
    let p = params.p();
    let c1 = (2.0 * (p.last() * fstar.last() + p.first() * fstar.first() + abs_pt_f) / ystar).powi(2);
    Ok(Equilibrium {
        params: params.clone(),
        dstar,
        fstar,
        ystar,
        pi,
        pi_norm,
        ktilde,
        tail,
        adjoint_tail,
        g,
        ptilde,
        rinv,
        c1,
    })
}

impl Equilibrium {
    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn dstar(&self) -> f64 {
        self.dstar
    }

    pub fn fstar(&self) -> &AgeFunction {
        &self.fstar
    }

    pub fn ystar(&self) -> f64 {
        self.ystar
    }

    /// Adjoint eigenfunction, `π(a) ≈ ∫ₐᴬ k f* / f*(a)`, scaled so
    /// `π(0) = 1`.
    pub fn pi(&self) -> &AgeFunction {
        &self.pi
    }

    /// `∫ π f*` in the adjoint quadrature, the denominator of Π.
    pub fn pi_norm(&self) -> f64 {
        self.pi_norm
    }

    /// `k̃ = k f* / f*(0)`.
    pub fn ktilde(&self) -> &AgeFunction {
        &self.ktilde
    }

    /// `∫ₐᴬ k̃`.
    pub fn ktilde_tail(&self) -> &AgeFunction {
        &self.tail
    }

    /// Discrete adjoint tail `Σ_{i>j} wᵢ k̃ᵢ`; its left sum is `rinv`.
    pub fn adjoint_tail(&self) -> &AgeFunction {
        &self.adjoint_tail
    }

    /// `g = p f* / y*`.
    pub fn g(&self) -> &AgeFunction {
        &self.g
    }

    pub fn ptilde(&self) -> &AgeFunction {
        &self.ptilde
    }

    /// Mean age of the normalized birth kernel, `∫ a k̃`.
    pub fn rinv(&self) -> f64 {
        self.rinv
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    /// Output `y = ∫ p f` for the model's sensor kernel.
    pub fn output(&self, f: &AgeFunction) -> f64 {
        weighted_sum(self.params.grid(), self.params.p().values(), f.values())
    }

    /// Residual of the stationary transport equation at interior nodes,
    /// `f*' + (μ + D*) f*`, with central differences.
    pub fn stationary_residual(&self) -> AgeFunction {
        let d = self.fstar.derivative();
        let mu = self.params.mu().values();
        let f = self.fstar.values();
        let v = (0..f.len())
            .map(|i| d.values()[i] + (mu[i] + self.dstar) * f[i])
            .collect();
        AgeFunction::from_values(*self.fstar.grid(), v).expect("finite")
    }

    /// `ρ(λ, σ) = ∫ |k̃(a) − (λ/rinv) ∫ₐᴬk̃| e^{σa} da`.
    pub fn contraction(&self, lambda: f64, sigma: f64) -> f64 {
        let r = lambda / self.rinv;
        let grid = self.ktilde.grid();
        let v: Vec<f64> = grid
            .nodes()
            .zip(self.ktilde.values().iter().zip(self.tail.values()))
            .map(|(a, (k, t))| (k - r * t).abs() * (sigma * a).exp())
            .collect();
        quad(&AgeFunction::from_values(*grid, v).expect("finite"))
    }
}

/// Left-endpoint sum `Σ_{j<n} Δa·wⱼfⱼ`, the quadrature paired with π.
pub(crate) fn left_sum(w: &AgeFunction, f: &AgeFunction) -> f64 {
    let h = w.grid().step();
    let (w, f) = (w.values(), f.values());
    h * (0..w.len() - 1).map(|j| w[j] * f[j]).sum::<f64>()
}

/// Kernel contraction certificate: `ρ(λ, σ) < 1` for the chosen pair.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct KernelCert {
    pub lambda: f64,
    pub sigma: f64,
    pub rho0: f64,
    pub rho_sigma: f64,
}

/// `{0.05 j : j = 1..=100}`.
pub fn default_lambda_grid() -> Vec<f64> {
    (1..=100).map(|j| 0.05 * j as f64).collect()
}

/// Scans `lambda_grid` for the smallest `ρ(λ, 0)`, then bisects for the
/// largest `σ ≤ SIGMA_MAX` with `ρ(λ, σ) < 1 − CERT_MARGIN`.
pub fn certify_assumption1(eq: &Equilibrium, lambda_grid: &[f64]) -> Result<KernelCert, CertError> {
    let (lambda, rho0) = lambda_grid
        .iter()
        .map(|&l| (l, eq.contraction(l, 0.0)))
        .fold(None, |best: Option<(f64, f64)>, (l, r)| match best {
            Some((_, br)) if br <= r => best,
            _ => Some((l, r)),
        })
        .ok_or(CertError::EmptyGrid)?;
    let target = 1.0 - CERT_MARGIN;
    if !(rho0 < target) {
        return Err(CertError::NotCertified {
            lambda,
            rho0,
            margin: CERT_MARGIN,
        });
    }
    let sigma = if eq.contraction(lambda, SIGMA_MAX) < target {
        SIGMA_MAX
    } else {
        let (mut lo, mut hi) = (0.0, SIGMA_MAX);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if eq.contraction(lambda, mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    Ok(KernelCert {
        lambda,
        sigma,
        rho0,
        rho_sigma: eq.contraction(lambda, sigma),
    })
}

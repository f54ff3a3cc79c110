//! Age grid, sampled age functions, trapezoid quadrature and the model
//! parameter container.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exprfn::{EvalError, Expr};

/// Default relative tolerance on the renewal boundary condition.
pub const DEFAULT_TOL_BC: f64 = 1e-6;

/// Refinement factor for finite-difference derivatives of expressions.
const DERIVATIVE_REFINE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("grid mismatch: ({0:?}) vs ({1:?})")]
    GridMismatch(AgeGrid, AgeGrid),
    #[error("{name}: {source}")]
    Eval {
        name: String,
        #[source]
        source: EvalError,
    },
    #[error("{name}: non-finite value {value} at a = {age}")]
    NonFinite { name: String, age: f64, value: f64 },
    #[error("{name} must be nonnegative, found {value} at a = {age}")]
    Negative { name: String, age: f64, value: f64 },
    #[error("table for {name}: {reason}")]
    Table { name: String, reason: String },
    #[error("sensor kernel p has zero integral")]
    DegenerateSensor,
    #[error("equilibrium scale M must be positive, got {0}")]
    BadScale(f64),
    #[error("density must be positive at every node; f(a = {age}) = {value}")]
    NonPositiveDensity { age: f64, value: f64 },
    #[error("renewal condition violated: |f(0) - ∫k f| = {residual:e} > {allowed:e}")]
    BoundaryResidual { residual: f64, allowed: f64 },
    #[error("{0} must be constant in age for this controller")]
    NotConstant(&'static str),
}

/// Uniform grid `a_i = i·Δa`, `i = 0..=n` on `[0, A]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeGrid {
    max_age: f64,
    cells: usize,
}

impl AgeGrid {
    pub const MIN_CELLS: usize = 8;

    pub fn new(max_age: f64, cells: usize) -> Result<Self, ModelError> {
        if !(max_age.is_finite() && max_age > 0.0) {
            return Err(ModelError::Grid(format!("A must be positive, got {max_age}")));
        }
        if cells < Self::MIN_CELLS {
            return Err(ModelError::Grid(format!(
                "need at least {} cells, got {cells}",
                Self::MIN_CELLS
            )));
        }
        Ok(Self { max_age, cells })
    }

    pub fn max_age(&self) -> f64 {
        self.max_age
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn len(&self) -> usize {
        self.cells + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        self.max_age / self.cells as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.cells {
            self.max_age
        } else {
            i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(move |i| self.node(i))
    }

    /// Trapezoid weight of node `i`.
    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 || i == self.cells {
            0.5 * self.step()
        } else {
            self.step()
        }
    }

    fn check_same(&self, other: &AgeGrid) -> Result<(), ModelError> {
        if self == other {
            Ok(())
        } else {
            Err(ModelError::GridMismatch(*self, *other))
        }
    }
}

/// A scalar function of age sampled on the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeFunction {
    grid: AgeGrid,
    values: Vec<f64>,
}

impl AgeFunction {
    pub fn from_values(grid: AgeGrid, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != grid.len() {
            return Err(ModelError::Grid(format!(
                "expected {} samples, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                name: "age function".into(),
                age: grid.node(i),
                value: values[i],
            });
        }
        Ok(Self { grid, values })
    }

    /// Unchecked construction; callers validate finiteness themselves.
    pub(crate) fn from_raw(grid: AgeGrid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn from_fn(grid: AgeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.nodes().map(f).collect();
        Self { grid, values }
    }

    pub fn constant(grid: AgeGrid, c: f64) -> Self {
        Self::from_fn(grid, |_| c)
    }

    pub fn grid(&self) -> &AgeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn first(&self) -> f64 {
        self.values[0]
    }

    pub fn last(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(
        &self,
        other: &AgeFunction,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, ModelError> {
        self.grid.check_same(&other.grid)?;
        Ok(Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Running trapezoid integral `∫₀^{a_i}`.
    pub fn cumulative(&self) -> Self {
        let h = self.grid.step();
        let mut acc = 0.0;
        let mut values = Vec::with_capacity(self.values.len());
        values.push(0.0);
        for w in self.values.windows(2) {
            acc += 0.5 * h * (w[0] + w[1]);
            values.push(acc);
        }
        Self {
            grid: self.grid,
            values,
        }
    }

    /// Running trapezoid tail integral `∫_{a_i}^A`.
    pub fn tail(&self) -> Self {
        let h = self.grid.step();
        let n = self.values.len();
        let mut values = vec![0.0; n];
        for i in (0..n - 1).rev() {
            values[i] = values[i + 1] + 0.5 * h * (self.values[i] + self.values[i + 1]);
        }
        Self {
            grid: self.grid,
            values,
        }
    }

    /// Derivative on the grid: central differences inside, second-order
    /// one-sided at the ends.
    pub fn derivative(&self) -> Self {
        let h = self.grid.step();
        let v = &self.values;
        let n = v.len();
        let mut d = vec![0.0; n];
        d[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h);
        d[n - 1] = (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * h);
        for i in 1..n - 1 {
            d[i] = (v[i + 1] - v[i - 1]) / (2.0 * h);
        }
        Self {
            grid: self.grid,
            values: d,
        }
    }
}

/// Composite trapezoid approximation of `∫₀ᴬ fn(a) da`.
pub fn quad(f: &AgeFunction) -> f64 {
    let v = f.values();
    let n = v.len();
    let inner: f64 = v[1..n - 1].iter().sum();
    f.grid().step() * (inner + 0.5 * (v[0] + v[n - 1]))
}

/// Trapezoid value of `∫₀ᴬ w(a)·fn(a) da`.
pub fn weighted_quad(w: &AgeFunction, f: &AgeFunction) -> Result<f64, ModelError> {
    w.grid().check_same(f.grid())?;
    Ok(weighted_sum(w.grid(), w.values(), f.values()))
}

pub(crate) fn weighted_sum(grid: &AgeGrid, w: &[f64], f: &[f64]) -> f64 {
    let n = w.len();
    let inner: f64 = (1..n - 1).map(|i| w[i] * f[i]).sum();
    grid.step() * (inner + 0.5 * (w[0] * f[0] + w[n - 1] * f[n - 1]))
}

/// Composite Simpson quadrature of `∫ w·f` on the same nodes (3/8 rule on
/// the last three cells when the cell count is odd). Used as an independent
/// accuracy probe for the trapezoid rule.
pub fn simpson_weighted(w: &AgeFunction, f: &AgeFunction) -> Result<f64, ModelError> {
    w.grid().check_same(f.grid())?;
    let h = w.grid().step();
    let g: Vec<f64> = w.values().iter().zip(f.values()).map(|(a, b)| a * b).collect();
    let n = g.len() - 1;
    let simpson_cells = if n.is_multiple_of(2) { n } else { n - 3 };
    let mut s = 0.0;
    for j in (0..simpson_cells).step_by(2) {
        s += h / 3.0 * (g[j] + 4.0 * g[j + 1] + g[j + 2]);
    }
    if simpson_cells < n {
        let j = simpson_cells;
        s += 3.0 * h / 8.0 * (g[j] + 3.0 * g[j + 1] + 3.0 * g[j + 2] + g[j + 3]);
    }
    Ok(s)
}

/// Where a user-supplied age function comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum FunctionSource {
    Expr(Expr),
    /// `(age, value)` pairs, ages strictly increasing, linearly interpolated.
    Table(Vec<(f64, f64)>),
}

impl FunctionSource {
    pub fn constant(c: f64) -> Self {
        FunctionSource::Expr(Expr::Num(c))
    }

    pub fn parse(src: &str) -> Result<Self, crate::exprfn::ParseError> {
        Ok(FunctionSource::Expr(crate::exprfn::parse(src)?))
    }

    fn check_table(name: &str, table: &[(f64, f64)], grid: &AgeGrid) -> Result<(), ModelError> {
        let err = |reason: String| ModelError::Table {
            name: name.to_string(),
            reason,
        };
        if table.len() < 2 {
            return Err(err("needs at least two rows".into()));
        }
        if table.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(err("ages must be strictly increasing".into()));
        }
        let (lo, hi) = (table[0].0, table[table.len() - 1].0);
        let tol = 1e-12 * grid.max_age();
        if lo > tol || hi < grid.max_age() - tol {
            return Err(err(format!(
                "covers [{lo}, {hi}] but the grid needs [0, {}]",
                grid.max_age()
            )));
        }
        Ok(())
    }

    fn interpolate(table: &[(f64, f64)], a: f64) -> f64 {
        let k = table.partition_point(|&(x, _)| x <= a);
        if k == 0 {
            return table[0].1;
        }
        if k == table.len() {
            return table[k - 1].1;
        }
        let (x0, y0) = table[k - 1];
        let (x1, y1) = table[k];
        y0 + (y1 - y0) * (a - x0) / (x1 - x0)
    }

    pub fn sample(&self, name: &str, grid: &AgeGrid) -> Result<AgeFunction, ModelError> {
        let values = match self {
            FunctionSource::Expr(e) => grid
                .nodes()
                .map(|a| {
                    e.eval(a).map_err(|source| ModelError::Eval {
                        name: name.to_string(),
                        source,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
            FunctionSource::Table(t) => {
                Self::check_table(name, t, grid)?;
                grid.nodes().map(|a| Self::interpolate(t, a)).collect()
            }
        };
        AgeFunction::from_values(*grid, values).map_err(|e| match e {
            ModelError::NonFinite { age, value, .. } => ModelError::NonFinite {
                name: name.to_string(),
                age,
                value,
            },
            other => other,
        })
    }

    /// Derivative at the grid nodes. Expressions use central differences
    /// with step Δa/10 (one-sided second order at the ends, so the
    /// expression is never evaluated outside `[0, A]`); tables use grid
    /// differences of the interpolant.
    pub fn derivative(&self, name: &str, grid: &AgeGrid) -> Result<AgeFunction, ModelError> {
        match self {
            FunctionSource::Expr(e) => {
                let h = grid.step() / DERIVATIVE_REFINE;
                let at = |a: f64| {
                    e.eval(a).map_err(|source| ModelError::Eval {
                        name: name.to_string(),
                        source,
                    })
                };
                let last = grid.cells();
                let mut d = Vec::with_capacity(grid.len());
                for i in 0..grid.len() {
                    let a = grid.node(i);
                    let v = if i == 0 {
                        (-3.0 * at(a)? + 4.0 * at(a + h)? - at(a + 2.0 * h)?) / (2.0 * h)
                    } else if i == last {
                        (3.0 * at(a)? - 4.0 * at(a - h)? + at(a - 2.0 * h)?) / (2.0 * h)
                    } else {
                        (at(a + h)? - at(a - h)?) / (2.0 * h)
                    };
                    d.push(v);
                }
                AgeFunction::from_values(*grid, d)
            }
            FunctionSource::Table(_) => Ok(self.sample(name, grid)?.derivative()),
        }
    }
}

/// Mortality μ, birth kernel k, sensor kernel p (with p'), and the
/// equilibrium scale M.
#[derive(Debug, Clone)]
pub struct ModelParams {
    grid: AgeGrid,
    mu: AgeFunction,
    k: AgeFunction,
    p: AgeFunction,
    dp: AgeFunction,
    scale: f64,
}

fn check_nonnegative(name: &str, f: &AgeFunction) -> Result<(), ModelError> {
    match f.values().iter().position(|&v| v < 0.0) {
        Some(i) => Err(ModelError::Negative {
            name: name.to_string(),
            age: f.grid().node(i),
            value: f.values()[i],
        }),
        None => Ok(()),
    }
}

impl ModelParams {
    pub fn from_sources(
        grid: AgeGrid,
        mu: &FunctionSource,
        k: &FunctionSource,
        p: &FunctionSource,
        scale: f64,
    ) -> Result<Self, ModelError> {
        let mu_s = mu.sample("mu", &grid)?;
        let k_s = k.sample("k", &grid)?;
        let p_s = p.sample("p", &grid)?;
        let dp = p.derivative("p", &grid)?;
        Self::new(mu_s, k_s, p_s, dp, scale)
    }

    pub fn new(
        mu: AgeFunction,
        k: AgeFunction,
        p: AgeFunction,
        dp: AgeFunction,
        scale: f64,
    ) -> Result<Self, ModelError> {
        let grid = *mu.grid();
        for f in [&k, &p, &dp] {
            grid.check_same(f.grid())?;
        }
        check_nonnegative("mu", &mu)?;
        check_nonnegative("k", &k)?;
        check_nonnegative("p", &p)?;
        if quad(&p) <= 0.0 {
            return Err(ModelError::DegenerateSensor);
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(ModelError::BadScale(scale));
        }
        Ok(Self {
            grid,
            mu,
            k,
            p,
            dp,
            scale,
        })
    }

    pub fn grid(&self) -> &AgeGrid {
        &self.grid
    }

    pub fn mu(&self) -> &AgeFunction {
        &self.mu
    }

    pub fn k(&self) -> &AgeFunction {
        &self.k
    }

    pub fn p(&self) -> &AgeFunction {
        &self.p
    }

    pub fn dp(&self) -> &AgeFunction {
        &self.dp
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn with_scale(&self, scale: f64) -> Result<Self, ModelError> {
        Self::new(
            self.mu.clone(),
            self.k.clone(),
            self.p.clone(),
            self.dp.clone(),
            scale,
        )
    }

    /// `p̃ = p' − p·μ`.
    pub fn ptilde(&self) -> AgeFunction {
        ptilde(&self.p, &self.dp, &self.mu).expect("grids checked at construction")
    }

    /// Value of a kernel that must be constant in age, if it is.
    pub fn constant_value(f: &AgeFunction) -> Option<f64> {
        let (lo, hi) = (f.min(), f.max());
        let scale = lo.abs().max(hi.abs()).max(1.0);
        ((hi - lo) <= 1e-12 * scale).then_some(0.5 * (lo + hi))
    }
}

/// `p̃(a) = p'(a) − p(a)μ(a)` from sampled `p`, `p'` and `μ`.
pub fn ptilde(
    p: &AgeFunction,
    dp: &AgeFunction,
    mu: &AgeFunction,
) -> Result<AgeFunction, ModelError> {
    let pm = p.zip_with(mu, |p, m| p * m)?;
    dp.zip_with(&pm, |d, pm| d - pm)
}

/// Population density profile and dilution rate at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub f: AgeFunction,
    pub dilution: f64,
    pub t: f64,
}

impl SimState {
    /// Builds a state and checks positivity and the renewal condition.
    pub fn new(
        f: AgeFunction,
        dilution: f64,
        t: f64,
        k: &AgeFunction,
        tol_bc: f64,
    ) -> Result<Self, ModelError> {
        let s = Self::initial(f, dilution, t)?;
        let residual = s.boundary_residual(k)?;
        let allowed = tol_bc * s.f.first().max(1.0);
        if residual > allowed {
            return Err(ModelError::BoundaryResidual { residual, allowed });
        }
        Ok(s)
    }

    /// Initial states are exempt from the renewal check; only positivity
    /// is enforced.
    pub fn initial(f: AgeFunction, dilution: f64, t: f64) -> Result<Self, ModelError> {
        check_positive(&f)?;
        Ok(Self { f, dilution, t })
    }

    /// `|f(0) − ∫k f|` with the trapezoid rule.
    pub fn boundary_residual(&self, k: &AgeFunction) -> Result<f64, ModelError> {
        Ok((self.f.first() - weighted_quad(k, &self.f)?).abs())
    }
}

pub(crate) fn check_positive(f: &AgeFunction) -> Result<(), ModelError> {
    match f.values().iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        Some(i) => Err(ModelError::NonPositiveDensity {
            age: f.grid().node(i),
            value: f.values()[i],
        }),
        None => Ok(()),
    }
}

//! Problem definition: coefficient families, reward, parameters and the
//! computational lattice.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values of a coefficient sampled on a rectangular (t, x) lattice.
///
/// `n_t = 0` declares a time-independent table holding a single slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub n_t: usize,
    pub horizon: f64,
    /// Slice-major values, `(n_t + 1) * n_x` entries.
    pub values: Vec<f64>,
}

impl Table {
    /// Tabulates `fun` on the nodes of `grid` at every time slice.
    pub fn from_grid(grid: &Grid, horizon: f64, fun: impl Fn(f64, f64) -> f64) -> Table {
        let mut values = Vec::with_capacity((grid.n_t + 1) * grid.n_x);
        for k in 0..=grid.n_t {
            let t = grid.time(k, horizon);
            values.extend(grid.nodes().map(|x| fun(t, x)));
        }
        Table {
            x_min: grid.x_min,
            x_max: grid.x_max,
            n_x: grid.n_x,
            n_t: grid.n_t,
            horizon,
            values,
        }
    }

    fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x as f64 + 1.0)
    }

    fn x_at(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 1.0) * self.dx()
    }

    fn covers(&self, grid: &Grid, horizon: f64) -> bool {
        self.x_min == grid.x_min
            && self.x_max == grid.x_max
            && self.n_x == grid.n_x
            && (self.n_t == 0 || (self.n_t == grid.n_t && self.horizon == horizon))
            && self.values.len() == (self.n_t + 1) * self.n_x
    }

    fn lookup(&self, t: f64, x: f64, clamp: bool) -> Result<f64> {
        let first = self.x_at(0);
        let last = self.x_at(self.n_x - 1);
        let tol = 1e-12 * (1.0 + self.x_max.abs().max(self.x_min.abs()));
        if !clamp && (x < first - tol || x > last + tol || t < -1e-12 || (self.n_t > 0 && t > self.horizon + 1e-12)) {
            return Err(Error::OutOfTable { t, x });
        }
        let xs = x.clamp(first, last);
        let pos = (xs - first) / self.dx();
        let i = (pos.floor() as usize).min(self.n_x.saturating_sub(2));
        let wx = (pos - i as f64).clamp(0.0, 1.0);
        let row = |k: usize| -> f64 {
            let base = k * self.n_x;
            if self.n_x == 1 {
                return self.values[base];
            }
            self.values[base + i] * (1.0 - wx) + self.values[base + i + 1] * wx
        };
        if self.n_t == 0 {
            return Ok(row(0));
        }
        let dt = self.horizon / self.n_t as f64;
        let pos_t = (t.clamp(0.0, self.horizon)) / dt;
        let k = (pos_t.floor() as usize).min(self.n_t - 1);
        let wt = (pos_t - k as f64).clamp(0.0, 1.0);
        Ok(row(k) * (1.0 - wt) + row(k + 1) * wt)
    }
}

/// A scalar coefficient of (t, x).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CoefficientSpec {
    Constant { value: f64 },
    /// `a + b * x`
    Affine { a: f64, b: f64 },
    /// `c * x`
    GbmStyle { c: f64 },
    Tabulated(Table),
}

impl CoefficientSpec {
    pub fn constant(value: f64) -> Self {
        CoefficientSpec::Constant { value }
    }

    pub fn affine(a: f64, b: f64) -> Self {
        CoefficientSpec::Affine { a, b }
    }

    pub fn gbm_style(c: f64) -> Self {
        CoefficientSpec::GbmStyle { c }
    }

    /// Evaluates the coefficient. Tabulated kinds fail outside their table.
    pub fn evaluate(&self, t: f64, x: f64) -> Result<f64> {
        match self {
            CoefficientSpec::Tabulated(table) => table.lookup(t, x, false),
            _ => Ok(self.value(t, x)),
        }
    }

    /// Infallible evaluation; tabulated kinds are clamped to the table edges.
    /// Used on simulated paths, which can leave the computational domain.
    #[inline]
    pub fn value(&self, t: f64, x: f64) -> f64 {
        match self {
            CoefficientSpec::Constant { value } => *value,
            CoefficientSpec::Affine { a, b } => a + b * x,
            CoefficientSpec::GbmStyle { c } => c * x,
            CoefficientSpec::Tabulated(table) => table
                .lookup(t, x, true)
                .expect("clamped table lookup cannot fail"),
        }
    }

    /// Values at every node of `grid` at time `t`.
    pub fn profile(&self, grid: &Grid, t: f64) -> Result<Vec<f64>> {
        grid.nodes().map(|x| self.evaluate(t, x)).collect()
    }

    pub fn is_time_independent(&self) -> bool {
        match self {
            CoefficientSpec::Tabulated(table) => table.n_t == 0,
            _ => true,
        }
    }
}

/// Coefficient multiplying `|sigma d_x g|^2` in the value equation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceFactor {
    /// `gamma / 2`, consistent with the moment identities.
    #[default]
    HalfGamma,
    /// `gamma`, the literal coefficient of the coupled system.
    Gamma,
}

impl VarianceFactor {
    pub fn kappa(self, gamma: f64) -> f64 {
        match self {
            VarianceFactor::HalfGamma => 0.5 * gamma,
            VarianceFactor::Gamma => gamma,
        }
    }
}

/// The stopping problem: dynamics, reward and preference parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub drift: CoefficientSpec,
    pub diffusion: CoefficientSpec,
    /// Reward `f(x)`; time argument ignored.
    pub reward: CoefficientSpec,
    pub gamma: f64,
    pub lambda: f64,
    pub horizon: f64,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub variance_factor: VarianceFactor,
}

fn default_dimension() -> usize {
    1
}

impl ProblemSpec {
    /// Geometric Brownian motion `dX = mu X dt + sigma X dW` with reward `f(x) = x`.
    pub fn gbm(mu: f64, sigma_sq: f64, gamma: f64, lambda: f64, horizon: f64) -> Self {
        ProblemSpec {
            drift: CoefficientSpec::gbm_style(mu),
            diffusion: CoefficientSpec::gbm_style(sigma_sq.sqrt()),
            reward: CoefficientSpec::affine(0.0, 1.0),
            gamma,
            lambda,
            horizon,
            dimension: 1,
            variance_factor: VarianceFactor::HalfGamma,
        }
    }

    pub fn with_variance_factor(mut self, factor: VarianceFactor) -> Self {
        self.variance_factor = factor;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn kappa(&self) -> f64 {
        self.variance_factor.kappa(self.gamma)
    }

    #[inline]
    pub fn reward_at(&self, x: f64) -> f64 {
        self.reward.value(0.0, x)
    }

    /// Reward profile on the grid nodes.
    pub fn reward_profile(&self, grid: &Grid) -> Result<Vec<f64>> {
        self.reward.profile(grid, 0.0)
    }
}

/// Boundary handling at the first and last interior nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryKind {
    /// Second derivative zero, one-sided first derivative.
    #[default]
    LinearExtrapolation,
    /// Boundary nodes keep their terminal value.
    ValueClampedToF,
}

/// Uniform lattice: `n_x` interior nodes in `(x_min, x_max)` and `n_t` time steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub n_t: usize,
    #[serde(default)]
    pub boundary_kind: BoundaryKind,
}

impl Grid {
    pub fn new(x_min: f64, x_max: f64, n_x: usize, n_t: usize) -> Result<Grid> {
        if !(x_min.is_finite() && x_max.is_finite()) || x_min >= x_max {
            return Err(Error::InvalidGrid(format!(
                "need x_min < x_max, got [{x_min}, {x_max}]"
            )));
        }
        if n_x < 3 {
            return Err(Error::InvalidGrid(format!("need n_x >= 3, got {n_x}")));
        }
        if n_t < 1 {
            return Err(Error::InvalidGrid(format!("need n_t >= 1, got {n_t}")));
        }
        Ok(Grid {
            x_min,
            x_max,
            n_x,
            n_t,
            boundary_kind: BoundaryKind::default(),
        })
    }

    pub fn with_boundary(mut self, kind: BoundaryKind) -> Self {
        self.boundary_kind = kind;
        self
    }

    /// Re-checks the constructor invariants (grids may arrive through serde).
    pub fn check(&self) -> Result<()> {
        Grid::new(self.x_min, self.x_max, self.n_x, self.n_t).map(|_| ())
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x as f64 + 1.0)
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 1.0) * self.dx()
    }

    pub fn nodes(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        (0..self.n_x).map(move |i| self.x(i))
    }

    #[inline]
    pub fn dt(&self, horizon: f64) -> f64 {
        horizon / self.n_t as f64
    }

    #[inline]
    pub fn time(&self, k: usize, horizon: f64) -> f64 {
        if k == self.n_t {
            horizon
        } else {
            k as f64 * self.dt(horizon)
        }
    }

    /// Index of the node nearest to `x`, clamped to the grid.
    pub fn nearest_node(&self, x: f64) -> usize {
        let pos = (x - self.x_min) / self.dx() - 1.0;
        pos.round().clamp(0.0, (self.n_x - 1) as f64) as usize
    }

    pub fn same_space(&self, other: &Grid) -> bool {
        self.x_min == other.x_min && self.x_max == other.x_max && self.n_x == other.n_x
    }
}

/// A scalar function with its first two derivatives.
#[derive(Clone)]
pub struct ScalarFn {
    pub value: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub first: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub second: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl fmt::Debug for ScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarFn")
            .field("has_second", &self.second.is_some())
            .finish()
    }
}

impl ScalarFn {
    /// `G(z) = a z^2`
    pub fn quadratic(a: f64) -> Self {
        ScalarFn {
            value: Arc::new(move |z| a * z * z),
            first: Arc::new(move |z| 2.0 * a * z),
            second: Some(Arc::new(move |_| 2.0 * a)),
        }
    }

    /// `G(z) = a z`
    pub fn linear(a: f64) -> Self {
        ScalarFn {
            value: Arc::new(move |z| a * z),
            first: Arc::new(move |_| a),
            second: Some(Arc::new(|_| 0.0)),
        }
    }
}

/// Objective `E[f_lin(X_tau)] + G(E[k(X_tau)])`.
#[derive(Clone)]
pub struct GeneralObjective {
    pub g: ScalarFn,
    pub k: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Linear part of the reward.
    pub linear_reward: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for GeneralObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralObjective").field("g", &self.g).finish()
    }
}

impl GeneralObjective {
    /// Mean-variance as a special case: `G(z) = (gamma/2) z^2`, `k = f`,
    /// linear part `f - (gamma/2) f^2`.
    pub fn mean_variance(gamma: f64, reward: CoefficientSpec) -> Self {
        let r1 = reward.clone();
        let r2 = reward;
        GeneralObjective {
            g: ScalarFn::quadratic(0.5 * gamma),
            k: Arc::new(move |x| r1.value(0.0, x)),
            linear_reward: Arc::new(move |x| {
                let f = r2.value(0.0, x);
                f - 0.5 * gamma * f * f
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    DegenerateDiffusion,
    NonPositiveHorizon,
    NonPositiveLambda,
    NegativeGamma,
    SolverDimension,
    NonFiniteCoefficient,
    TableMismatch,
    InvalidGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    fn push(&mut self, kind: ViolationKind, message: impl Into<String>) {
        self.violations.push(Violation {
            kind,
            message: message.into(),
        });
    }

    /// Converts a non-empty report into an error listing every violation.
    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            return Ok(());
        }
        let joined: Vec<_> = self.violations.iter().map(|v| v.message.clone()).collect();
        Err(Error::InvalidProblem(joined.join("; ")))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ValidationOptions {
    /// Lower bound for `sigma^2` on the grid.
    pub min_variance: f64,
    /// Check the regularization weight.
    pub uses_lambda: bool,
    /// Check the dimension restriction of the solvers.
    pub for_solver: bool,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            min_variance: 1e-12,
            uses_lambda: true,
            for_solver: true,
        }
    }
}

/// Lists every violated standing assumption; an empty report means valid.
pub fn validate_problem(spec: &ProblemSpec, grid: &Grid, opts: ValidationOptions) -> ValidationReport {
    let mut report = ValidationReport::default();
    if let Err(e) = grid.check() {
        report.push(ViolationKind::InvalidGrid, e.to_string());
    }
    if !(spec.horizon > 0.0 && spec.horizon.is_finite()) {
        report.push(
            ViolationKind::NonPositiveHorizon,
            format!("horizon must be positive, got {}", spec.horizon),
        );
    }
    if opts.uses_lambda && !(spec.lambda > 0.0 && spec.lambda.is_finite()) {
        report.push(
            ViolationKind::NonPositiveLambda,
            format!("lambda must be positive, got {}", spec.lambda),
        );
    }
    if !(spec.gamma >= 0.0 && spec.gamma.is_finite()) {
        report.push(
            ViolationKind::NegativeGamma,
            format!("gamma must be non-negative, got {}", spec.gamma),
        );
    }
    if opts.for_solver && spec.dimension != 1 {
        report.push(
            ViolationKind::SolverDimension,
            format!("solver requires d=1, got d={}", spec.dimension),
        );
    }
    if !report.contains(ViolationKind::InvalidGrid) && !report.contains(ViolationKind::NonPositiveHorizon) {
        for (name, coef) in [
            ("drift", &spec.drift),
            ("diffusion", &spec.diffusion),
            ("reward", &spec.reward),
        ] {
            if let CoefficientSpec::Tabulated(table) = coef {
                if !table.covers(grid, spec.horizon) {
                    report.push(
                        ViolationKind::TableMismatch,
                        format!("tabulated {name} does not cover the grid exactly"),
                    );
                }
            }
        }
        if !report.contains(ViolationKind::TableMismatch) {
            check_on_grid(spec, grid, opts, &mut report);
        }
    }
    report
}

fn check_on_grid(spec: &ProblemSpec, grid: &Grid, opts: ValidationOptions, report: &mut ValidationReport) {
    let mut min_var = f64::INFINITY;
    let mut worst = (0.0, 0.0);
    let mut non_finite = None;
    for k in 0..=grid.n_t {
        let t = grid.time(k, spec.horizon);
        for x in grid.nodes() {
            let b = spec.drift.value(t, x);
            let s = spec.diffusion.value(t, x);
            let f = spec.reward_at(x);
            if !(b.is_finite() && s.is_finite() && f.is_finite()) && non_finite.is_none() {
                non_finite = Some((t, x));
            }
            if s * s < min_var {
                min_var = s * s;
                worst = (t, x);
            }
        }
    }
    if let Some((t, x)) = non_finite {
        report.push(
            ViolationKind::NonFiniteCoefficient,
            format!("non-finite coefficient at (t={t}, x={x})"),
        );
    }
    if !(min_var >= opts.min_variance) {
        report.push(
            ViolationKind::DegenerateDiffusion,
            format!(
                "degenerate diffusion: sigma^2 = {min_var:e} < {:e} at (t={}, x={})",
                opts.min_variance, worst.0, worst.1
            ),
        );
    }
}

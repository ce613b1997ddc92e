//! One-dimensional linear parabolic machinery.
//!
//! Equations are written backward in time,
//! `(d_t + L) phi + c phi = s`, `phi(T, .) = f`,
//! with generator `L phi = 1/2 sigma^2 phi_xx + b phi_x`, discretized by
//! central differences and stepped fully implicitly.

use crate::error::{Error, Result};
use crate::field::GridField;
use crate::model::{BoundaryKind, Grid, ProblemSpec};

/// Row coefficients of the discrete generator at one time level:
/// `(L phi)_i = lower_i phi_{i-1} + diag_i phi_i + upper_i phi_{i+1}`.
#[derive(Clone, Debug)]
pub struct Stencil {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
    /// Boundary rows hold their value (clamped boundary kind).
    pub frozen_ends: bool,
    /// Edge rows (left, right) whose drift points out of the domain. Their
    /// one-sided difference is downwind; the implicit step drops it.
    pub outflow: [bool; 2],
    /// Nodes with `|b| dx > sigma^2`, where central differencing loses monotonicity.
    pub peclet_violations: usize,
}

impl Stencil {
    pub fn new(spec: &ProblemSpec, grid: &Grid, t: f64) -> Stencil {
        let n = grid.n_x;
        let dx = grid.dx();
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let mut peclet_violations = 0;
        for i in 0..n {
            let x = grid.x(i);
            let b = spec.drift.value(t, x);
            let sig = spec.diffusion.value(t, x);
            let var = sig * sig;
            if b.abs() * dx > var {
                peclet_violations += 1;
            }
            let alpha = 0.5 * var / (dx * dx);
            let beta = b / (2.0 * dx);
            lower[i] = alpha - beta;
            diag[i] = -2.0 * alpha;
            upper[i] = alpha + beta;
        }
        let frozen_ends = grid.boundary_kind == BoundaryKind::ValueClampedToF;
        let mut outflow = [false; 2];
        for &i in &[0, n - 1] {
            let b = spec.drift.value(t, grid.x(i));
            if !frozen_ends {
                outflow[usize::from(i != 0)] = if i == 0 { b < 0.0 } else { b > 0.0 };
            }
            if frozen_ends {
                lower[i] = 0.0;
                diag[i] = 0.0;
                upper[i] = 0.0;
            } else if i == 0 {
                lower[i] = 0.0;
                diag[i] = -b / dx;
                upper[i] = b / dx;
            } else {
                lower[i] = -b / dx;
                diag[i] = b / dx;
                upper[i] = 0.0;
            }
        }
        Stencil {
            lower,
            diag,
            upper,
            frozen_ends,
            outflow,
            peclet_violations,
        }
    }

    pub fn apply(&self, slice: &[f64]) -> Vec<f64> {
        let n = slice.len();
        (0..n)
            .map(|i| {
                let mut v = self.diag[i] * slice[i];
                if i > 0 {
                    v += self.lower[i] * slice[i - 1];
                }
                if i + 1 < n {
                    v += self.upper[i] * slice[i + 1];
                }
                v
            })
            .collect()
    }

    #[inline]
    fn is_frozen(&self, i: usize) -> bool {
        self.frozen_ends && (i == 0 || i + 1 == self.diag.len())
    }

    #[inline]
    fn is_outflow(&self, i: usize) -> bool {
        (i == 0 && self.outflow[0]) || (i + 1 == self.diag.len() && self.outflow[1])
    }
}

/// Discrete generator applied to a space profile at time `t`.
pub fn apply_generator(spec: &ProblemSpec, grid: &Grid, slice: &[f64], t: f64) -> Vec<f64> {
    Stencil::new(spec, grid, t).apply(slice)
}

/// `sub_i x_{i-1} + main_i x_i + sup_i x_{i+1} = rhs_i`
#[derive(Clone, Debug)]
pub struct TridiagonalSystem {
    pub sub: Vec<f64>,
    pub main: Vec<f64>,
    pub sup: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl TridiagonalSystem {
    /// Rows with `|main| > |sub| + |sup|`.
    pub fn is_strictly_diagonally_dominant(&self) -> bool {
        (0..self.main.len()).all(|i| self.main[i].abs() > self.sub[i].abs() + self.sup[i].abs())
    }

    /// Thomas algorithm. `dt` is carried into the error for diagnostics.
    pub fn solve(&self, dt: f64) -> Result<Vec<f64>> {
        let n = self.main.len();
        let mut c_prime = vec![0.0; n];
        let mut d_prime = vec![0.0; n];
        let mut den = self.main[0];
        if !(den.abs() > 1e-300) || !den.is_finite() {
            return Err(Error::SingularSystem { row: 0, dt });
        }
        c_prime[0] = self.sup[0] / den;
        d_prime[0] = self.rhs[0] / den;
        for i in 1..n {
            den = self.main[i] - self.sub[i] * c_prime[i - 1];
            if !(den.abs() > 1e-300) || !den.is_finite() {
                return Err(Error::SingularSystem { row: i, dt });
            }
            c_prime[i] = self.sup[i] / den;
            d_prime[i] = (self.rhs[i] - self.sub[i] * d_prime[i - 1]) / den;
        }
        let mut x = d_prime;
        for i in (0..n - 1).rev() {
            x[i] -= c_prime[i] * x[i + 1];
        }
        Ok(x)
    }
}

/// Per-row modifiers of one implicit step.
pub(crate) struct StepTerms<'a> {
    /// Zero-order coefficient `c`.
    pub zero_order: Option<&'a [f64]>,
    /// Source `s`.
    pub source: Option<&'a [f64]>,
    /// Rows pinned to a value (identity rows).
    pub pinned: Option<(&'a [bool], &'a [f64])>,
}

/// Assembles `phi - dt (L phi + c phi) = phi_next - dt s`.
pub(crate) fn assemble_step(stencil: &Stencil, dt: f64, slice_next: &[f64], terms: &StepTerms<'_>) -> TridiagonalSystem {
    let n = slice_next.len();
    let mut sys = TridiagonalSystem {
        sub: vec![0.0; n],
        main: vec![0.0; n],
        sup: vec![0.0; n],
        rhs: vec![0.0; n],
    };
    for i in 0..n {
        if let Some((mask, values)) = terms.pinned {
            if mask[i] {
                sys.main[i] = 1.0;
                sys.rhs[i] = values[i];
                continue;
            }
        }
        if stencil.is_frozen(i) {
            sys.main[i] = 1.0;
            sys.rhs[i] = slice_next[i];
            continue;
        }
        let c = terms.zero_order.map_or(0.0, |c| c[i]);
        let s = terms.source.map_or(0.0, |s| s[i]);
        if stencil.is_outflow(i) {
            // No upwind neighbour: the one-sided difference would extrapolate,
            // which breaks monotonicity (and Jensen) at the edge. Drop transport.
            sys.main[i] = 1.0 - dt * c;
            sys.rhs[i] = slice_next[i] - dt * s;
            continue;
        }
        sys.sub[i] = -dt * stencil.lower[i];
        sys.main[i] = 1.0 - dt * stencil.diag[i] - dt * c;
        sys.sup[i] = -dt * stencil.upper[i];
        sys.rhs[i] = slice_next[i] - dt * s;
    }
    sys
}

pub(crate) fn implicit_step(stencil: &Stencil, dt: f64, slice_next: &[f64], terms: &StepTerms<'_>) -> Result<Vec<f64>> {
    assemble_step(stencil, dt, slice_next, terms).solve(dt)
}

/// One fully implicit step of `(d_t + L) phi + c phi = s` from `t + dt` back to `t`.
pub fn step_backward(
    spec: &ProblemSpec,
    grid: &Grid,
    slice_next: &[f64],
    t: f64,
    zero_order: &[f64],
    source: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidGrid(format!("time step must be positive, got {dt}")));
    }
    if zero_order.iter().chain(source).any(|v| !v.is_finite()) {
        return Err(Error::InvalidProblem("non-finite zero-order term or source".into()));
    }
    let stencil = Stencil::new(spec, grid, t);
    implicit_step(
        &stencil,
        dt,
        slice_next,
        &StepTerms {
            zero_order: Some(zero_order),
            source: Some(source),
            pinned: None,
        },
    )
}

/// Caches the generator stencil when the coefficients do not depend on time.
pub(crate) struct StencilCache<'a> {
    spec: &'a ProblemSpec,
    grid: &'a Grid,
    fixed: Option<Stencil>,
}

impl<'a> StencilCache<'a> {
    pub fn new(spec: &'a ProblemSpec, grid: &'a Grid) -> Self {
        let fixed = (spec.drift.is_time_independent() && spec.diffusion.is_time_independent())
            .then(|| Stencil::new(spec, grid, 0.0));
        if let Some(s) = &fixed {
            if s.peclet_violations > 0 {
                log::warn!(
                    "central differencing: |b| dx > sigma^2 at {} nodes; expect oscillations",
                    s.peclet_violations
                );
            }
        }
        StencilCache { spec, grid, fixed }
    }

    pub fn at(&self, t: f64) -> std::borrow::Cow<'_, Stencil> {
        match &self.fixed {
            Some(s) => std::borrow::Cow::Borrowed(s),
            None => std::borrow::Cow::Owned(Stencil::new(self.spec, self.grid, t)),
        }
    }
}

/// Full backward sweep of `(d_t + L) phi + c phi = s` from `phi(T) = terminal`.
pub fn solve_linear_pde(
    spec: &ProblemSpec,
    grid: &Grid,
    terminal: &[f64],
    zero_order: &GridField,
    source: &GridField,
) -> Result<GridField> {
    if terminal.len() != grid.n_x || zero_order.grid != *grid || source.grid != *grid {
        return Err(Error::GridMismatch("linear PDE inputs must share the grid".into()));
    }
    let dt = grid.dt(spec.horizon);
    let cache = StencilCache::new(spec, grid);
    let mut out = GridField::zeros(grid, spec.horizon);
    out.slice_mut(grid.n_t).copy_from_slice(terminal);
    for k in (0..grid.n_t).rev() {
        let t = grid.time(k, spec.horizon);
        let stencil = cache.at(t);
        let next = out.slice(k + 1).to_vec();
        let slice = implicit_step(
            &stencil,
            dt,
            &next,
            &StepTerms {
                zero_order: Some(zero_order.slice(k)),
                source: Some(source.slice(k)),
                pinned: None,
            },
        )?;
        out.slice_mut(k).copy_from_slice(&slice);
    }
    Ok(out)
}

/// Feynman-Kac bounds for `c <= 0`:
/// `-(|f^-| + T |s^+|) <= phi <= |f^+| + T |s^-|` for `(d_t + L) phi + c phi = s`.
pub fn maximum_principle_bounds(terminal: &[f64], source: &GridField, horizon: f64) -> (f64, f64) {
    let f_pos = terminal.iter().fold(0.0_f64, |m, v| m.max(*v));
    let f_neg = terminal.iter().fold(0.0_f64, |m, v| m.max(-*v));
    let s_pos = source.values.iter().fold(0.0_f64, |m, v| m.max(*v));
    let s_neg = source.values.iter().fold(0.0_f64, |m, v| m.max(-*v));
    (-(f_neg + horizon * s_pos), f_pos + horizon * s_neg)
}

/// Sup-norm of the spatial gradient over all slices.
pub fn gradient_sup(field: &GridField) -> f64 {
    let dx = field.grid.dx();
    (0..field.n_slices())
        .flat_map(|k| crate::field::gradient(field.slice(k), dx))
        .fold(0.0_f64, |m, v| m.max(v.abs()))
}

//! The vanishing-regularization limit: a ladder of regularized solves, and a
//! direct solver for the limiting obstacle system
//!
//! ```text
//! V + gamma/2 (f - g)^2 >= f                        everywhere
//! (d_t + L) V - kappa |sigma g_x|^2 = 0, (d_t + L) g = 0   on the continuation set
//! V = g = f                                          on the stopping set
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{gradient, interpolate_profile, GridField};
use crate::hjb_regularized::{solve_extended_hjb_from, FixedPointConfig, HJBSolution, InitialGuess};
use crate::model::{validate_problem, BoundaryKind, GeneralObjective, Grid, ProblemSpec, ValidationOptions};
use crate::pde_kernel::{assemble_step, StencilCache, StepTerms, TridiagonalSystem};

/// Cap on the per-step stop-mask iteration.
pub const MASK_ITERATION_CAP: usize = 50;

/// Residual values at or below this (relative to the reward scale) count as "stop".
const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct VISolution {
    pub v: GridField,
    pub g: GridField,
    /// `V - (gamma/2) g^2`.
    pub h: GridField,
    /// Slice-major, true where the obstacle binds.
    pub stop_mask: Vec<bool>,
    /// Obstacle residual `V + gamma/2 (f - g)^2 - f` of continuing one more
    /// step at every node; positive on the continuation set, non-positive on
    /// the stopping set.
    pub residual: GridField,
    /// Boundary locations per slice, increasing in x.
    pub boundary: Vec<Vec<f64>>,
    pub kappa: f64,
    /// Slices whose mask iteration hit the cap.
    pub unsettled_slices: Vec<usize>,
    pub max_mask_iterations: usize,
}

impl VISolution {
    pub fn is_stopped(&self, k: usize, i: usize) -> bool {
        self.stop_mask[k * self.v.grid.n_x + i]
    }

    pub fn mask_converged(&self) -> bool {
        self.unsettled_slices.is_empty()
    }
}

/// Continuation value at row `i` given the neighbours in `x`.
#[inline]
fn row_value(sys: &TridiagonalSystem, x: &[f64], i: usize) -> f64 {
    let mut r = sys.rhs[i];
    if i > 0 {
        r -= sys.sub[i] * x[i - 1];
    }
    if i + 1 < x.len() {
        r -= sys.sup[i] * x[i + 1];
    }
    r / sys.main[i]
}

/// Solves the limiting obstacle system backward in time.
///
/// Each step solves both equations implicitly with the current stop set held
/// at `V = g = f`, recomputes at every node the value of continuing for one
/// more step (its own row of the implicit system, neighbours fixed), stops
/// where continuing does not beat the obstacle, and repeats until the stop set
/// no longer changes.
pub fn solve_vi(spec: &ProblemSpec, grid: &Grid) -> Result<VISolution> {
    let opts = ValidationOptions {
        uses_lambda: false,
        ..Default::default()
    };
    validate_problem(spec, grid, opts).into_result()?;
    let n_x = grid.n_x;
    let n_t = grid.n_t;
    let dt = grid.dt(spec.horizon);
    let gamma = spec.gamma;
    let kappa = spec.kappa();
    let f = spec.reward_profile(grid)?;
    let f_scale = 1.0 + f.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tie = TIE_TOL * f_scale;
    let cache = StencilCache::new(spec, grid);

    let mut v = GridField::zeros(grid, spec.horizon);
    let mut g = GridField::zeros(grid, spec.horizon);
    let mut residual = GridField::zeros(grid, spec.horizon);
    let mut stop_mask = vec![false; (n_t + 1) * n_x];
    v.slice_mut(n_t).copy_from_slice(&f);
    g.slice_mut(n_t).copy_from_slice(&f);
    stop_mask[n_t * n_x..].iter_mut().for_each(|m| *m = true);

    let zeros = vec![0.0; n_x];
    let mut unsettled = Vec::new();
    let mut max_iters = 0;
    let mut mask: Vec<bool> = vec![true; n_x];
    for k in (0..n_t).rev() {
        let t = grid.time(k, spec.horizon);
        let stencil = cache.at(t);
        let v_next = v.slice(k + 1).to_vec();
        let g_next = g.slice(k + 1).to_vec();
        let sigma_sq: Vec<f64> = grid
            .nodes()
            .map(|x| {
                let s = spec.diffusion.value(t, x);
                s * s
            })
            .collect();

        let mut settled = false;
        let mut iterations = 0;
        let (mut vk, mut gk, mut rk) = (Vec::new(), Vec::new(), Vec::new());
        while iterations < MASK_ITERATION_CAP {
            iterations += 1;
            let pinned = Some((mask.as_slice(), f.as_slice()));
            let g_sys = assemble_step(
                &stencil,
                dt,
                &g_next,
                &StepTerms {
                    zero_order: None,
                    source: None,
                    pinned,
                },
            );
            gk = g_sys.solve(dt)?;
            let gx = gradient(&gk, grid.dx());
            let source: Vec<f64> = (0..n_x).map(|i| kappa * sigma_sq[i] * gx[i] * gx[i]).collect();
            let v_sys = assemble_step(
                &stencil,
                dt,
                &v_next,
                &StepTerms {
                    zero_order: Some(&zeros),
                    source: Some(&source),
                    pinned,
                },
            );
            vk = v_sys.solve(dt)?;

            // unpinned rows give the value of continuing at stopped nodes
            let free = StepTerms {
                zero_order: None,
                source: Some(&source),
                pinned: None,
            };
            let v_rows = assemble_step(&stencil, dt, &v_next, &free);
            let g_rows = assemble_step(
                &stencil,
                dt,
                &g_next,
                &StepTerms {
                    zero_order: None,
                    source: None,
                    pinned: None,
                },
            );
            rk = (0..n_x)
                .map(|i| {
                    let (vc, gc) = if mask[i] {
                        (row_value(&v_rows, &vk, i), row_value(&g_rows, &gk, i))
                    } else {
                        (vk[i], gk[i])
                    };
                    let d = f[i] - gc;
                    vc + 0.5 * gamma * d * d - f[i]
                })
                .collect();
            let new_mask: Vec<bool> = rk.iter().map(|r| *r <= tie).collect();
            if new_mask == mask {
                settled = true;
                break;
            }
            mask = new_mask;
        }
        if !settled {
            log::warn!("stop-mask iteration did not settle at t = {t} after {MASK_ITERATION_CAP} passes");
            unsettled.push(k);
        }
        max_iters = max_iters.max(iterations);
        v.slice_mut(k).copy_from_slice(&vk);
        g.slice_mut(k).copy_from_slice(&gk);
        residual.slice_mut(k).copy_from_slice(&rk);
        stop_mask[k * n_x..(k + 1) * n_x].copy_from_slice(&mask);
    }

    let mut h = v.clone();
    for (hi, gi) in h.values.iter_mut().zip(&g.values) {
        *hi -= 0.5 * gamma * gi * gi;
    }
    let mut sol = VISolution {
        v,
        g,
        h,
        stop_mask,
        residual,
        boundary: Vec::new(),
        kappa,
        unsettled_slices: unsettled,
        max_mask_iterations: max_iters,
    };
    sol.boundary = extract_boundary(&sol);
    Ok(sol)
}

/// Locations where `residual` changes class between "continue" (`> tol`) and
/// "stop" (`<= tol`), placed by linear interpolation between the two nodes.
pub fn sign_change_locations(xs: &[f64], residual: &[f64], tol: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..xs.len().saturating_sub(1) {
        let (a, b) = (residual[i], residual[i + 1]);
        if (a > tol) == (b > tol) {
            continue;
        }
        let w = if a == b { 0.5 } else { (a / (a - b)).clamp(0.0, 1.0) };
        out.push(xs[i] + w * (xs[i + 1] - xs[i]));
    }
    out
}

/// Per-slice free-boundary locations from the stored obstacle residual.
pub fn extract_boundary(sol: &VISolution) -> Vec<Vec<f64>> {
    let grid = &sol.v.grid;
    let xs: Vec<f64> = grid.nodes().collect();
    let scale = 1.0 + sol.v.sup_abs();
    // clamped edge nodes are stopped by construction, not by the obstacle
    let range = match grid.boundary_kind {
        BoundaryKind::ValueClampedToF => 1..grid.n_x - 1,
        BoundaryKind::LinearExtrapolation => 0..grid.n_x,
    };
    (0..sol.v.n_slices())
        .map(|k| sign_change_locations(&xs[range.clone()], &sol.residual.slice(k)[range.clone()], TIE_TOL * scale))
        .collect()
}

/// The boundary inequality evaluated at one point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCheck {
    pub t: f64,
    pub x: f64,
    /// `(d_t + L)V(x+) + (d_t + L)V(x-)`.
    pub lhs: f64,
    /// `gamma sigma^2 ((g_x(x+) + g_x(x-)) / 2)^2`.
    pub rhs: f64,
    /// `2 kappa sigma^2 ((g_x(x+) + g_x(x-)) / 2)^2`.
    pub rhs_kappa: f64,
    pub pass: bool,
    pub pass_kappa: bool,
}

/// Derivatives at `x` of the quadratic through three points.
fn quadratic_derivatives(xs: [f64; 3], ys: [f64; 3], x: f64) -> (f64, f64, f64) {
    let [x0, x1, x2] = xs;
    let [y0, y1, y2] = ys;
    let d0 = (x0 - x1) * (x0 - x2);
    let d1 = (x1 - x0) * (x1 - x2);
    let d2 = (x2 - x0) * (x2 - x1);
    let value = y0 * (x - x1) * (x - x2) / d0 + y1 * (x - x0) * (x - x2) / d1 + y2 * (x - x0) * (x - x1) / d2;
    let first = y0 * (2.0 * x - x1 - x2) / d0 + y1 * (2.0 * x - x0 - x2) / d1 + y2 * (2.0 * x - x0 - x1) / d2;
    let second = 2.0 * (y0 / d0 + y1 / d1 + y2 / d2);
    (value, first, second)
}

/// Evaluates the boundary inequality at an arbitrary point `x` of slice `k`,
/// using the three nearest nodes strictly on each side for one-sided limits.
pub fn boundary_inequality_at(sol: &VISolution, spec: &ProblemSpec, k: usize, x: f64, tol: f64) -> Result<BoundaryCheck> {
    let grid = &sol.v.grid;
    let t = sol.v.time(k);
    let dx = grid.dx();
    let n = grid.n_x;
    let pos = (x - grid.x_min) / dx - 1.0;
    // first node strictly left of x
    let mut left = pos.floor();
    if (pos - left).abs() < 1e-12 {
        left -= 1.0;
    }
    if left < 2.0 || left + 3.0 > (n - 1) as f64 {
        return Err(Error::BoundaryTooClose { t, x });
    }
    let il = left as usize;
    let ir = if (pos - pos.round()).abs() < 1e-12 { il + 2 } else { il + 1 };
    if ir + 2 >= n {
        return Err(Error::BoundaryTooClose { t, x });
    }
    let dt = grid.dt(sol.v.horizon);
    let time_derivative = |i: usize| {
        if k < grid.n_t {
            (sol.v.at(k + 1, i) - sol.v.at(k, i)) / dt
        } else {
            (sol.v.at(k, i) - sol.v.at(k - 1, i)) / dt
        }
    };
    let b = spec.drift.value(t, x);
    let s = spec.diffusion.value(t, x);
    let var = s * s;
    let side = |idx: [usize; 3]| {
        let xs = idx.map(|i| grid.x(i));
        let (_, v1, v2) = quadratic_derivatives(xs, idx.map(|i| sol.v.at(k, i)), x);
        let (_, g1, _) = quadratic_derivatives(xs, idx.map(|i| sol.g.at(k, i)), x);
        let (vt, _, _) = quadratic_derivatives(xs, idx.map(time_derivative), x);
        (vt + b * v1 + 0.5 * var * v2, g1)
    };
    let (lv_minus, g_minus) = side([il - 2, il - 1, il]);
    let (lv_plus, g_plus) = side([ir, ir + 1, ir + 2]);
    let avg = 0.5 * (g_minus + g_plus);
    let lhs = lv_minus + lv_plus;
    let rhs = spec.gamma * var * avg * avg;
    let rhs_kappa = 2.0 * sol.kappa * var * avg * avg;
    Ok(BoundaryCheck {
        t,
        x,
        lhs,
        rhs,
        rhs_kappa,
        pass: lhs <= rhs + tol,
        pass_kappa: lhs <= rhs_kappa + tol,
    })
}

/// The boundary inequality at every extracted boundary point of slice `k`.
pub fn check_boundary_inequality(sol: &VISolution, spec: &ProblemSpec, k: usize, tol: f64) -> Result<Vec<BoundaryCheck>> {
    sol.boundary[k]
        .iter()
        .map(|&x| boundary_inequality_at(sol, spec, k, x, tol))
        .collect()
}

/// Residual fields for a general objective `E[f_lin] + G(E[k])`.
#[derive(Clone, Debug)]
pub struct GeneralResidual {
    /// `G(k) - G(g) - G'(g)(k - g)`.
    pub delta_g: GridField,
    /// `V + delta_G - (f_lin + G(k))`.
    pub obstacle: GridField,
    /// `-G''(g) |sigma g_x|^2 / 2`.
    pub h_g: GridField,
    /// `(d_t + L)V + H_G(g)` at interior nodes (zero on the edge nodes and the last slice).
    pub interior: GridField,
}

pub fn general_g_residual(v: &GridField, g: &GridField, obj: &GeneralObjective, spec: &ProblemSpec) -> Result<GeneralResidual> {
    v.check_compatible(g)?;
    let second = obj.g.second.as_ref().ok_or(Error::MissingSecondDerivative)?;
    let grid = &v.grid;
    let n_x = grid.n_x;
    let dx = grid.dx();
    let dt = grid.dt(v.horizon);
    let big_g = &obj.g.value;
    let big_g1 = &obj.g.first;
    let mut delta_g = GridField::zeros(grid, v.horizon);
    let mut obstacle = GridField::zeros(grid, v.horizon);
    let mut h_g = GridField::zeros(grid, v.horizon);
    let mut interior = GridField::zeros(grid, v.horizon);
    for k in 0..v.n_slices() {
        let t = v.time(k);
        let gx = gradient(g.slice(k), dx);
        for i in 0..n_x {
            let x = grid.x(i);
            let kv = (obj.k)(x);
            let gv = g.at(k, i);
            let d = big_g(kv) - big_g(gv) - big_g1(gv) * (kv - gv);
            let s = spec.diffusion.value(t, x);
            let idx = k * n_x + i;
            delta_g.values[idx] = d;
            obstacle.values[idx] = v.at(k, i) + d - ((obj.linear_reward)(x) + big_g(kv));
            h_g.values[idx] = -0.5 * second(gv) * s * s * gx[i] * gx[i];
            if k < grid.n_t && i > 0 && i + 1 < n_x {
                let b = spec.drift.value(t, x);
                let vt = (v.at(k + 1, i) - v.at(k, i)) / dt;
                let lv = 0.5 * s * s * (v.at(k, i + 1) - 2.0 * v.at(k, i) + v.at(k, i - 1)) / (dx * dx)
                    + b * (v.at(k, i + 1) - v.at(k, i - 1)) / (2.0 * dx);
                interior.values[idx] = vt + lv + h_g.values[idx];
            }
        }
    }
    Ok(GeneralResidual {
        delta_g,
        obstacle,
        h_g,
        interior,
    })
}

/// A sequence of regularized solves with decreasing regularization.
#[derive(Clone, Debug)]
pub struct ContinuationLadder {
    pub lambdas: Vec<f64>,
    pub solutions: Vec<HJBSolution>,
    /// `sup|V^{lambda_i} - V^{lambda_{i+1}}|` over the whole lattice.
    pub gaps: Vec<f64>,
}

impl ContinuationLadder {
    pub fn all_converged(&self) -> bool {
        self.solutions.iter().all(|s| s.converged)
    }
}

/// Solves the regularized system for each weight in `lambdas`, starting each
/// fixed point from the previous rung's first-moment field. A rung whose warm
/// start fails to converge is retried from a coupled sweep.
pub fn lambda_continuation(spec: &ProblemSpec, grid: &Grid, lambdas: &[f64], cfg: &FixedPointConfig) -> Result<ContinuationLadder> {
    if lambdas.is_empty() {
        return Err(Error::InvalidProblem("empty regularization ladder".into()));
    }
    if lambdas.iter().any(|l| !(*l > 0.0)) || lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidProblem("regularization weights must be positive and strictly decreasing".into()));
    }
    let mut solutions: Vec<HJBSolution> = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let rung = spec.clone().with_lambda(lambda);
        let sol = match solutions.last() {
            None => solve_extended_hjb_from(&rung, grid, cfg, InitialGuess::CoupledSweep)?,
            Some(prev) => {
                let warm = solve_extended_hjb_from(&rung, grid, cfg, InitialGuess::Warm(prev.g.clone()))?;
                if warm.converged {
                    warm
                } else {
                    log::info!("warm start at lambda = {lambda} did not converge; retrying from a coupled sweep");
                    solve_extended_hjb_from(&rung, grid, cfg, InitialGuess::CoupledSweep)?
                }
            }
        };
        solutions.push(sol);
    }
    let gaps = solutions.windows(2).map(|w| w[0].v.sup_diff(&w[1].v)).collect();
    Ok(ContinuationLadder {
        lambdas: lambdas.to_vec(),
        solutions,
        gaps,
    })
}

/// `sup |a - b| / |b|` (or absolute when `relative` is false) over slice `t = 0`
/// and `x in [lo, hi]`, evaluating `b` at the nodes of `a` by interpolation.
pub fn window_gap(a: &GridField, b: &GridField, lo: f64, hi: f64, relative: bool) -> f64 {
    let grid = &a.grid;
    let mut worst = 0.0_f64;
    for i in 0..grid.n_x {
        let x = grid.x(i);
        if x < lo || x > hi {
            continue;
        }
        let reference = interpolate_profile(&b.grid, b.slice(0), x);
        let diff = (a.at(0, i) - reference).abs();
        worst = worst.max(if relative { diff / reference.abs() } else { diff });
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoefficientSpec, ScalarFn};
    use std::sync::Arc;

    #[test]
    fn interpolated_crossing() {
        let xs = [0.47, 0.49, 0.51, 0.53];
        let r = [0.05, 0.02, -0.02, -0.04];
        let c = sign_change_locations(&xs, &r, 0.0);
        assert_eq!(c.len(), 1);
        assert!((c[0] - 0.50).abs() < 1e-12);
        assert!(sign_change_locations(&xs, &[0.0; 4], 0.0).is_empty());
        let multi = sign_change_locations(&xs, &[1.0, -1.0, 1.0, -1.0], 0.0);
        assert_eq!(multi.len(), 3);
        assert!(multi.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn constant_reward_stops_everywhere() {
        let mut spec = ProblemSpec::gbm(0.05, 0.5, 1.0, 0.1, 1.0);
        spec.reward = CoefficientSpec::constant(0.7);
        let grid = Grid::new(0.05, 2.0, 40, 50).unwrap();
        let sol = solve_vi(&spec, &grid).unwrap();
        assert!(sol.stop_mask.iter().all(|m| *m));
        assert!(sol.v.values.iter().all(|v| *v == 0.7));
        assert!(sol.g.values.iter().all(|v| *v == 0.7));
        assert!(sol.boundary.iter().all(|b| b.is_empty()));
        assert!(check_boundary_inequality(&sol, &spec, 0, 1e-9).unwrap().is_empty());
    }

    #[test]
    fn negative_drift_without_risk_aversion_stops_everywhere() {
        let spec = ProblemSpec::gbm(-0.05, 0.5, 0.0, 0.1, 1.0);
        let grid = Grid::new(0.05, 2.0, 40, 50).unwrap();
        let sol = solve_vi(&spec, &grid).unwrap();
        assert!(sol.stop_mask.iter().all(|m| *m));
        for k in 0..sol.v.n_slices() {
            for i in 0..grid.n_x {
                assert_eq!(sol.v.at(k, i), grid.x(i));
            }
        }
    }

    #[test]
    fn positive_drift_without_risk_aversion_continues() {
        // f(x) = x with mu > 0 and no risk aversion: waiting always pays
        let spec = ProblemSpec::gbm(0.05, 0.5, 0.0, 0.1, 2.0);
        let grid = Grid::new(0.05, 2.0, 40, 50).unwrap();
        let sol = solve_vi(&spec, &grid).unwrap();
        let k = 0;
        let stopped = (0..grid.n_x).filter(|&i| sol.is_stopped(k, i)).count();
        assert!(stopped < grid.n_x / 4, "stopped {stopped}");
    }

    #[test]
    fn invariants_on_gbm() {
        let spec = ProblemSpec::gbm(0.05, 0.5, 1.0, 0.1, 2.0);
        let grid = Grid::new(0.01, 3.0, 150, 200).unwrap();
        let sol = solve_vi(&spec, &grid).unwrap();
        let f: Vec<f64> = grid.nodes().collect();
        for k in 0..sol.v.n_slices() {
            for i in 0..grid.n_x {
                let (v, g) = (sol.v.at(k, i), sol.g.at(k, i));
                let obstacle = v + 0.5 * (f[i] - g) * (f[i] - g) - f[i];
                assert!(obstacle >= -1e-8);
                if sol.is_stopped(k, i) {
                    assert_eq!(g, f[i]);
                    assert_eq!(v, f[i]);
                }
                assert_eq!(sol.h.at(k, i), v - 0.5 * g * g);
            }
        }
        assert!(sol.mask_converged());
    }

    #[test]
    fn quadratic_derivative_formula() {
        let (v, d1, d2) = quadratic_derivatives([0.0, 1.0, 3.0], [1.0, 2.0, 10.0], 2.0);
        // y = x^2 + 1
        assert!((v - 5.0).abs() < 1e-14 && (d1 - 4.0).abs() < 1e-14 && (d2 - 2.0).abs() < 1e-14);
    }

    #[test]
    fn general_objective_examples() {
        let grid = Grid::new(0.0, 1.0, 5, 2).unwrap();
        let spec = ProblemSpec::gbm(0.05, 0.5, 1.0, 0.1, 1.0);
        let two = GridField::broadcast(&grid, 1.0, &[2.0; 5]);
        let v = GridField::zeros(&grid, 1.0);
        let obj = GeneralObjective {
            g: ScalarFn::quadratic(1.0),
            k: Arc::new(|_| 3.0),
            linear_reward: Arc::new(|_| 0.0),
        };
        let r = general_g_residual(&v, &two, &obj, &spec).unwrap();
        assert!(r.delta_g.values.iter().all(|d| *d == 1.0));

        let lin = GeneralObjective {
            g: ScalarFn::linear(2.0),
            ..obj.clone()
        };
        let r = general_g_residual(&v, &two, &lin, &spec).unwrap();
        assert!(r.delta_g.values.iter().all(|d| *d == 0.0));
        assert!(r.h_g.values.iter().all(|d| *d == 0.0));

        let mut no_second = obj;
        no_second.g.second = None;
        assert!(matches!(
            general_g_residual(&v, &two, &no_second, &spec),
            Err(Error::MissingSecondDerivative)
        ));
    }

    #[test]
    fn mean_variance_objective_recovers_obstacle() {
        let spec = ProblemSpec::gbm(0.05, 0.5, 1.0, 0.1, 1.0);
        let grid = Grid::new(0.1, 2.0, 30, 20).unwrap();
        let sol = solve_vi(&spec, &grid).unwrap();
        let obj = GeneralObjective::mean_variance(spec.gamma, spec.reward.clone());
        let r = general_g_residual(&sol.v, &sol.g, &obj, &spec).unwrap();
        for k in 0..sol.v.n_slices() {
            for i in 0..grid.n_x {
                let (f, g) = (grid.x(i), sol.g.at(k, i));
                let expected = 0.5 * (f - g) * (f - g);
                assert!((r.delta_g.at(k, i) - expected).abs() < 1e-12);
                let mv = sol.v.at(k, i) + expected - f;
                assert!((r.obstacle.at(k, i) - mv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ladder_rejects_bad_sequences() {
        let spec = ProblemSpec::gbm(0.05, 0.5, 1.0, 0.1, 1.0);
        let grid = Grid::new(0.1, 2.0, 30, 20).unwrap();
        let cfg = FixedPointConfig::default();
        assert!(lambda_continuation(&spec, &grid, &[0.1, 0.2], &cfg).is_err());
        assert!(lambda_continuation(&spec, &grid, &[], &cfg).is_err());
        let single = lambda_continuation(&spec, &grid, &[0.2], &cfg).unwrap();
        assert!(single.gaps.is_empty());
    }
}

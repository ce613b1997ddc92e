//! Entropy-regularized coupled system for the pair (V, g):
//!
//! ```text
//! V_t + L V + lambda pi - kappa |sigma g_x|^2 = 0,   V(T) = f
//! g_t + L g - pi (g - f) = 0,                        g(T) = f
//! pi = exp(-(V + gamma/2 (f - g)^2 - f) / lambda)
//! ```
//!
//! solved by Picard iteration on `g`: given a guess `l`, the value equation is
//! solved with `l` frozen in the variance source and in the exponent, then the
//! linear equation for the new first moment `k`, and `l` is relaxed toward `k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{gradient, GridField};
use crate::model::{validate_problem, Grid, ProblemSpec, ValidationOptions};
use crate::pde_kernel::{implicit_step, Stencil, StencilCache, StepTerms};

/// Default bound on the intensity exponent; `pi <= e^50`.
pub const DEFAULT_CLIP: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointConfig {
    /// Stop when `sup|k - l| + sup|k_x - l_x|` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Relaxation `l <- theta k + (1 - theta) l`; halved whenever the gap grows.
    pub damping: f64,
    /// Exponent clamp `M`.
    pub clip: f64,
    /// Tolerance of the per-step Newton solve for the value equation.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            tol: 1e-6,
            max_iter: 60,
            damping: 1.0,
            clip: DEFAULT_CLIP,
            inner_tol: 1e-10,
            inner_max_iter: 200,
        }
    }
}

/// Initial guess for the first-moment iterate.
#[derive(Clone, Debug, Default)]
pub enum InitialGuess {
    /// Solve the coupled system step by step backward in time first.
    #[default]
    CoupledSweep,
    /// Start from the terminal reward at every slice.
    Reward,
    /// Start from a given field (e.g. a neighbouring regularization level).
    Warm(GridField),
}

#[inline]
fn raw_exponent(v: f64, g: f64, f: f64, gamma: f64, lambda: f64) -> f64 {
    let d = f - g;
    -(v + 0.5 * gamma * d * d - f) / lambda
}

/// `H(pi) = pi - pi ln pi`, with `H(0) = 0`.
pub fn entropy(pi: f64) -> f64 {
    if pi <= 0.0 {
        0.0
    } else {
        pi - pi * pi.ln()
    }
}

/// Equilibrium intensity `exp(clamp(-(V + gamma/2 (f-g)^2 - f)/lambda, -M, M))`
/// on a space profile, with the number of clamped nodes.
pub fn extract_intensity(v: &[f64], g: &[f64], f: &[f64], gamma: f64, lambda: f64, clip: f64) -> (Vec<f64>, usize) {
    let mut hits = 0;
    let pi = v
        .iter()
        .zip(g)
        .zip(f)
        .map(|((&v, &g), &f)| {
            let xi = raw_exponent(v, g, f, gamma, lambda);
            if xi.abs() > clip {
                hits += 1;
            }
            xi.clamp(-clip, clip).exp()
        })
        .collect();
    (pi, hits)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HjbResidual {
    /// Sup-norm residual of the value equation.
    pub value: f64,
    /// Sup-norm residual of the first-moment equation.
    pub first_moment: f64,
    /// `sup|pi - exp(exponent)|` over unclamped nodes.
    pub pi_consistency: f64,
}

#[derive(Clone, Debug)]
pub struct HJBSolution {
    pub v: GridField,
    pub g: GridField,
    /// `V - (gamma/2) g^2`.
    pub h: GridField,
    pub pi: GridField,
    pub lambda: f64,
    pub fixed_point_iterations: usize,
    pub converged: bool,
    /// Iteration gap after each Picard step.
    pub gap_history: Vec<f64>,
    pub residual: HjbResidual,
    pub exponent_clip_hits: usize,
}

/// Everything one backward sweep needs that does not change between sweeps.
struct Sweep<'a> {
    spec: &'a ProblemSpec,
    grid: &'a Grid,
    cfg: &'a FixedPointConfig,
    stencils: StencilCache<'a>,
    f: Vec<f64>,
    dt: f64,
}

impl<'a> Sweep<'a> {
    fn new(spec: &'a ProblemSpec, grid: &'a Grid, cfg: &'a FixedPointConfig) -> Result<Self> {
        Ok(Sweep {
            spec,
            grid,
            cfg,
            stencils: StencilCache::new(spec, grid),
            f: spec.reward_profile(grid)?,
            dt: grid.dt(spec.horizon),
        })
    }

    /// `kappa sigma^2 (l_x)^2` at time `t`.
    fn variance_source(&self, l: &[f64], t: f64) -> Vec<f64> {
        let kappa = self.spec.kappa();
        let dl = gradient(l, self.grid.dx());
        self.grid
            .nodes()
            .zip(dl)
            .map(|(x, d)| {
                let s = self.spec.diffusion.value(t, x);
                kappa * s * s * d * d
            })
            .collect()
    }

    /// Newton solve of one implicit step of the value equation with `l` frozen.
    fn value_step(&self, stencil: &Stencil, v_next: &[f64], l: &[f64], t: f64) -> Result<Vec<f64>> {
        let (gamma, lambda, clip) = (self.spec.gamma, self.spec.lambda, self.cfg.clip);
        let var_src = self.variance_source(l, t);
        let n = v_next.len();
        let mut v0 = v_next.to_vec();
        let mut c = vec![0.0; n];
        let mut s = vec![0.0; n];
        for _ in 0..self.cfg.inner_max_iter {
            for i in 0..n {
                let xi = raw_exponent(v0[i], l[i], self.f[i], gamma, lambda);
                let e = xi.clamp(-clip, clip).exp();
                // N(v) = lambda e^xi - var_src, N'(v) = -e^xi off the clamp
                let slope = if xi.abs() > clip { 0.0 } else { -e };
                c[i] = slope;
                s[i] = slope * v0[i] - (lambda * e - var_src[i]);
            }
            let v = implicit_step(
                stencil,
                self.dt,
                v_next,
                &StepTerms {
                    zero_order: Some(&c),
                    source: Some(&s),
                    pinned: None,
                },
            )?;
            let change = v.iter().zip(&v0).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            let scale = 1.0 + v.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
            v0 = v;
            if change <= self.cfg.inner_tol * scale {
                return Ok(v0);
            }
        }
        Err(Error::InnerNonConvergence {
            t,
            iterations: self.cfg.inner_max_iter,
        })
    }

    /// One implicit step of the linear first-moment equation.
    fn moment_step(&self, stencil: &Stencil, g_next: &[f64], v: &[f64], l: &[f64]) -> Result<Vec<f64>> {
        let (pi, _) = extract_intensity(v, l, &self.f, self.spec.gamma, self.spec.lambda, self.cfg.clip);
        let c: Vec<f64> = pi.iter().map(|p| -p).collect();
        let s: Vec<f64> = pi.iter().zip(&self.f).map(|(p, f)| -p * f).collect();
        implicit_step(
            stencil,
            self.dt,
            g_next,
            &StepTerms {
                zero_order: Some(&c),
                source: Some(&s),
                pinned: None,
            },
        )
    }

    /// The Picard map `l -> (v, k)`.
    fn picard_map(&self, l: &GridField) -> Result<(GridField, GridField)> {
        let mut v = GridField::zeros(self.grid, self.spec.horizon);
        let mut k = GridField::zeros(self.grid, self.spec.horizon);
        let n_t = self.grid.n_t;
        v.slice_mut(n_t).copy_from_slice(&self.f);
        k.slice_mut(n_t).copy_from_slice(&self.f);
        for n in (0..n_t).rev() {
            let t = self.grid.time(n, self.spec.horizon);
            let stencil = self.stencils.at(t);
            let vn = self.value_step(&stencil, v.slice(n + 1), l.slice(n), t)?;
            let kn = self.moment_step(&stencil, k.slice(n + 1), &vn, l.slice(n))?;
            v.slice_mut(n).copy_from_slice(&vn);
            k.slice_mut(n).copy_from_slice(&kn);
        }
        Ok((v, k))
    }

    /// Backward sweep that resolves the coupling inside every time step.
    fn coupled_sweep(&self) -> Result<GridField> {
        let mut g = GridField::zeros(self.grid, self.spec.horizon);
        let mut v_next = self.f.clone();
        let n_t = self.grid.n_t;
        g.slice_mut(n_t).copy_from_slice(&self.f);
        for n in (0..n_t).rev() {
            let t = self.grid.time(n, self.spec.horizon);
            let stencil = self.stencils.at(t);
            let g_next = g.slice(n + 1).to_vec();
            let mut l = g_next.clone();
            let mut v = v_next.clone();
            for _ in 0..100 {
                v = self.value_step(&stencil, &v_next, &l, t)?;
                let k = self.moment_step(&stencil, &g_next, &v, &l)?;
                let change = k.iter().zip(&l).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
                l = k;
                if change <= 1e-13 * (1.0 + l.iter().fold(0.0_f64, |m, a| m.max(a.abs()))) {
                    break;
                }
            }
            g.slice_mut(n).copy_from_slice(&l);
            v_next = v;
        }
        Ok(g)
    }
}

fn gap(k: &GridField, l: &GridField) -> f64 {
    let dx = k.grid.dx();
    let mut grad_gap = 0.0_f64;
    for n in 0..k.n_slices() {
        let dk = gradient(k.slice(n), dx);
        let dl = gradient(l.slice(n), dx);
        for (a, b) in dk.iter().zip(&dl) {
            grad_gap = grad_gap.max((a - b).abs());
        }
    }
    k.sup_diff(l) + grad_gap
}

/// Solves the regularized coupled system; starts from a coupled backward sweep.
pub fn solve_extended_hjb(spec: &ProblemSpec, grid: &Grid, cfg: &FixedPointConfig) -> Result<HJBSolution> {
    solve_extended_hjb_from(spec, grid, cfg, InitialGuess::CoupledSweep)
}

pub fn solve_extended_hjb_from(
    spec: &ProblemSpec,
    grid: &Grid,
    cfg: &FixedPointConfig,
    initial: InitialGuess,
) -> Result<HJBSolution> {
    validate_problem(spec, grid, ValidationOptions::default()).into_result()?;
    if !(cfg.damping > 0.0 && cfg.damping <= 1.0) {
        return Err(Error::InvalidProblem(format!("damping must lie in (0, 1], got {}", cfg.damping)));
    }
    if !(cfg.clip > 0.0) {
        return Err(Error::InvalidProblem(format!("exponent clamp must be positive, got {}", cfg.clip)));
    }
    let sweep = Sweep::new(spec, grid, cfg)?;
    let mut l = match initial {
        InitialGuess::CoupledSweep => sweep.coupled_sweep()?,
        InitialGuess::Reward => GridField::broadcast(grid, spec.horizon, &sweep.f),
        InitialGuess::Warm(field) => {
            if field.grid != *grid || field.horizon != spec.horizon {
                return Err(Error::GridMismatch("warm start lives on another lattice".into()));
            }
            field
        }
    };

    let mut theta = cfg.damping;
    let mut history = Vec::new();
    let mut best: Option<(f64, GridField, GridField)> = None;
    let mut converged = false;
    for _ in 0..cfg.max_iter {
        let (v, k) = sweep.picard_map(&l)?;
        let current = gap(&k, &l);
        if let Some(&previous) = history.last() {
            if current > previous && theta > 1.0 / 64.0 {
                theta *= 0.5;
                log::debug!("fixed-point gap grew to {current:.3e}; damping now {theta}");
            }
        }
        history.push(current);
        if best.as_ref().is_none_or(|(b, _, _)| current < *b) {
            best = Some((current, v.clone(), k.clone()));
        }
        if current <= cfg.tol {
            converged = true;
            best = Some((current, v, k));
            break;
        }
        for (li, ki) in l.values.iter_mut().zip(&k.values) {
            *li = theta * ki + (1.0 - theta) * *li;
        }
    }
    let (_, v, g) = best.expect("at least one Picard iteration runs");
    if !converged {
        log::warn!(
            "fixed point not converged after {} iterations (lambda = {}, best gap {:.3e})",
            cfg.max_iter,
            spec.lambda,
            history.iter().cloned().fold(f64::INFINITY, f64::min)
        );
    }
    Ok(assemble(spec, grid, cfg, &sweep.f, v, g, history, converged))
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    spec: &ProblemSpec,
    grid: &Grid,
    cfg: &FixedPointConfig,
    f: &[f64],
    v: GridField,
    g: GridField,
    gap_history: Vec<f64>,
    converged: bool,
) -> HJBSolution {
    let mut pi = GridField::zeros(grid, spec.horizon);
    let mut clip_hits = 0;
    for n in 0..pi.n_slices() {
        let (p, hits) = extract_intensity(v.slice(n), g.slice(n), f, spec.gamma, spec.lambda, cfg.clip);
        pi.slice_mut(n).copy_from_slice(&p);
        clip_hits += hits;
    }
    let mut h = v.clone();
    for (hi, gi) in h.values.iter_mut().zip(&g.values) {
        *hi -= 0.5 * spec.gamma * gi * gi;
    }
    let mut sol = HJBSolution {
        v,
        g,
        h,
        pi,
        lambda: spec.lambda,
        fixed_point_iterations: gap_history.len(),
        converged,
        gap_history,
        residual: HjbResidual::default(),
        exponent_clip_hits: clip_hits,
    };
    sol.residual = hjb_residual_with_clip(&sol, spec, cfg.clip);
    sol
}

/// Residuals of both equations recomputed with centered time differences
/// (forward at `t = 0`) and centered space differences on interior nodes,
/// plus the consistency of the stored intensity.
pub fn hjb_residual(sol: &HJBSolution, spec: &ProblemSpec) -> HjbResidual {
    hjb_residual_with_clip(sol, spec, DEFAULT_CLIP)
}

pub fn hjb_residual_with_clip(sol: &HJBSolution, spec: &ProblemSpec, clip: f64) -> HjbResidual {
    let grid = &sol.v.grid;
    let n_x = grid.n_x;
    let dx = grid.dx();
    let dt = grid.dt(spec.horizon);
    let kappa = spec.kappa();
    let f: Vec<f64> = grid.nodes().map(|x| spec.reward_at(x)).collect();
    let mut out = HjbResidual::default();
    for n in 0..grid.n_t {
        let t = grid.time(n, spec.horizon);
        let time_diff = |field: &GridField, i: usize| {
            if n == 0 {
                (field.at(1, i) - field.at(0, i)) / dt
            } else {
                (field.at(n + 1, i) - field.at(n - 1, i)) / (2.0 * dt)
            }
        };
        for i in 1..n_x - 1 {
            let x = grid.x(i);
            let b = spec.drift.value(t, x);
            let s = spec.diffusion.value(t, x);
            let gen = |field: &GridField| {
                let (a, m, c) = (field.at(n, i - 1), field.at(n, i), field.at(n, i + 1));
                0.5 * s * s * (c - 2.0 * m + a) / (dx * dx) + b * (c - a) / (2.0 * dx)
            };
            let gx = (sol.g.at(n, i + 1) - sol.g.at(n, i - 1)) / (2.0 * dx);
            let p = sol.pi.at(n, i);
            let rv = time_diff(&sol.v, i) + gen(&sol.v) + sol.lambda * p - kappa * s * s * gx * gx;
            let rg = time_diff(&sol.g, i) + gen(&sol.g) - p * (sol.g.at(n, i) - f[i]);
            out.value = out.value.max(rv.abs());
            out.first_moment = out.first_moment.max(rg.abs());
        }
    }
    for n in 0..sol.pi.n_slices() {
        for i in 0..n_x {
            let xi = raw_exponent(sol.v.at(n, i), sol.g.at(n, i), f[i], spec.gamma, sol.lambda);
            if xi.abs() <= clip {
                out.pi_consistency = out.pi_consistency.max((sol.pi.at(n, i) - xi.exp()).abs());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CoefficientSpec;

    fn constant_reward_spec(lambda: f64) -> ProblemSpec {
        ProblemSpec {
            drift: CoefficientSpec::affine(0.1, -0.2),
            diffusion: CoefficientSpec::constant(0.7),
            reward: CoefficientSpec::constant(1.0),
            gamma: 1.0,
            lambda,
            horizon: 1.0,
            dimension: 1,
            variance_factor: Default::default(),
        }
    }

    #[test]
    fn intensity_examples() {
        let (p, hits) = extract_intensity(&[1.0], &[1.0], &[1.0], 1.0, 0.2, 50.0);
        assert_eq!((p[0], hits), (1.0, 0));
        // exponent argument equal to lambda
        let (p, _) = extract_intensity(&[1.2], &[1.0], &[1.0], 1.0, 0.2, 50.0);
        assert!((p[0] - (-1.0_f64).exp()).abs() < 1e-12);
        // raw exponent 2M, clamped to M
        let (p, hits) = extract_intensity(&[-20.0], &[0.0], &[0.0], 0.0, 0.2, 50.0);
        assert_eq!(hits, 1);
        assert!((p[0] - 50.0_f64.exp()).abs() / 50.0_f64.exp() < 1e-15);
    }

    #[test]
    fn constant_reward_matches_logarithmic_closed_form() {
        let spec = constant_reward_spec(0.3);
        let grid = Grid::new(-1.0, 1.0, 21, 2000).unwrap();
        let sol = solve_extended_hjb(&spec, &grid, &FixedPointConfig::default()).unwrap();
        assert!(sol.converged);
        let mut err_v = 0.0_f64;
        let mut err_pi = 0.0_f64;
        for n in 0..=grid.n_t {
            let t = sol.v.time(n);
            for i in 0..grid.n_x {
                err_v = err_v.max((sol.v.at(n, i) - (1.0 + 0.3 * (2.0 - t).ln())).abs());
                err_pi = err_pi.max((sol.pi.at(n, i) - 1.0 / (2.0 - t)).abs());
                assert!((sol.g.at(n, i) - 1.0).abs() < 1e-12);
            }
        }
        assert!(err_v < 1e-3 && err_pi < 1e-3, "{err_v} {err_pi}");
        assert!(sol.residual.value < 1e-3);
        assert!(sol.residual.first_moment < 1e-3);
        assert!(sol.residual.pi_consistency < 1e-12);
    }

    #[test]
    fn terminal_slice_is_exact() {
        let spec = ProblemSpec::gbm(0.05, 0.5, 1.0, 0.2, 1.0);
        let grid = Grid::new(0.05, 2.0, 60, 100).unwrap();
        let sol = solve_extended_hjb(&spec, &grid, &FixedPointConfig::default()).unwrap();
        let n_t = grid.n_t;
        for i in 0..grid.n_x {
            assert_eq!(sol.v.at(n_t, i), grid.x(i));
            assert_eq!(sol.g.at(n_t, i), grid.x(i));
            let h = sol.v.at(3, i) - 0.5 * sol.g.at(3, i).powi(2);
            assert_eq!(sol.h.at(3, i), h);
        }
        assert!(sol.v.is_finite() && sol.g.is_finite() && sol.pi.is_finite());
        assert!(sol.pi.values.iter().all(|p| *p > 0.0));
    }

    #[test]
    fn zero_gamma_decouples_value_from_moments() {
        // gamma = 0: h = V, and V - g carries the accumulated entropy bonus,
        // which is non-negative while pi stays below e
        let spec = ProblemSpec::gbm(0.05, 0.5, 0.0, 0.2, 1.0);
        let grid = Grid::new(0.05, 2.0, 60, 200).unwrap();
        let sol = solve_extended_hjb(&spec, &grid, &FixedPointConfig::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.h.values, sol.v.values);
        if sol.pi.values.iter().all(|p| *p <= std::f64::consts::E) {
            assert!(sol.v.values.iter().zip(&sol.g.values).all(|(v, g)| v >= &(g - 1e-9)));
        }
    }

    #[test]
    fn rejects_bad_lambda() {
        let spec = constant_reward_spec(0.0);
        let grid = Grid::new(-1.0, 1.0, 11, 10).unwrap();
        assert!(solve_extended_hjb(&spec, &grid, &FixedPointConfig::default()).is_err());
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(0.0), 0.0);
        assert_eq!(entropy(1.0), 1.0);
        assert!((entropy(std::f64::consts::E) - 0.0).abs() < 1e-15);
    }
}

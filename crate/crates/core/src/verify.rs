//! Equilibrium certification: first-order deviation gains for the regularized
//! problem and for the stopping rule of the obstacle system, analytic and
//! Monte-Carlo.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hjb_regularized::{entropy, HJBSolution};
use crate::model::ProblemSpec;
use crate::parallel::{map_indices, mean, sample_variance, Execution};
use crate::pde_kernel::Stencil;
use crate::simulate::{regularized_terms, EstimatorKind, Intensity, MCConfig};
use crate::vi_limit::{check_boundary_inequality, BoundaryCheck, VISolution};

/// Probe intensities used when the caller does not supply any.
pub const DEFAULT_PROBES: [f64; 8] = [0.0, 0.01, 0.1, 0.5, 1.0, 2.0, 10.0, 100.0];

/// Tolerance of the analytic regularized certification.
pub const ANALYTIC_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Analytic,
    MonteCarlo,
}

/// First-order rate of `J(deviation) - J(equilibrium)` at one point for one
/// probe intensity. A positive gain is a profitable deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    pub t: f64,
    pub x: f64,
    pub v: f64,
    pub gain: f64,
    /// Monte-Carlo standard error of the gain, zero for analytic results.
    pub std_error: f64,
    /// Window length of a Monte-Carlo deviation.
    pub eps: Option<f64>,
    pub method: Method,
    pub pass: bool,
}

/// Outcome of checking every node and probe. Only failures are kept, with
/// the single largest gain for reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    pub checked: usize,
    pub tol: f64,
    pub worst: Option<PerturbationResult>,
    pub failures: Vec<PerturbationResult>,
}

impl Certification {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            return 1.0;
        }
        1.0 - self.failures.len() as f64 / self.checked as f64
    }
}

/// `(v - pi) A + lambda (H(v) - H(pi))` with `A = f - V - gamma/2 (f - g)^2`.
#[inline]
pub fn regularized_gain(v: f64, pi: f64, advantage: f64, lambda: f64) -> f64 {
    (v - pi) * advantage + lambda * (entropy(v) - entropy(pi))
}

/// Checks that no probe intensity (nor the node's own `pi`) improves on the
/// stored intensity at any lattice node.
pub fn analytic_perturbation_regularized(
    sol: &HJBSolution,
    spec: &ProblemSpec,
    probes: &[f64],
    tol: f64,
) -> Result<Certification> {
    sol.v.check_compatible(&sol.g)?;
    sol.v.check_compatible(&sol.pi)?;
    let grid = &sol.v.grid;
    let f = spec.reward_profile(grid)?;
    let lambda = spec.lambda;
    let per_slice = map_indices(sol.v.n_slices(), Execution::default(), |k| {
        let t = sol.v.time(k);
        let mut fails = Vec::new();
        let mut worst: Option<PerturbationResult> = None;
        for i in 0..grid.n_x {
            let (v_eq, g, pi) = (sol.v.at(k, i), sol.g.at(k, i), sol.pi.at(k, i));
            let d = f[i] - g;
            let advantage = f[i] - v_eq - 0.5 * spec.gamma * d * d;
            for &v in probes.iter().chain(std::iter::once(&pi)) {
                let gain = regularized_gain(v, pi, advantage, lambda);
                let r = PerturbationResult {
                    t,
                    x: grid.x(i),
                    v,
                    gain,
                    std_error: 0.0,
                    eps: None,
                    method: Method::Analytic,
                    pass: gain <= tol,
                };
                if !r.pass {
                    fails.push(r);
                }
                if worst.is_none_or(|w| gain > w.gain) {
                    worst = Some(r);
                }
            }
        }
        (fails, worst)
    });
    let mut failures = Vec::new();
    let mut worst: Option<PerturbationResult> = None;
    for (f, w) in per_slice {
        failures.extend(f);
        if let Some(w) = w {
            if worst.is_none_or(|cur| w.gain > cur.gain) {
                worst = Some(w);
            }
        }
    }
    Ok(Certification {
        checked: sol.v.values.len() * (probes.len() + 1),
        tol,
        worst,
        failures,
    })
}

/// Analytic gain at an off-lattice point, by interpolation of the fields.
pub fn analytic_gain_at(sol: &HJBSolution, spec: &ProblemSpec, t: f64, x: f64, v: f64) -> f64 {
    let f = spec.reward_at(x);
    let d = f - sol.g.interpolate(t, x);
    let advantage = f - sol.v.interpolate(t, x) - 0.5 * spec.gamma * d * d;
    regularized_gain(v, sol.pi.interpolate(t, x), advantage, spec.lambda)
}

/// Simulated `(J(pi^{eps,v}) - J(pi*)) / eps` from `(t, x)` for each window
/// length, with common random numbers for both policies. `pass` compares the
/// estimate with `tol` after removing three standard errors.
pub fn mc_perturbation_regularized(
    sol: &HJBSolution,
    spec: &ProblemSpec,
    t: f64,
    x: f64,
    v: f64,
    eps_list: &[f64],
    mc: &MCConfig,
    tol: f64,
) -> Result<Vec<PerturbationResult>> {
    let eq = Intensity::Field(&sol.pi);
    let base = regularized_terms(spec, &eq, t, x, mc, EstimatorKind::Conditional)?;
    let mut out = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        if !(eps > 0.0) || eps > spec.horizon - t {
            return Err(Error::EpsilonOutOfRange {
                eps,
                reason: format!("need 0 < eps <= T - t = {}", spec.horizon - t),
            });
        }
        let dev = Intensity::Switched {
            v,
            until: t + eps,
            after: &eq,
        };
        let pert = regularized_terms(spec, &dev, t, x, mc, EstimatorKind::Conditional)?;
        let (j_eq, lin_eq) = linearized_objective(&base, None, spec.gamma, spec.lambda);
        let (j_pert, lin_pert) = linearized_objective(&pert, Some(&base), spec.gamma, spec.lambda);
        let diff: Vec<f64> = lin_pert.iter().zip(&lin_eq).map(|(a, b)| (a - b) / eps).collect();
        let units = if mc.antithetic {
            diff.chunks(2).map(|c| 0.5 * (c[0] + c[c.len() - 1])).collect()
        } else {
            diff
        };
        let se = (sample_variance(&units, mean(&units)) / units.len() as f64).sqrt();
        let gain = (j_pert - j_eq) / eps;
        out.push(PerturbationResult {
            t,
            x,
            v,
            gain,
            std_error: se,
            eps: Some(eps),
            method: Method::MonteCarlo,
            pass: gain - 3.0 * se <= tol,
        });
    }
    Ok(out)
}

/// `J^lambda` from per-path terms `(f, f^2, entropy)` and the per-path values
/// of its first-order (delta method) linearization around the mean of
/// `around` (default: `terms` itself).
fn linearized_objective(terms: &[[f64; 3]], around: Option<&[[f64; 3]]>, gamma: f64, lambda: f64) -> (f64, Vec<f64>) {
    let col = |ts: &[[f64; 3]], j: usize| mean(&ts.iter().map(|t| t[j]).collect::<Vec<_>>());
    let (a, b, e) = (col(terms, 0), col(terms, 1), col(terms, 2));
    let j = a - 0.5 * gamma * (b - a * a) + lambda * e;
    let a = around.map_or(a, |ts| col(ts, 0));
    let lin = terms
        .iter()
        .map(|t| (1.0 + gamma * a) * t[0] - 0.5 * gamma * t[1] + lambda * t[2])
        .collect();
    (j, lin)
}

/// First-order rate of a stopping-rule deviation at one lattice node, split
/// as `rate(v) = intercept + v * slope`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViRate {
    pub t: f64,
    pub x: f64,
    /// `(d_t + L)V - kappa |sigma g_x|^2`.
    pub intercept: f64,
    /// `f - (V + gamma/2 (f - g)^2)`.
    pub slope: f64,
}

impl ViRate {
    pub fn at(&self, v: f64) -> f64 {
        self.intercept + v * self.slope
    }
}

/// Rate of a deviation at node `(k, i)`. Points whose stencil touches the
/// free boundary, the domain edge or the last slice are refused.
pub fn vi_rate(sol: &VISolution, spec: &ProblemSpec, k: usize, i: usize) -> Result<ViRate> {
    let grid = &sol.v.grid;
    let n = grid.n_x;
    let t = sol.v.time(k);
    let x = grid.x(i);
    if i == 0 || i + 1 >= n || k >= grid.n_t {
        return Err(Error::BoundaryTooClose { t, x });
    }
    let here = sol.is_stopped(k, i);
    let near = [(k, i - 1), (k, i + 1), (k + 1, i), (k + 1, i - 1), (k + 1, i + 1)];
    if near.iter().any(|&(kk, ii)| sol.is_stopped(kk, ii) != here) {
        return Err(Error::NearFreeBoundary { t, x });
    }
    let dt = grid.dt(sol.v.horizon);
    let dx = grid.dx();
    let stencil = Stencil::new(spec, grid, t);
    let lv = stencil.lower[i] * sol.v.at(k, i - 1) + stencil.diag[i] * sol.v.at(k, i) + stencil.upper[i] * sol.v.at(k, i + 1);
    let vt = (sol.v.at(k + 1, i) - sol.v.at(k, i)) / dt;
    let gx = (sol.g.at(k, i + 1) - sol.g.at(k, i - 1)) / (2.0 * dx);
    let s = spec.diffusion.value(t, x);
    let f = spec.reward_at(x);
    let d = f - sol.g.at(k, i);
    Ok(ViRate {
        t,
        x,
        intercept: vt + lv - sol.kappa * s * s * gx * gx,
        slope: f - (sol.v.at(k, i) + 0.5 * spec.gamma * d * d),
    })
}

/// Certifies the interior points `(k, i)` against every probe. The rate is
/// affine in `v`, so the probe set only needs to bracket `[0, v_max]`.
pub fn vi_interior_perturbation(
    sol: &VISolution,
    spec: &ProblemSpec,
    points: &[(usize, usize)],
    probes: &[f64],
    tol: f64,
) -> Result<Vec<PerturbationResult>> {
    let mut out = Vec::with_capacity(points.len() * probes.len());
    for &(k, i) in points {
        let rate = vi_rate(sol, spec, k, i)?;
        for &v in probes {
            let gain = rate.at(v);
            out.push(PerturbationResult {
                t: rate.t,
                x: rate.x,
                v,
                gain,
                std_error: 0.0,
                eps: None,
                method: Method::Analytic,
                pass: gain <= tol,
            });
        }
    }
    Ok(out)
}

/// Interior nodes of slice `k` at least `margin` nodes away from every
/// stop/continue switch and from the domain edges.
pub fn interior_points(sol: &VISolution, k: usize, margin: usize) -> Vec<(usize, usize)> {
    let n = sol.v.grid.n_x;
    if k >= sol.v.grid.n_t {
        return Vec::new();
    }
    (margin.max(1)..n.saturating_sub(margin.max(1)))
        .filter(|&i| {
            let lo = i.saturating_sub(margin.max(1));
            let hi = (i + margin.max(1)).min(n - 1);
            let here = sol.is_stopped(k, i);
            (lo..=hi).all(|j| sol.is_stopped(k, j) == here && sol.is_stopped(k + 1, j) == here)
        })
        .map(|i| (k, i))
        .collect()
}

/// Boundary condition at every free-boundary point of slice `k`; passes
/// vacuously when the slice has no boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCertification {
    pub t: f64,
    pub checks: Vec<BoundaryCheck>,
}

impl BoundaryCertification {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

pub fn vi_boundary_perturbation(sol: &VISolution, spec: &ProblemSpec, k: usize, tol: f64) -> Result<BoundaryCertification> {
    Ok(BoundaryCertification {
        t: sol.v.time(k),
        checks: check_boundary_inequality(sol, spec, k, tol)?,
    })
}

/// Largest slope-corrected discrepancy `|rate(v) - rate(0) - v * slope|`
/// over the probes; zero up to rounding because the rate is affine.
pub fn affine_defect(rate: &ViRate, probes: &[f64]) -> f64 {
    probes
        .iter()
        .map(|&v| (rate.at(v) - rate.at(0.0) - v * rate.slope).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjb_regularized::{solve_extended_hjb, FixedPointConfig};
    use crate::model::{CoefficientSpec, Grid};
    use crate::vi_limit::solve_vi;

    fn constant_reward() -> (ProblemSpec, HJBSolution) {
        let spec = ProblemSpec {
            drift: CoefficientSpec::constant(0.0),
            diffusion: CoefficientSpec::constant(0.5),
            reward: CoefficientSpec::constant(1.0),
            ..ProblemSpec::gbm(0.05, 0.5, 1.0, 0.3, 1.0)
        };
        let grid = Grid::new(-1.0, 1.0, 21, 400).unwrap();
        let sol = solve_extended_hjb(&spec, &grid, &FixedPointConfig::default()).unwrap();
        (spec, sol)
    }

    #[test]
    fn converged_solution_is_certified() {
        let (spec, sol) = constant_reward();
        let c = analytic_perturbation_regularized(&sol, &spec, &DEFAULT_PROBES, ANALYTIC_TOL).unwrap();
        assert!(c.pass(), "{:?}", c.worst);
        assert_eq!(c.checked, sol.v.values.len() * 9);
        // the equilibrium itself is the worst probe, with gain exactly zero
        assert_eq!(c.worst.unwrap().gain, 0.0);
    }

    #[test]
    fn other_probes_lose_strictly() {
        let (spec, sol) = constant_reward();
        for k in [0, 100, 399] {
            for i in [0, 10, 20] {
                let pi = sol.pi.at(k, i);
                let a = 1.0 - sol.v.at(k, i);
                assert_eq!(regularized_gain(pi, pi, a, spec.lambda), 0.0);
                for v in DEFAULT_PROBES {
                    assert!(regularized_gain(v, pi, a, spec.lambda) < 0.0);
                }
            }
        }
    }

    #[test]
    fn doubled_intensity_is_caught() {
        let (spec, mut sol) = constant_reward();
        sol.pi.values.iter_mut().for_each(|p| *p *= 2.0);
        let c = analytic_perturbation_regularized(&sol, &spec, &DEFAULT_PROBES, ANALYTIC_TOL).unwrap();
        assert!(!c.pass());
        assert!(c.worst.unwrap().gain > 1e-3);
    }

    fn gbm_vi() -> (ProblemSpec, VISolution) {
        let spec = ProblemSpec::gbm(0.05, 0.5, 1.0, 0.1, 2.0);
        let grid = Grid::new(0.01, 2.0, 400, 400).unwrap();
        (spec.clone(), solve_vi(&spec, &grid).unwrap())
    }

    #[test]
    fn interior_rates_of_a_vi_solution() {
        let (spec, sol) = gbm_vi();
        let pts = interior_points(&sol, 0, 5);
        assert!(pts.len() > 300);
        let res = vi_interior_perturbation(&sol, &spec, &pts, &DEFAULT_PROBES, 1e-8).unwrap();
        assert!(res.iter().all(|r| r.pass), "{:?}", res.iter().find(|r| !r.pass));
        for &(k, i) in &pts {
            let rate = vi_rate(&sol, &spec, k, i).unwrap();
            assert!(affine_defect(&rate, &DEFAULT_PROBES) <= 1e-12 * (1.0 + rate.slope.abs() * 100.0));
            if !sol.is_stopped(k, i) {
                assert!(rate.intercept.abs() < 1e-8, "continuation rate {} at {}", rate.intercept, rate.x);
            }
        }
    }

    #[test]
    fn bumped_value_is_detected() {
        let (spec, mut sol) = gbm_vi();
        let grid = sol.v.grid.clone();
        let bump = |x: f64| 0.1 * (-((x - 0.25) / 0.03).powi(2)).exp();
        for k in 0..sol.v.n_slices() {
            for i in 0..grid.n_x {
                sol.v.slice_mut(k)[i] += bump(grid.x(i));
            }
        }
        let pts: Vec<_> = interior_points(&sol, 0, 5)
            .into_iter()
            .filter(|&(k, i)| (grid.x(i) - 0.25).abs() < 0.15 && !sol.is_stopped(k, i))
            .collect();
        assert!(pts.len() > 20);
        let r = vi_interior_perturbation(&sol, &spec, &pts, &[0.0], 1e-8).unwrap();
        assert!(r.iter().any(|r| !r.pass && r.gain > 1e-2));
    }

    #[test]
    fn near_boundary_points_are_refused() {
        let (spec, sol) = gbm_vi();
        let n = sol.v.grid.n_x;
        let i = (1..n - 1).find(|&i| sol.is_stopped(0, i) != sol.is_stopped(0, i + 1)).unwrap();
        assert!(matches!(vi_rate(&sol, &spec, 0, i), Err(Error::NearFreeBoundary { .. })));
        assert!(matches!(vi_rate(&sol, &spec, 0, 0), Err(Error::BoundaryTooClose { .. })));
    }

    #[test]
    fn boundary_certification() {
        let (spec, sol) = gbm_vi();
        let c = vi_boundary_perturbation(&sol, &spec, 0, 1e-8).unwrap();
        assert_eq!(c.checks.len(), 1);
        assert!(c.pass());

        let flat = ProblemSpec {
            reward: CoefficientSpec::constant(1.0),
            ..spec.clone()
        };
        let sol = solve_vi(&flat, &sol.v.grid).unwrap();
        let c = vi_boundary_perturbation(&sol, &flat, 0, 1e-8).unwrap();
        assert!(c.checks.is_empty() && c.pass());
    }

    #[test]
    fn synthetic_boundary_violation_fails() {
        let (spec, mut sol) = gbm_vi();
        let grid = sol.v.grid.clone();
        let c = 0.8;
        // V with a large convex kink and a g with equal slopes on both sides
        for k in 0..sol.v.n_slices() {
            for i in 0..grid.n_x {
                let x = grid.x(i);
                sol.v.slice_mut(k)[i] = x + 50.0 * (x - c).powi(2);
                sol.g.slice_mut(k)[i] = 0.1 * x;
            }
        }
        sol.boundary = vec![vec![c]; sol.v.n_slices()];
        let r = vi_boundary_perturbation(&sol, &spec, 0, 1e-8).unwrap();
        assert!(!r.pass());
    }
}

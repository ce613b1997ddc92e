//! Discrete-time stopping game: one player per time point `t_i = i T / N`
//! decides between stopping now (reward `f`) and continuing (mean-variance of
//! the reward delivered by later players).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::GridField;
use crate::model::{validate_problem, Grid, ProblemSpec, ValidationOptions};
use crate::pde_kernel::{implicit_step, Stencil, StepTerms};
use crate::vi_limit::VISolution;

/// Relative tolerance under which `f` and `U` count as tied (and the player stops).
pub const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct DiscreteEquilibrium {
    pub dt: f64,
    pub n_steps: usize,
    /// Continuation value `U_i`; equal to `f` on the last slice.
    pub u: GridField,
    pub v: GridField,
    pub g: GridField,
    /// Second moment `E[f(X_tau)^2]`.
    pub m: GridField,
    /// Slice-major, true where the player at that node stops.
    pub stop_mask: Vec<bool>,
    /// Largest difference between the moment form of `U` and the form
    /// `E[V_{i+1}] - gamma/2 Var[g_{i+1}]`.
    pub v_form_discrepancy: f64,
}

impl DiscreteEquilibrium {
    pub fn is_stopped(&self, i: usize, node: usize) -> bool {
        self.stop_mask[i * self.v.grid.n_x + node]
    }

    /// `m - g^2` on slice `i`.
    pub fn variance(&self, i: usize) -> Vec<f64> {
        self.m.slice(i).iter().zip(self.g.slice(i)).map(|(m, g)| m - g * g).collect()
    }
}

/// `E_{t,x}[phi(X_{t + dt})]` approximated by one implicit step of the generator.
pub fn one_step_expectation(stencil: &Stencil, dt: f64, phi: &[f64]) -> Result<Vec<f64>> {
    implicit_step(
        stencil,
        dt,
        phi,
        &StepTerms {
            zero_order: None,
            source: None,
            pinned: None,
        },
    )
}

/// Runs the backward recursion with `n_steps` decision dates on the spatial part of `grid`.
pub fn backward_recursion(spec: &ProblemSpec, grid: &Grid, n_steps: usize) -> Result<DiscreteEquilibrium> {
    if n_steps == 0 {
        return Err(Error::InvalidGrid("the game needs at least one step".into()));
    }
    let opts = ValidationOptions {
        uses_lambda: false,
        ..Default::default()
    };
    validate_problem(spec, grid, opts).into_result()?;
    let lattice = Grid {
        n_t: n_steps,
        ..grid.clone()
    };
    let n_x = lattice.n_x;
    let dt = lattice.dt(spec.horizon);
    let gamma = spec.gamma;
    let f = spec.reward_profile(&lattice)?;
    let f_sq: Vec<f64> = f.iter().map(|v| v * v).collect();
    // ties are decided on values that went through a linear solve
    let tie = TIE_TOL * (1.0 + f.iter().fold(0.0_f64, |a, v| a.max(v.abs())));

    let mut u = GridField::zeros(&lattice, spec.horizon);
    let mut v = GridField::zeros(&lattice, spec.horizon);
    let mut g = GridField::zeros(&lattice, spec.horizon);
    let mut m = GridField::zeros(&lattice, spec.horizon);
    let mut stop_mask = vec![false; (n_steps + 1) * n_x];
    for field in [&mut u, &mut v, &mut g] {
        field.slice_mut(n_steps).copy_from_slice(&f);
    }
    m.slice_mut(n_steps).copy_from_slice(&f_sq);
    stop_mask[n_steps * n_x..].iter_mut().for_each(|s| *s = true);

    let fixed = (spec.drift.is_time_independent() && spec.diffusion.is_time_independent())
        .then(|| Stencil::new(spec, &lattice, 0.0));
    let mut discrepancy = 0.0_f64;
    for i in (0..n_steps).rev() {
        let t = lattice.time(i, spec.horizon);
        let owned;
        let stencil = match &fixed {
            Some(s) => s,
            None => {
                owned = Stencil::new(spec, &lattice, t);
                &owned
            }
        };
        let g_next = g.slice(i + 1).to_vec();
        let g_next_sq: Vec<f64> = g_next.iter().map(|x| x * x).collect();
        let eg = one_step_expectation(stencil, dt, &g_next)?;
        let em = one_step_expectation(stencil, dt, m.slice(i + 1))?;
        let ev = one_step_expectation(stencil, dt, v.slice(i + 1))?;
        let eg_sq = one_step_expectation(stencil, dt, &g_next_sq)?;
        for j in 0..n_x {
            let uj = eg[j] - 0.5 * gamma * (em[j] - eg[j] * eg[j]);
            let alt = ev[j] - 0.5 * gamma * (eg_sq[j] - eg[j] * eg[j]);
            discrepancy = discrepancy.max((uj - alt).abs());
            let idx = i * n_x + j;
            u.values[idx] = uj;
            if f[j] >= uj - tie {
                stop_mask[idx] = true;
                v.values[idx] = f[j];
                g.values[idx] = f[j];
                m.values[idx] = f_sq[j];
            } else {
                v.values[idx] = uj;
                g.values[idx] = eg[j];
                m.values[idx] = em[j];
            }
        }
    }
    Ok(DiscreteEquilibrium {
        dt,
        n_steps,
        u,
        v,
        g,
        m,
        stop_mask,
        v_form_discrepancy: discrepancy,
    })
}

/// Distances between a discrete equilibrium and a VI solution on an x-window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub sup_v: f64,
    pub sup_v_relative: f64,
    pub l2_v: f64,
    pub sup_g: f64,
    pub sup_g_relative: f64,
    pub l2_g: f64,
    /// The same relative sup gaps on the initial slice only.
    pub initial_sup_v_relative: f64,
    pub initial_sup_g_relative: f64,
    /// Nodes where exactly one of the two solutions stops.
    pub stop_mismatch: usize,
    /// Discrete nodes where `V <= f` binds.
    pub discrete_obstacle_binds: usize,
    /// Discrete nodes where `V + gamma/2 (f - g)^2 <= f` binds.
    pub mean_variance_obstacle_binds: usize,
    pub nodes: usize,
}

/// Compares slices matched by nearest time over `x in [x_lo, x_hi]`.
pub fn compare_to_vi(d: &DiscreteEquilibrium, vi: &VISolution, spec: &ProblemSpec, x_lo: f64, x_hi: f64) -> Result<GapReport> {
    let grid = &d.v.grid;
    if !grid.same_space(&vi.v.grid) {
        return Err(Error::GridMismatch("discrete game and VI solution use different spatial grids".into()));
    }
    let tol = 1e-12;
    let mut rep = GapReport::default();
    let (mut sum_v, mut sum_g) = (0.0, 0.0);
    for i in 0..d.v.n_slices() {
        let k = vi.v.nearest_slice(d.v.time(i));
        for j in 0..grid.n_x {
            let x = grid.x(j);
            if x < x_lo || x > x_hi {
                continue;
            }
            let f = spec.reward_at(x);
            let (dv, dg) = (d.v.at(i, j), d.g.at(i, j));
            let (rv, rg) = (vi.v.at(k, j), vi.g.at(k, j));
            let ev = (dv - rv).abs();
            let eg = (dg - rg).abs();
            let ev_rel = ev / rv.abs().max(f64::MIN_POSITIVE);
            let eg_rel = eg / rg.abs().max(f64::MIN_POSITIVE);
            rep.sup_v = rep.sup_v.max(ev);
            rep.sup_g = rep.sup_g.max(eg);
            rep.sup_v_relative = rep.sup_v_relative.max(ev_rel);
            rep.sup_g_relative = rep.sup_g_relative.max(eg_rel);
            if i == 0 {
                rep.initial_sup_v_relative = rep.initial_sup_v_relative.max(ev_rel);
                rep.initial_sup_g_relative = rep.initial_sup_g_relative.max(eg_rel);
            }
            sum_v += ev * ev;
            sum_g += eg * eg;
            rep.nodes += 1;
            if d.is_stopped(i, j) != vi.is_stopped(k, j) {
                rep.stop_mismatch += 1;
            }
            if dv <= f + tol {
                rep.discrete_obstacle_binds += 1;
            }
            if dv + 0.5 * spec.gamma * (f - dg) * (f - dg) <= f + tol {
                rep.mean_variance_obstacle_binds += 1;
            }
        }
    }
    if rep.nodes > 0 {
        rep.l2_v = (sum_v / rep.nodes as f64).sqrt();
        rep.l2_g = (sum_g / rep.nodes as f64).sqrt();
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CoefficientSpec;
    use crate::vi_limit::solve_vi;

    #[test]
    fn constant_reward_stops_everywhere() {
        let mut spec = ProblemSpec::gbm(0.05, 0.5, 1.0, 0.1, 1.0);
        spec.reward = CoefficientSpec::constant(2.0);
        let grid = Grid::new(0.05, 2.0, 40, 10).unwrap();
        let d = backward_recursion(&spec, &grid, 20).unwrap();
        assert!(d.stop_mask.iter().all(|s| *s));
        assert!(d.v.values.iter().chain(&d.g.values).all(|v| *v == 2.0));

        let vi = solve_vi(&spec, &Grid { n_t: 20, ..grid }).unwrap();
        let rep = compare_to_vi(&d, &vi, &spec, 0.0, 10.0).unwrap();
        assert!(rep.sup_v <= 1e-12 && rep.sup_g <= 1e-12);
        assert_eq!(rep.stop_mismatch, 0);
    }

    #[test]
    fn martingale_single_step_ties_and_stops() {
        let spec = ProblemSpec {
            drift: CoefficientSpec::constant(0.0),
            diffusion: CoefficientSpec::constant(1.0),
            reward: CoefficientSpec::affine(0.0, 1.0),
            gamma: 0.0,
            lambda: 1.0,
            horizon: 1.0,
            dimension: 1,
            variance_factor: Default::default(),
        };
        let grid = Grid::new(-1.0, 1.0, 21, 1).unwrap();
        let d = backward_recursion(&spec, &grid, 1).unwrap();
        for j in 1..grid.n_x - 1 {
            // the implicit step maps affine profiles to themselves up to rounding
            assert!((d.u.at(0, j) - grid.x(j)).abs() < 1e-12);
            assert_eq!(d.v.at(0, j), grid.x(j));
        }
    }

    #[test]
    fn zero_risk_aversion_is_snell_recursion() {
        let spec = ProblemSpec::gbm(0.03, 0.4, 0.0, 0.1, 2.0);
        let grid = Grid::new(0.05, 2.0, 60, 1).unwrap();
        let d = backward_recursion(&spec, &grid, 40).unwrap();
        let stencil = Stencil::new(&spec, &Grid { n_t: 40, ..grid.clone() }, 0.0);
        for i in 0..40 {
            let ev = one_step_expectation(&stencil, d.dt, d.v.slice(i + 1)).unwrap();
            for j in 0..grid.n_x {
                let snell = grid.x(j).max(ev[j]);
                assert!((d.v.at(i, j) - snell).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn moment_and_value_forms_agree() {
        let spec = ProblemSpec::gbm(0.05, 0.5, 1.0, 0.1, 5.0);
        let grid = Grid::new(0.01, 3.0, 200, 1).unwrap();
        let d = backward_recursion(&spec, &grid, 80).unwrap();
        assert!(d.v_form_discrepancy < 1e-8, "{}", d.v_form_discrepancy);
        for i in 0..=80 {
            let var = d.variance(i);
            let worst = var.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(worst >= -1e-12, "slice {i}: {worst} at {:?}", var.iter().position(|v| *v == worst));
        }
        assert!((0..grid.n_x).all(|j| d.is_stopped(80, j)));
        // last decision slice: stop exactly where f >= U
        for j in 0..grid.n_x {
            assert_eq!(d.is_stopped(79, j), grid.x(j) >= d.u.at(79, j));
        }
    }

    #[test]
    fn one_step_variance_scales_with_dt() {
        let spec = ProblemSpec::gbm(0.05, 0.5, 1.0, 0.1, 1.0);
        let grid = Grid::new(0.01, 3.0, 300, 1000).unwrap();
        let dt = grid.dt(1.0);
        let stencil = Stencil::new(&spec, &grid, 0.0);
        let x: Vec<f64> = grid.nodes().collect();
        let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
        let e1 = one_step_expectation(&stencil, dt, &x).unwrap();
        let e2 = one_step_expectation(&stencil, dt, &x2).unwrap();
        for j in (20..grid.n_x - 20).step_by(10) {
            let ratio = (e2[j] - e1[j] * e1[j]) / dt / (0.5 * x[j] * x[j]);
            assert!((ratio - 1.0).abs() < 0.05, "x={} ratio={ratio}", x[j]);
        }
    }

    #[test]
    fn rejects_incompatible_grids() {
        let spec = ProblemSpec::gbm(0.05, 0.5, 1.0, 0.1, 1.0);
        let d = backward_recursion(&spec, &Grid::new(0.05, 2.0, 40, 1).unwrap(), 5).unwrap();
        let vi = solve_vi(&spec, &Grid::new(0.05, 2.0, 41, 5).unwrap()).unwrap();
        assert!(compare_to_vi(&d, &vi, &spec, 0.1, 1.5).is_err());
    }
}

//! Monte-Carlo engine: Euler-Maruyama paths, randomized (Cox) stopping,
//! estimators of the mean-variance objectives, hitting times of a stopping
//! region and the local-time relation at a curve.
//!
//! Every path draws from its own ChaCha stream selected by the path index, so
//! results do not depend on scheduling. Reductions use pairwise summation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::GridField;
use crate::hjb_regularized::entropy;
use crate::model::{Grid, ProblemSpec};
use crate::parallel::{map_indices, mean, sample_variance, Execution};
use crate::vi_limit::VISolution;

/// Offset of the seed feeding the non-Brownian draws (exponential clocks,
/// bridge uniforms). Keeps them independent of the increments.
const AUX_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MCConfig {
    pub n_paths: usize,
    pub dt_sim: f64,
    pub master_seed: u64,
    /// Pairs path `2k + 1` with path `2k` by negating its increments.
    pub antithetic: bool,
    pub execution: Execution,
}

impl Default for MCConfig {
    fn default() -> Self {
        MCConfig {
            n_paths: 10_000,
            dt_sim: 1e-3,
            master_seed: 0,
            antithetic: false,
            execution: Execution::default(),
        }
    }
}

impl MCConfig {
    pub fn new(n_paths: usize, dt_sim: f64, master_seed: u64) -> Self {
        MCConfig {
            n_paths,
            dt_sim,
            master_seed,
            ..Default::default()
        }
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn with_antithetic(mut self, antithetic: bool) -> Self {
        self.antithetic = antithetic;
        self
    }

    pub fn check(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::InvalidMonteCarlo("n_paths must be at least 1".into()));
        }
        if !(self.dt_sim > 0.0 && self.dt_sim.is_finite()) {
            return Err(Error::InvalidMonteCarlo(format!(
                "dt_sim must be positive, got {}",
                self.dt_sim
            )));
        }
        if self.antithetic && self.n_paths % 2 == 1 {
            return Err(Error::InvalidMonteCarlo(
                "antithetic sampling needs an even number of paths".into(),
            ));
        }
        Ok(())
    }

    fn stream(&self, path: usize) -> (u64, f64) {
        if self.antithetic {
            ((path / 2) as u64, if path.is_multiple_of(2) { 1.0 } else { -1.0 })
        } else {
            (path as u64, 1.0)
        }
    }

    fn brownian_rng(&self, path: usize) -> (ChaCha8Rng, f64) {
        let (stream, sign) = self.stream(path);
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(stream);
        (rng, sign)
    }

    fn aux_rng(&self, path: usize) -> (ChaCha8Rng, bool) {
        let (stream, sign) = self.stream(path);
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed.wrapping_add(AUX_SEED_OFFSET));
        rng.set_stream(stream);
        (rng, sign < 0.0)
    }

    /// Unit exponential clock of `path`; antithetic partners use `1 - U`.
    fn clock(&self, path: usize) -> f64 {
        let (mut rng, flip) = self.aux_rng(path);
        let mut u: f64 = rng.random();
        if flip {
            u = 1.0 - u;
        }
        -(-u.min(1.0 - f64::EPSILON)).ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Plain averages over realized stopping times.
    Raw,
    /// Averages of conditional expectations given the whole path.
    Conditional,
    Hitting,
    Terminal,
    LocalTime,
    ExitTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub kind: EstimatorKind,
}

impl MCEstimate {
    /// Mean and standard error of i.i.d. samples. Antithetic samples are
    /// averaged in pairs first so the error reflects their correlation.
    pub fn from_samples(samples: &[f64], antithetic: bool, kind: EstimatorKind) -> MCEstimate {
        let paired;
        let units: &[f64] = if antithetic {
            paired = samples.chunks(2).map(|c| 0.5 * (c[0] + c[c.len() - 1])).collect::<Vec<_>>();
            &paired
        } else {
            samples
        };
        let m = mean(units);
        let se = (sample_variance(units, m) / units.len() as f64).sqrt();
        MCEstimate {
            mean: m,
            std_error: se,
            n_paths: samples.len(),
            kind,
        }
    }

    /// Whether `value` lies within `k` standard errors (plus a 1e-9 floor).
    pub fn within(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.std_error + 1e-9
    }

    /// Whether two independent-or-not estimates agree within `k` combined errors.
    pub fn agrees_with(&self, other: &MCEstimate, k: f64) -> bool {
        let se = (self.std_error.powi(2) + other.std_error.powi(2)).sqrt();
        (self.mean - other.mean).abs() <= k * se + 1e-9
    }
}

/// Stored paths on a uniform time grid from `t0` to the horizon.
#[derive(Clone, Debug)]
pub struct PathBatch {
    pub t0: f64,
    pub times: Vec<f64>,
    /// One row per path, `times.len()` states each.
    pub states: Vec<Vec<f64>>,
    pub config: MCConfig,
}

fn time_grid(t0: f64, horizon: f64, dt_sim: f64) -> Vec<f64> {
    let span = horizon - t0;
    let n = ((span / dt_sim) - 1e-9).ceil().max(1.0) as usize;
    let h = span / n as f64;
    (0..=n).map(|k| if k == n { horizon } else { t0 + k as f64 * h }).collect()
}

fn check_start(spec: &ProblemSpec, t0: f64, x0: f64) -> Result<()> {
    if !(spec.horizon > 0.0 && spec.horizon.is_finite()) {
        return Err(Error::InvalidProblem(format!("horizon must be positive, got {}", spec.horizon)));
    }
    if !(t0 >= 0.0 && t0 < spec.horizon) || !x0.is_finite() {
        return Err(Error::InvalidMonteCarlo(format!(
            "start (t0={t0}, x0={x0}) must satisfy 0 <= t0 < T"
        )));
    }
    Ok(())
}

/// Euler-Maruyama stepping of one path.
struct Walker<'a> {
    spec: &'a ProblemSpec,
    rng: ChaCha8Rng,
    sign: f64,
}

impl Walker<'_> {
    #[inline]
    fn step(&mut self, t: f64, x: f64, h: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        x + self.spec.drift.value(t, x) * h + self.spec.diffusion.value(t, x) * h.sqrt() * self.sign * z
    }
}

fn walk(spec: &ProblemSpec, mc: &MCConfig, path: usize, times: &[f64], x0: f64) -> Vec<f64> {
    let (rng, sign) = mc.brownian_rng(path);
    let mut walker = Walker { spec, rng, sign };
    let mut out = Vec::with_capacity(times.len());
    let mut x = x0;
    out.push(x);
    for w in times.windows(2) {
        x = walker.step(w[0], x, w[1] - w[0]);
        out.push(x);
    }
    out
}

/// Simulates `mc.n_paths` paths from `(t0, x0)` to the horizon.
pub fn simulate_paths(spec: &ProblemSpec, t0: f64, x0: f64, mc: &MCConfig) -> Result<PathBatch> {
    mc.check()?;
    check_start(spec, t0, x0)?;
    let times = time_grid(t0, spec.horizon, mc.dt_sim);
    let states = map_indices(mc.n_paths, mc.execution, |p| walk(spec, mc, p, &times, x0));
    Ok(PathBatch {
        t0,
        times,
        states,
        config: *mc,
    })
}

/// A stopping intensity `pi(t, x)`.
#[derive(Clone, Copy, Debug)]
pub enum Intensity<'a> {
    Constant(f64),
    /// Bilinear interpolation of a field, clamped at the domain edges.
    Field(&'a GridField),
    /// `v` on `[.., until]`, then `after`.
    Switched { v: f64, until: f64, after: &'a Intensity<'a> },
}

impl Intensity<'_> {
    pub fn at(&self, t: f64, x: f64) -> f64 {
        match self {
            Intensity::Constant(v) => *v,
            Intensity::Field(field) => field.interpolate(t, x),
            Intensity::Switched { v, until, after } => {
                if t <= *until {
                    *v
                } else {
                    after.at(t, x)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxPath {
    pub tau: f64,
    /// False when the horizon was reached first.
    pub stopped_by_intensity: bool,
    pub x_tau: f64,
    /// Accumulated hazard up to `tau`.
    pub hazard: f64,
    /// `int_{t0}^{tau} H(pi_s) ds`.
    pub entropy: f64,
}

/// Intensity and accumulated hazard along a stored path.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<f64>,
    pub intensity: Vec<f64>,
    pub hazard: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CoxStoppingSample {
    pub t0: f64,
    pub times: Vec<f64>,
    pub paths: Vec<CoxPath>,
    /// Needed by the conditional estimator.
    pub trajectories: Option<Vec<Trajectory>>,
    pub antithetic: bool,
}

impl CoxStoppingSample {
    pub fn drop_trajectories(&mut self) {
        self.trajectories = None;
    }
}

/// Intensity and trapezoidal hazard along `states`.
fn hazard_along(times: &[f64], states: &[f64], intensity: &Intensity<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pi = Vec::with_capacity(states.len());
    for (&t, &x) in times.iter().zip(states) {
        let v = intensity.at(t, x);
        if !(v >= 0.0) {
            return Err(Error::NegativeIntensity { t, x, value: v });
        }
        pi.push(v);
    }
    let mut hazard = Vec::with_capacity(states.len());
    hazard.push(0.0);
    for k in 1..states.len() {
        let h = times[k] - times[k - 1];
        hazard.push(hazard[k - 1] + 0.5 * h * (pi[k - 1] + pi[k]));
    }
    Ok((pi, hazard))
}

/// First crossing of the clock `theta`, linearly interpolated within the step.
fn first_crossing(times: &[f64], states: &[f64], pi: &[f64], hazard: &[f64], theta: f64) -> CoxPath {
    let mut ent = 0.0;
    for k in 1..states.len() {
        let h = times[k] - times[k - 1];
        if hazard[k] >= theta {
            let dh = hazard[k] - hazard[k - 1];
            let w = if dh > 0.0 { ((theta - hazard[k - 1]) / dh).clamp(0.0, 1.0) } else { 1.0 };
            let pi_tau = pi[k - 1] + w * (pi[k] - pi[k - 1]);
            ent += 0.5 * w * h * (entropy(pi[k - 1]) + entropy(pi_tau));
            return CoxPath {
                tau: times[k - 1] + w * h,
                stopped_by_intensity: true,
                x_tau: states[k - 1] + w * (states[k] - states[k - 1]),
                hazard: theta,
                entropy: ent,
            };
        }
        ent += 0.5 * h * (entropy(pi[k - 1]) + entropy(pi[k]));
    }
    let last = states.len() - 1;
    CoxPath {
        tau: times[last],
        stopped_by_intensity: false,
        x_tau: states[last],
        hazard: hazard[last],
        entropy: ent,
    }
}

/// Draws the Cox stopping time of every stored path under `intensity`.
pub fn sample_cox_stopping(paths: &PathBatch, intensity: &Intensity<'_>) -> Result<CoxStoppingSample> {
    let mc = &paths.config;
    let per_path = map_indices(paths.states.len(), mc.execution, |p| -> Result<(CoxPath, Trajectory)> {
        let states = &paths.states[p];
        let (pi, hazard) = hazard_along(&paths.times, states, intensity)?;
        let cox = first_crossing(&paths.times, states, &pi, &hazard, mc.clock(p));
        Ok((
            cox,
            Trajectory {
                states: states.clone(),
                intensity: pi,
                hazard,
            },
        ))
    });
    let mut out = Vec::with_capacity(per_path.len());
    let mut trajectories = Vec::with_capacity(per_path.len());
    for r in per_path {
        let (c, tr) = r?;
        out.push(c);
        trajectories.push(tr);
    }
    Ok(CoxStoppingSample {
        t0: paths.t0,
        times: paths.times.clone(),
        paths: out,
        trajectories: Some(trajectories),
        antithetic: mc.antithetic,
    })
}

/// Per-path conditional expectations given the path: `E[f(X_tau)]`,
/// `E[f(X_tau)^2]` and `E[int_{t0}^{tau} H(pi)]`.
fn conditional_terms(spec: &ProblemSpec, times: &[f64], tr: &Trajectory) -> [f64; 3] {
    // Stopping mass on a step is e^{-Lambda_{k-1}} - e^{-Lambda_k}, which
    // telescopes to 1 - e^{-Lambda_T}; f is averaged with intensity weights.
    let survival: Vec<f64> = tr.hazard.iter().map(|h| (-h).exp()).collect();
    let mut acc = [0.0; 3];
    let mut prev: Option<(f64, f64)> = None;
    for k in 0..tr.states.len() {
        let f = spec.reward_at(tr.states[k]);
        let pi = tr.intensity[k];
        if let Some((f_prev, pi_prev)) = prev {
            let mass = survival[k - 1] - survival[k];
            let total = pi_prev + pi;
            let (a, b) = if total > 0.0 { (pi_prev / total, pi / total) } else { (0.5, 0.5) };
            acc[0] += mass * (a * f_prev + b * f);
            acc[1] += mass * (a * f_prev * f_prev + b * f * f);
            let h = times[k] - times[k - 1];
            acc[2] += 0.5 * h * (entropy(pi_prev) * survival[k - 1] + entropy(pi) * survival[k]);
        }
        prev = Some((f, pi));
    }
    let last = tr.states.len() - 1;
    let f_t = spec.reward_at(tr.states[last]);
    [acc[0] + f_t * survival[last], acc[1] + f_t * f_t * survival[last], acc[2]]
}

/// Estimates of the moments of `f(X_tau)`, the mean-variance criterion `J`
/// and the regularized criterion `J^lambda`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveEstimate {
    pub kind: EstimatorKind,
    pub first_moment: MCEstimate,
    pub second_moment: MCEstimate,
    /// `E[int_{t0}^{tau} H(pi_s) ds]`.
    pub entropy: MCEstimate,
    /// `E f - gamma/2 Var f`.
    pub j: MCEstimate,
    /// `j + lambda * entropy`.
    pub j_lambda: MCEstimate,
}

fn assemble(kind: EstimatorKind, terms: &[[f64; 3]], gamma: f64, lambda: f64, antithetic: bool) -> ObjectiveEstimate {
    let col = |j: usize| terms.iter().map(|t| t[j]).collect::<Vec<_>>();
    let (f, f2, e) = (col(0), col(1), col(2));
    let first = MCEstimate::from_samples(&f, antithetic, kind);
    let second = MCEstimate::from_samples(&f2, antithetic, kind);
    let ent = MCEstimate::from_samples(&e, antithetic, kind);
    let a = first.mean;
    // delta method: linearize a - gamma/2 (b - a^2) around the sample means
    let lin: Vec<f64> = terms.iter().map(|t| (1.0 + gamma * a) * t[0] - 0.5 * gamma * t[1]).collect();
    let mut j = MCEstimate::from_samples(&lin, antithetic, kind);
    j.mean = a - 0.5 * gamma * (second.mean - a * a);
    let lin_l: Vec<f64> = lin.iter().zip(&e).map(|(l, e)| l + lambda * e).collect();
    let mut j_lambda = MCEstimate::from_samples(&lin_l, antithetic, kind);
    j_lambda.mean = j.mean + lambda * ent.mean;
    ObjectiveEstimate {
        kind,
        first_moment: first,
        second_moment: second,
        entropy: ent,
        j,
        j_lambda,
    }
}

/// Objective estimates from a Cox sample. The entropy term uses `spec.lambda`.
pub fn estimate_objective(sample: &CoxStoppingSample, spec: &ProblemSpec, kind: EstimatorKind) -> Result<ObjectiveEstimate> {
    let terms: Vec<[f64; 3]> = match kind {
        EstimatorKind::Raw => sample
            .paths
            .iter()
            .map(|c| {
                let f = spec.reward_at(c.x_tau);
                [f, f * f, c.entropy]
            })
            .collect(),
        EstimatorKind::Conditional => {
            let trs = sample.trajectories.as_ref().ok_or(Error::MissingHazard)?;
            trs.iter().map(|tr| conditional_terms(spec, &sample.times, tr)).collect()
        }
        other => {
            return Err(Error::InvalidMonteCarlo(format!("{other:?} is not an objective estimator")));
        }
    };
    Ok(assemble(kind, &terms, spec.gamma, spec.lambda, sample.antithetic))
}

/// Per-path terms `(f, f^2, entropy)` of one estimator kind, in path order.
/// Two calls with the same `mc` share Brownian paths and clocks.
pub fn regularized_terms(
    spec: &ProblemSpec,
    intensity: &Intensity<'_>,
    t0: f64,
    x0: f64,
    mc: &MCConfig,
    kind: EstimatorKind,
) -> Result<Vec<[f64; 3]>> {
    if !matches!(kind, EstimatorKind::Raw | EstimatorKind::Conditional) {
        return Err(Error::InvalidMonteCarlo(format!("{kind:?} is not an objective estimator")));
    }
    mc.check()?;
    check_start(spec, t0, x0)?;
    let times = time_grid(t0, spec.horizon, mc.dt_sim);
    map_indices(mc.n_paths, mc.execution, |p| -> Result<[f64; 3]> {
        let states = walk(spec, mc, p, &times, x0);
        let (pi, hazard) = hazard_along(&times, &states, intensity)?;
        if kind == EstimatorKind::Raw {
            let cox = first_crossing(&times, &states, &pi, &hazard, mc.clock(p));
            let f = spec.reward_at(cox.x_tau);
            return Ok([f, f * f, cox.entropy]);
        }
        let tr = Trajectory {
            states,
            intensity: pi,
            hazard,
        };
        Ok(conditional_terms(spec, &times, &tr))
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizedEstimate {
    pub raw: ObjectiveEstimate,
    pub conditional: ObjectiveEstimate,
    /// Fraction of paths stopped by the intensity before the horizon.
    pub stopped_fraction: f64,
}

/// Raw and conditional estimates from `(t0, x0)` without storing paths.
pub fn estimate_regularized(
    spec: &ProblemSpec,
    intensity: &Intensity<'_>,
    t0: f64,
    x0: f64,
    mc: &MCConfig,
) -> Result<RegularizedEstimate> {
    mc.check()?;
    check_start(spec, t0, x0)?;
    let times = time_grid(t0, spec.horizon, mc.dt_sim);
    let per_path = map_indices(mc.n_paths, mc.execution, |p| -> Result<([f64; 3], [f64; 3], bool)> {
        let states = walk(spec, mc, p, &times, x0);
        let (pi, hazard) = hazard_along(&times, &states, intensity)?;
        let cox = first_crossing(&times, &states, &pi, &hazard, mc.clock(p));
        let f = spec.reward_at(cox.x_tau);
        let tr = Trajectory {
            states,
            intensity: pi,
            hazard,
        };
        Ok(([f, f * f, cox.entropy], conditional_terms(spec, &times, &tr), cox.stopped_by_intensity))
    });
    let mut raw = Vec::with_capacity(mc.n_paths);
    let mut cond = Vec::with_capacity(mc.n_paths);
    let mut stopped = 0usize;
    for r in per_path {
        let (a, b, s) = r?;
        raw.push(a);
        cond.push(b);
        stopped += usize::from(s);
    }
    Ok(RegularizedEstimate {
        raw: assemble(EstimatorKind::Raw, &raw, spec.gamma, spec.lambda, mc.antithetic),
        conditional: assemble(EstimatorKind::Conditional, &cond, spec.gamma, spec.lambda, mc.antithetic),
        stopped_fraction: stopped as f64 / mc.n_paths as f64,
    })
}

/// A stopping region on a lattice, read by nearest node in both t and x.
#[derive(Clone, Debug)]
pub struct StopRegion {
    grid: Grid,
    horizon: f64,
    /// Slice-major, true where stopping.
    mask: Vec<bool>,
    /// Per slice, the midpoints between neighbouring nodes of different kind.
    edges: Vec<Vec<f64>>,
}

impl StopRegion {
    pub fn new(grid: &Grid, horizon: f64, mask: Vec<bool>) -> Result<StopRegion> {
        let n = grid.n_x;
        if mask.len() != (grid.n_t + 1) * n {
            return Err(Error::GridMismatch("stop mask does not match its grid".into()));
        }
        let edges = mask
            .chunks(n)
            .map(|row| {
                (0..n - 1)
                    .filter(|&i| row[i] != row[i + 1])
                    .map(|i| 0.5 * (grid.x(i) + grid.x(i + 1)))
                    .collect()
            })
            .collect();
        Ok(StopRegion {
            grid: grid.clone(),
            horizon,
            mask,
            edges,
        })
    }

    pub fn from_vi(sol: &VISolution) -> StopRegion {
        StopRegion::new(&sol.v.grid, sol.v.horizon, sol.stop_mask.clone()).expect("solver mask matches its grid")
    }

    pub fn from_fn(grid: &Grid, horizon: f64, stop: impl Fn(f64, f64) -> bool) -> StopRegion {
        let mut mask = Vec::with_capacity((grid.n_t + 1) * grid.n_x);
        for k in 0..=grid.n_t {
            let t = grid.time(k, horizon);
            mask.extend(grid.nodes().map(|x| stop(t, x)));
        }
        StopRegion::new(grid, horizon, mask).expect("mask built on its grid")
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    fn slice_of(&self, t: f64) -> usize {
        let dt = self.grid.dt(self.horizon);
        ((t / dt).round().max(0.0) as usize).min(self.grid.n_t)
    }

    pub fn is_stop(&self, t: f64, x: f64) -> bool {
        self.mask[self.slice_of(t) * self.grid.n_x + self.grid.nearest_node(x)]
    }

    /// Nearest region edges below and above `x` on slice `k`.
    fn continuation_interval(&self, k: usize, x: f64) -> (f64, f64) {
        let e = &self.edges[k];
        let j = e.partition_point(|&c| c < x);
        let lo = if j > 0 { e[j - 1] } else { f64::NEG_INFINITY };
        let hi = e.get(j).copied().unwrap_or(f64::INFINITY);
        (lo, hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HittingEstimate {
    pub first_moment: MCEstimate,
    pub variance: MCEstimate,
    /// `E f - gamma/2 Var f` at the hitting time.
    pub j: MCEstimate,
    /// Fraction of paths that entered the stop region before the horizon.
    pub stopped_fraction: f64,
}

/// Brownian-bridge probability that a path moving from `a` to `b` over a step
/// with variance `var` touched `level` (both endpoints on the same side).
#[inline]
fn bridge_crossing(a: f64, b: f64, level: f64, var: f64) -> f64 {
    if !level.is_finite() || var <= 0.0 {
        return 0.0;
    }
    (-2.0 * (level - a) * (level - b) / var).exp()
}

fn hitting_path(spec: &ProblemSpec, region: &StopRegion, mc: &MCConfig, p: usize, times: &[f64], x0: f64) -> (f64, bool) {
    let (rng, sign) = mc.brownian_rng(p);
    let mut walker = Walker { spec, rng, sign };
    let (mut aux, _) = mc.aux_rng(p);
    let mut x = x0;
    for w in times.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        let k = region.slice_of(t);
        let (lo, hi) = region.continuation_interval(k, x);
        let sig = spec.diffusion.value(t, x);
        let next = walker.step(t, x, h);
        if next >= hi {
            return (hi, true);
        }
        if next <= lo {
            return (lo, true);
        }
        // the continuous path may have left between the two monitoring dates
        let var = sig * sig * h;
        let p_hi = bridge_crossing(x, next, hi, var);
        let p_lo = bridge_crossing(x, next, lo, var);
        let u: f64 = aux.random();
        if u < p_hi {
            return (hi, true);
        }
        if u < p_hi + p_lo {
            return (lo, true);
        }
        x = next;
        if region.is_stop(w[1], x) {
            // the region moved over the step
            return (x, true);
        }
    }
    (x, false)
}

/// Moments of `f(X_tau)` for the first entrance time of the stop region,
/// with a Brownian-bridge correction for crossings between monitoring dates.
/// The state at an entrance is the region edge that was crossed.
pub fn estimate_hitting_objective(
    spec: &ProblemSpec,
    region: &StopRegion,
    t0: f64,
    x0: f64,
    mc: &MCConfig,
) -> Result<HittingEstimate> {
    mc.check()?;
    check_start(spec, t0, x0)?;
    let times = time_grid(t0, spec.horizon, mc.dt_sim);
    if region.is_stop(t0, x0) {
        let exact = |mean: f64| MCEstimate {
            mean,
            std_error: 0.0,
            n_paths: mc.n_paths,
            kind: EstimatorKind::Hitting,
        };
        let f0 = spec.reward_at(x0);
        return Ok(HittingEstimate {
            first_moment: exact(f0),
            variance: exact(0.0),
            j: exact(f0),
            stopped_fraction: 1.0,
        });
    }
    let outcomes = map_indices(mc.n_paths, mc.execution, |p| hitting_path(spec, region, mc, p, &times, x0));
    let f: Vec<f64> = outcomes.iter().map(|(x, _)| spec.reward_at(*x)).collect();
    let stopped = outcomes.iter().filter(|o| o.1).count();
    let first = MCEstimate::from_samples(&f, mc.antithetic, EstimatorKind::Hitting);
    let a = first.mean;
    let dev: Vec<f64> = f.iter().map(|v| (v - a) * (v - a)).collect();
    let mut variance = MCEstimate::from_samples(&dev, mc.antithetic, EstimatorKind::Hitting);
    variance.mean = sample_variance(&f, a);
    let lin: Vec<f64> = f.iter().zip(&dev).map(|(v, d)| v - 0.5 * spec.gamma * d).collect();
    let mut j = MCEstimate::from_samples(&lin, mc.antithetic, EstimatorKind::Hitting);
    j.mean = a - 0.5 * spec.gamma * variance.mean;
    Ok(HittingEstimate {
        first_moment: first,
        variance,
        j,
        stopped_fraction: stopped as f64 / mc.n_paths as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTimeReport {
    pub eps: f64,
    /// Half-width of the occupation band.
    pub delta: f64,
    /// Simulation step actually used.
    pub dt: f64,
    pub exit_time: MCEstimate,
    pub local_time: MCEstimate,
    /// `E[l]^2 / E[tau - t0]`.
    pub ratio: f64,
    /// `sigma^2(t0, x0)`, the small-eps limit of the ratio.
    pub target: f64,
    /// Local time from the discrete Tanaka formula, free of the band bias.
    pub tanaka_local_time: MCEstimate,
    pub tanaka_ratio: f64,
}

impl LocalTimeReport {
    pub fn error(&self) -> f64 {
        (self.ratio - self.target).abs()
    }
}

/// Compares `E[l^c]^2 / E[tau^eps - t0]` with `sigma^2(t0, x0)` for each eps,
/// where `tau^eps` exits the eps-ball around `x0`, capped at `t0 + eps` and
/// the horizon, and `l^c` is the occupation-time estimate of the local time
/// at the curve `c` with band `delta = eps / 10`.
pub fn estimate_local_time_relation(
    spec: &ProblemSpec,
    curve: &(dyn Fn(f64) -> f64 + Sync),
    t0: f64,
    x0: f64,
    eps_list: &[f64],
    mc: &MCConfig,
) -> Result<Vec<LocalTimeReport>> {
    mc.check()?;
    check_start(spec, t0, x0)?;
    let on_curve = curve(t0);
    if (on_curve - x0).abs() > 1e-12 * (1.0 + x0.abs()) {
        return Err(Error::InvalidMonteCarlo(format!("x0 = {x0} is not on the curve (c(t0) = {on_curve})")));
    }
    let sig0 = spec.diffusion.value(t0, x0);
    let mut out = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        if !(eps > 0.0 && eps.is_finite()) || eps > spec.horizon - t0 {
            return Err(Error::EpsilonOutOfRange {
                eps,
                reason: format!("need 0 < eps <= T - t0 = {}", spec.horizon - t0),
            });
        }
        let delta = eps / 10.0;
        let dt = mc.dt_sim.min(eps * eps / 2500.0);
        let t_end = (t0 + eps).min(spec.horizon);
        let per_path = map_indices(mc.n_paths, mc.execution, |p| {
            let (rng, sign) = mc.brownian_rng(p);
            let mut walker = Walker { spec, rng, sign };
            let (mut t, mut x) = (t0, x0);
            let mut occ = 0.0;
            let band = |t: f64, x: f64| {
                let s = spec.diffusion.value(t, x);
                if (x - curve(t)).abs() <= delta { s * s } else { 0.0 }
            };
            let mut prev = band(t, x);
            let mut tanaka = 0.0;
            while t < t_end && (x - x0).abs() < eps {
                let h = dt.min(t_end - t);
                let y = x - curve(t);
                x = walker.step(t, x, h);
                t += h;
                let y_next = x - curve(t);
                // |y'| - |y| - sgn(y)(y' - y) with sgn(0) = 0; nonzero only across the curve
                let sgn = if y == 0.0 { 0.0 } else { y.signum() };
                tanaka += y_next.abs() - y.abs() - sgn * (y_next - y);
                let cur = band(t, x);
                occ += 0.5 * h * (prev + cur);
                prev = cur;
            }
            (t - t0, occ / (2.0 * delta), tanaka)
        });
        let tau: Vec<f64> = per_path.iter().map(|v| v.0).collect();
        let lt: Vec<f64> = per_path.iter().map(|v| v.1).collect();
        let tl: Vec<f64> = per_path.iter().map(|v| v.2).collect();
        let exit_time = MCEstimate::from_samples(&tau, mc.antithetic, EstimatorKind::ExitTime);
        let local_time = MCEstimate::from_samples(&lt, mc.antithetic, EstimatorKind::LocalTime);
        let tanaka_local_time = MCEstimate::from_samples(&tl, mc.antithetic, EstimatorKind::LocalTime);
        let over_tau = |l: f64| if exit_time.mean > 0.0 { l * l / exit_time.mean } else { f64::NAN };
        let ratio = over_tau(local_time.mean);
        let tanaka_ratio = over_tau(tanaka_local_time.mean);
        out.push(LocalTimeReport {
            eps,
            delta,
            dt,
            exit_time,
            local_time,
            ratio,
            target: sig0 * sig0,
            tanaka_local_time,
            tanaka_ratio,
        });
    }
    Ok(out)
}

/// Terminal moments of `f(X_T)` from a batch, for checks against closed forms.
pub fn terminal_estimate(batch: &PathBatch, spec: &ProblemSpec) -> MCEstimate {
    let f: Vec<f64> = batch.states.iter().map(|s| spec.reward_at(s[s.len() - 1])).collect();
    MCEstimate::from_samples(&f, batch.config.antithetic, EstimatorKind::Terminal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CoefficientSpec;

    fn abm(mu: f64, sigma: f64, horizon: f64) -> ProblemSpec {
        ProblemSpec {
            drift: CoefficientSpec::constant(mu),
            diffusion: CoefficientSpec::constant(sigma),
            ..ProblemSpec::gbm(0.05, 0.5, 1.0, 0.1, horizon)
        }
    }

    #[test]
    fn frozen_paths_without_coefficients() {
        let spec = abm(0.0, 0.0, 1.0);
        let b = simulate_paths(&spec, 0.0, 0.7, &MCConfig::new(50, 0.01, 3)).unwrap();
        assert!(b.states.iter().flatten().all(|&x| x == 0.7));
    }

    #[test]
    fn deterministic_ode() {
        let spec = abm(1.0, 0.0, 1.5);
        let b = simulate_paths(&spec, 0.5, 0.2, &MCConfig::new(4, 1e-3, 0)).unwrap();
        for s in &b.states {
            assert!((s.last().unwrap() - 1.2).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_bits_under_both_policies() {
        let spec = ProblemSpec::gbm(0.05, 0.5, 1.0, 0.1, 1.0);
        let mc = MCConfig::new(300, 0.01, 42);
        let a = estimate_regularized(&spec, &Intensity::Constant(0.7), 0.0, 0.4, &mc).unwrap();
        let b = estimate_regularized(
            &spec,
            &Intensity::Constant(0.7),
            0.0,
            0.4,
            &mc.with_execution(Execution::Sequential),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.raw.j.mean.to_bits(), b.raw.j.mean.to_bits());
    }

    #[test]
    fn zero_intensity_never_stops() {
        let spec = abm(0.1, 0.3, 1.0);
        let batch = simulate_paths(&spec, 0.0, 0.0, &MCConfig::new(200, 0.01, 1)).unwrap();
        let s = sample_cox_stopping(&batch, &Intensity::Constant(0.0)).unwrap();
        assert!(s.paths.iter().all(|c| c.tau == 1.0 && !c.stopped_by_intensity && c.hazard == 0.0));
    }

    #[test]
    fn negative_intensity_is_rejected() {
        let spec = abm(0.0, 0.3, 1.0);
        let batch = simulate_paths(&spec, 0.0, 0.0, &MCConfig::new(2, 0.1, 1)).unwrap();
        assert!(matches!(
            sample_cox_stopping(&batch, &Intensity::Constant(-1.0)),
            Err(Error::NegativeIntensity { .. })
        ));
    }

    #[test]
    fn conditional_needs_trajectories() {
        let spec = abm(0.0, 0.3, 1.0);
        let batch = simulate_paths(&spec, 0.0, 0.0, &MCConfig::new(8, 0.1, 1)).unwrap();
        let mut s = sample_cox_stopping(&batch, &Intensity::Constant(1.0)).unwrap();
        assert!(estimate_objective(&s, &spec, EstimatorKind::Conditional).is_ok());
        s.drop_trajectories();
        assert!(matches!(
            estimate_objective(&s, &spec, EstimatorKind::Conditional),
            Err(Error::MissingHazard)
        ));
    }

    #[test]
    fn hazard_is_nondecreasing_and_tau_capped() {
        let spec = ProblemSpec::gbm(0.05, 0.5, 1.0, 0.1, 1.0);
        let batch = simulate_paths(&spec, 0.0, 0.5, &MCConfig::new(100, 0.01, 9)).unwrap();
        let field = GridField::from_fn(&Grid::new(0.0, 2.0, 40, 10).unwrap(), 1.0, |t, x| t + x * x);
        let s = sample_cox_stopping(&batch, &Intensity::Field(&field)).unwrap();
        for (c, tr) in s.paths.iter().zip(s.trajectories.as_ref().unwrap()) {
            assert!(c.tau <= 1.0 && c.tau >= 0.0);
            assert!(tr.hazard.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn switched_intensity() {
        let base = Intensity::Constant(2.0);
        let sw = Intensity::Switched {
            v: 5.0,
            until: 0.1,
            after: &base,
        };
        assert_eq!(sw.at(0.05, 0.0), 5.0);
        assert_eq!(sw.at(0.2, 0.0), 2.0);
    }

    #[test]
    fn antithetic_needs_even_paths() {
        assert!(MCConfig::new(3, 0.1, 0).with_antithetic(true).check().is_err());
        assert!(MCConfig::new(0, 0.1, 0).check().is_err());
        assert!(MCConfig::new(2, 0.0, 0).check().is_err());
    }

    #[test]
    fn antithetic_pairs_mirror_increments() {
        let spec = abm(0.0, 1.0, 1.0);
        let b = simulate_paths(&spec, 0.0, 0.0, &MCConfig::new(4, 0.1, 5).with_antithetic(true)).unwrap();
        for k in 0..b.times.len() {
            assert!((b.states[0][k] + b.states[1][k]).abs() < 1e-14);
        }
    }

    #[test]
    fn all_stop_and_all_continue_regions() {
        let spec = abm(0.0, 0.5, 1.0);
        let grid = Grid::new(-3.0, 3.0, 61, 10).unwrap();
        let mc = MCConfig::new(500, 0.01, 2);
        let stop = StopRegion::from_fn(&grid, 1.0, |_, _| true);
        let e = estimate_hitting_objective(&spec, &stop, 0.0, 0.3, &mc).unwrap();
        assert_eq!(e.first_moment.mean, 0.3);
        assert_eq!(e.j.mean, 0.3);
        let go = StopRegion::from_fn(&grid, 1.0, |_, _| false);
        let e = estimate_hitting_objective(&spec, &go, 0.0, 0.3, &mc).unwrap();
        let batch = simulate_paths(&spec, 0.0, 0.3, &mc).unwrap();
        let term = terminal_estimate(&batch, &spec);
        assert_eq!(e.first_moment.mean, term.mean);
    }

    #[test]
    fn degenerate_diffusion_has_no_local_time() {
        let spec = abm(1.0, 0.0, 1.0);
        let r = estimate_local_time_relation(&spec, &|_| 0.0, 0.0, 0.0, &[0.1], &MCConfig::new(20, 1e-3, 0)).unwrap();
        assert_eq!(r[0].local_time.mean, 0.0);
    }

    #[test]
    fn local_time_rejects_bad_eps() {
        let spec = abm(0.0, 1.0, 0.5);
        let mc = MCConfig::new(10, 1e-3, 0);
        assert!(estimate_local_time_relation(&spec, &|_| 0.0, 0.0, 0.0, &[0.0], &mc).is_err());
        assert!(estimate_local_time_relation(&spec, &|_| 0.0, 0.0, 0.0, &[0.6], &mc).is_err());
        assert!(estimate_local_time_relation(&spec, &|_| 1.0, 0.0, 0.0, &[0.1], &mc).is_err());
    }
}

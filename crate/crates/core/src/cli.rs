//! Batch front end: `mvstop <config.toml> [--output-dir DIR] [--seed N]`.
//!
//! A config has `[problem]`, `[grid]`, exactly one `[command.<name>]` table
//! and an optional `[output]` table. Fields are written as CSV (`t,x,value`),
//! reports and the run manifest as JSON.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use serde::{Deserialize, Serialize};

use crate::discrete_game::{backward_recursion, compare_to_vi, GapReport};
use crate::error::{Error, Result};
use crate::field::GridField;
use crate::gbm_benchmark::{boundary_jump_quantities, verify_elliptic_system, BoundaryJump, EllipticReport, GbmClosedForm};
use crate::hjb_regularized::{hjb_residual, solve_extended_hjb, FixedPointConfig, HJBSolution, HjbResidual};
use crate::model::{validate_problem, CoefficientSpec, Grid, ProblemSpec, ValidationOptions};
use crate::simulate::{
    estimate_hitting_objective, estimate_regularized, HittingEstimate, Intensity, MCConfig, RegularizedEstimate, StopRegion,
};
use crate::verify::{
    analytic_perturbation_regularized, interior_points, vi_boundary_perturbation, vi_interior_perturbation,
    BoundaryCertification, Certification, PerturbationResult, DEFAULT_PROBES,
};
use crate::vi_limit::{lambda_continuation, solve_vi, window_gap, VISolution};

/// Failures listed individually in a report; the rest are only counted.
const MAX_LISTED_FAILURES: usize = 100;

#[derive(Debug, Parser)]
#[command(name = "mvstop", version, about = "Mean-variance optimal stopping equilibria")]
pub struct Args {
    /// Run configuration (TOML).
    pub config: PathBuf,
    /// Overrides `output.directory`.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Overrides the Monte-Carlo master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub grid: Grid,
    pub command: Command,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: PathBuf,
    /// Write field CSVs in addition to the reports.
    pub fields: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: PathBuf::from("mvstop-out"),
            fields: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    SolveHjb(HjbCommand),
    Ladder(LadderCommand),
    SolveVi(ViCommand),
    Discrete(DiscreteCommand),
    Simulate(SimulateCommand),
    Verify(VerifyCommand),
    BenchmarkGbm(GbmCommand),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SolveHjb(_) => "solve-hjb",
            Command::Ladder(_) => "ladder",
            Command::SolveVi(_) => "solve-vi",
            Command::Discrete(_) => "discrete",
            Command::Simulate(_) => "simulate",
            Command::Verify(_) => "verify",
            Command::BenchmarkGbm(_) => "benchmark-gbm",
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HjbCommand {
    pub fixed_point: FixedPointConfig,
}

fn default_window() -> [f64; 2] {
    [0.1, 1.5]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderCommand {
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub fixed_point: FixedPointConfig,
    /// x-window of the reported gaps to the obstacle solution at t = 0.
    #[serde(default = "default_window")]
    pub window: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViCommand {
    /// Tolerance of the boundary inequality check at t = 0.
    pub tol: f64,
}

impl Default for ViCommand {
    fn default() -> Self {
        ViCommand { tol: 1e-8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteCommand {
    pub n_steps: Vec<usize>,
    #[serde(default = "default_true")]
    pub compare_to_vi: bool,
    #[serde(default = "default_window")]
    pub window: [f64; 2],
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// The equilibrium intensity of a regularized solve on the grid.
    Equilibrium,
    /// A constant intensity (`intensity` key).
    Constant,
    /// First entrance into the stop region of an obstacle solve.
    StopRegion,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateCommand {
    #[serde(default)]
    pub t0: f64,
    pub x0: f64,
    pub policy: Policy,
    #[serde(default)]
    pub intensity: Option<f64>,
    #[serde(default)]
    pub mc: MCConfig,
    #[serde(default)]
    pub fixed_point: FixedPointConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifyTarget {
    Regularized,
    Obstacle,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyCommand {
    pub target: VerifyTarget,
    /// Directory holding `V.csv`, `g.csv` and `pi.csv` of a regularized
    /// solution on the configured grid; solved afresh when absent.
    #[serde(default)]
    pub solution: Option<PathBuf>,
    #[serde(default)]
    pub probes: Option<Vec<f64>>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub fixed_point: FixedPointConfig,
}

fn default_tol() -> f64 {
    1e-8
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbmCommand {
    pub points: Vec<f64>,
}

impl Default for GbmCommand {
    fn default() -> Self {
        GbmCommand {
            points: vec![0.1, 0.25, 0.5, 1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CertificationFailed,
}

/// Process exit status: 0 success, 2 failed certification, 1 any error.
pub fn exit_code(outcome: &Result<Outcome>) -> i32 {
    match outcome {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::CertificationFailed) => 2,
        Err(_) => 1,
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a RunConfig,
    seed: Option<u64>,
    elapsed_seconds: f64,
    outcome: &'a str,
    files: Vec<String>,
}

/// Parses the config named in `args` and runs its command.
pub fn run(args: &Args) -> Result<Outcome> {
    let mut cfg = load_config(&args.config)?;
    if let Some(dir) = &args.output_dir {
        cfg.output.directory = dir.clone();
    }
    if let Some(seed) = args.seed {
        if let Command::Simulate(sim) = &mut cfg.command {
            sim.mc.master_seed = seed;
        }
    }
    run_config(&cfg)
}

pub fn run_config(cfg: &RunConfig) -> Result<Outcome> {
    cfg.grid.check()?;
    validate(cfg)?;
    let dir = &cfg.output.directory;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let start = Instant::now();
    let mut out = Artifacts {
        dir: dir.clone(),
        fields: cfg.output.fields,
        files: Vec::new(),
    };
    log::info!("running {} into {}", cfg.command.name(), dir.display());
    let outcome = match &cfg.command {
        Command::SolveHjb(c) => run_hjb(cfg, c, &mut out)?,
        Command::Ladder(c) => run_ladder(cfg, c, &mut out)?,
        Command::SolveVi(c) => run_vi(cfg, c, &mut out)?,
        Command::Discrete(c) => run_discrete(cfg, c, &mut out)?,
        Command::Simulate(c) => run_simulate(cfg, c, &mut out)?,
        Command::Verify(c) => run_verify(cfg, c, &mut out)?,
        Command::BenchmarkGbm(c) => run_gbm(cfg, c, &mut out)?,
    };
    let seed = match &cfg.command {
        Command::Simulate(s) => Some(s.mc.master_seed),
        _ => None,
    };
    let manifest = Manifest {
        command: cfg.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        seed,
        elapsed_seconds: start.elapsed().as_secs_f64(),
        outcome: match outcome {
            Outcome::Success => "success",
            Outcome::CertificationFailed => "certification-failed",
        },
        files: out.files.clone(),
    };
    out.json("manifest.json", &manifest)?;
    Ok(outcome)
}

struct Artifacts {
    dir: PathBuf,
    fields: bool,
    files: Vec<String>,
}

impl Artifacts {
    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.dir.join(name);
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn field(&mut self, name: &str, field: &GridField) -> Result<()> {
        if self.fields {
            write_field_csv(&self.dir.join(name), field)?;
            self.files.push(name.to_string());
        }
        Ok(())
    }

    fn record(&mut self, names: Vec<PathBuf>) {
        if self.fields {
            self.files.extend(names.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()));
        }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes a field as `t,x,value` rows, slice by slice. Values use the
/// shortest representation that reads back to the same bits.
pub fn write_field_csv(path: &Path, field: &GridField) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["t", "x", "value"]).map_err(|e| csv_error(path, e))?;
    for k in 0..field.n_slices() {
        let t = field.time(k).to_string();
        for (i, x) in field.grid.nodes().enumerate() {
            w.write_record([t.as_str(), &x.to_string(), &field.at(k, i).to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a `t,x,value` file written for `grid` and `horizon`.
pub fn read_field_csv(path: &Path, grid: &Grid, horizon: f64) -> Result<GridField> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?;
    if header != vec!["t", "x", "value"] {
        return Err(Error::Parse {
            path: path.display().to_string(),
            message: format!("expected header t,x,value, found {header:?}"),
        });
    }
    let mut field = GridField::zeros(grid, horizon);
    let expected = field.values.len();
    let mut n = 0usize;
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if n >= expected {
            return Err(bad_row(path, row, "more rows than the grid holds"));
        }
        let num = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| bad_row(path, row, "unreadable number"))
        };
        let (t, x, v) = (num(0)?, num(1)?, num(2)?);
        let (k, i) = (n / grid.n_x, n % grid.n_x);
        let scale = 1.0 + grid.x_max.abs().max(grid.x_min.abs()) + horizon;
        if (t - field.time(k)).abs() > 1e-12 * scale || (x - grid.x(i)).abs() > 1e-12 * scale {
            return Err(bad_row(path, row, "coordinates do not match the configured grid"));
        }
        field.values[n] = v;
        n += 1;
    }
    if n != expected {
        return Err(bad_row(path, n, "fewer rows than the grid holds"));
    }
    Ok(field)
}

fn bad_row(path: &Path, row: usize, what: &str) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        message: format!("data row {}: {what}", row + 1),
    }
}

/// Writes the free boundary as `t,c` rows, one per boundary point.
pub fn write_boundary_csv(path: &Path, field: &GridField, boundary: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["t", "c"]).map_err(|e| csv_error(path, e))?;
    for (k, points) in boundary.iter().enumerate() {
        for c in points {
            w.write_record([field.time(k).to_string(), c.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_boundary_csv(path: &Path, field: &GridField) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = vec![Vec::new(); field.n_slices()];
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let parse = |j: usize| rec.get(j).and_then(|s| s.parse::<f64>().ok());
        let (Some(t), Some(c)) = (parse(0), parse(1)) else {
            return Err(bad_row(path, row, "unreadable number"));
        };
        let k = field.nearest_slice(t);
        if (field.time(k) - t).abs() > 1e-9 * (1.0 + field.horizon) {
            return Err(bad_row(path, row, "time is not on the grid"));
        }
        out[k].push(c);
    }
    Ok(out)
}

/// `V.csv`, `g.csv`, `h.csv` and `pi.csv`.
pub fn export_hjb(sol: &HJBSolution, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for (name, f) in [("V.csv", &sol.v), ("g.csv", &sol.g), ("h.csv", &sol.h), ("pi.csv", &sol.pi)] {
        let p = dir.join(name);
        write_field_csv(&p, f)?;
        files.push(p);
    }
    Ok(files)
}

/// Rebuilds a regularized solution from exported fields. Solver diagnostics
/// are not stored; the residual is recomputed.
pub fn import_hjb(dir: &Path, spec: &ProblemSpec, grid: &Grid) -> Result<HJBSolution> {
    let read = |name: &str| read_field_csv(&dir.join(name), grid, spec.horizon);
    let v = read("V.csv")?;
    let g = read("g.csv")?;
    let pi = read("pi.csv")?;
    let h = match read("h.csv") {
        Ok(h) => h,
        Err(_) => {
            let mut h = v.clone();
            for (hv, gv) in h.values.iter_mut().zip(&g.values) {
                *hv -= 0.5 * spec.gamma * gv * gv;
            }
            h
        }
    };
    let mut sol = HJBSolution {
        v,
        g,
        h,
        pi,
        lambda: spec.lambda,
        fixed_point_iterations: 0,
        converged: false,
        gap_history: Vec::new(),
        residual: HjbResidual::default(),
        exponent_clip_hits: 0,
    };
    sol.residual = hjb_residual(&sol, spec);
    Ok(sol)
}

/// `V.csv`, `g.csv`, `h.csv`, `residual.csv`, `stop.csv` (1 = stop) and `boundary.csv`.
pub fn export_vi(sol: &VISolution, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let stop = GridField::from_values(
        &sol.v.grid,
        sol.v.horizon,
        sol.stop_mask.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect(),
    )?;
    for (name, f) in [
        ("V.csv", &sol.v),
        ("g.csv", &sol.g),
        ("h.csv", &sol.h),
        ("residual.csv", &sol.residual),
        ("stop.csv", &stop),
    ] {
        let p = dir.join(name);
        write_field_csv(&p, f)?;
        files.push(p);
    }
    let p = dir.join("boundary.csv");
    write_boundary_csv(&p, &sol.v, &sol.boundary)?;
    files.push(p);
    Ok(files)
}

pub fn import_vi(dir: &Path, spec: &ProblemSpec, grid: &Grid) -> Result<VISolution> {
    let read = |name: &str| read_field_csv(&dir.join(name), grid, spec.horizon);
    let v = read("V.csv")?;
    let stop = read("stop.csv")?;
    let boundary = read_boundary_csv(&dir.join("boundary.csv"), &v)?;
    Ok(VISolution {
        g: read("g.csv")?,
        h: read("h.csv")?,
        residual: read("residual.csv")?,
        stop_mask: stop.values.iter().map(|&s| s != 0.0).collect(),
        boundary,
        kappa: spec.kappa(),
        unsettled_slices: Vec::new(),
        max_mask_iterations: 0,
        v,
    })
}

#[derive(Serialize)]
struct HjbReport<'a> {
    lambda: f64,
    converged: bool,
    fixed_point_iterations: usize,
    fixed_point_tol: f64,
    gap_history: &'a [f64],
    residual: HjbResidual,
    exponent_clip_hits: usize,
}

fn hjb_report<'a>(sol: &'a HJBSolution, cfg: &FixedPointConfig) -> HjbReport<'a> {
    HjbReport {
        lambda: sol.lambda,
        converged: sol.converged,
        fixed_point_iterations: sol.fixed_point_iterations,
        fixed_point_tol: cfg.tol,
        gap_history: &sol.gap_history,
        residual: sol.residual,
        exponent_clip_hits: sol.exponent_clip_hits,
    }
}

fn run_hjb(cfg: &RunConfig, c: &HjbCommand, out: &mut Artifacts) -> Result<Outcome> {
    let sol = solve_extended_hjb(&cfg.problem, &cfg.grid, &c.fixed_point)?;
    if !sol.converged {
        log::warn!("fixed point did not reach tolerance {}", c.fixed_point.tol);
    }
    if out.fields {
        let files = export_hjb(&sol, &out.dir)?;
        out.record(files);
    }
    out.json("hjb_report.json", &hjb_report(&sol, &c.fixed_point))?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct LadderRung {
    lambda: f64,
    converged: bool,
    fixed_point_iterations: usize,
    /// Sup gap to the previous rung over the lattice.
    gap_to_previous: Option<f64>,
    /// Sup gap of V to the obstacle solution over the window at t = 0.
    window_gap_to_obstacle: f64,
}

fn run_ladder(cfg: &RunConfig, c: &LadderCommand, out: &mut Artifacts) -> Result<Outcome> {
    let ladder = lambda_continuation(&cfg.problem, &cfg.grid, &c.lambdas, &c.fixed_point)?;
    let vi = solve_vi(&cfg.problem, &cfg.grid)?;
    let rungs: Vec<LadderRung> = ladder
        .solutions
        .iter()
        .enumerate()
        .map(|(i, s)| LadderRung {
            lambda: ladder.lambdas[i],
            converged: s.converged,
            fixed_point_iterations: s.fixed_point_iterations,
            gap_to_previous: i.checked_sub(1).map(|j| ladder.gaps[j]),
            window_gap_to_obstacle: window_gap(&s.v, &vi.v, c.window[0], c.window[1], false),
        })
        .collect();
    if let Some(last) = ladder.solutions.last() {
        if out.fields {
            let files = export_hjb(last, &out.dir)?;
            out.record(files);
        }
    }
    out.json("ladder_report.json", &rungs)?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct ViReport {
    kappa: f64,
    boundary_t0: Vec<f64>,
    mask_converged: bool,
    unsettled_slices: usize,
    max_mask_iterations: usize,
    boundary_check_t0: Option<BoundaryCertification>,
    boundary_check_error: Option<String>,
}

fn run_vi(cfg: &RunConfig, c: &ViCommand, out: &mut Artifacts) -> Result<Outcome> {
    let sol = solve_vi(&cfg.problem, &cfg.grid)?;
    if out.fields {
        let files = export_vi(&sol, &out.dir)?;
        out.record(files);
    }
    let (check, err) = match vi_boundary_perturbation(&sol, &cfg.problem, 0, c.tol) {
        Ok(b) => (Some(b), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let report = ViReport {
        kappa: sol.kappa,
        boundary_t0: sol.boundary[0].clone(),
        mask_converged: sol.mask_converged(),
        unsettled_slices: sol.unsettled_slices.len(),
        max_mask_iterations: sol.max_mask_iterations,
        boundary_check_t0: check,
        boundary_check_error: err,
    };
    out.json("vi_report.json", &report)?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct DiscreteRun {
    n_steps: usize,
    v_form_discrepancy: f64,
    gap: Option<GapReport>,
}

fn run_discrete(cfg: &RunConfig, c: &DiscreteCommand, out: &mut Artifacts) -> Result<Outcome> {
    if c.n_steps.is_empty() {
        return Err(Error::Config("discrete: n_steps must not be empty".into()));
    }
    let vi = if c.compare_to_vi {
        Some(solve_vi(&cfg.problem, &cfg.grid)?)
    } else {
        None
    };
    let mut runs = Vec::with_capacity(c.n_steps.len());
    for &n in &c.n_steps {
        let d = backward_recursion(&cfg.problem, &cfg.grid, n)?;
        let gap = match &vi {
            Some(vi) => Some(compare_to_vi(&d, vi, &cfg.problem, c.window[0], c.window[1])?),
            None => None,
        };
        out.field(&format!("V_N{n}.csv"), &d.v)?;
        out.field(&format!("g_N{n}.csv"), &d.g)?;
        runs.push(DiscreteRun {
            n_steps: n,
            v_form_discrepancy: d.v_form_discrepancy,
            gap,
        });
    }
    out.json("discrete_report.json", &runs)?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
#[serde(untagged)]
#[allow(clippy::large_enum_variant)]
enum SimulationReport {
    Regularized {
        t0: f64,
        x0: f64,
        /// PDE values at the start point when an equilibrium solve was used.
        pde_v: Option<f64>,
        pde_g: Option<f64>,
        estimate: RegularizedEstimate,
    },
    Hitting {
        t0: f64,
        x0: f64,
        pde_v: f64,
        pde_g: f64,
        estimate: HittingEstimate,
    },
}

fn run_simulate(cfg: &RunConfig, c: &SimulateCommand, out: &mut Artifacts) -> Result<Outcome> {
    let spec = &cfg.problem;
    let report = match c.policy {
        Policy::Constant => {
            let v = c
                .intensity
                .ok_or_else(|| Error::Config("simulate: policy \"constant\" needs `intensity`".into()))?;
            SimulationReport::Regularized {
                t0: c.t0,
                x0: c.x0,
                pde_v: None,
                pde_g: None,
                estimate: estimate_regularized(spec, &Intensity::Constant(v), c.t0, c.x0, &c.mc)?,
            }
        }
        Policy::Equilibrium => {
            let sol = solve_extended_hjb(spec, &cfg.grid, &c.fixed_point)?;
            SimulationReport::Regularized {
                t0: c.t0,
                x0: c.x0,
                pde_v: Some(sol.v.interpolate(c.t0, c.x0)),
                pde_g: Some(sol.g.interpolate(c.t0, c.x0)),
                estimate: estimate_regularized(spec, &Intensity::Field(&sol.pi), c.t0, c.x0, &c.mc)?,
            }
        }
        Policy::StopRegion => {
            let sol = solve_vi(spec, &cfg.grid)?;
            SimulationReport::Hitting {
                t0: c.t0,
                x0: c.x0,
                pde_v: sol.v.interpolate(c.t0, c.x0),
                pde_g: sol.g.interpolate(c.t0, c.x0),
                estimate: estimate_hitting_objective(spec, &StopRegion::from_vi(&sol), c.t0, c.x0, &c.mc)?,
            }
        }
    };
    out.json("simulation_report.json", &report)?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct CertificationReport {
    target: VerifyTarget,
    tol: f64,
    pass: bool,
    checked: usize,
    failed: usize,
    worst: Option<PerturbationResult>,
    /// The first failures, at most `MAX_LISTED_FAILURES`.
    failures: Vec<PerturbationResult>,
    boundary: Option<BoundaryCertification>,
}

fn certification_report(target: VerifyTarget, c: Certification, boundary: Option<BoundaryCertification>) -> CertificationReport {
    let boundary_ok = boundary.as_ref().is_none_or(|b| b.pass());
    CertificationReport {
        target,
        tol: c.tol,
        pass: c.pass() && boundary_ok,
        checked: c.checked,
        failed: c.failures.len(),
        worst: c.worst,
        failures: c.failures.into_iter().take(MAX_LISTED_FAILURES).collect(),
        boundary,
    }
}

fn run_verify(cfg: &RunConfig, c: &VerifyCommand, out: &mut Artifacts) -> Result<Outcome> {
    let spec = &cfg.problem;
    let probes = c.probes.clone().unwrap_or_else(|| DEFAULT_PROBES.to_vec());
    let report = match c.target {
        VerifyTarget::Regularized => {
            let sol = match &c.solution {
                Some(dir) => import_hjb(dir, spec, &cfg.grid)?,
                None => solve_extended_hjb(spec, &cfg.grid, &c.fixed_point)?,
            };
            let cert = analytic_perturbation_regularized(&sol, spec, &probes, c.tol)?;
            certification_report(c.target, cert, None)
        }
        VerifyTarget::Obstacle => {
            let sol = match &c.solution {
                Some(dir) => import_vi(dir, spec, &cfg.grid)?,
                None => solve_vi(spec, &cfg.grid)?,
            };
            let points = interior_points(&sol, 0, 2);
            let results = vi_interior_perturbation(&sol, spec, &points, &probes, c.tol)?;
            let mut worst: Option<PerturbationResult> = None;
            for r in &results {
                if worst.is_none_or(|w| r.gain > w.gain) {
                    worst = Some(*r);
                }
            }
            let cert = Certification {
                checked: results.len(),
                tol: c.tol,
                worst,
                failures: results.into_iter().filter(|r| !r.pass).collect(),
            };
            let boundary = vi_boundary_perturbation(&sol, spec, 0, c.tol)?;
            certification_report(c.target, cert, Some(boundary))
        }
    };
    let pass = report.pass;
    if !pass {
        log::warn!("certification failed at {} of {} checks", report.failed, report.checked);
    }
    out.json("certification_report.json", &report)?;
    Ok(if pass { Outcome::Success } else { Outcome::CertificationFailed })
}

#[derive(Serialize)]
struct GbmPoint {
    x: f64,
    value: f64,
    first_moment: f64,
}

#[derive(Serialize)]
struct GbmReport {
    mu: f64,
    sigma_sq: f64,
    gamma: f64,
    rho: f64,
    threshold: f64,
    points: Vec<GbmPoint>,
    boundary: BoundaryJump,
    elliptic: EllipticReport,
    elliptic_tol: f64,
}

fn run_gbm(cfg: &RunConfig, c: &GbmCommand, out: &mut Artifacts) -> Result<Outcome> {
    let spec = &cfg.problem;
    let (CoefficientSpec::GbmStyle { c: mu }, CoefficientSpec::GbmStyle { c: sigma }) = (&spec.drift, &spec.diffusion) else {
        return Err(Error::Config("benchmark-gbm needs gbm-style drift and diffusion".into()));
    };
    if spec.reward != CoefficientSpec::affine(0.0, 1.0) {
        return Err(Error::Config("benchmark-gbm needs the reward f(x) = x".into()));
    }
    let cf = GbmClosedForm::new(*mu, sigma * sigma, spec.gamma)?;
    let points = c
        .points
        .iter()
        .map(|&x| {
            let (value, first_moment) = cf.eval(x)?;
            Ok(GbmPoint { x, value, first_moment })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = cfg.grid.nodes().filter(|&x| x > 0.0).collect();
    let report = GbmReport {
        mu: cf.mu,
        sigma_sq: cf.sigma_sq,
        gamma: cf.gamma,
        rho: cf.rho,
        threshold: cf.threshold,
        points,
        boundary: boundary_jump_quantities(&cf),
        elliptic: verify_elliptic_system(&cf, &xs)?,
        elliptic_tol: 1e-10,
    };
    out.json("benchmark_report.json", &report)?;
    Ok(Outcome::Success)
}

/// Rejects configs whose problem violates the solver assumptions before any work starts.
pub fn validate(cfg: &RunConfig) -> Result<()> {
    let uses_lambda = matches!(
        cfg.command,
        Command::SolveHjb(_) | Command::Ladder(_) | Command::Verify(VerifyCommand { target: VerifyTarget::Regularized, .. })
    ) || matches!(&cfg.command, Command::Simulate(s) if s.policy == Policy::Equilibrium);
    let opts = ValidationOptions {
        uses_lambda,
        ..Default::default()
    };
    validate_problem(&cfg.problem, &cfg.grid, opts).into_result()
}

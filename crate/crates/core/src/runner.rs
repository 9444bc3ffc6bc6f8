//! Run configuration, scenario library and the four commands behind the
//! `cvs-mhd` binary.
//!
//! Configuration files are flat `key = value` text with dotted section
//! names; `#` starts a comment. A `scenario` key selects the base that the
//! remaining keys override.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::approx_solution::{approximate_solution, ApproxSolution, ConstructionParams, PerturbationSpec};
use crate::eos_state::{Eos, Grid, MhdState, Pair, State, NCOMP};
use crate::error::{CvsError, Result};
use crate::invariants::{self, CheckResult};
use crate::linearized_solver::{energy_report, ManufacturedCase, SolveOptions, PLANAR_MINUS, PLANAR_PLUS};
use crate::mhd_system::{lambda_pair, rh_residual};
use crate::nash_moser::{reference, run_iteration, IterationConfig, IterationRun, StepRecord};

pub const SCENARIOS: [&str; 3] = ["planar", "perturbed-2d", "perturbed-3d"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridBlock {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub x1_max: f64,
    pub l2: f64,
    pub l3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeBlock {
    pub t_final: f64,
    /// `dt <= cfl * min(dx1, dx2, dx3)`.
    pub cfl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationBlock {
    pub amplitude: f64,
    pub max_mode: usize,
    pub decay: f64,
    pub width: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToleranceBlock {
    /// Target of `residual(n_max) / residual(0)`.
    pub residual_ratio: f64,
    /// Allowed distance of the fitted increment exponent from its reference.
    pub exponent_band: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputBlock {
    pub directory: PathBuf,
    /// Subset of `csv`, `json`, `dat`.
    pub formats: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub scenario: Option<String>,
    pub grid: GridBlock,
    pub time: TimeBlock,
    pub gamma: f64,
    pub background: Pair<State>,
    pub perturbation: PerturbationBlock,
    pub approx_order: usize,
    pub iteration: IterationConfig,
    pub tolerance: ToleranceBlock,
    pub output: OutputBlock,
}

impl serde::Serialize for Pair<State> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Pair", 2)?;
        st.serialize_field("plus", &self.plus)?;
        st.serialize_field("minus", &self.minus)?;
        st.end()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::scenario("perturbed-2d").expect("built-in scenario")
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|x| x.trim())
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| CvsError::Config(format!("{key}: cannot parse list entry '{x}'"))))
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CvsError::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_state(key: &str, v: &str) -> Result<State> {
    let xs: Vec<f64> = parse_list(key, v)?;
    xs.try_into()
        .map_err(|x: Vec<f64>| CvsError::Config(format!("{key}: expected {NCOMP} components, got {}", x.len())))
}

impl RunConfig {
    /// Built-in scenario by name.
    pub fn scenario(name: &str) -> Result<Self> {
        let base = Self {
            scenario: Some(name.to_string()),
            grid: GridBlock {
                n1: 64,
                n2: 32,
                n3: 1,
                x1_max: 2.0,
                l2: 2.0 * std::f64::consts::PI,
                l3: 1.0,
            },
            time: TimeBlock { t_final: 0.5, cfl: 0.15 },
            gamma: 1.4,
            background: Pair::new(PLANAR_PLUS, PLANAR_MINUS),
            perturbation: PerturbationBlock {
                amplitude: 1e-3,
                max_mode: 4,
                decay: 8.5,
                width: 0.5,
                seed: 7,
            },
            approx_order: 1,
            iteration: IterationConfig::default(),
            tolerance: ToleranceBlock {
                residual_ratio: 0.1,
                exponent_band: 1.0,
            },
            output: OutputBlock {
                directory: PathBuf::from("out"),
                formats: vec!["csv".into(), "json".into(), "dat".into()],
            },
        };
        match name {
            "perturbed-2d" => Ok(base),
            "planar" => {
                let mut c = base;
                c.grid.n1 = 32;
                c.grid.n2 = 16;
                c.perturbation.amplitude = 0.0;
                c.iteration.n_max = 5;
                Ok(c)
            }
            "perturbed-3d" => {
                let mut c = base;
                c.grid.n1 = 24;
                c.grid.n2 = 12;
                c.grid.n3 = 12;
                c.grid.l3 = 2.0 * std::f64::consts::PI;
                c.perturbation.max_mode = 3;
                c.iteration.n_max = 10;
                Ok(c)
            }
            other => Err(CvsError::Config(format!(
                "unknown scenario '{other}' (known: {})",
                SCENARIOS.join(", ")
            ))),
        }
    }

    /// Parses the flat format and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CvsError::Config(format!("line {}: expected key = value", no + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match entries.iter().find(|(k, _)| k == "scenario") {
            Some((_, name)) => Self::scenario(name)?,
            None => Self::scenario("perturbed-2d")?,
        };
        if !entries.iter().any(|(k, _)| k == "scenario") {
            cfg.scenario = None;
        }
        let mut seen = BTreeMap::new();
        for (k, v) in &entries {
            if seen.insert(k.clone(), ()).is_some() {
                return Err(CvsError::Config(format!("duplicate key '{k}'")));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CvsError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let it = &mut self.iteration;
        match key {
            "scenario" => {}
            "grid.n1" => self.grid.n1 = parse_one(key, v)?,
            "grid.n2" => self.grid.n2 = parse_one(key, v)?,
            "grid.n3" => self.grid.n3 = parse_one(key, v)?,
            "grid.x1_max" => self.grid.x1_max = parse_one(key, v)?,
            "grid.l2" => self.grid.l2 = parse_one(key, v)?,
            "grid.l3" => self.grid.l3 = parse_one(key, v)?,
            "time.t_final" => self.time.t_final = parse_one(key, v)?,
            "time.cfl" => self.time.cfl = parse_one(key, v)?,
            "eos.gamma" => self.gamma = parse_one(key, v)?,
            "background.plus" => self.background.plus = parse_state(key, v)?,
            "background.minus" => self.background.minus = parse_state(key, v)?,
            "perturbation.amplitude" => self.perturbation.amplitude = parse_one(key, v)?,
            "perturbation.max_mode" => self.perturbation.max_mode = parse_one(key, v)?,
            "perturbation.decay" => self.perturbation.decay = parse_one(key, v)?,
            "perturbation.width" => self.perturbation.width = parse_one(key, v)?,
            "perturbation.seed" => self.perturbation.seed = parse_one(key, v)?,
            "approx.order" => self.approx_order = parse_one(key, v)?,
            "iteration.theta0" => it.theta0 = parse_one(key, v)?,
            "iteration.n_max" => it.n_max = parse_one(key, v)?,
            "iteration.s_list" => it.s_list = parse_list(key, v)?,
            "iteration.s0" => it.s0 = parse_one(key, v)?,
            "iteration.alpha" => it.alpha = parse_one(key, v)?,
            "iteration.s1" => it.s1 = parse_one(key, v)?,
            "iteration.mu" => it.mu = parse_one(key, v)?,
            "iteration.divergence_window" => it.divergence_window = parse_one(key, v)?,
            "iteration.detailed_errors" => it.detailed_errors = parse_one(key, v)?,
            "iteration.cfl_limit" => it.solve.cfl_limit = parse_one(key, v)?,
            "tolerance.residual_ratio" => self.tolerance.residual_ratio = parse_one(key, v)?,
            "tolerance.exponent_band" => self.tolerance.exponent_band = parse_one(key, v)?,
            "output.directory" => self.output.directory = PathBuf::from(v),
            "output.formats" => self.output.formats = parse_list(key, v)?,
            other => return Err(CvsError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Flat text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let it = &self.iteration;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(name) = &self.scenario {
            kv("scenario", name.clone());
        }
        kv("grid.n1", self.grid.n1.to_string());
        kv("grid.n2", self.grid.n2.to_string());
        kv("grid.n3", self.grid.n3.to_string());
        kv("grid.x1_max", self.grid.x1_max.to_string());
        kv("grid.l2", self.grid.l2.to_string());
        kv("grid.l3", self.grid.l3.to_string());
        kv("time.t_final", self.time.t_final.to_string());
        kv("time.cfl", self.time.cfl.to_string());
        kv("eos.gamma", self.gamma.to_string());
        kv("background.plus", join(&self.background.plus));
        kv("background.minus", join(&self.background.minus));
        kv("perturbation.amplitude", self.perturbation.amplitude.to_string());
        kv("perturbation.max_mode", self.perturbation.max_mode.to_string());
        kv("perturbation.decay", self.perturbation.decay.to_string());
        kv("perturbation.width", self.perturbation.width.to_string());
        kv("perturbation.seed", self.perturbation.seed.to_string());
        kv("approx.order", self.approx_order.to_string());
        kv("iteration.theta0", it.theta0.to_string());
        kv("iteration.n_max", it.n_max.to_string());
        kv("iteration.s_list", join(&it.s_list));
        kv("iteration.s0", it.s0.to_string());
        kv("iteration.alpha", it.alpha.to_string());
        kv("iteration.s1", it.s1.to_string());
        kv("iteration.mu", it.mu.to_string());
        kv("iteration.divergence_window", it.divergence_window.to_string());
        kv("iteration.detailed_errors", it.detailed_errors.to_string());
        kv("iteration.cfl_limit", it.solve.cfl_limit.to_string());
        kv("tolerance.residual_ratio", self.tolerance.residual_ratio.to_string());
        kv("tolerance.exponent_band", self.tolerance.exponent_band.to_string());
        kv("output.directory", self.output.directory.display().to_string());
        kv("output.formats", self.output.formats.join(", "));
        s
    }

    pub fn eos(&self) -> Result<Eos> {
        Eos::new(self.gamma)
    }

    pub fn build_grid(&self) -> Result<Grid> {
        let g = &self.grid;
        let probe = Grid::new(g.n1, g.n2, g.n3, g.x1_max, g.l2, g.l3, self.time.t_final, 1.0)?;
        let mut h = probe.dx1().min(probe.dx2());
        if g.n3 > 1 {
            h = h.min(probe.dx3());
        }
        Grid::new(g.n1, g.n2, g.n3, g.x1_max, g.l2, g.l3, self.time.t_final, self.time.cfl * h)
    }

    pub fn perturbation_spec(&self) -> PerturbationSpec {
        let p = &self.perturbation;
        PerturbationSpec {
            amplitude: p.amplitude,
            max_mode: p.max_mode,
            decay: p.decay,
            width: p.width,
            seed: p.seed,
        }
    }

    /// Load-time checks: admissible closure and states, a planar contact
    /// discontinuity, and nonparallel tangential fields.
    pub fn validate(&self) -> Result<()> {
        let eos = self.eos()?;
        let up = MhdState::new(&eos, self.background.plus)?;
        let um = MhdState::new(&eos, self.background.minus)?;
        let r = rh_residual(&eos, &up, &um, 0.0, 0.0, 0.0);
        let scale = 1.0 + up.q().abs() + um.q().abs();
        if let Some(i) = r.contact.iter().position(|c| c.abs() > 1e-12 * scale) {
            let what = [
                "plus normal velocity",
                "minus normal velocity",
                "plus normal field",
                "minus normal field",
                "total pressure jump",
            ][i];
            return Err(CvsError::Config(format!(
                "background is not a planar current-vortex sheet: {what} is {:.3e}, must vanish",
                r.contact[i]
            )));
        }
        lambda_pair(&up, &um).map_err(|e| {
            CvsError::Config(format!(
                "background violates the nonparallel tangential field condition ({e})"
            ))
        })?;
        if !(self.time.cfl > 0.0) {
            return Err(CvsError::Config("time.cfl must be positive".into()));
        }
        if self.approx_order > crate::approx_solution::MAX_ORDER {
            return Err(CvsError::Config(format!(
                "approx.order must be <= {}",
                crate::approx_solution::MAX_ORDER
            )));
        }
        if !(self.perturbation.amplitude >= 0.0 && self.perturbation.width > 0.0) {
            return Err(CvsError::Config("perturbation amplitude must be >= 0 and width > 0".into()));
        }
        for f in &self.output.formats {
            if !["csv", "json", "dat"].contains(&f.as_str()) {
                return Err(CvsError::Config(format!("unknown output format '{f}'")));
            }
        }
        self.iteration.validate()?;
        self.build_grid()?;
        Ok(())
    }

    fn wants(&self, format: &str) -> bool {
        self.output.formats.iter().any(|f| f == format)
    }
}

/// Approximate solution for the configured grid and perturbation.
pub fn build_approx(cfg: &RunConfig) -> Result<ApproxSolution> {
    let eos = cfg.eos()?;
    let g = cfg.build_grid()?;
    let (u0, psi0) = cfg.perturbation_spec().initial_data(&g, &cfg.background);
    approximate_solution(
        &eos,
        &g,
        cfg.background.clone(),
        u0,
        psi0,
        cfg.approx_order,
        &ConstructionParams::for_grid(&g),
    )
}

/// Reduced 2D copy of `cfg` for the bookkeeping check.
pub fn bookkeeping_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.grid.n1 = 32;
    c.grid.n2 = 16;
    c.grid.n3 = 1;
    c.grid.l3 = 1.0;
    if c.perturbation.amplitude == 0.0 {
        c.perturbation.amplitude = 1e-3;
    }
    c
}

/// One row of the per-iteration metric table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub n: usize,
    pub theta: f64,
    pub delta: f64,
    /// `(column, value)` in header order.
    pub columns: Vec<(String, f64)>,
    pub wall_time: f64,
}

const NORM_COLUMNS: [&str; 9] = [
    "dv",
    "dphi",
    "dphib",
    "residual",
    "boundary_residual",
    "e",
    "e_bar",
    "e_tilde",
    "modified_gap",
];

impl MetricRecord {
    pub fn from_step(r: &StepRecord, s_list: &[usize]) -> Result<Self> {
        let tables = [
            &r.dv_norm,
            &r.dphi_norm,
            &r.dphib_norm,
            &r.residual,
            &r.boundary_residual,
            &r.e_norm,
            &r.e_bar_norm,
            &r.e_tilde_norm,
            &r.modified_gap,
        ];
        let mut columns = Vec::new();
        for (name, t) in NORM_COLUMNS.iter().zip(tables) {
            for (s, v) in s_list.iter().zip(t.iter()) {
                columns.push((format!("{name}_s{s}"), *v));
            }
        }
        for (name, v) in [
            ("modified_constraint", r.modified_constraint),
            ("telescoping_f", r.telescoping_f),
            ("telescoping_g", r.telescoping_g),
            ("telescoping_h", r.telescoping_h),
            ("e_bar3_max", r.e_bar3_max),
            ("e4_commutator", r.e4_commutator),
            ("trace_gap", r.trace_gap),
        ] {
            columns.push((name.to_string(), v));
        }
        let rec = Self {
            n: r.n,
            theta: r.theta,
            delta: r.delta,
            columns,
            wall_time: r.wall_time,
        };
        if let Some((k, _)) = rec.columns.iter().find(|(_, v)| !v.is_finite()) {
            return Err(CvsError::Diverged {
                step: r.n,
                reason: format!("non-finite metric {k}"),
            });
        }
        Ok(rec)
    }
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let p = dir.join(name);
    fs::write(&p, body)?;
    Ok(p)
}

/// Deterministic metric table; wall time goes to a separate file.
pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut w = csv::Writer::from_writer(vec![]);
    if let Some(first) = records.first() {
        let mut head = vec!["n".to_string(), "theta".into(), "delta".into()];
        head.extend(first.columns.iter().map(|(k, _)| k.clone()));
        w.write_record(&head).expect("in-memory write");
    }
    for r in records {
        let mut row = vec![r.n.to_string(), format!("{:e}", r.theta), format!("{:e}", r.delta)];
        row.extend(r.columns.iter().map(|(_, v)| format!("{v:e}")));
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

/// Result of `cmd_iterate`.
#[derive(Debug, Clone)]
pub struct IterateOutcome {
    pub run: IterationRun,
    pub records: Vec<MetricRecord>,
    pub seconds: f64,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
struct FitSummary {
    quantity: String,
    s: usize,
    slope: f64,
    reference: f64,
    points: usize,
}

#[derive(Debug, Clone, Serialize)]
struct ReferenceRow {
    s: usize,
    increment: f64,
    modified_state: f64,
    volume_error: f64,
    front_error: f64,
    boundary_error: f64,
    accumulated: f64,
}

#[derive(Debug, Clone, Serialize)]
struct Summary<'a> {
    scenario: Option<&'a str>,
    grid: [usize; 3],
    steps: usize,
    initial_residual: Vec<f64>,
    final_residual: f64,
    residual_ratio: f64,
    converged: bool,
    residual_slope: Option<f64>,
    increment_slope: Option<f64>,
    increment_reference: f64,
    within_band: bool,
    aborted: Option<&'a str>,
    fits: Vec<FitSummary>,
    references: Vec<ReferenceRow>,
}

fn reference_rows(cfg: &IterationConfig) -> Vec<ReferenceRow> {
    let (s0, a) = (cfg.s0 as f64, cfg.alpha as f64);
    cfg.s_list
        .iter()
        .map(|&s| {
            let sf = s as f64;
            ReferenceRow {
                s,
                increment: reference::increment(sf, a),
                modified_state: reference::modified_state(sf, a),
                volume_error: reference::l1(sf, s0, a),
                front_error: reference::l2(sf, s0, a),
                boundary_error: reference::l3(sf, s0, a),
                accumulated: (sf - a).max(0.0),
            }
        })
        .collect()
}

/// Runs the iteration and writes metrics, timing, summary and plot data.
pub fn cmd_iterate(cfg: &RunConfig, out: Option<&Path>, quiet: bool) -> Result<IterateOutcome> {
    let start = Instant::now();
    let approx = build_approx(cfg)?;
    if !quiet {
        eprintln!(
            "approximate solution ready ({:.1}s, {} time levels)",
            start.elapsed().as_secs_f64(),
            approx.grid().nt + 1
        );
    }
    let s_list = cfg.iteration.s_list.clone();
    let i0 = s_list.iter().position(|&s| s == cfg.iteration.s0).unwrap_or(0);
    let run = run_iteration(&approx, &cfg.iteration, |r| {
        if !quiet {
            eprintln!(
                "n {:>2}  theta {:.4}  |dV|_s0 {:.3e}  residual_s0 {:.3e}  {:.1}s",
                r.n, r.theta, r.dv_norm[i0], r.residual[i0], r.wall_time
            );
        }
    })?;
    let records: Vec<MetricRecord> = run
        .state
        .history
        .iter()
        .map(|r| MetricRecord::from_step(r, &s_list))
        .collect::<Result<_>>()?;
    let seconds = start.elapsed().as_secs_f64();
    let mut files = vec![];
    if let Some(dir) = out {
        files = write_iteration_outputs(cfg, dir, &run, &records)?;
    }
    Ok(IterateOutcome {
        run,
        records,
        seconds,
        files,
    })
}

fn write_iteration_outputs(cfg: &RunConfig, dir: &Path, run: &IterationRun, records: &[MetricRecord]) -> Result<Vec<PathBuf>> {
    let mut files = vec![];
    let it = &cfg.iteration;
    if cfg.wants("csv") {
        files.push(write_file(dir, "metrics.csv", &metrics_csv(records))?);
        let mut t = String::from("n,wall_time\n");
        for r in records {
            let _ = writeln!(t, "{},{:.6}", r.n, r.wall_time);
        }
        files.push(write_file(dir, "timing.csv", &t)?);
    }
    if cfg.wants("json") {
        let rep = &run.report;
        let fits = if records.len() >= 2 {
            fit_table(records, it)?
        } else {
            vec![]
        };
        let summary = Summary {
            scenario: cfg.scenario.as_deref(),
            grid: [cfg.grid.n1, cfg.grid.n2, cfg.grid.n3],
            steps: records.len(),
            initial_residual: run.initial_residual.clone(),
            final_residual: rep.final_residual,
            residual_ratio: rep.residual_ratio,
            converged: rep.converged,
            residual_slope: rep.residual_fit.as_ref().map(|f| f.slope),
            increment_slope: rep.increment_fit.as_ref().map(|f| f.slope),
            increment_reference: reference::increment(it.s0 as f64, it.alpha as f64),
            within_band: rep.within_band,
            aborted: rep.aborted.as_deref(),
            fits: fits
                .into_iter()
                .map(|f| FitSummary {
                    quantity: f.quantity,
                    s: f.s,
                    slope: f.slope,
                    reference: f.reference,
                    points: f.points,
                })
                .collect(),
            references: reference_rows(it),
        };
        let body = serde_json::to_string_pretty(&summary).map_err(|e| CvsError::Io(e.to_string()))?;
        files.push(write_file(dir, "summary.json", &(body + "\n"))?);
        files.push(write_file(dir, "config.txt", &cfg.to_text())?);
    }
    if cfg.wants("dat") {
        let s0 = it.s0;
        let col = |name: &str| format!("{name}_s{s0}");
        let mut res = format!("# theta_(n+1) residual_s{s0}\n");
        let mut inc = format!("# theta_n dv_s{s0}/delta_n\n");
        for r in records {
            let get = |k: &str| r.columns.iter().find(|(c, _)| c == k).map_or(f64::NAN, |c| c.1);
            let _ = writeln!(res, "{:e} {:e}", r.theta + r.delta, get(&col("residual")));
            let _ = writeln!(inc, "{:e} {:e}", r.theta, get(&col("dv")) / r.delta);
        }
        files.push(write_file(dir, "residual_vs_theta.dat", &res)?);
        files.push(write_file(dir, "increment_vs_theta.dat", &inc)?);
    }
    Ok(files)
}

/// One fitted exponent from a metric table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitRow {
    pub quantity: String,
    pub s: usize,
    pub slope: f64,
    pub reference: f64,
    pub points: usize,
}

/// Parsed metric table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = rd
            .headers()
            .map_err(|e| CvsError::Config(format!("metrics header: {e}")))?
            .iter()
            .map(|s| s.to_string())
            .collect();
        for need in ["n", "theta", "delta"] {
            if !header.iter().any(|h| h == need) {
                return Err(CvsError::Config(format!("metrics file lacks column '{need}'")));
            }
        }
        let mut rows = vec![];
        for (i, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| CvsError::Config(format!("metrics row {}: {e}", i + 1)))?;
            if rec.len() != header.len() {
                return Err(CvsError::Config(format!("metrics row {} has {} fields", i + 1, rec.len())));
            }
            let vals = rec
                .iter()
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| CvsError::Config(format!("metrics row {}: {e}", i + 1)))?;
            rows.push(vals);
        }
        Ok(Self { header, rows })
    }

    fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

fn records_to_table(records: &[MetricRecord]) -> Result<MetricTable> {
    MetricTable::parse(&metrics_csv(records))
}

fn fit_table(records: &[MetricRecord], cfg: &IterationConfig) -> Result<Vec<FitRow>> {
    fit_metrics(&records_to_table(records)?, cfg)
}

/// Least-squares exponents of every `<quantity>_s<s>` column against
/// `theta_n`. Increment-type quantities are divided by `Delta_n` first.
pub fn fit_metrics(table: &MetricTable, cfg: &IterationConfig) -> Result<Vec<FitRow>> {
    if table.rows.len() < 2 {
        return Err(CvsError::Config(format!(
            "fit refused: {} metric row(s), at least two are needed for a regression",
            table.rows.len()
        )));
    }
    let theta = table.column("theta").expect("checked");
    let delta = table.column("delta").expect("checked");
    let (s0, a) = (cfg.s0 as f64, cfg.alpha as f64);
    let mut out = vec![];
    for h in &table.header {
        let Some((q, s)) = h.rsplit_once("_s").and_then(|(q, s)| s.parse::<usize>().ok().map(|s| (q, s))) else {
            continue;
        };
        let sf = s as f64;
        let (per_delta, reference) = match q {
            "dv" | "dphi" | "residual" => (q != "residual", reference::increment(sf, a)),
            "dphib" => (true, reference::increment(sf + 1.0, a)),
            "e" => (true, reference::l1(sf, s0, a)),
            "e_bar" => (true, reference::l2(sf, s0, a)),
            "e_tilde" => (true, reference::l3(sf, s0, a)),
            "boundary_residual" => (false, reference::increment(sf + 1.0, a)),
            "modified_gap" => (false, reference::modified_state(sf, a)),
            _ => continue,
        };
        let y = table.column(h).expect("header entry");
        let pts: Vec<(f64, f64)> = theta
            .iter()
            .zip(&delta)
            .zip(&y)
            .map(|((&t, &d), &v)| (t, if per_delta { v / d } else { v }))
            .filter(|p| p.0 > 0.0 && p.1 > 0.0 && p.1.is_finite())
            .collect();
        let (x, yy): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let slope = if x.len() >= 2 {
            crate::linearized_solver::loglog_slope(&x, &yy)
        } else {
            f64::NAN
        };
        out.push(FitRow {
            quantity: q.to_string(),
            s,
            slope,
            reference,
            points: x.len(),
        });
    }
    Ok(out)
}

/// Reads metric files and fits exponents; writes `report.csv` to `out`.
pub fn cmd_report(inputs: &[PathBuf], cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<(PathBuf, Vec<FitRow>)>> {
    let mut all = vec![];
    let mut csv_out = String::from("file,quantity,s,slope,reference,points\n");
    for p in inputs {
        let text = fs::read_to_string(p).map_err(|e| CvsError::Io(format!("{}: {e}", p.display())))?;
        let table = MetricTable::parse(&text)?;
        let fits = fit_metrics(&table, &cfg.iteration)?;
        for f in &fits {
            let _ = writeln!(
                csv_out,
                "{},{},{},{:e},{},{}",
                p.display(),
                f.quantity,
                f.s,
                f.slope,
                f.reference,
                f.points
            );
        }
        all.push((p.clone(), fits));
    }
    if let Some(dir) = out {
        write_file(dir, "report.csv", &csv_out)?;
    }
    Ok(all)
}

/// Core invariant suite run by `cvs-mhd check`.
pub fn cmd_check(cfg: &RunConfig, quiet: bool) -> Result<Vec<CheckResult>> {
    let eos = cfg.eos()?;
    let seed = cfg.perturbation.seed;
    let bg = &cfg.background;
    let mut out = vec![];
    let mut push = |r: CheckResult| {
        if !quiet {
            println!("{}", r.line());
        }
        out.push(r);
    };
    push(invariants::symmetry_definiteness(&eos, seed));
    push(invariants::multiplier_exactness(seed.wrapping_add(1)));
    push(invariants::boundary_decoupling(&eos, seed.wrapping_add(2)));
    push(invariants::p_structure(&eos, bg, seed.wrapping_add(3)));
    push(invariants::linearization_order(&eos, seed.wrapping_add(4)));
    push(invariants::planar_preservation(&eos, bg));
    push(invariants::smoothing_constants());
    let bk = bookkeeping_config(cfg);
    match build_approx(&bk) {
        Ok(a) => push(invariants::iteration_bookkeeping(&a, 5)),
        Err(e) => push(CheckResult {
            id: 10,
            name: "iteration_bookkeeping".into(),
            passed: false,
            value: f64::NAN,
            threshold: 0.1,
            detail: format!("error: {e}"),
            seconds: 0.0,
            budget_seconds: 120.0,
        }),
    }
    Ok(out)
}

/// Tables of the linear studies.
#[derive(Debug, Clone)]
pub struct LinearOutcome {
    pub checks: Vec<CheckResult>,
    pub files: Vec<PathBuf>,
}

/// Manufactured refinement, divergence transport and energy-constant
/// studies with their CSV tables.
pub fn cmd_linear(cfg: &RunConfig, out: Option<&Path>, quiet: bool) -> Result<LinearOutcome> {
    let eos = cfg.eos()?;
    let bg = &cfg.background;
    let study = invariants::refinement_study(&eos, bg);
    let mut checks = vec![
        invariants::refinement_convergence(&study),
        invariants::energy_constant(&eos, bg),
        invariants::front_speed_consistency(&study),
    ];
    if !quiet {
        for c in &checks {
            println!("{}", c.line());
        }
    }
    let mut files = vec![];
    if let (Some(dir), Ok(st)) = (out, &study) {
        let mut t = String::from("n,w_error,phi_error,gradient_gap_l2,div_h_growth\n");
        for i in 0..st.n.len() {
            let _ = writeln!(
                t,
                "{},{:e},{:e},{:e},{:e}",
                st.n[i], st.w_error[i], st.phi_error[i], st.gradient_gap[i], st.div_h[i]
            );
        }
        files.push(write_file(dir, "convergence.csv", &t)?);
        let mut case = ManufacturedCase::new(eos, bg.plus, bg.minus);
        case.homogeneous = true;
        let mut e = String::from("n,s,mu,lhs,rhs,c0\n");
        for n in [16usize, 32] {
            let g = invariants::refinement_grid(n, 1.0)?;
            let r = case.run(&g, &SolveOptions::default())?;
            for s in [0usize, 1] {
                let er = energy_report(&r.frame, &r.report, &r.forcing, &r.data, s, &[4.0, 8.0, 16.0])?;
                for row in er.rows {
                    let _ = writeln!(
                        e,
                        "{n},{s},{},{:e},{:e},{:e}",
                        row.mu,
                        row.lhs,
                        row.rhs,
                        row.c0.unwrap_or(f64::NAN)
                    );
                }
            }
        }
        files.push(write_file(dir, "energy.csv", &e)?);
    }
    if let Err(e) = study {
        checks.push(CheckResult {
            id: 7,
            name: "refinement_study".into(),
            passed: false,
            value: f64::NAN,
            threshold: f64::NAN,
            detail: format!("error: {e}"),
            seconds: 0.0,
            budget_seconds: 300.0,
        });
    }
    Ok(LinearOutcome { checks, files })
}

/// `true` if every check passed.
pub fn all_passed(checks: &[CheckResult]) -> bool {
    checks.iter().all(|c| c.passed)
}


//! Config-driven experiment runner: parameter sweeps, CSV tables, slope fits,
//! SVG plots and pointwise error dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::assembly::assemble;
use crate::field::Field;
use crate::mesh_geometry::{build_mesh, check_assumptions, CartesianMesh, DomainPolygon};
use crate::reference_solutions::{ReferenceSolution, SolutionSpec};
use crate::solver::{build_solution, discrete_error_norms, h1_projection, regularized_solve, sample_grid, NormRequest, DEFAULT_EPSILON};
use crate::wave_basis::DiscreteSpace;
use crate::Point;

/// Column names of the convergence table, in order.
pub const CSV_HEADER: &str =
    "kappa,h,rho,Ne,Nn,dofs,rel_L2,rel_H1k,abs_Linf,coeff_norm,sigma_max,rank_kept,epsilon,wall_time_s";

/// Relative errors below this value are treated as plateau and left out of fits.
pub const PLATEAU: f64 = 1e-10;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "TREFFTZ_THREADS";

/// Resonance tolerance used to flag runs, relative to kappa.
const ASSUMPTION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum KappaSpec {
    Value(f64),
    List(Vec<f64>),
}

/// Number of edge or node modes: a value, a list, an inclusive range, or `tau * kappa h`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum CountSpec {
    Value(usize),
    List(Vec<usize>),
    Range {
        from: usize,
        to: usize,
        #[serde(default = "one")]
        step: usize,
    },
    Scaled {
        tau: f64,
    },
}

fn one() -> usize {
    1
}

impl CountSpec {
    pub fn resolve(&self, kappa_h: f64) -> anyhow::Result<Vec<usize>> {
        Ok(match self {
            CountSpec::Value(v) => vec![*v],
            CountSpec::List(v) => v.clone(),
            CountSpec::Range { from, to, step } => {
                if *step == 0 {
                    bail!("range step must be positive");
                }
                (*from..=*to).step_by(*step).collect()
            }
            CountSpec::Scaled { tau } => {
                let v = tau * kappa_h;
                if !(v.is_finite() && v >= 0.0) {
                    bail!("tau * kappa h = {v} is not a valid count");
                }
                vec![v.round() as usize]
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Oversampled Petrov-Galerkin solve with impedance data.
    #[default]
    Galerkin,
    /// H1_kappa-orthogonal projection of the exact solution.
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum NormName {
    L2,
    H1k,
    Linf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    /// log y against log x.
    #[default]
    LogLog,
    /// log y against x.
    SemiLog,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSpec {
    pub path: PathBuf,
    #[serde(default = "default_plot_x")]
    pub x: String,
    #[serde(default = "default_plot_y")]
    pub y: String,
    #[serde(default)]
    pub scale: FitKind,
    #[serde(default = "default_plot_group")]
    pub group: String,
}

fn default_plot_x() -> String {
    "dofs".into()
}
fn default_plot_y() -> String {
    "rel_H1k".into()
}
fn default_plot_group() -> String {
    "Nn".into()
}

fn default_oversampling() -> usize {
    2
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_norms() -> Vec<NormName> {
    vec![NormName::L2, NormName::H1k, NormName::Linf]
}
fn yes() -> bool {
    true
}

/// One experiment: a mesh, a solution and a sweep over kappa, Ne and Nn.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Built-in domain name.
    #[serde(default)]
    pub domain: Option<String>,
    /// Polygon file `{"vertices": [[x, y], ...]}`, used instead of `domain`.
    #[serde(default)]
    pub polygon: Option<PathBuf>,
    #[serde(default)]
    pub kappa: Option<KappaSpec>,
    /// Sweep over `kappa h` at fixed mesh; kappa = value / h.
    #[serde(default)]
    pub kappa_h: Option<Vec<f64>>,
    /// Square cells of side `h`.
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default)]
    pub h1: Option<f64>,
    #[serde(default)]
    pub h2: Option<f64>,
    #[serde(default)]
    pub origin: Option<Point>,
    pub ne: CountSpec,
    pub nn: CountSpec,
    /// Test space uses this multiple of the trial Ne and Nn.
    #[serde(default = "default_oversampling")]
    pub oversampling: usize,
    pub solution: SolutionSpec,
    /// Unit point sources added to the right-hand side.
    #[serde(default)]
    pub point_sources: Vec<Point>,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_norms")]
    pub norms: Vec<NormName>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub plot: Option<PlotSpec>,
    /// CSV of `x,y,abs_err` on the sampling grid, one file per run.
    #[serde(default)]
    pub error_field: Option<PathBuf>,
    /// Record wall times; switch off for byte-identical reruns.
    #[serde(default = "yes")]
    pub timing: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a config and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let plot = cfg.plot.as_mut().map(|p| &mut p.path);
        for p in [cfg.polygon.as_mut(), cfg.output.as_mut(), cfg.error_field.as_mut(), plot].into_iter().flatten() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn mesh(&self) -> anyhow::Result<CartesianMesh> {
        let (domain, default) = match (&self.domain, &self.polygon) {
            (Some(name), None) => {
                let (d, s) = DomainPolygon::builtin(name)?;
                (d, Some(s))
            }
            (None, Some(path)) => (DomainPolygon::load(path)?, None),
            _ => bail!("give exactly one of `domain` and `polygon`"),
        };
        let (h1, h2) = match (self.h, self.h1, self.h2, default) {
            (Some(h), None, None, _) => (h, h),
            (None, Some(a), Some(b), _) => (a, b),
            (None, None, None, Some(s)) => (s.h1, s.h2),
            _ => bail!("give either `h` or both `h1` and `h2`"),
        };
        let origin = self
            .origin
            .or(default.filter(|s| s.h1 == h1 && s.h2 == h2).map(|s| s.origin))
            .unwrap_or_else(|| domain.bbox().0);
        Ok(build_mesh(&domain, h1, h2, origin)?)
    }

    /// Runs in output order: kappa outermost, then Nn, then Ne.
    pub fn runs(&self, h: f64) -> anyhow::Result<Vec<RunSpec>> {
        let kappas = match (&self.kappa, &self.kappa_h) {
            (Some(KappaSpec::Value(k)), None) => vec![*k],
            (Some(KappaSpec::List(k)), None) => k.clone(),
            (None, Some(kh)) => kh.iter().map(|v| v / h).collect(),
            _ => bail!("give exactly one of `kappa` and `kappa_h`"),
        };
        let mut out = Vec::new();
        for kappa in kappas {
            if !(kappa > 0.0 && kappa.is_finite()) {
                bail!("kappa must be positive, got {kappa}");
            }
            let kh = kappa * h;
            for nn in self.nn.resolve(kh)? {
                for ne in self.ne.resolve(kh)? {
                    out.push(RunSpec { kappa, ne, nn });
                }
            }
        }
        Ok(out)
    }

    fn norm_request(&self) -> NormRequest {
        NormRequest {
            l2: self.norms.contains(&NormName::L2),
            h1k: self.norms.contains(&NormName::H1k),
            linf: self.norms.contains(&NormName::Linf),
            ..NormRequest::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub kappa: f64,
    pub ne: usize,
    pub nn: usize,
}

/// One row of the convergence table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub kappa: f64,
    pub h: f64,
    pub rho: f64,
    #[serde(rename = "Ne")]
    pub ne: usize,
    #[serde(rename = "Nn")]
    pub nn: usize,
    pub dofs: usize,
    #[serde(rename = "rel_L2")]
    pub rel_l2: f64,
    #[serde(rename = "rel_H1k")]
    pub rel_h1k: f64,
    #[serde(rename = "abs_Linf")]
    pub abs_linf: f64,
    pub coeff_norm: f64,
    pub sigma_max: f64,
    pub rank_kept: usize,
    pub epsilon: f64,
    pub wall_time_s: f64,
}

impl ConvergenceRecord {
    /// Numeric value of a column; `kh` gives kappa * h.
    pub fn column(&self, name: &str) -> anyhow::Result<f64> {
        Ok(match name {
            "kappa" => self.kappa,
            "h" => self.h,
            "kh" => self.kappa * self.h,
            "rho" => self.rho,
            "Ne" => self.ne as f64,
            "Nn" => self.nn as f64,
            "dofs" => self.dofs as f64,
            "rel_L2" => self.rel_l2,
            "rel_H1k" => self.rel_h1k,
            "abs_Linf" => self.abs_linf,
            "coeff_norm" => self.coeff_norm,
            "sigma_max" => self.sigma_max,
            "rank_kept" => self.rank_kept as f64,
            "epsilon" => self.epsilon,
            "wall_time_s" => self.wall_time_s,
            other => bail!("unknown column '{other}'"),
        })
    }

    /// Bitwise equality, so that NaN entries compare equal to themselves.
    pub fn same_bits(&self, other: &Self) -> bool {
        let f = |a: f64, b: f64| a.to_bits() == b.to_bits();
        f(self.kappa, other.kappa)
            && f(self.h, other.h)
            && f(self.rho, other.rho)
            && self.ne == other.ne
            && self.nn == other.nn
            && self.dofs == other.dofs
            && f(self.rel_l2, other.rel_l2)
            && f(self.rel_h1k, other.rel_h1k)
            && f(self.abs_linf, other.abs_linf)
            && f(self.coeff_norm, other.coeff_norm)
            && f(self.sigma_max, other.sigma_max)
            && self.rank_kept == other.rank_kept
            && f(self.epsilon, other.epsilon)
            && f(self.wall_time_s, other.wall_time_s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Ok,
    /// Solved, but a resonance assumption is violated or the solver warned.
    Flagged(String),
    /// No solution; the record holds NaN errors.
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub spec: RunSpec,
    pub record: ConvergenceRecord,
    pub status: RunStatus,
    /// `||u||_{H1_kappa}` of the exact solution (NaN if not computed).
    pub exact_h1k: f64,
    /// Largest pointwise error at mesh nodes, for node-vanishing studies.
    pub node_errors: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub outcomes: Vec<RunOutcome>,
}

impl Experiment {
    pub fn records(&self) -> Vec<ConvergenceRecord> {
        self.outcomes.iter().map(|o| o.record).collect()
    }
}

/// Builds the thread pool once, honouring `TREFFTZ_THREADS`.
pub fn init_thread_pool() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0) {
        // a second call finds the pool already built, which is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Runs every configuration of the sweep; single-run failures are recorded.
pub fn run_experiment(config: &ExperimentConfig) -> anyhow::Result<Experiment> {
    if config.oversampling == 0 {
        bail!("oversampling must be at least 1");
    }
    let mesh = config.mesh()?;
    let runs = config.runs(mesh.h())?;
    let many = runs.len() > 1;
    let mut outcomes = Vec::with_capacity(runs.len());
    for (k, spec) in runs.into_iter().enumerate() {
        let dump = config.error_field.as_ref().map(|p| if many { indexed_path(p, k) } else { p.clone() });
        outcomes.push(run_one(config, &mesh, spec, dump.as_deref()));
    }
    Ok(Experiment {
        config: config.clone(),
        outcomes,
    })
}

fn indexed_path(p: &Path, k: usize) -> PathBuf {
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match p.extension() {
        Some(ext) => format!("{stem}_{k}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{k}"),
    };
    p.with_file_name(name)
}

fn nan_record(config: &ExperimentConfig, mesh: &CartesianMesh, spec: RunSpec) -> ConvergenceRecord {
    ConvergenceRecord {
        kappa: spec.kappa,
        h: mesh.h(),
        rho: mesh.rho(),
        ne: spec.ne,
        nn: spec.nn,
        dofs: spec.ne * mesh.edges.len() + spec.nn * mesh.nodes.len(),
        rel_l2: f64::NAN,
        rel_h1k: f64::NAN,
        abs_linf: f64::NAN,
        coeff_norm: f64::NAN,
        sigma_max: f64::NAN,
        rank_kept: 0,
        epsilon: config.epsilon,
        wall_time_s: 0.0,
    }
}

/// Build spaces, solve, measure errors.
pub fn run_one(config: &ExperimentConfig, mesh: &CartesianMesh, spec: RunSpec, dump: Option<&Path>) -> RunOutcome {
    let start = Instant::now();
    let mut record = nan_record(config, mesh, spec);
    let result = solve_run(config, mesh, spec, dump);
    if config.timing {
        record.wall_time_s = start.elapsed().as_secs_f64();
    }
    match result {
        Ok(done) => {
            record.rel_l2 = done.summary.rel_l2;
            record.rel_h1k = done.summary.rel_h1k;
            record.abs_linf = done.summary.abs_linf;
            record.coeff_norm = done.summary.coeff_norm;
            record.sigma_max = done.sigma_max;
            record.rank_kept = done.rank_kept;
            record.dofs = done.summary.dofs;
            RunOutcome {
                spec,
                record,
                status: if done.notes.is_empty() {
                    RunStatus::Ok
                } else {
                    RunStatus::Flagged(done.notes.join("; "))
                },
                exact_h1k: done.summary.exact_h1k,
                node_errors: done.node_errors,
            }
        }
        Err(e) => RunOutcome {
            spec,
            record,
            status: RunStatus::Failed(format!("{e:#}")),
            exact_h1k: f64::NAN,
            node_errors: Vec::new(),
        },
    }
}

struct Solved {
    summary: crate::solver::ErrorSummary,
    sigma_max: f64,
    rank_kept: usize,
    notes: Vec<String>,
    node_errors: Vec<f64>,
}

fn solve_run(config: &ExperimentConfig, mesh: &CartesianMesh, spec: RunSpec, dump: Option<&Path>) -> anyhow::Result<Solved> {
    let kappa = spec.kappa;
    let mut notes = Vec::new();
    let report = check_assumptions(kappa, mesh, ASSUMPTION_TOL * kappa);
    if !report.a1_ok {
        notes.push(format!("edge resonance assumption fails (d_hat = {:.3e})", report.d_hat));
    }
    if spec.nn > 0 && !report.a3_ok {
        notes.push(format!("node resonance assumption fails (d_tilde = {:.3e})", report.d_tilde));
    }
    let u = ReferenceSolution::from_spec(&config.solution, kappa)?;
    let trial = DiscreteSpace::new(mesh, kappa, spec.ne, spec.nn)?;
    let solve = match config.method {
        Method::Galerkin => {
            let f = config.oversampling;
            let test = DiscreteSpace::new(mesh, kappa, f * spec.ne, f * spec.nn)?;
            let sources: Vec<(Point, Complex64)> = config.point_sources.iter().map(|&p| (p, Complex64::new(1.0, 0.0))).collect();
            let system = assemble(mesh, &trial, &test, Some(&u), &sources)?;
            regularized_solve(&system, config.epsilon)?
        }
        Method::Projection => {
            if !config.point_sources.is_empty() {
                bail!("point sources have no meaning for the projection method");
            }
            h1_projection(&trial, mesh, &u, config.epsilon)?
        }
    };
    if let Some(w) = &solve.warning {
        notes.push(w.clone());
    }
    let xi: &[Complex64] = solve.coefficients.as_slice();
    let uh = build_solution(&trial, mesh, xi)?;
    let summary = discrete_error_norms(&uh, &u, mesh, kappa, &config.norm_request()).with_coefficients(xi);
    let node_errors = mesh
        .nodes
        .iter()
        .map(|n| (uh.value(n.coords) - u.value(n.coords)).norm())
        .collect();
    if let Some(path) = dump {
        write_error_field(path, &uh, &u, mesh, kappa)?;
    }
    Ok(Solved {
        summary,
        sigma_max: solve.sigma_max,
        rank_kept: solve.rank_kept,
        notes,
        node_errors,
    })
}

fn write_error_field(path: &Path, uh: &dyn Field, u: &dyn Field, mesh: &CartesianMesh, kappa: f64) -> anyhow::Result<()> {
    let pts = sample_grid(mesh, kappa, &NormRequest::default());
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["x", "y", "abs_err"])?;
    for p in pts {
        let e = (uh.value(p) - u.value(p)).norm();
        if e.is_finite() {
            w.write_record([p[0].to_string(), p[1].to_string(), e.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the header and one row per record.
pub fn write_csv<W: Write>(out: W, records: &[ConvergenceRecord]) -> anyhow::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> anyhow::Result<Vec<ConvergenceRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != CSV_HEADER {
        bail!("unexpected CSV header: {}", header.join(","));
    }
    r.deserialize().map(|row| row.map_err(anyhow::Error::from)).collect()
}

/// Per-run status table next to the CSV.
pub fn write_status<W: Write>(out: W, outcomes: &[RunOutcome]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "kappa", "Ne", "Nn", "status", "message"])?;
    for (k, o) in outcomes.iter().enumerate() {
        let (status, msg) = match &o.status {
            RunStatus::Ok => ("ok", String::new()),
            RunStatus::Flagged(m) => ("flagged", m.clone()),
            RunStatus::Failed(m) => ("failed", m.clone()),
        };
        w.write_record([
            k.to_string(),
            o.spec.kappa.to_string(),
            o.spec.ne.to_string(),
            o.spec.nn.to_string(),
            status.to_string(),
            msg,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the CSV (or stdout when no output is configured), the status table,
/// and the plot if requested.
pub fn emit_outputs(experiment: &Experiment) -> anyhow::Result<()> {
    let records = experiment.records();
    match &experiment.config.output {
        Some(path) => {
            let f = std::fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
            write_csv(f, &records)?;
            let status = path.with_extension("status.csv");
            write_status(std::fs::File::create(&status)?, &experiment.outcomes)?;
        }
        None => write_csv(std::io::stdout().lock(), &records)?,
    }
    if let Some(plot) = &experiment.config.plot {
        let svg = plot_svg(&records, &plot.x, &plot.y, &plot.group, plot.scale)?;
        std::fs::write(&plot.path, svg).with_context(|| format!("writing {}", plot.path.display()))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Standard error of the slope (NaN with only two points).
    pub slope_stderr: f64,
    pub points: usize,
}

/// Least-squares slope of `log y` against `log x` or `x`, over the last
/// `window` points that lie above the plateau.
pub fn fit_slope(x: &[f64], y: &[f64], kind: FitKind, window: Option<usize>) -> anyhow::Result<SlopeFit> {
    if x.len() != y.len() {
        bail!("x and y have different lengths");
    }
    let mut pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(&a, &b)| a.is_finite() && b.is_finite() && b >= PLATEAU && (kind == FitKind::SemiLog || a > 0.0))
        .map(|(&a, &b)| (if kind == FitKind::LogLog { a.ln() } else { a }, b.ln()))
        .collect();
    if let Some(w) = window {
        let skip = pts.len().saturating_sub(w);
        pts.drain(..skip);
    }
    let n = pts.len();
    if n < 3 {
        bail!("need at least 3 points above the plateau, have {n}");
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        bail!("all x values coincide");
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_stderr = (sse / (nf - 2.0) / sxx).sqrt();
    Ok(SlopeFit {
        slope,
        intercept,
        r_squared,
        slope_stderr,
        points: n,
    })
}

/// Records split by the value of `group` (all in one group for an empty name).
pub fn group_records<'a>(records: &'a [ConvergenceRecord], group: &str) -> anyhow::Result<Vec<(f64, Vec<&'a ConvergenceRecord>)>> {
    let mut map: BTreeMap<u64, (f64, Vec<&ConvergenceRecord>)> = BTreeMap::new();
    for r in records {
        let g = if group.is_empty() { 0.0 } else { r.column(group)? };
        map.entry(g.to_bits()).or_insert_with(|| (g, Vec::new())).1.push(r);
    }
    let mut out: Vec<_> = map.into_values().collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// Slope fits per group, sorted by the x column inside each group.
pub fn fit_groups(
    records: &[ConvergenceRecord],
    x: &str,
    y: &str,
    group: &str,
    kind: FitKind,
    window: Option<usize>,
) -> anyhow::Result<Vec<(f64, anyhow::Result<SlopeFit>)>> {
    let mut out = Vec::new();
    for (g, rows) in group_records(records, group)? {
        let mut pts: Vec<(f64, f64)> = rows.iter().map(|r| Ok((r.column(x)?, r.column(y)?))).collect::<anyhow::Result<_>>()?;
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        out.push((g, fit_slope(&xs, &ys, kind, window)));
    }
    Ok(out)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// Static SVG of `y` against `x`, one polyline per group; log scale on y and,
/// for log-log plots, on x.
pub fn plot_svg(records: &[ConvergenceRecord], x: &str, y: &str, group: &str, scale: FitKind) -> anyhow::Result<String> {
    let (w, h, m) = (640.0, 440.0, 60.0);
    let tx = |v: f64| if scale == FitKind::LogLog { v.log10() } else { v };
    let groups = group_records(records, group)?;
    let mut series = Vec::new();
    for (g, rows) in &groups {
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for r in rows {
            let (a, b) = (r.column(x)?, r.column(y)?);
            if a.is_finite() && b.is_finite() && b > 0.0 && (scale == FitKind::SemiLog || a > 0.0) {
                pts.push((tx(a), b.log10()));
            }
        }
        pts.sort_by(|p, q| p.0.total_cmp(&q.0));
        series.push((*g, pts));
    }
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).collect();
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#)?;
    writeln!(svg, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#)?;
    writeln!(svg, r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#, w - 2.0 * m, h - 2.0 * m)?;
    if !all.is_empty() {
        let (mut x0, mut x1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
        let (mut y0, mut y1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        y0 = y0.floor();
        y1 = y1.ceil().max(y0 + 1.0);
        let px = |v: f64| m + (v - x0) / (x1 - x0) * (w - 2.0 * m);
        let py = |v: f64| h - m - (v - y0) / (y1 - y0) * (h - 2.0 * m);
        for d in (y0 as i32)..=(y1 as i32) {
            let yy = py(d as f64);
            writeln!(svg, r##"<line x1="{m}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#dddddd"/>"##, w - m)?;
            writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">1e{d}</text>"#, m - 4.0, yy + 4.0)?;
        }
        for k in 0..=4 {
            let v = x0 + (x1 - x0) * k as f64 / 4.0;
            let label = if scale == FitKind::LogLog { 10f64.powf(v) } else { v };
            writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{:.3}</text>"#, px(v), h - m + 16.0, label)?;
        }
        for (k, (g, pts)) in series.iter().enumerate() {
            if pts.is_empty() {
                continue;
            }
            let color = PALETTE[k % PALETTE.len()];
            let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1))).collect();
            writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, line.join(" "))?;
            for p in pts {
                writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, px(p.0), py(p.1))?;
            }
            if !group.is_empty() {
                writeln!(svg, r#"<text x="{:.2}" y="{:.2}" fill="{color}">{group} = {g}</text>"#, w - m + 4.0, m + 14.0 * (k as f64 + 1.0))?;
            }
        }
    }
    writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{x}</text>"#, w / 2.0, h - 16.0)?;
    writeln!(svg, r#"<text x="16" y="{:.2}" transform="rotate(-90 16 {:.2})" text-anchor="middle">{y}</text>"#, h / 2.0, h / 2.0)?;
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Ratio `||xi|| / ||u||_{H1_kappa}` of a finished run.
pub fn relative_coefficient_norm(outcome: &RunOutcome) -> f64 {
    outcome.record.coeff_norm / outcome.exact_h1k
}

/// Parses a comma-separated list of columns.
pub fn parse_columns(list: &str) -> anyhow::Result<Vec<String>> {
    let probe = ConvergenceRecord {
        kappa: 1.0,
        h: 1.0,
        rho: 1.0,
        ne: 1,
        nn: 1,
        dofs: 1,
        rel_l2: 1.0,
        rel_h1k: 1.0,
        abs_linf: 1.0,
        coeff_norm: 1.0,
        sigma_max: 1.0,
        rank_kept: 1,
        epsilon: 1.0,
        wall_time_s: 1.0,
    };
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|c| probe.column(c).map(|_| c.to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml(text).unwrap()
    }

    const SMALL: &str = r#"
domain = "unit_square"
kappa = 10.0
ne = [2, 4]
nn = 1
timing = false
solution = { kind = "plane_wave", angle = 0.6 }
"#;

    #[test]
    fn header_matches_exactly() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "kappa,h,rho,Ne,Nn,dofs,rel_L2,rel_H1k,abs_Linf,coeff_norm,sigma_max,rank_kept,epsilon,wall_time_s\n");
        assert!(read_csv(text.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn empty_sweep_gives_header_only() {
        let mut c = cfg(SMALL);
        c.ne = CountSpec::List(vec![]);
        let e = run_experiment(&c).unwrap();
        assert!(e.outcomes.is_empty());
        let mut buf = Vec::new();
        write_csv(&mut buf, &e.records()).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), CSV_HEADER);
    }

    #[test]
    fn count_specs() {
        assert_eq!(CountSpec::Value(3).resolve(7.0).unwrap(), vec![3]);
        assert_eq!(CountSpec::Range { from: 7, to: 13, step: 3 }.resolve(1.0).unwrap(), vec![7, 10, 13]);
        assert_eq!(CountSpec::Scaled { tau: 2.0 }.resolve(15.0).unwrap(), vec![30]);
        let c = cfg(
            r#"
domain = "unit_square"
kappa_h = [5.0, 6.0]
ne = { tau = 2.0 }
nn = { tau = 1.0 }
solution = { kind = "plane_wave", angle = 0.0 }
"#,
        );
        let runs = c.runs(0.5).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!((runs[1].kappa, runs[1].ne, runs[1].nn), (12.0, 12, 6));
        let r = cfg(r#"
domain = "unit_square"
kappa = 30.0
ne = { from = 7, to = 9 }
nn = [1, 2]
solution = { kind = "plane_wave", angle = 0.0 }
"#)
        .runs(0.5)
        .unwrap();
        let order: Vec<(usize, usize)> = r.iter().map(|s| (s.nn, s.ne)).collect();
        assert_eq!(order, vec![(1, 7), (1, 8), (1, 9), (2, 7), (2, 8), (2, 9)]);
    }

    #[test]
    fn config_errors() {
        assert!(ExperimentConfig::from_toml("kappa = 1.0").is_err());
        let mut c = cfg(SMALL);
        c.kappa_h = Some(vec![1.0]);
        assert!(c.runs(0.5).is_err());
        c.kappa_h = None;
        c.domain = Some("nowhere".into());
        assert!(c.mesh().is_err());
    }

    #[test]
    fn dofs_and_round_trip() {
        let e = run_experiment(&cfg(SMALL)).unwrap();
        let mesh = cfg(SMALL).mesh().unwrap();
        for o in &e.outcomes {
            assert_eq!(o.status, RunStatus::Ok);
            assert_eq!(o.record.dofs, o.spec.ne * mesh.edges.len() + o.spec.nn * mesh.nodes.len());
        }
        assert!(e.outcomes[1].record.rel_h1k < e.outcomes[0].record.rel_h1k);
        let mut buf = Vec::new();
        write_csv(&mut buf, &e.records()).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(e.records()) {
            assert!(a.same_bits(&b));
        }
    }

    #[test]
    fn reruns_are_identical() {
        let csv_of = || {
            let mut buf = Vec::new();
            write_csv(&mut buf, &run_experiment(&cfg(SMALL)).unwrap().records()).unwrap();
            buf
        };
        assert_eq!(csv_of(), csv_of());
    }

    #[test]
    fn shipped_configs_load() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut count = 0;
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                let c = ExperimentConfig::load(&path).unwrap();
                assert!(c.output.is_some(), "{} has no output", path.display());
                count += 1;
            }
        }
        assert!(count >= 10);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let c = cfg(&SMALL.replace("kappa = 10.0", "kappa = 30.0").replace("ne = [2, 4]", "ne = [20]").replace("nn = 1", "nn = 2"));
        let csv_with = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let records = pool.install(|| run_experiment(&c).unwrap().records());
            let mut buf = Vec::new();
            write_csv(&mut buf, &records).unwrap();
            buf
        };
        assert_eq!(csv_with(1), csv_with(3));
    }

    #[test]
    fn failures_are_recorded() {
        let mut c = cfg(SMALL);
        c.solution = SolutionSpec::CornerSingularity { nu: -1.0 };
        let e = run_experiment(&c).unwrap();
        assert_eq!(e.outcomes.len(), 2);
        for o in &e.outcomes {
            assert!(matches!(o.status, RunStatus::Failed(_)));
            assert!(o.record.rel_h1k.is_nan());
        }
        let mut buf = Vec::new();
        write_csv(&mut buf, &e.records()).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert!(back[0].same_bits(&e.outcomes[0].record));
    }

    #[test]
    fn slope_of_power_law() {
        let x: Vec<f64> = (1..=10).map(|k| k as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v.powi(-3)).collect();
        let f = fit_slope(&x, &y, FitKind::LogLog, None).unwrap();
        assert!((f.slope + 3.0).abs() < 1e-6);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| 2f64.powf(-v)).collect();
        let f = fit_slope(&x, &y, FitKind::SemiLog, None).unwrap();
        assert!((f.slope + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn slope_drops_plateau_and_uses_window() {
        let x = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0];
        let y = [1.0, 0.25, 1.0 / 16.0, 1.0 / 64.0, 1e-11, 1e-12];
        let f = fit_slope(&x, &y, FitKind::LogLog, None).unwrap();
        assert_eq!(f.points, 4);
        assert!((f.slope + 2.0).abs() < 1e-12);
        let f = fit_slope(&x, &y, FitKind::LogLog, Some(3)).unwrap();
        assert_eq!(f.points, 3);
        assert!(fit_slope(&x[..2], &y[..2], FitKind::LogLog, None).is_err());
    }

    #[test]
    fn svg_has_one_line_per_group() {
        let e = run_experiment(&cfg(SMALL)).unwrap();
        let svg = plot_svg(&e.records(), "dofs", "rel_H1k", "Nn", FitKind::LogLog).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(plot_svg(&[], "Ne", "rel_H1k", "", FitKind::SemiLog).unwrap().ends_with("</svg>\n"));
    }

    #[test]
    fn columns_parse() {
        assert_eq!(parse_columns("Ne, kh").unwrap(), vec!["Ne", "kh"]);
        assert!(parse_columns("Ne,bogus").is_err());
    }

    #[test]
    fn indexed_paths() {
        assert_eq!(indexed_path(Path::new("/tmp/err.csv"), 3), PathBuf::from("/tmp/err_3.csv"));
        assert_eq!(indexed_path(Path::new("err"), 0), PathBuf::from("err_0"));
    }
}

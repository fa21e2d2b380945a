//! Command-line front end: experiment sweeps, resonance reports, the
//! high-frequency growth check and slope fits of stored tables.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use trefftz::cli_harness::{
    emit_outputs, fit_groups, init_thread_pool, read_csv, run_experiment, ExperimentConfig, FitKind, RunStatus,
};
use trefftz::highfreq_analysis::{parse_ratio, verify_growth_bound};
use trefftz::mesh_geometry::resonance_report;

#[derive(Parser)]
#[command(name = "trefftz", version, about = "Conforming Trefftz Galerkin solver for the 2D Helmholtz equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    LogLog,
    SemiLog,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep described by a TOML config and write the convergence table.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the `output` entry of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resonance report for a wavenumber and cell size as JSON.
    Check {
        #[arg(long)]
        kappa: f64,
        #[arg(long)]
        h1: f64,
        #[arg(long)]
        h2: f64,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Tabulate D(rho, t_j) against C(q) t_j^2 along the resonance-free sequence.
    Highfreq {
        /// Squared shape parameter as p/q.
        #[arg(long)]
        rho2: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit convergence slopes in a stored table.
    Slopes {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
        /// Column to group by; defaults to Nn when x is Ne, else no grouping.
        #[arg(long)]
        group: Option<String>,
        #[arg(long, value_enum, default_value_t = Scale::LogLog)]
        scale: Scale,
        /// Use only the last points of each group.
        #[arg(long)]
        window: Option<usize>,
    },
}

fn main() -> anyhow::Result<()> {
    init_thread_pool();
    match Cli::parse().command {
        Command::Run { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if out.is_some() {
                cfg.output = out;
            }
            let experiment = run_experiment(&cfg)?;
            for (k, o) in experiment.outcomes.iter().enumerate() {
                match &o.status {
                    RunStatus::Ok => {}
                    RunStatus::Flagged(m) => eprintln!("run {k} (Ne={}, Nn={}): flagged: {m}", o.spec.ne, o.spec.nn),
                    RunStatus::Failed(m) => eprintln!("run {k} (Ne={}, Nn={}): failed: {m}", o.spec.ne, o.spec.nn),
                }
            }
            emit_outputs(&experiment)?;
        }
        Command::Check { kappa, h1, h2, tol } => {
            if !(kappa > 0.0 && h1 > 0.0 && h2 > 0.0) {
                bail!("kappa, h1 and h2 must be positive");
            }
            let report = resonance_report(kappa, h1, h2, tol);
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Highfreq { rho2, count, out } => {
            let (p, q) = parse_ratio(&rho2)?;
            let check = verify_growth_bound(p, q, count)?;
            let sink: Box<dyn Write> = match &out {
                Some(path) => Box::new(std::fs::File::create(path).with_context(|| format!("writing {}", path.display()))?),
                None => Box::new(std::io::stdout().lock()),
            };
            let mut w = csv::Writer::from_writer(sink);
            for row in &check.rows {
                w.serialize(row)?;
            }
            w.flush()?;
            if let Some(j) = check.first_failure() {
                bail!("growth bound violated at j = {j}");
            }
            eprintln!("C(q) = {:.10}; all {} checks pass", check.constant, check.rows.len());
        }
        Command::Slopes { csv, x, y, group, scale, window } => {
            let file = std::fs::File::open(&csv).with_context(|| format!("reading {}", csv.display()))?;
            let records = read_csv(file)?;
            let group = group.unwrap_or_else(|| if x == "Ne" { "Nn".into() } else { String::new() });
            let kind = match scale {
                Scale::LogLog => FitKind::LogLog,
                Scale::SemiLog => FitKind::SemiLog,
            };
            println!("group,value,slope,slope_stderr,r_squared,points");
            for (g, fit) in fit_groups(&records, &x, &y, &group, kind, window)? {
                match fit {
                    Ok(f) => println!("{group},{g},{},{},{},{}", f.slope, f.slope_stderr, f.r_squared, f.points),
                    Err(e) => eprintln!("{group} = {g}: {e}"),
                }
            }
        }
    }
    Ok(())
}

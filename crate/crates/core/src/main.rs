use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use coop_lanechange::experiment::{export_grid, parse_combo, run_sweep, SweepConfig};
use coop_lanechange::model::build_scenario;
use coop_lanechange::sim::{
    build_bi_lane_scenario, run_bi_lane_change_traced, run_lane_change_traced, StepRecord,
};

#[derive(Parser)]
#[command(name = "coop-lanechange", version, about = "Cooperative MPC lane-change simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat TOML config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed (for `sweep`, the first seed of every cell).
    #[arg(long)]
    seed: Option<u64>,
    /// Wait budget in seconds.
    #[arg(long)]
    wait_budget: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<SweepConfig> {
        let mut cfg = match &self.config {
            Some(p) => SweepConfig::load(p)?,
            None => SweepConfig::default(),
        };
        if let Some(w) = self.wait_budget {
            cfg.wait_budget = w;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and emit its result (and optionally a step trace).
    Run {
        #[command(flatten)]
        common: Common,
        /// Mean speed, mph.
        #[arg(long, default_value_t = 60.0)]
        mu: f64,
        /// Speed standard deviation, mph.
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        /// Cooperation combo, e.g. `100`, `AIAI`, or `50/100` for a bi-lane change.
        #[arg(long, default_value = "100")]
        coop: String,
        /// Write the step trace as JSON lines here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the run record here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Feasibility or bi-lane time sweep over the configured grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Worker threads.
        #[arg(long, env = "COOP_LC_THREADS")]
        threads: Option<usize>,
        /// Output directory (overrides `output_path`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-simulate a stored run record and emit its step trace.
    Replay {
        /// Record written by `run`.
        record: PathBuf,
        /// Write the trace here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Everything needed to reproduce a `run`.
#[derive(Serialize, Deserialize)]
struct RunRecord {
    seed: u64,
    mu: f64,
    sigma: f64,
    coop: String,
    config: SweepConfig,
    result: serde_json::Value,
}

fn simulate(
    cfg: &SweepConfig,
    seed: u64,
    mu: f64,
    sigma: f64,
    coop: &str,
) -> Result<(serde_json::Value, Vec<StepRecord<f64>>)> {
    let run_cfg = cfg.run_config()?;
    let bi_lane = coop.contains('/');
    let stages = parse_combo(coop, bi_lane)?;
    let mut trace = Vec::new();
    let result = if bi_lane {
        let bi = build_bi_lane_scenario(mu, sigma, (stages[0], stages[1]), seed, &run_cfg.params, &run_cfg.layout)?;
        serde_json::to_value(run_bi_lane_change_traced(&bi, &run_cfg, &mut trace)?)?
    } else {
        let sc = build_scenario(mu, sigma, stages[0], seed, &run_cfg.params, &run_cfg.layout)?;
        serde_json::to_value(run_lane_change_traced(&sc, &run_cfg, &mut trace)?)?
    };
    Ok((result, trace))
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => io::stdout().write_all(text.as_bytes()).context("writing stdout"),
    }
}

fn trace_lines(trace: &[StepRecord<f64>]) -> Result<String> {
    let mut out = String::new();
    for rec in trace {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    Ok(out)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { common, mu, sigma, coop, trace, out } => {
            let cfg = common.load()?;
            let seed = common.seed.unwrap_or(0);
            let (result, steps) = simulate(&cfg, seed, mu, sigma, &coop)?;
            if let Some(p) = trace {
                emit(Some(&p), &trace_lines(&steps)?)?;
            }
            let record = RunRecord { seed, mu, sigma, coop, config: cfg, result };
            emit(out.as_deref(), &(serde_json::to_string_pretty(&record)? + "\n"))
        }
        Command::Sweep { common, threads, out } => {
            let mut cfg = common.load()?;
            if let Some(s) = common.seed {
                cfg.seed_base = s;
            }
            if let Some(o) = out {
                cfg.output_path = o;
            }
            cfg.validate()?;
            let mut pool = rayon::ThreadPoolBuilder::new();
            if let Some(n) = threads {
                if n == 0 {
                    bail!("--threads must be at least 1");
                }
                pool = pool.num_threads(n);
            }
            let pool = pool.build().context("building worker pool")?;
            let grids = pool.install(|| run_sweep(&cfg))?;
            let dir = cfg.output_path.clone();
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            emit(Some(&dir.join("config.toml")), &cfg.to_toml_string())?;
            for g in &grids {
                let (csv, _) = export_grid(g, &dir, &cfg)?;
                let avg = g.average().map_or("n/a".to_string(), |a| format!("{a:.4}"));
                println!("{:<20} {:<18} average {avg}  -> {}", g.combo_name, g.metric.label(), csv.display());
            }
            Ok(())
        }
        Command::Replay { record, out } => {
            let text = fs::read_to_string(&record).with_context(|| format!("reading {}", record.display()))?;
            let rec: RunRecord = serde_json::from_str(&text).context("parsing run record")?;
            rec.config.validate()?;
            let (result, steps) = simulate(&rec.config, rec.seed, rec.mu, rec.sigma, &rec.coop)?;
            if result != rec.result {
                bail!("replayed result differs from the stored record");
            }
            emit(out.as_deref(), &trace_lines(&steps)?)
        }
    }
}

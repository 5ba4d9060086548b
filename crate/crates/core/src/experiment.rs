//! Monte Carlo sweeps over (mu, sigma) grids and cooperation combinations.
//!
//! Every run is seeded from `seed_base + k` for its index `k` within a cell, so the same seeds
//! are shared across cells and combos. Runs execute on a rayon pool; results are gathered in
//! cell order, so the output never depends on the thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{build_scenario, CoopAssignment, SafetyParams, ScenarioLayout, VehicleRole};
use crate::mpc::MpcConfig;
use crate::sim::{build_bi_lane_scenario, run_bi_lane_change, run_lane_change, BiLaneResult, RunConfig, RunResult};

pub const DEFAULT_FEASIBILITY_COMBOS: [&str; 6] = ["0", "50-fhdv", "50-phdv", "50-near", "50-far", "100"];
pub const DEFAULT_TIME_COMBOS: [&str; 6] = ["0/0", "50/50", "50/100", "100/100", "50-near/50-near", "50-far/50-far"];

/// Flat sweep configuration; every key is optional in the TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Means of the speed distribution, mph.
    pub mu_grid: Vec<f64>,
    /// Standard deviations of the speed distribution, mph.
    pub sigma_grid: Vec<f64>,
    pub seeds_per_cell: usize,
    pub seed_base: u64,
    /// Combo names, see [`parse_combo`]. Empty selects the defaults for the sweep kind.
    pub coop_combos: Vec<String>,
    /// s.
    pub wait_budget: f64,
    pub bi_lane: bool,
    pub output_path: PathBuf,

    pub d_max: f64,
    pub a_max: f64,
    pub a_max_lc: f64,
    pub a_rollover: f64,
    pub tau: f64,
    pub l1: f64,
    pub l2: f64,
    pub vehicle_length: f64,
    pub buffer_radius: f64,
    pub lane_width: f64,
    pub time_headway: f64,

    pub np: usize,
    pub nc: usize,
    pub q: f64,
    pub r: f64,
    pub p: f64,
    pub delta_max: f64,
    pub gap_margin: f64,
    pub disc_margin: f64,
    pub solver_tol: f64,
    pub solver_max_iter: usize,

    pub end_margin: f64,
    pub completion_tol: f64,
    pub max_lc_steps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let run = RunConfig::<f64>::default();
        let (p, m) = (run.params, run.mpc);
        Self {
            mu_grid: (0..9).map(|i| 40.0 + 5.0 * i as f64).collect(),
            sigma_grid: (1..=10).map(f64::from).collect(),
            seeds_per_cell: 100,
            seed_base: 0,
            coop_combos: Vec::new(),
            wait_budget: run.wait_budget,
            bi_lane: false,
            output_path: PathBuf::from("sweep-out"),
            d_max: p.d_max,
            a_max: p.a_max,
            a_max_lc: p.a_max_lc,
            a_rollover: p.a_rollover,
            tau: p.tau,
            l1: p.l1,
            l2: p.l2,
            vehicle_length: p.vehicle_length,
            buffer_radius: p.buffer_radius,
            lane_width: p.lane_width,
            time_headway: run.layout.time_headway,
            np: m.np,
            nc: m.nc,
            q: m.q,
            r: m.r,
            p: m.p,
            delta_max: m.delta_max,
            gap_margin: m.gap_margin,
            disc_margin: m.disc_margin,
            solver_tol: m.tol,
            solver_max_iter: m.max_iter,
            end_margin: run.end_margin,
            completion_tol: run.completion_tol,
            max_lc_steps: run.max_lc_steps,
        }
    }
}

impl SweepConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu_grid.is_empty() || self.sigma_grid.is_empty() {
            return Err(Error::Config("mu_grid and sigma_grid must be non-empty".into()));
        }
        if self.seeds_per_cell == 0 {
            return Err(Error::Config("seeds_per_cell must be at least 1".into()));
        }
        for c in self.combos() {
            parse_combo(&c, self.bi_lane)?;
        }
        self.run_config()?.validate()
    }

    pub fn params(&self) -> SafetyParams<f64> {
        SafetyParams {
            d_max: self.d_max,
            a_max: self.a_max,
            a_max_lc: self.a_max_lc,
            a_rollover: self.a_rollover,
            tau: self.tau,
            l1: self.l1,
            l2: self.l2,
            vehicle_length: self.vehicle_length,
            buffer_radius: self.buffer_radius,
            lane_width: self.lane_width,
        }
    }

    pub fn run_config(&self) -> Result<RunConfig<f64>> {
        Ok(RunConfig {
            params: self.params(),
            mpc: MpcConfig {
                np: self.np,
                nc: self.nc,
                q: self.q,
                r: self.r,
                p: self.p,
                delta_max: self.delta_max,
                gap_margin: self.gap_margin,
                disc_margin: self.disc_margin,
                tol: self.solver_tol,
                max_iter: self.solver_max_iter,
            },
            layout: ScenarioLayout { time_headway: self.time_headway, source_lane_y: 0.0 },
            wait_budget: self.wait_budget,
            end_margin: self.end_margin,
            completion_tol: self.completion_tol,
            max_lc_steps: self.max_lc_steps,
        })
    }

    /// Combo names in effect: the configured list or the defaults for the sweep kind.
    pub fn combos(&self) -> Vec<String> {
        if !self.coop_combos.is_empty() {
            return self.coop_combos.clone();
        }
        let defaults: &[&str] = if self.bi_lane { &DEFAULT_TIME_COMBOS } else { &DEFAULT_FEASIBILITY_COMBOS };
        defaults.iter().map(|s| s.to_string()).collect()
    }

    /// SHA-256 over the canonical JSON form of every field.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        hex(&Sha256::digest(canonical.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Parses one stage: a preset name or a four-letter code such as `"AIAI"`.
///
/// Presets: `0`, `100`, `50-fhdv` (alias `50`), `50-phdv`, `50-near`, `50-far`.
pub fn parse_stage(name: &str) -> Result<CoopAssignment> {
    use VehicleRole::*;
    let roles: &[VehicleRole] = match name.trim() {
        "0" => &[],
        "100" => &[FhdvNear, PhdvNear, FhdvFar, PhdvFar],
        "50" | "50-fhdv" => &[FhdvNear, FhdvFar],
        "50-phdv" => &[PhdvNear, PhdvFar],
        "50-near" => &[FhdvNear, PhdvNear],
        "50-far" => &[FhdvFar, PhdvFar],
        code => return CoopAssignment::from_code(code).map_err(|e| Error::Config(e.to_string())),
    };
    Ok(CoopAssignment::with_active(roles))
}

/// Parses a combo: one stage, or `first/second` for a bi-lane sweep.
pub fn parse_combo(name: &str, bi_lane: bool) -> Result<Vec<CoopAssignment>> {
    let stages = name.split('/').map(parse_stage).collect::<Result<Vec<_>>>()?;
    let want = if bi_lane { 2 } else { 1 };
    if stages.len() != want {
        return Err(Error::Config(format!("combo {name:?} must have {want} stage(s)")));
    }
    Ok(stages)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    FeasibilityRate,
    MeanTotalTime,
    EfficientFraction,
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::FeasibilityRate => "feasibility_rate",
            Metric::MeanTotalTime => "mean_total_time",
            Metric::EfficientFraction => "efficient_fraction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub metric: Metric,
    pub combo_name: String,
    pub mu_grid: Vec<f64>,
    pub sigma_grid: Vec<f64>,
    /// `cells[i][j]` is the value at `sigma_grid[i]`, `mu_grid[j]`; NaN when undefined.
    pub cells: Vec<Vec<f64>>,
}

impl SweepGrid {
    /// Mean over defined cells.
    pub fn average(&self) -> Option<f64> {
        let vals: Vec<f64> = self.cells.iter().flatten().copied().filter(|v| v.is_finite()).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean of each sigma row, over defined cells.
    pub fn row_means(&self) -> Vec<f64> {
        self.cells
            .iter()
            .map(|row| {
                let vals: Vec<f64> = row.iter().copied().filter(|v| v.is_finite()).collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma\\mu");
        for mu in &self.mu_grid {
            let _ = write!(out, ",{mu}");
        }
        out.push('\n');
        for (sigma, row) in self.sigma_grid.iter().zip(&self.cells) {
            let _ = write!(out, "{sigma}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// All runs of one (mu, sigma) cell, seeds in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell<R> {
    pub mu: f64,
    pub sigma: f64,
    pub runs: Vec<R>,
}

/// Runs of one combo over the whole grid, cells in sigma-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ComboRuns<R> {
    pub name: String,
    pub cells: Vec<Cell<R>>,
}

fn grid_from<R>(
    cfg: &SweepConfig,
    runs: &ComboRuns<R>,
    metric: Metric,
    value: impl Fn(&[R]) -> f64,
) -> SweepGrid {
    let width = cfg.mu_grid.len();
    let cells = runs.cells.chunks(width).map(|row| row.iter().map(|c| value(&c.runs)).collect()).collect();
    SweepGrid {
        metric,
        combo_name: runs.name.clone(),
        mu_grid: cfg.mu_grid.clone(),
        sigma_grid: cfg.sigma_grid.clone(),
        cells,
    }
}

fn fraction<R>(runs: &[R], pred: impl Fn(&R) -> bool) -> f64 {
    runs.iter().filter(|r| pred(r)).count() as f64 / runs.len() as f64
}

fn cell_jobs(cfg: &SweepConfig) -> Vec<(f64, f64, u64)> {
    let mut jobs = Vec::with_capacity(cfg.sigma_grid.len() * cfg.mu_grid.len() * cfg.seeds_per_cell);
    for &sigma in &cfg.sigma_grid {
        for &mu in &cfg.mu_grid {
            for k in 0..cfg.seeds_per_cell as u64 {
                jobs.push((mu, sigma, cfg.seed_base.wrapping_add(k)));
            }
        }
    }
    jobs
}

fn collect_cells<R>(cfg: &SweepConfig, jobs: &[(f64, f64, u64)], results: Vec<R>) -> Vec<Cell<R>> {
    let mut it = results.into_iter();
    jobs.chunks(cfg.seeds_per_cell)
        .map(|chunk| Cell { mu: chunk[0].0, sigma: chunk[0].1, runs: it.by_ref().take(chunk.len()).collect() })
        .collect()
}

fn check_collision(r: &RunResult<f64>) -> Result<()> {
    if r.started() && r.collision {
        return Err(Error::Collision { step: r.wait_steps + r.lc_steps, clearance: r.min_clearance });
    }
    Ok(())
}

/// Single lane-change runs for every configured combo.
pub fn run_single_stage(cfg: &SweepConfig) -> Result<Vec<ComboRuns<RunResult<f64>>>> {
    cfg.validate()?;
    let run_cfg = cfg.run_config()?;
    let params = run_cfg.params;
    let jobs = cell_jobs(cfg);
    let mut out = Vec::new();
    for name in cfg.combos() {
        let coop = parse_combo(&name, false)?[0];
        let results = jobs
            .par_iter()
            .map(|&(mu, sigma, seed)| {
                let sc = build_scenario(mu, sigma, coop, seed, &params, &run_cfg.layout)?;
                let r = run_lane_change(&sc, &run_cfg)?;
                check_collision(&r)?;
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ComboRuns { name, cells: collect_cells(cfg, &jobs, results) });
    }
    Ok(out)
}

/// Bi-lane runs for every configured combo pair.
pub fn run_two_stage(cfg: &SweepConfig) -> Result<Vec<ComboRuns<BiLaneResult<f64>>>> {
    cfg.validate()?;
    let run_cfg = cfg.run_config()?;
    let params = run_cfg.params;
    let jobs = cell_jobs(cfg);
    let mut out = Vec::new();
    for name in cfg.combos() {
        let stages = parse_combo(&name, true)?;
        let coop = (stages[0], stages[1]);
        let results = jobs
            .par_iter()
            .map(|&(mu, sigma, seed)| {
                let bi = build_bi_lane_scenario(mu, sigma, coop, seed, &params, &run_cfg.layout)?;
                let r = run_bi_lane_change(&bi, &run_cfg)?;
                check_collision(&r.first)?;
                if let Some(s) = &r.second {
                    check_collision(s)?;
                }
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ComboRuns { name, cells: collect_cells(cfg, &jobs, results) });
    }
    Ok(out)
}

pub fn feasibility_grid(cfg: &SweepConfig, runs: &ComboRuns<RunResult<f64>>) -> SweepGrid {
    grid_from(cfg, runs, Metric::FeasibilityRate, |rs| fraction(rs, |r| r.started()))
}

pub fn efficient_grid(cfg: &SweepConfig, runs: &ComboRuns<BiLaneResult<f64>>) -> SweepGrid {
    grid_from(cfg, runs, Metric::EfficientFraction, |rs| fraction(rs, |r| r.efficient))
}

/// Mean total time over runs that completed both stages.
pub fn mean_time_grid(cfg: &SweepConfig, runs: &ComboRuns<BiLaneResult<f64>>) -> SweepGrid {
    grid_from(cfg, runs, Metric::MeanTotalTime, |rs| {
        let done: Vec<f64> = rs
            .iter()
            .filter(|r| r.second.is_some_and(|s| s.completed()))
            .map(|r| r.total_time)
            .collect();
        if done.is_empty() {
            f64::NAN
        } else {
            done.iter().sum::<f64>() / done.len() as f64
        }
    })
}

/// Feasibility grid per combo.
pub fn run_feasibility_sweep(cfg: &SweepConfig) -> Result<Vec<SweepGrid>> {
    let mut cfg = cfg.clone();
    cfg.bi_lane = false;
    Ok(run_single_stage(&cfg)?.iter().map(|r| feasibility_grid(&cfg, r)).collect())
}

/// Efficient-fraction and mean-time grids per combo pair.
pub fn run_time_sweep(cfg: &SweepConfig) -> Result<Vec<SweepGrid>> {
    let mut cfg = cfg.clone();
    cfg.bi_lane = true;
    Ok(run_two_stage(&cfg)?
        .iter()
        .flat_map(|r| [efficient_grid(&cfg, r), mean_time_grid(&cfg, r)])
        .collect())
}

/// Runs the sweep selected by `cfg.bi_lane`.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepGrid>> {
    if cfg.bi_lane {
        run_time_sweep(cfg)
    } else {
        run_feasibility_sweep(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub combo_name: String,
    pub metric: Metric,
    pub average: Option<f64>,
    pub row_means: Vec<Option<f64>>,
    pub seeds_per_cell: usize,
    pub config_hash: String,
}

/// File stem for a grid: `<metric>__<combo>` with `/` written as `_`.
pub fn grid_stem(grid: &SweepGrid) -> String {
    let combo: String = grid
        .combo_name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    format!("{}__{combo}", grid.metric.label())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir` and returns both paths.
pub fn export_grid(grid: &SweepGrid, dir: &Path, cfg: &SweepConfig) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    let stem = grid_stem(grid);
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    write_file(&csv_path, &grid.to_csv())?;
    let summary = GridSummary {
        combo_name: grid.combo_name.clone(),
        metric: grid.metric,
        average: grid.average(),
        row_means: grid.row_means().into_iter().map(|v| v.is_finite().then_some(v)).collect(),
        seeds_per_cell: cfg.seeds_per_cell,
        config_hash: cfg.hash(),
    };
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    json.push('\n');
    write_file(&json_path, &json)?;
    Ok((csv_path, json_path))
}

/// Spearman rank correlation; ties get their average rank.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combo_names() {
        assert_eq!(parse_stage("50").unwrap().code(), "AIAI");
        assert_eq!(parse_stage("50-phdv").unwrap().code(), "IAIA");
        assert_eq!(parse_stage("50-near").unwrap().code(), "AAII");
        assert_eq!(parse_stage("50-far").unwrap().code(), "IIAA");
        assert_eq!(parse_stage("aiia").unwrap().code(), "AIIA");
        assert!(parse_stage("75").is_err());
        assert_eq!(parse_combo("50/100", true).unwrap().len(), 2);
        assert!(parse_combo("50/100", false).is_err());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = SweepConfig { mu_grid: vec![60.0], seeds_per_cell: 3, ..Default::default() };
        let back = SweepConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        let partial = SweepConfig::from_toml_str("seeds_per_cell = 7\nwait_budget = 6.0\n").unwrap();
        assert_eq!(partial.seeds_per_cell, 7);
        assert_eq!(partial.l2, 10.0);
        assert!(SweepConfig::from_toml_str("seeds = 7").is_err());
        assert!(SweepConfig::from_toml_str("seeds_per_cell = 0").is_err());
    }

    #[test]
    fn hash_tracks_every_field() {
        let base = SweepConfig::default();
        let mut other = base.clone();
        assert_eq!(base.hash(), other.hash());
        other.l1 = 5.5;
        assert_ne!(base.hash(), other.hash());
        let mut other = base.clone();
        other.coop_combos = vec!["100".into()];
        assert_ne!(base.hash(), other.hash());
    }

    #[test]
    fn csv_layout() {
        let g = SweepGrid {
            metric: Metric::FeasibilityRate,
            combo_name: "100".into(),
            mu_grid: vec![60.0],
            sigma_grid: vec![2.0],
            cells: vec![vec![0.5]],
        };
        assert_eq!(g.to_csv(), "sigma\\mu,60\n2,0.5\n");
        assert_eq!(g.average(), Some(0.5));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 5.0, 9.0]) - 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[4.0, 4.0]), 0.0);
    }
}

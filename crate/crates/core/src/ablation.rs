//! Ablation grids: one swept axis, every cell run for every seed, results
//! aggregated into a CSV summary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::N_STAGES;
use crate::error::{Error, Result};
use crate::guidance::POOL_OPS;
use crate::invariance::CiKind;
use crate::metrics::MetricReport;
use crate::trainer::{run_experiment, Artifacts, ExperimentConfig, RunOptions};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUNS_FILE: &str = "runs.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Pooling,
    Temperature,
    Stages,
    Loss,
    Ci,
}

pub const AXES: [Axis; 5] = [Axis::Pooling, Axis::Temperature, Axis::Stages, Axis::Loss, Axis::Ci];

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Pooling => "pooling",
            Axis::Temperature => "temperature",
            Axis::Stages => "stages",
            Axis::Loss => "loss",
            Axis::Ci => "ci",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AXES.into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation axis {s:?} (expected one of {})",
                    AXES.map(Axis::name).join(", ")
                ))
            })
    }
}

/// `(τ, τ̄)` cells of the temperature axis; the first is the default.
pub const TEMPERATURE_PAIRS: [(f64, f64); 4] = [(0.12, 0.04), (0.12, 0.12), (0.07, 0.04), (0.2, 0.04)];

/// Stage sets of the stage axis.
pub const STAGE_SETS: [(&str, &[usize]); 4] = [
    ("shallow-1-2", &[1, 2]),
    ("middle-2-3", &[2, 3]),
    ("deep-3-4", &[3, 4]),
    ("all-1-4", &[1, 2, 3, 4]),
];

/// Names of the loss-toggle cells; the first is the baseline.
pub const LOSS_TOGGLES: [&str; 4] = ["task-only", "task+g", "task+ci", "task+g+ci"];

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub axis: Axis,
    pub base: ExperimentConfig,
    pub cells: Vec<Cell>,
    pub seeds: Vec<u64>,
}

/// Weight used for switched-on stages: the largest base weight, or 1.
fn on_weight(lambda: &[f64]) -> f64 {
    let w = lambda.iter().cloned().fold(0.0, f64::max);
    if w > 0.0 {
        w
    } else {
        1.0
    }
}

fn stage_weights(stages: &[usize], w: f64) -> Vec<f64> {
    (1..=N_STAGES).map(|l| if stages.contains(&l) { w } else { 0.0 }).collect()
}

/// Base weights if any stage is on, otherwise the deep-stage default.
fn enabled(lambda: &[f64]) -> Vec<f64> {
    if lambda.iter().any(|&l| l > 0.0) {
        lambda.to_vec()
    } else {
        stage_weights(&[3, 4], 1.0)
    }
}

/// Copy the fields `axis` controls from `from` into `to`.
pub fn overwrite_axis(axis: Axis, to: &mut ExperimentConfig, from: &ExperimentConfig) {
    match axis {
        Axis::Pooling => to.guidance.pool = from.guidance.pool,
        Axis::Temperature => {
            to.loss.tau = from.loss.tau;
            to.loss.tau_bar = from.loss.tau_bar;
        }
        Axis::Stages | Axis::Loss => {
            to.loss.lambda_g = from.loss.lambda_g.clone();
            to.loss.lambda_ci = from.loss.lambda_ci.clone();
        }
        Axis::Ci => to.loss.ci_kind = from.loss.ci_kind,
    }
}

/// The cell configurations of `axis` around `base`.
pub fn cells(base: &ExperimentConfig, axis: Axis) -> Vec<Cell> {
    let with = |name: String, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Cell { name, config }
    };
    match axis {
        Axis::Pooling => POOL_OPS
            .iter()
            .map(|&op| with(op.name().into(), &|c| c.guidance.pool = op))
            .collect(),
        Axis::Temperature => TEMPERATURE_PAIRS
            .iter()
            .map(|&(t, tb)| {
                with(format!("tau{t}-taubar{tb}"), &|c| {
                    c.loss.tau = t;
                    c.loss.tau_bar = tb;
                })
            })
            .collect(),
        Axis::Stages => {
            let (wg, wc) = (on_weight(&base.loss.lambda_g), on_weight(&base.loss.lambda_ci));
            STAGE_SETS
                .iter()
                .map(|&(name, set)| {
                    with(name.into(), &|c| {
                        c.loss.lambda_g = stage_weights(set, wg);
                        c.loss.lambda_ci = stage_weights(set, wc);
                    })
                })
                .collect()
        }
        Axis::Loss => {
            let (g, ci) = (enabled(&base.loss.lambda_g), enabled(&base.loss.lambda_ci));
            let zero = vec![0.0; N_STAGES];
            let pick = [(&zero, &zero), (&g, &zero), (&zero, &ci), (&g, &ci)];
            LOSS_TOGGLES
                .iter()
                .zip(pick)
                .map(|(name, (lg, lc))| {
                    with((*name).into(), &|c| {
                        c.loss.lambda_g = lg.clone();
                        c.loss.lambda_ci = lc.clone();
                    })
                })
                .collect()
        }
        Axis::Ci => [CiKind::Relational, CiKind::Infonce]
            .into_iter()
            .map(|k| with(k.name().into(), &|c| c.loss.ci_kind = k))
            .collect(),
    }
}

impl AblationGrid {
    pub fn new(base: ExperimentConfig, axis: Axis, seeds: Vec<u64>) -> Result<Self> {
        base.validate()?;
        if seeds.is_empty() {
            return Err(Error::Config("an ablation needs at least one seed".into()));
        }
        let cells = cells(&base, axis);
        for c in &cells {
            c.config.validate()?;
        }
        Ok(Self {
            axis,
            base,
            cells,
            seeds,
        })
    }

    /// Configuration of one `(cell, seed)` run.
    pub fn run_config(&self, cell: &Cell, seed: u64) -> ExperimentConfig {
        let mut c = cell.config.clone();
        c.seed = seed;
        c
    }
}

/// Outcome of one `(cell, seed)` run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub cell: String,
    pub seed: u64,
    pub outcome: std::result::Result<MetricReport, String>,
    pub out_dir: PathBuf,
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                sd: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub cell: String,
    pub runs: usize,
    pub failed: usize,
    pub real_acc: Stat,
    pub match_rate: Stat,
    pub cka: Stat,
    pub ref_head_acc: Stat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSummary {
    pub axis: Axis,
    pub rows: Vec<CellSummary>,
    pub runs: Vec<RunRecord>,
}

impl AblationSummary {
    pub fn row(&self, cell: &str) -> Option<&CellSummary> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    pub fn failures(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(|r| r.outcome.is_err())
    }

    pub const CSV_HEADER: &'static str = "schema,axis,cell,runs,failed,real_acc_mean,real_acc_sd,\
match_rate_mean,match_rate_sd,cka_mean,cka_sd,ref_head_acc_mean,ref_head_acc_sd";

    /// One header line, then one line per cell.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let mut fields = vec![
                "1".to_string(),
                self.axis.name().to_string(),
                r.cell.clone(),
                r.runs.to_string(),
                r.failed.to_string(),
            ];
            for s in [r.real_acc, r.match_rate, r.cka, r.ref_head_acc] {
                fields.push(format!("{:.6}", s.mean));
                fields.push(format!("{:.6}", s.sd));
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// Per-run table, including failures.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("schema,axis,cell,seed,status,real_acc,match_rate,cka,ref_head_acc,detail\n");
        for r in &self.runs {
            let line = match &r.outcome {
                Ok(m) => format!(
                    "1,{},{},{},ok,{:.6},{:.6},{:.6},{:.6},",
                    self.axis, r.cell, r.seed, m.real_acc, m.match_rate, m.cka, m.ref_head_acc
                ),
                Err(e) => format!(
                    "1,{},{},{},failed,,,,,\"{}\"",
                    self.axis,
                    r.cell,
                    r.seed,
                    e.replace('"', "'")
                ),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

pub fn summarise(axis: Axis, cells: &[Cell], runs: Vec<RunRecord>) -> AblationSummary {
    let rows = cells
        .iter()
        .map(|c| {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.cell == c.name).collect();
            let ok: Vec<&MetricReport> = mine.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let stat = |f: fn(&MetricReport) -> f64| Stat::of(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
            CellSummary {
                cell: c.name.clone(),
                runs: mine.len(),
                failed: mine.len() - ok.len(),
                real_acc: stat(|m| m.real_acc),
                match_rate: stat(|m| m.match_rate),
                cka: stat(|m| m.cka),
                ref_head_acc: stat(|m| m.ref_head_acc),
            }
        })
        .collect();
    AblationSummary { axis, rows, runs }
}

/// Run every cell for every seed under `out_dir/<cell>/seed<k>`, keep going
/// past failed runs, and write `summary.csv` and `runs.csv`.
pub fn run_grid(grid: &AblationGrid, artifacts: &Artifacts, out_dir: &Path) -> Result<AblationSummary> {
    fs::create_dir_all(out_dir)?;
    let mut runs = Vec::new();
    for cell in &grid.cells {
        for &seed in &grid.seeds {
            let dir = out_dir.join(&cell.name).join(format!("seed{seed}"));
            let cfg = grid.run_config(cell, seed);
            let outcome = run_experiment(&cfg, artifacts, &dir, &RunOptions::default())
                .map_err(|e| e.to_string())
                .and_then(|o| o.report.ok_or_else(|| "run stopped before completion".to_string()));
            match &outcome {
                Ok(r) => log::info!("{} seed {seed}: real acc {:.4}", cell.name, r.real_acc),
                Err(e) => log::warn!("{} seed {seed} failed: {e}", cell.name),
            }
            runs.push(RunRecord {
                cell: cell.name.clone(),
                seed,
                outcome,
                out_dir: dir,
            });
        }
    }
    let summary = summarise(grid.axis, &grid.cells, runs);
    fs::write(out_dir.join(SUMMARY_FILE), summary.to_csv())?;
    fs::write(out_dir.join(RUNS_FILE), summary.runs_csv())?;
    Ok(summary)
}

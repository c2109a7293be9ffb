//! Full training runs: epoch loop, evaluation, JSONL metrics, checkpoints
//! and resumption.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use super::config::ExperimentConfig;
use super::state::{train_step, LossBreakdown, TrainState};
use crate::encoder::{Checkpoint, Network, N_STAGES};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, real_accuracy, MetricReport};
use crate::scm::{mix, Benchmark, Domain, Sample};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const STATE_FILE: &str = "state.gckp";
pub const FINAL_FILE: &str = "final.gckp";
pub const REPORT_FILE: &str = "report.json";
pub const DIVERGENCE_FILE: &str = "divergence_dump.gckp";

/// Inputs of a run that are produced ahead of time.
#[derive(Clone, Debug)]
pub struct Artifacts {
    /// Synthetic training split.
    pub train: Vec<Sample>,
    /// Real-domain validation split (evaluation only).
    pub real_val: Vec<Sample>,
    /// Real-styled pretext validation split for the reference head.
    pub pretext_val: Vec<Sample>,
    pub reference: Network,
}

impl Artifacts {
    pub fn from_benchmark(b: &Benchmark, reference: Network) -> Self {
        Self {
            train: b.train.clone(),
            real_val: b.val.clone(),
            pretext_val: b.pretext_val.clone(),
            reference,
        }
    }

    fn check(&self) -> Result<()> {
        if self.train.is_empty() || self.real_val.is_empty() || self.pretext_val.is_empty() {
            return Err(Error::EmptySet);
        }
        if let Some(s) = self.train.iter().find(|s| s.domain != Domain::Synthetic) {
            return Err(Error::Config(format!(
                "training split contains a {:?}-domain sample",
                s.domain
            )));
        }
        if self.reference.head.is_none() {
            return Err(Error::MissingArtifact("reference classifier head".into()));
        }
        Ok(())
    }
}

/// Run control that is not part of the experiment itself.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from `state.gckp` in the output directory when present.
    pub resume: bool,
    /// Checkpoint and return after this many total steps.
    pub stop_after_steps: Option<u64>,
}

/// Per-epoch evaluation record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: LossBreakdown,
    pub real_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub epochs: Vec<EpochSummary>,
    /// Final diagnostics; `None` when the run was stopped early.
    pub report: Option<MetricReport>,
    pub steps: u64,
    pub out_dir: PathBuf,
}

impl RunOutcome {
    pub fn completed(&self) -> bool {
        self.report.is_some()
    }
}

fn loss_fields(map: &mut Map<String, Value>, b: &LossBreakdown) {
    map.insert("loss_total".into(), json!(b.total));
    map.insert("loss_task".into(), json!(b.task));
    for l in 0..N_STAGES {
        map.insert(format!("loss_g_{}", l + 1), json!(b.guidance[l]));
    }
    for l in 0..N_STAGES {
        map.insert(format!("loss_ci_{}", l + 1), json!(b.ci[l]));
    }
}

fn record(kind: &str, step: u64, epoch: usize, lr: f64, losses: &LossBreakdown) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("schema".into(), json!(1));
    m.insert("kind".into(), json!(kind));
    m.insert("step".into(), json!(step));
    m.insert("epoch".into(), json!(epoch));
    loss_fields(&mut m, losses);
    m.insert("lr".into(), json!(lr));
    m
}

struct MetricsLog {
    file: File,
}

impl MetricsLog {
    fn write(&mut self, value: &Map<String, Value>) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(value)?)?;
        Ok(())
    }
}

/// Keep the config line and every record up to `step`; used when resuming
/// so the log matches the checkpoint exactly.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let reader = BufReader::new(File::open(path)?);
    let mut kept = String::new();
    for line in reader.lines() {
        let line = line?;
        let v: Value = serde_json::from_str(&line)?;
        let keep = match v.get("step").and_then(Value::as_u64) {
            Some(s) => s <= step,
            None => true,
        };
        if keep {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

/// Batch order of `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(mix(seed, 0x5f), epoch as u64)));
    order
}

/// Train for the configured epochs on synthetic data, evaluating on the
/// real validation split after every epoch. Writes `config.toml`,
/// `metrics.jsonl`, `state.gckp` (every epoch and on early stop),
/// `final.gckp` and `report.json` into `out_dir`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    artifacts: &Artifacts,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    artifacts.check()?;
    fs::create_dir_all(out_dir)?;
    let echo = cfg.to_toml()?;
    let echo_path = out_dir.join(CONFIG_ECHO_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);
    let state_path = out_dir.join(STATE_FILE);

    let resuming = opts.resume && state_path.exists();
    let mut state = if resuming {
        let previous = fs::read_to_string(&echo_path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", echo_path.display())))?;
        if ExperimentConfig::from_toml(&previous)? != *cfg {
            return Err(Error::Config(format!(
                "cannot resume: {} holds a different configuration",
                echo_path.display()
            )));
        }
        let state = TrainState::from_checkpoint(&Checkpoint::load(&state_path)?, cfg)?;
        truncate_log(&metrics_path, state.step)?;
        state
    } else {
        fs::write(&echo_path, &echo)?;
        let mut log = File::create(&metrics_path)?;
        let mut first = Map::new();
        first.insert("schema".into(), json!(1));
        first.insert("kind".into(), json!("config"));
        first.insert("config".into(), serde_json::to_value(cfg)?);
        writeln!(log, "{}", serde_json::to_string(&first)?)?;
        TrainState::new(cfg, &artifacts.reference)?
    };
    let mut log = MetricsLog {
        file: OpenOptions::new().append(true).open(&metrics_path)?,
    };

    let n = artifacts.train.len();
    let bs = cfg.optim.batch_size;
    let steps_per_epoch = n.div_ceil(bs) as u64;
    let total_steps = steps_per_epoch * cfg.optim.epochs as u64;
    let mut epochs = Vec::new();
    let mut order_epoch = usize::MAX;
    let mut order = Vec::new();
    let mut report = None;

    while state.step < total_steps {
        let epoch = (state.step / steps_per_epoch) as usize;
        let b = (state.step % steps_per_epoch) as usize;
        if order_epoch != epoch {
            order = epoch_order(n, cfg.seed, epoch);
            order_epoch = epoch;
        }
        let batch: Vec<&Sample> = order[b * bs..((b + 1) * bs).min(n)]
            .iter()
            .map(|&i| &artifacts.train[i])
            .collect();
        let losses = match train_step(&mut state, cfg, &batch) {
            Ok(l) => l,
            Err(e @ Error::Divergence { .. }) => {
                state.to_checkpoint(cfg)?.save(out_dir.join(DIVERGENCE_FILE))?;
                let mut m = Map::new();
                m.insert("schema".into(), json!(1));
                m.insert("kind".into(), json!("divergence"));
                m.insert("step".into(), json!(state.step));
                m.insert("detail".into(), json!(e.to_string()));
                log.write(&m)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let step = state.step;
        if cfg.eval.log_every > 0 && step % cfg.eval.log_every as u64 == 0 {
            log.write(&record("step", step, epoch, state.opt.lr, &losses))?;
        }

        if step % steps_per_epoch == 0 {
            let mean: Vec<f64> = state.epoch_sums.iter().map(|s| s / steps_per_epoch as f64).collect();
            let mean_loss = LossBreakdown::from_array(&mean);
            let last = step == total_steps;
            let mut rec = record("epoch", step, epoch, state.opt.lr, &mean_loss);
            let real_acc = if last || cfg.eval.full_every_epoch {
                let r = evaluate(
                    &state.pair.online,
                    &state.pair.reference,
                    &artifacts.real_val,
                    &artifacts.pretext_val,
                    cfg.eval.match_seed,
                )?;
                rec.insert("real_acc".into(), json!(r.real_acc));
                rec.insert("match_rate".into(), json!(r.match_rate));
                rec.insert("cka".into(), json!(r.cka));
                rec.insert("ref_head_acc".into(), json!(r.ref_head_acc));
                let acc = r.real_acc;
                if last {
                    report = Some(r);
                }
                acc
            } else {
                let acc = real_accuracy(&state.pair.online, &artifacts.real_val)?;
                rec.insert("real_acc".into(), json!(acc));
                acc
            };
            log.write(&rec)?;
            log::info!("epoch {epoch}: loss {:.4} real acc {real_acc:.4}", mean_loss.total);
            epochs.push(EpochSummary {
                epoch,
                step,
                mean_loss,
                real_acc,
            });
            state.epoch_sums = Default::default();
            state.to_checkpoint(cfg)?.save(&state_path)?;
        }

        if opts.stop_after_steps == Some(step) && step < total_steps {
            state.to_checkpoint(cfg)?.save(&state_path)?;
            return Ok(RunOutcome {
                epochs,
                report: None,
                steps: step,
                out_dir: out_dir.to_path_buf(),
            });
        }
    }

    state.to_checkpoint(cfg)?.save(out_dir.join(FINAL_FILE))?;
    // a resumed, already-finished run (or a zero-epoch run) still reports
    let report = match report {
        Some(r) => r,
        None => evaluate(
            &state.pair.online,
            &state.pair.reference,
            &artifacts.real_val,
            &artifacts.pretext_val,
            cfg.eval.match_seed,
        )?,
    };
    fs::write(out_dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    let report = Some(report);
    Ok(RunOutcome {
        epochs,
        report,
        steps: state.step,
        out_dir: out_dir.to_path_buf(),
    })
}

use std::fs;
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use gcisg_core::ablation::{run_grid, AblationGrid, Axis};
use gcisg_core::encoder::{pretrain_reference, Checkpoint, Network};
use gcisg_core::gradcheck::{run_suite_variant, Variant};
use gcisg_core::metrics::{dump_features, evaluate};
use gcisg_core::scm::Benchmark;
use gcisg_core::trainer::{run_experiment, Artifacts, ExperimentConfig, RunOptions};
use gcisg_core::{Error, Result};

use crate::args::{build_config, parse_seeds, resolve, workdir};
use crate::Failure;

/// Name of the config echo written next to a command's outputs.
pub const ECHO_SUFFIX: &str = "config.toml";

fn echo_next_to(file: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    let dir = file.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    cfg.save(dir.join(format!("{stem}.{ECHO_SUFFIX}")))
}

fn arg(m: &ArgMatches, name: &str) -> String {
    m.get_one::<String>(name).cloned().unwrap_or_default()
}

pub fn load_reference(path: &Path) -> Result<Network> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "reference checkpoint {} (run pretrain-ref first)",
            path.display()
        )));
    }
    Network::import("reference", &Checkpoint::load(path)?)
}

fn load_data(dir: &Path) -> Result<Benchmark> {
    Benchmark::import(dir)
}

fn artifacts(cfg: &ExperimentConfig, wd: &Path, data: &Path) -> Result<Artifacts> {
    let bench = load_data(data)?;
    if bench.spec != cfg.data {
        log::warn!(
            "dataset in {} was generated with different data settings than the current config",
            data.display()
        );
    }
    let reference = load_reference(&resolve(wd, &cfg.model.reference))?;
    Ok(Artifacts::from_benchmark(&bench, reference))
}

pub fn dispatch(m: &ArgMatches) -> std::result::Result<(), Failure> {
    let wd = workdir(m);
    let (name, sub) = m.subcommand().expect("subcommand required");
    if name == "gradcheck" {
        return gradcheck(sub);
    }
    let cfg = build_config(sub, &wd)?;
    match name {
        "gen-data" => gen_data(&cfg, &resolve(&wd, arg(sub, "out")))?,
        "pretrain-ref" => {
            let out = sub
                .get_one::<String>("out")
                .map(|o| resolve(&wd, o))
                .unwrap_or_else(|| resolve(&wd, &cfg.model.reference));
            pretrain(&cfg, &resolve(&wd, arg(sub, "data")), &out)?
        }
        "train" => {
            let opts = RunOptions {
                resume: sub.get_flag("resume"),
                stop_after_steps: sub.get_one::<u64>("stop-after-steps").copied(),
            };
            train(&cfg, &wd, &resolve(&wd, arg(sub, "data")), &resolve(&wd, arg(sub, "out")), &opts)?
        }
        "eval" => eval(
            &cfg,
            &wd,
            &resolve(&wd, arg(sub, "ckpt")),
            &resolve(&wd, arg(sub, "data")),
            &resolve(&wd, arg(sub, "out")),
            sub.get_one::<String>("features").map(|f| resolve(&wd, f)),
        )?,
        "ablate" => {
            let axis: Axis = arg(sub, "axis").parse()?;
            let seeds = parse_seeds(&arg(sub, "seeds"))?;
            let out = sub
                .get_one::<String>("out")
                .map(|o| resolve(&wd, o))
                .unwrap_or_else(|| wd.join("ablation").join(axis.name()));
            ablate(&cfg, &wd, &resolve(&wd, arg(sub, "data")), axis, seeds, &out)?
        }
        other => unreachable!("unhandled subcommand {other}"),
    }
    Ok(())
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    cfg.save(out.join(ECHO_SUFFIX))?;
    let bench = Benchmark::generate(&cfg.data);
    bench.export(out)?;
    println!(
        "wrote {} train / {} val / {} pretext-train / {} pretext-val samples to {}",
        bench.train.len(),
        bench.val.len(),
        bench.pretext_train.len(),
        bench.pretext_val.len(),
        out.display()
    );
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<()> {
    echo_next_to(out, cfg)?;
    let bench = load_data(data)?;
    let (net, report) = pretrain_reference(&bench.pretext_train, &bench.pretext_val, &cfg.pretrain)?;
    if !report.reached_target {
        log::warn!(
            "reference reached {:.4}, below the {:.2} target",
            report.final_accuracy,
            cfg.pretrain.target_accuracy
        );
    }
    let mut ck = Checkpoint::new();
    net.export("reference", &mut ck);
    ck.save(out)?;
    let report_path = out.with_extension("json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "reference pretext accuracy {:.4}; checkpoint {}",
        report.final_accuracy,
        out.display()
    );
    Ok(())
}

fn train(cfg: &ExperimentConfig, wd: &Path, data: &Path, out: &Path, opts: &RunOptions) -> Result<()> {
    let arts = artifacts(cfg, wd, data)?;
    log::info!(
        "batch {} for {} epochs (desk-scale schedule), {} synthetic training images",
        cfg.optim.batch_size,
        cfg.optim.epochs,
        arts.train.len()
    );
    let outcome = run_experiment(cfg, &arts, out, opts)?;
    match &outcome.report {
        Some(r) => println!(
            "real_acc {:.4}  match_rate {:.4}  cka {:.4}  ref_head_acc {:.4}  ({} steps, {})",
            r.real_acc,
            r.match_rate,
            r.cka,
            r.ref_head_acc,
            outcome.steps,
            out.display()
        ),
        None => println!("stopped after {} steps; resume with --resume", outcome.steps),
    }
    Ok(())
}

/// The network to evaluate: the online network of a training checkpoint,
/// or the network stored under `reference`.
fn eval_networks(ck: &Checkpoint, fallback_reference: impl FnOnce() -> Result<Network>) -> Result<(Network, Network)> {
    if ck.names().any(|n| n.starts_with("online.")) {
        let online = Network::import("online", ck)?;
        let reference = if ck.names().any(|n| n.starts_with("reference.")) {
            Network::import("reference", ck)?
        } else {
            fallback_reference()?
        };
        Ok((online, reference))
    } else {
        let net = Network::import("reference", ck)?;
        Ok((net.clone(), net))
    }
}

fn eval(
    cfg: &ExperimentConfig,
    wd: &Path,
    ckpt: &Path,
    data: &Path,
    out: &Path,
    features: Option<PathBuf>,
) -> Result<()> {
    echo_next_to(out, cfg)?;
    if !ckpt.exists() {
        return Err(Error::MissingArtifact(format!("checkpoint {}", ckpt.display())));
    }
    let ck = Checkpoint::load(ckpt)?;
    let (net, reference) = eval_networks(&ck, || load_reference(&resolve(wd, &cfg.model.reference)))?;
    let bench = load_data(data)?;
    let report = evaluate(&net, &reference, &bench.val, &bench.pretext_val, cfg.eval.match_seed)?;
    fs::write(out, serde_json::to_string_pretty(&report)?)?;
    if let Some(dir) = features {
        dump_features(&dir, &net, &reference, &bench.val)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn ablate(cfg: &ExperimentConfig, wd: &Path, data: &Path, axis: Axis, seeds: Vec<u64>, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    cfg.save(out.join(format!("base.{ECHO_SUFFIX}")))?;
    let grid = AblationGrid::new(cfg.clone(), axis, seeds)?;
    let arts = artifacts(cfg, wd, data)?;
    let summary = run_grid(&grid, &arts, out)?;
    print!("{}", summary.to_csv());
    let failed = summary.failures().count();
    if failed > 0 {
        log::warn!("{failed} ablation run(s) failed; see runs.csv");
    }
    Ok(())
}

fn gradcheck(m: &ArgMatches) -> std::result::Result<(), Failure> {
    let seed = *m.get_one::<u64>("seed").expect("has default");
    let variant = Variant {
        corrupt_sap: m.get_flag("corrupt-sap"),
    };
    println!("gradient check, seed {seed}");
    let report = run_suite_variant(seed, variant);
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::GradcheckFailed)
    }
}

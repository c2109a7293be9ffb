//! Command-line grammar and configuration assembly.

use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use gcisg_core::trainer::ExperimentConfig;
use gcisg_core::{Error, Result};

/// Environment fallback for the global seed.
pub const SEED_ENV: &str = "GCISG_SEED";

/// Every config key as a `--section.key <value>` flag.
fn config_flags() -> Vec<Arg> {
    ExperimentConfig::default()
        .keys()
        .expect("default config serialises")
        .into_iter()
        .map(|k| {
            Arg::new(k.clone())
                .long(k.clone())
                .value_name("VALUE")
                .num_args(1)
                .global(true)
                .help_heading("Config overrides")
                .hide_short_help(true)
        })
        .collect()
}

pub fn command() -> Command {
    let data = || {
        Arg::new("data")
            .long("data")
            .value_name("DIR")
            .default_value("data")
            .help("Dataset directory written by gen-data")
    };
    Command::new("gcisg")
        .about("Guided causal-invariant syn-to-real training on a procedural benchmark")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("workdir")
                .long("workdir")
                .value_name("DIR")
                .default_value(".")
                .global(true)
                .help("Base directory for every relative path"),
        )
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .global(true)
                .help("Experiment config (TOML); flags override its values"),
        )
        .args(config_flags())
        .subcommand(
            Command::new("gen-data")
                .about("Generate and export the benchmark splits")
                .arg(Arg::new("out").long("out").value_name("DIR").default_value("data")),
        )
        .subcommand(
            Command::new("pretrain-ref")
                .about("Pretrain the frozen reference network on the real-styled pretext task")
                .arg(data())
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("FILE")
                        .help("Checkpoint path [default: model.reference]"),
                ),
        )
        .subcommand(
            Command::new("train")
                .about("Train on synthetic data, evaluating on the real split every epoch")
                .arg(data())
                .arg(Arg::new("out").long("out").value_name("DIR").default_value("run"))
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .action(ArgAction::SetTrue)
                        .help("Continue from the state checkpoint in --out"),
                )
                .arg(
                    Arg::new("stop-after-steps")
                        .long("stop-after-steps")
                        .value_name("N")
                        .value_parser(clap::value_parser!(u64))
                        .help("Checkpoint and exit after N total steps"),
                ),
        )
        .subcommand(
            Command::new("eval")
                .about("Evaluate a checkpoint: real accuracy, match rate, CKA, reference-head accuracy")
                .arg(Arg::new("ckpt").long("ckpt").value_name("FILE").required(true))
                .arg(data())
                .arg(Arg::new("out").long("out").value_name("FILE").default_value("report.json"))
                .arg(
                    Arg::new("features")
                        .long("features")
                        .value_name("DIR")
                        .help("Also dump penultimate features of model and reference"),
                ),
        )
        .subcommand(
            Command::new("ablate")
                .about("Sweep one axis over several seeds and summarise as CSV")
                .arg(
                    Arg::new("axis")
                        .long("axis")
                        .value_name("AXIS")
                        .required(true)
                        .help("pooling | temperature | stages | loss | ci"),
                )
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_name("LIST")
                        .default_value("0,1,2")
                        .help("Comma-separated run seeds"),
                )
                .arg(data())
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("DIR")
                        .help("Output directory [default: ablation/<axis>]"),
                ),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Finite-difference check of every differentiable operation")
                .arg(
                    Arg::new("seed")
                        .long("check-seed")
                        .value_name("N")
                        .default_value("0")
                        .value_parser(clap::value_parser!(u64)),
                )
                .arg(
                    Arg::new("corrupt-sap")
                        .long("corrupt-sap")
                        .action(ArgAction::SetTrue)
                        .hide(true)
                        .help("Negative control: detach the attention path of self-attention pooling"),
                ),
        )
}

/// `p` if absolute, otherwise `workdir/p`.
pub fn resolve(workdir: &Path, p: impl AsRef<Path>) -> PathBuf {
    let p = p.as_ref();
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

pub fn workdir(m: &ArgMatches) -> PathBuf {
    PathBuf::from(m.get_one::<String>("workdir").expect("has default"))
}

/// Config file (if any), then the seed fallback, then flag overrides in
/// key order. The environment seed applies only when neither the file nor
/// a flag sets `seed`.
pub fn build_config(m: &ArgMatches, workdir: &Path) -> Result<ExperimentConfig> {
    let (mut cfg, file_seed) = match m.get_one::<String>("config") {
        Some(p) => {
            let path = resolve(workdir, p);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            (ExperimentConfig::from_toml(&text)?, table.contains_key("seed"))
        }
        None => (ExperimentConfig::default(), false),
    };
    let keys = cfg.keys()?;
    if !file_seed && m.get_one::<String>("seed").is_none() {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed: u64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            cfg.seed = seed;
        }
    }
    for k in &keys {
        if let Some(v) = m.get_one::<String>(k) {
            cfg.set(k, v)?;
        }
    }
    Ok(cfg)
}

pub fn parse_seeds(list: &str) -> Result<Vec<u64>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad seed {s:?} in --seeds"))))
        .collect::<Result<Vec<u64>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(Error::Config("--seeds is empty".into()))
            } else {
                Ok(v)
            }
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_is_consistent() {
        command().debug_assert();
    }

    #[test]
    fn overrides_apply_after_the_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("c.toml"), "[guidance]\npool = \"gap\"\n[optim]\nepochs = 4\n").unwrap();
        let m = command()
            .try_get_matches_from(["gcisg", "--config", "c.toml", "train", "--optim.epochs", "2"])
            .unwrap();
        let cfg = build_config(&m, dir.path()).unwrap();
        assert_eq!(cfg.optim.epochs, 2);
        assert_eq!(cfg.guidance.pool, gcisg_core::guidance::PoolOp::Gap);
    }

    #[test]
    fn seeds_parse() {
        assert_eq!(parse_seeds("0, 1,2").unwrap(), vec![0, 1, 2]);
        assert!(parse_seeds("a").is_err());
        assert!(parse_seeds("").is_err());
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(command().try_get_matches_from(["gcisg", "train", "--optim.speed", "2"]).is_err());
        assert!(command().try_get_matches_from(["gcisg", "train", "--bogus"]).is_err());
    }
}

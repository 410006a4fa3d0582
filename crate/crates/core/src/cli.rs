//! Command-line front end.
//!
//! Any `--a.b.c VALUE` (or `--a.b.c=VALUE`) argument sets the config field
//! `a.b.c`; these are pulled out of argv before the fixed flags are parsed.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::gradcheck;
use crate::train::checkpoint::Checkpoint;
use crate::train::metrics::export_metrics;
use crate::train::run::{self, encoder_from_checkpoint, knn_encoder, probe_encoder, random_encoder, PretrainOptions};
use crate::train::TrainConfig;

#[derive(Debug, Parser)]
#[command(name = "dualmim", version, about = "Masked image modeling pretraining and frozen-feature evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain a student encoder and write metrics and checkpoints.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on frozen class-token features.
    LinearProbe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: EncoderSource,
    },
    /// k-nearest-neighbour accuracy on frozen class-token features.
    KnnEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: EncoderSource,
    },
    /// Clean copy of a run's metrics plus a summary.
    ExportMetrics {
        #[command(flatten)]
        common: Common,
        /// Run directory holding metrics.csv (defaults to --out).
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config layered over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CIFAR-10 binary directory (or its parent).
    #[arg(long, default_value = "data")]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct EncoderSource {
    /// Evaluate the student encoder of this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the encoder at its seeded initialization.
    #[arg(long)]
    pub random_init: bool,
}

/// Splits `--a.b VALUE` / `--a.b=VALUE` pairs from the remaining arguments.
pub fn split_overrides(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a.clone());
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (flag, None),
        };
        if !key.contains('.') {
            rest.push(a.clone());
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .cloned()
                .ok_or_else(|| Error::Config(format!("override --{key} needs a value")))?,
        };
        overrides.push((key.to_string(), value));
    }
    Ok((rest, overrides))
}

fn config_for(common: &Common, base: Option<&TrainConfig>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let mut all = overrides.to_vec();
    if let Some(seed) = common.seed {
        all.push(("seed".into(), seed.to_string()));
    }
    base.cloned().unwrap_or_default().layered(common.config.as_deref(), &all)
}

fn write_report(out: &Path, file: &str, text: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(file), text)?;
    print!("{text}");
    Ok(())
}

fn evaluation(common: &Common, source: &EncoderSource, overrides: &[(String, String)], knn: bool) -> Result<()> {
    let (cfg, encoder, store) = match &source.checkpoint {
        Some(path) => {
            let (stored, encoder, store) = encoder_from_checkpoint(path)?;
            let cfg = config_for(common, Some(&stored), overrides)?;
            if cfg.model != stored.model {
                return Err(Error::Config("model fields cannot be overridden when loading a checkpoint".into()));
            }
            (cfg, encoder, store)
        }
        None => {
            let cfg = config_for(common, None, overrides)?;
            let (encoder, store) = random_encoder(&cfg);
            (cfg, encoder, store)
        }
    };
    let train = run::load_train(&cfg, &common.data_dir)?;
    let test = run::load_test(&cfg, &common.data_dir)?;
    let origin = source
        .checkpoint
        .as_ref()
        .map_or("random_init".to_string(), |p| p.display().to_string());
    if knn {
        let acc = knn_encoder(&cfg, &encoder, &store, &train, &test)?;
        let text = format!(
            "encoder: {origin}\nk: {}\nexclude_self: {}\ntop1: {acc:.4}\n",
            cfg.eval.knn_k, cfg.eval.knn_exclude_self
        );
        write_report(&common.out, "knn_eval.txt", &text)
    } else {
        let r = probe_encoder(&cfg, &encoder, &store, &train, &test)?;
        let text = format!(
            "encoder: {origin}\nprobe_epochs: {}\ntrain_top1: {:.4}\ntest_top1: {:.4}\n",
            cfg.eval.probe_epochs, r.train_acc, r.test_acc
        );
        write_report(&common.out, "linear_probe.txt", &text)
    }
}

pub fn execute(cli: &Cli, overrides: &[(String, String)]) -> Result<()> {
    match &cli.command {
        Command::Pretrain { common, resume } => {
            let cfg = match resume {
                // the stored config governs a resumed run
                Some(path) => TrainConfig::from_toml(&Checkpoint::load(path)?.config)?,
                None => config_for(common, None, overrides)?,
            };
            let records = run::load_train(&cfg, &common.data_dir)?;
            let opts = PretrainOptions {
                resume: resume.clone(),
                ..Default::default()
            };
            let out = run::pretrain(&cfg, &records, &common.out, &opts)?;
            if let Some(last) = out.rows.last() {
                println!("{}", last.to_csv());
            }
            println!("checkpoint: {}", out.checkpoint.display());
            Ok(())
        }
        Command::LinearProbe { common, source } => evaluation(common, source, overrides, false),
        Command::KnnEval { common, source } => evaluation(common, source, overrides, true),
        Command::ExportMetrics { common, run } => {
            let run_dir = run.as_deref().unwrap_or(&common.out);
            let (summary, csv) = export_metrics(run_dir, Some(&common.out))?;
            print!("{}", summary.render());
            println!("csv: {}", csv.display());
            Ok(())
        }
        Command::Gradcheck { common } => {
            let seed = common.seed.unwrap_or(0);
            let reports = gradcheck::run_suite(seed)?;
            let mut text = String::new();
            for r in &reports {
                text += &format!("{r}\n");
            }
            let failed = reports.iter().filter(|r| !r.passed()).count();
            text += &format!("{} checks, {failed} failed\n", reports.len());
            write_report(&common.out, "gradcheck.txt", &text)?;
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} gradient checks failed")));
            }
            Ok(())
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_main(args: Vec<String>) -> i32 {
    let (rest, overrides) = match split_overrides(&args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn overrides_are_split_from_flags() {
        let (rest, ov) =
            split_overrides(&argv("dualmim pretrain --loss.lambda_c 0 --out runs/a.b --optim.lr=0.001 --seed 3")).unwrap();
        assert_eq!(rest, argv("dualmim pretrain --out runs/a.b --seed 3"));
        assert_eq!(
            ov,
            vec![
                ("loss.lambda_c".to_string(), "0".to_string()),
                ("optim.lr".to_string(), "0.001".to_string())
            ]
        );
        assert!(split_overrides(&argv("dualmim pretrain --loss.lambda_c")).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run_main(argv("dualmim pretrain --bogus")), 2);
        assert_eq!(run_main(argv("dualmim pretrain --loss.nope 1")), 2);
        assert_eq!(run_main(argv("dualmim pretrain --masking.folds 5")), 2);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nothing");
        let code = run_main(vec![
            "dualmim".into(),
            "pretrain".into(),
            "--data-dir".into(),
            missing.display().to_string(),
        ]);
        assert_eq!(code, 3);
    }

    #[test]
    fn evaluation_needs_an_encoder_source() {
        assert_eq!(run_main(argv("dualmim linear-probe")), 2);
        assert_eq!(run_main(argv("dualmim knn-eval --checkpoint a --random-init")), 2);
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use calireg::data::Split;
use calireg::pipeline::{self, RunConfig, RunPaths};
use calireg::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Uncertainty-aware regression pipeline.
///
/// Any config field can be overridden by its dotted path, e.g.
/// `--train.lambda2 0.8` or `--calib.xi=0.9`.
#[derive(Debug, Parser)]
#[command(name = "calireg", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run config; defaults are used for anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory (defaults to $CALIREG_OUT_DIR/<task>, else runs/<task>).
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the effective config as JSON.
    Config {
        #[command(flatten)]
        common: Common,
    },
    /// Generate the synthetic dataset (train/valid/test JSONL + header).
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory (default: <run-dir>/data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the regressor; writes the checkpoint and history CSV.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fit scale calibration on the validation split.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        test: Option<PathBuf>,
        /// Interval half-width Phi^-1((1 + alpha) / 2) instead of C^-1(alpha) / 2.
        #[arg(long)]
        standard_z: bool,
        /// Interval levels, reported in the given order.
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
    },
    /// Train the boosted-tree decision layer and compare with thresholding.
    Classify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Entropy filtering curve on the test split.
    Filter {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// All stages in order.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct Inputs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Calibration artifact (default: <run-dir>/calibration.json).
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Use raw network scales.
    #[arg(long, conflicts_with = "calibration")]
    no_calibration: bool,
}

impl Inputs {
    fn checkpoint(&self, paths: &RunPaths) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| paths.checkpoint())
    }

    fn calibration(&self, paths: &RunPaths) -> Option<PathBuf> {
        if self.no_calibration {
            None
        } else {
            Some(self.calibration.clone().unwrap_or_else(|| paths.calibration()))
        }
    }
}

/// Pulls `--a.b value` / `--a.b=value` pairs out of argv.
fn split_overrides(args: Vec<String>) -> std::result::Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().unwrap_or("").contains('.')) else {
            rest.push(a);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_owned(), v.to_owned())),
            None => {
                let v = it.next().ok_or_else(|| format!("--{flag} needs a value"))?;
                overrides.push((flag.to_owned(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn load_config(common: &Common, overrides: &[(String, String)]) -> Result<RunConfig> {
    // later stages pick up the config an earlier stage saved in the run directory
    let saved = common
        .run_dir
        .clone()
        .unwrap_or_else(|| RunConfig::default().run_dir())
        .join("config.json");
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None if saved.is_file() => RunConfig::load(&saved)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    if let Some(d) = &common.run_dir {
        cfg.out_dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_run_dir(cfg: &RunConfig) -> Result<RunPaths> {
    let paths = RunPaths::new(cfg.run_dir());
    std::fs::create_dir_all(&paths.root).map_err(|e| Error::Io {
        path: paths.root.clone(),
        source: e,
    })?;
    cfg.save(&paths.config())?;
    Ok(paths)
}

fn data_dir(cfg: &RunConfig, paths: &RunPaths, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.data_dir.clone())
        .unwrap_or_else(|| paths.data())
}

fn split_file(cfg: &RunConfig, paths: &RunPaths, flag: Option<PathBuf>, split: Split) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p),
        None => pipeline::split_path(&data_dir(cfg, paths, None), split),
    }
}

fn execute(cmd: Command, overrides: &[(String, String)]) -> Result<()> {
    match cmd {
        Command::Config { common } => {
            let cfg = load_config(&common, overrides)?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            return Ok(());
        }
        Command::Run { common } => {
            let cfg = load_config(&common, overrides)?;
            let s = pipeline::run_all(&cfg)?;
            println!("{}", s.eval.to_table());
            print_auc(&s.classify);
            println!("run directory: {}", s.paths.root.display());
            return Ok(());
        }
        _ => {}
    }

    let (common, stage) = match cmd {
        Command::Synth { common, out } => (common, Stage::Synth(out)),
        Command::Train { common, data } => (common, Stage::Train(data)),
        Command::Calibrate {
            common,
            checkpoint,
            valid,
            out,
        } => (common, Stage::Calibrate(checkpoint, valid, out)),
        Command::Eval {
            common,
            inputs,
            test,
            standard_z,
            alpha,
        } => (common, Stage::Eval(inputs, test, standard_z, alpha)),
        Command::Classify { common, inputs, data } => (common, Stage::Classify(inputs, data)),
        Command::Filter {
            common,
            inputs,
            valid,
            test,
        } => (common, Stage::Filter(inputs, valid, test)),
        Command::Config { .. } | Command::Run { .. } => unreachable!(),
    };
    let mut cfg = load_config(&common, overrides)?;
    if let Stage::Eval(_, _, standard_z, alpha) = &stage {
        cfg.eval.standard_z |= *standard_z;
        if !alpha.is_empty() {
            cfg.eval.alphas = alpha.clone();
        }
        cfg.validate()?;
    }
    let paths = prepare_run_dir(&cfg)?;

    match stage {
        Stage::Synth(out) => {
            let dir = out.unwrap_or_else(|| paths.data());
            pipeline::cmd_synth(&cfg, &dir)?;
            println!("wrote dataset to {}", dir.display());
        }
        Stage::Train(data) => {
            let dir = data_dir(&cfg, &paths, data.as_deref());
            let outcome = pipeline::cmd_train(&cfg, &dir, &paths.checkpoint(), &paths.history())?;
            let last = outcome.history.last();
            println!(
                "trained {} epochs (best epoch {}), final total loss {:?}",
                outcome.history.len(),
                outcome.best_epoch,
                last.map(|r| r.total)
            );
        }
        Stage::Calibrate(checkpoint, valid, out) => {
            let ckpt = checkpoint.unwrap_or_else(|| paths.checkpoint());
            let valid = split_file(&cfg, &paths, valid, Split::Valid)?;
            let out = out.unwrap_or_else(|| paths.calibration());
            let art = pipeline::cmd_calibrate(&cfg, &ckpt, &valid, &out)?;
            println!("s* = {}, {} bins of width {}", art.s_star, art.n_bins(), art.delta);
        }
        Stage::Eval(inputs, test, _, _) => {
            let test = split_file(&cfg, &paths, test, Split::Test)?;
            let cal = inputs.calibration(&paths);
            let report = pipeline::cmd_eval(
                &cfg,
                &inputs.checkpoint(&paths),
                cal.as_deref(),
                &test,
                &paths.eval_json(),
                &paths.eval_table(),
            )?;
            println!("{}", report.to_table());
        }
        Stage::Classify(inputs, data) => {
            let dir = data_dir(&cfg, &paths, data.as_deref());
            let cal = inputs.calibration(&paths);
            let report = pipeline::cmd_classify(
                &cfg,
                &inputs.checkpoint(&paths),
                cal.as_deref(),
                &dir,
                &paths.forest(),
                &paths.classify(),
            )?;
            print_auc(&report);
        }
        Stage::Filter(inputs, valid, test) => {
            let valid = split_file(&cfg, &paths, valid, Split::Valid)?;
            let test = split_file(&cfg, &paths, test, Split::Test)?;
            let cal = inputs.calibration(&paths);
            let rows = pipeline::cmd_filter(
                &cfg,
                &inputs.checkpoint(&paths),
                cal.as_deref(),
                &valid,
                &test,
                &paths.filter_csv(),
            )?;
            println!("{:>6} {:>14} {:>12} {:>12}", "q", "kept_fraction", "mae", "mse");
            for r in rows {
                println!("{:>6.2} {:>14.4} {:>12.6} {:>12.6}", r.q, r.kept_fraction, r.mae, r.mse);
            }
        }
    }
    pipeline::write_manifest(&paths.root)?;
    Ok(())
}

enum Stage {
    Synth(Option<PathBuf>),
    Train(Option<PathBuf>),
    Calibrate(Option<PathBuf>, Option<PathBuf>, Option<PathBuf>),
    Eval(Inputs, Option<PathBuf>, bool, Vec<f64>),
    Classify(Inputs, Option<PathBuf>),
    Filter(Inputs, Option<PathBuf>, Option<PathBuf>),
}

fn print_auc(r: &pipeline::ClassifyReport) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_owned(), |a| format!("{a:.4}"));
    println!(
        "AUC (y > {}): threshold-on-prediction {}, gbdt {}",
        r.threshold,
        fmt(r.baseline.auc),
        fmt(r.gbdt.auc)
    );
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.cmd, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

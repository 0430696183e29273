use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pcmnet::config::Config;
use pcmnet::error::{Error, Result};
use pcmnet::eval::{export_diagnostics, run_cv};
use pcmnet::feature_store::{generate_synthetic, load_dataset, make_folds, write_dataset, Dataset};
use pcmnet::training::checkpoint::load_checkpoint;
use pcmnet::training::gradcheck::{grad_check, Scope};
use pcmnet::training::{evaluate, train_fold, write_history_csv, TrainOptions};

#[derive(Parser)]
#[command(name = "pcmnet", version, about = "Polarity-congruity multimodal sarcasm detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Atomic,
    Composition,
    Rgat,
    Fusion,
    Full,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Atomic => Scope::Atomic,
            ScopeArg::Composition => Scope::Composition,
            ScopeArg::Rgat => Scope::Rgat,
            ScopeArg::Fusion => Scope::Fusion,
            ScopeArg::Full => Scope::Full,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on all folds but one and keep the best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fold: usize,
        /// Overrides `cv.k`.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// k-fold cross-validation; writes `cv_report.json`.
    Cv {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Metrics of a checkpoint on a dataset, as JSON on stdout.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate the synthetic dataset described by the `[synth]` table.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "full")]
        scope: ScopeArg,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scalars sampled per parameter group.
        #[arg(long, default_value_t = 200)]
        per_group: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write attention, routing and embedding diagnostics.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

fn load(data: &Path) -> Result<Dataset> {
    load_dataset(&manifest_path(data))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, data, fold, k, out } => {
            let mut cfg = Config::load(&config)?;
            if let Some(k) = k {
                cfg.cv.k = k;
            }
            cfg.validate()?;
            let ds = load(&data)?;
            let folds = make_folds(&ds, cfg.cv.k, cfg.cv.seed).map_err(|e| Error::Config(e.to_string()))?;
            let dir = out.join(format!("fold{fold}"));
            let opts = TrainOptions { checkpoint_path: Some(dir.join("best.pcmc")), verbose: true };
            let (state, history) = train_fold(&ds, &folds, fold, &cfg, &opts)?;
            write_history_csv(&dir.join("history.csv"), &history)?;
            let test = ds.subset(&folds.folds[fold]);
            let (metrics, _) = evaluate(&state.best_model(), &test)?;
            write_json(&dir.join("test_metrics.json"), &metrics)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Cv { config, data, k, seed, out } => {
            let mut cfg = Config::load(&config)?;
            if let Some(k) = k {
                cfg.cv.k = k;
            }
            if let Some(s) = seed {
                cfg.cv.seed = s;
            }
            cfg.validate()?;
            let ds = load(&data)?;
            let report = run_cv(&ds, &cfg, &TrainOptions { checkpoint_path: None, verbose: true })?;
            for f in &report.folds {
                write_history_csv(&out.join(format!("fold{}", f.fold)).join("history.csv"), &f.history)?;
            }
            write_json(&out.join("cv_report.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&(report.mean, report.std))?);
        }
        Command::Eval { checkpoint, data } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let ds = load(&data)?;
            let recs: Vec<_> = ds.records.iter().collect();
            let (metrics, _) = evaluate(&ckpt.model, &recs)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Synth { config, out } => {
            let cfg = Config::load(&config)?;
            let ds = generate_synthetic(&cfg.synth).map_err(|e| Error::Config(e.to_string()))?;
            let manifest = write_dataset(&ds, &out)?;
            println!("{} records written to {}", ds.len(), manifest.display());
        }
        Command::Gradcheck { scope, eps, seed, per_group, tolerance } => {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::Config(format!("--eps must be positive, got {eps}")));
            }
            let report = grad_check(scope.into(), eps, seed, per_group)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.max_rel_err >= tolerance {
                return Err(Error::GradientCheck(format!("max relative error {:e} is not below {tolerance:e}", report.max_rel_err)));
            }
        }
        Command::Export { checkpoint, data, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let ds = load(&data)?;
            let recs: Vec<_> = ds.records.iter().collect();
            let s = export_diagnostics(&ckpt.model, &recs, &out)?;
            println!("{} samples exported to {}", s.samples, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

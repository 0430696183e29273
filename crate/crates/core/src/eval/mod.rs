//! Cross-validation harness and diagnostic exports.

pub mod export;
pub mod metrics;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::feature_store::{make_folds, Dataset};
use crate::training::{evaluate, train_fold, EpochRecord, TrainOptions};

pub use export::{export_diagnostics, ExportSummary};
pub use metrics::{compute_metrics, ClassMetrics, Metrics};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_ids: Vec<String>,
    pub metrics: Metrics,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

/// Headline metrics of one summary row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

impl MetricSummary {
    fn of(m: &Metrics) -> Self {
        Self { accuracy: m.accuracy, macro_precision: m.macro_precision, macro_recall: m.macro_recall, macro_f1: m.macro_f1 }
    }

    fn fields(&self) -> [f64; 4] {
        [self.accuracy, self.macro_precision, self.macro_recall, self.macro_f1]
    }

    fn from_fields(f: [f64; 4]) -> Self {
        Self { accuracy: f[0], macro_precision: f[1], macro_recall: f[2], macro_f1: f[3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean: MetricSummary,
    /// Sample standard deviation across folds (divisor `k − 1`).
    pub std: MetricSummary,
    /// TOML snapshot of the run configuration.
    pub config: String,
    pub cv_seed: u64,
    pub train_seed: u64,
}

/// Per-field mean and sample standard deviation over fold metrics.
pub fn summarize(folds: &[FoldResult]) -> (MetricSummary, MetricSummary) {
    let n = folds.len() as f64;
    let rows: Vec<[f64; 4]> = folds.iter().map(|f| MetricSummary::of(&f.metrics).fields()).collect();
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    for k in 0..4 {
        mean[k] = rows.iter().map(|r| r[k]).sum::<f64>() / n;
        if folds.len() > 1 {
            std[k] = (rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        }
    }
    (MetricSummary::from_fields(mean), MetricSummary::from_fields(std))
}

/// Trains on `k − 1` folds and tests on the held-out one, for every fold.
pub fn run_cv(dataset: &Dataset, config: &Config, options: &TrainOptions) -> Result<CvReport> {
    config.validate()?;
    let k = config.cv.k;
    if k > dataset.len() {
        return Err(Error::Config(format!("cv.k = {k} exceeds dataset size {}", dataset.len())));
    }
    let splits = make_folds(dataset, k, config.cv.seed)?;
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let wrap = |e: Error| Error::Fold { fold, source: Box::new(e) };
        let (state, history) = train_fold(dataset, &splits, fold, config, options).map_err(wrap)?;
        let model = state.best_model();
        let test = dataset.subset(&splits.folds[fold]);
        let (metrics, _) = evaluate(&model, &test).map_err(wrap)?;
        if options.verbose {
            eprintln!("fold {fold}: acc={:.4} macro_f1={:.4}", metrics.accuracy, metrics.macro_f1);
        }
        folds.push(FoldResult { fold, test_ids: splits.folds[fold].clone(), metrics, best_epoch: state.best.as_ref().map(|b| b.epoch), history });
    }
    let (mean, std) = summarize(&folds);
    Ok(CvReport { folds, mean, std, config: config.to_toml(), cv_seed: config.cv.seed, train_seed: config.train.seed })
}

//! Staged optimization: per-batch objective, the epoch loop with early
//! stopping, checkpoints and gradient checking.

pub mod checkpoint;
pub mod gradcheck;
pub mod losses;
pub mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::metrics::{compute_metrics, Metrics};
use crate::feature_store::{Dataset, FoldSplits, UtteranceRecord};
use crate::model::{ForwardOptions, Model, Prediction, SampleOutput};
use crate::params::ParamStore;

use checkpoint::{save_checkpoint, CheckpointMeta};
use losses::{contrastive_loss, cross_entropy, total_loss, valence_loss, LossTerms, LossWeights, Stage};
use optim::AdamW;

impl LossWeights {
    pub fn from_config(cfg: &Config) -> Self {
        let t = &cfg.train;
        Self { warmup: t.warmup_weights, refine: t.refine_weights, tau: t.tau, e_warm: t.e_warm }
    }
}

/// Knobs of one objective evaluation.
#[derive(Default)]
pub struct ObjectiveOptions<'a> {
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    pub stop_prior_gradient: bool,
}

pub struct Objective {
    pub total: Var,
    pub terms: LossTerms,
    pub lambdas: [f64; 3],
    pub outputs: Vec<SampleOutput>,
}

/// Builds the staged loss of one batch on `tape`.
pub fn batch_objective(
    model: &Model,
    tape: &Tape,
    records: &[&UtteranceRecord],
    stage: Stage,
    weights: &LossWeights,
    mut opts: ObjectiveOptions<'_>,
) -> Result<Objective> {
    let ab = &model.ablation;
    let with_valence = stage == Stage::Warmup && !ab.no_valence;
    let mut outputs = Vec::with_capacity(records.len());
    for r in records {
        let fo = ForwardOptions { dropout_rng: opts.dropout_rng.as_deref_mut(), stop_prior_gradient: opts.stop_prior_gradient, valence: with_valence };
        outputs.push(model.forward(tape, r, fo)?);
    }
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let logits = tape.concat_rows(&outputs.iter().map(|o| o.logits).collect::<Vec<_>>());
    let cls = cross_entropy(tape, logits, &labels);
    let con = if ab.no_contrastive {
        None
    } else {
        let z = tape.concat_rows(&outputs.iter().map(|o| o.z_incon).collect::<Vec<_>>());
        match contrastive_loss(tape, z, &labels, weights.tau) {
            Ok(l) => Some(l),
            Err(Error::DegenerateBatch) => None,
            Err(e) => return Err(e),
        }
    };
    let val = with_valence.then(|| {
        let probes: Vec<[Var; 3]> = outputs.iter().map(|o| o.valence.expect("valence requested")).collect();
        let targets: Vec<_> = records.iter().map(|r| r.valence).collect();
        valence_loss(tape, &probes, &targets)
    });
    let terms = LossTerms { cls, con, val };
    let lambdas = weights.lambdas(stage);
    Ok(Objective { total: total_loss(tape, stage, &terms, lambdas), terms, lambdas, outputs })
}

/// Per-epoch history row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub l_cls: f64,
    pub l_con: f64,
    pub l_val: f64,
    pub l_total: f64,
    pub val_acc: f64,
    pub val_macro_f1: f64,
    /// `(λ_cls, λ_con, λ_val)` in effect.
    pub lambdas: [f64; 3],
    /// Largest absolute valence-probe gradient entry seen this epoch.
    pub probe_grad_max: f64,
}

#[derive(Clone, Debug)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub macro_f1: f64,
    pub store: ParamStore,
}

pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    /// Epochs completed.
    pub epoch: usize,
    pub stage: Stage,
    pub seed: u64,
    pub best: Option<BestCheckpoint>,
}

impl TrainState {
    /// The model carrying the best validation parameters, or the last ones
    /// if no epoch was evaluated.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            m.store = b.store.clone();
        }
        m
    }

    pub fn meta(&self, config: &Config) -> CheckpointMeta {
        CheckpointMeta {
            seed: self.seed,
            stage: self.stage,
            epoch: self.epoch,
            best_macro_f1: self.best.as_ref().map(|b| b.macro_f1),
            dims: self.model.dims,
            config: config.to_toml(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where the best checkpoint is written whenever it improves.
    pub checkpoint_path: Option<PathBuf>,
    /// Prints one line per epoch to stderr.
    pub verbose: bool,
}

fn lookup<'a>(dataset: &'a Dataset, ids: &[String]) -> Result<Vec<&'a UtteranceRecord>> {
    let recs = dataset.subset(ids);
    if recs.len() != ids.len() {
        return Err(Error::Value(format!("{} of {} requested ids are not in the dataset", ids.len() - recs.len(), ids.len())));
    }
    Ok(recs)
}

pub fn predict_all(model: &Model, records: &[&UtteranceRecord]) -> Result<Vec<Prediction>> {
    records.iter().map(|r| model.predict(r)).collect()
}

pub fn evaluate(model: &Model, records: &[&UtteranceRecord]) -> Result<(Metrics, Vec<Prediction>)> {
    let preds = predict_all(model, records)?;
    let p: Vec<u8> = preds.iter().map(|p| p.label).collect();
    let l: Vec<u8> = records.iter().map(|r| r.label).collect();
    Ok((compute_metrics(&p, &l)?, preds))
}

fn probe_grad_max(model: &Model, grads: &Gradients) -> f64 {
    model
        .store
        .group("probe")
        .into_iter()
        .filter_map(|id| grads.param(id))
        .map(|g| g.max_abs())
        .fold(0.0, f64::max)
}

/// Trains on `train_ids`, monitoring macro-F1 on `val_ids` (or on the
/// training ids when `val_ids` is empty).
pub fn train(
    dataset: &Dataset,
    train_ids: &[String],
    val_ids: &[String],
    config: &Config,
    options: &TrainOptions,
) -> Result<(TrainState, Vec<EpochRecord>)> {
    config.validate()?;
    let t = &config.train;
    let train_recs = lookup(dataset, train_ids)?;
    if train_recs.is_empty() {
        return Err(Error::Value("empty training set".into()));
    }
    let val_recs = if val_ids.is_empty() { train_recs.clone() } else { lookup(dataset, val_ids)? };
    let weights = LossWeights::from_config(config);
    let model = Model::new(config, dataset.dims, t.seed)?;
    let optimizer = AdamW::new(&model.store, t.lr, t.beta1, t.beta2, t.adam_eps, t.weight_decay);
    let mut state = TrainState { model, optimizer, epoch: 0, stage: Stage::at_epoch(0, t.e_warm), seed: t.seed, best: None };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(t.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(t.seed.wrapping_add(2));
    let mut history = Vec::with_capacity(t.max_epochs);
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_recs.len()).collect();

    for epoch in 0..t.max_epochs {
        let stage = Stage::at_epoch(epoch, t.e_warm);
        state.stage = stage;
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0; 4];
        let mut con_batches = 0usize;
        let mut n_batches = 0usize;
        let mut probe_max: f64 = 0.0;
        for (step, chunk) in order.chunks(t.batch_size).enumerate() {
            let batch: Vec<&UtteranceRecord> = chunk.iter().map(|&i| train_recs[i]).collect();
            let tape = Tape::new();
            let obj = batch_objective(
                &state.model,
                &tape,
                &batch,
                stage,
                &weights,
                ObjectiveOptions { dropout_rng: Some(&mut dropout_rng), stop_prior_gradient: false },
            )?;
            let total = tape.item(obj.total);
            let cls = tape.item(obj.terms.cls);
            let con = obj.terms.con.map(|v| tape.item(v));
            let val = obj.terms.val.map(|v| tape.item(v));
            if !total.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|r| r.id.as_str()).collect();
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("L_total={total} L_cls={cls} L_con={con:?} L_val={val:?} batch={ids:?}"),
                });
            }
            let grads = tape.backward(obj.total);
            probe_max = probe_max.max(probe_grad_max(&state.model, &grads));
            state.optimizer.step(&mut state.model.store, &grads);
            sums[0] += cls;
            if let Some(c) = con {
                sums[1] += c;
                con_batches += 1;
            }
            sums[2] += val.unwrap_or(0.0);
            sums[3] += total;
            n_batches += 1;
        }
        state.epoch = epoch + 1;
        let (metrics, _) = evaluate(&state.model, &val_recs)?;
        let nb = n_batches as f64;
        let record = EpochRecord {
            epoch,
            stage,
            l_cls: sums[0] / nb,
            l_con: if con_batches == 0 { 0.0 } else { sums[1] / con_batches as f64 },
            l_val: sums[2] / nb,
            l_total: sums[3] / nb,
            val_acc: metrics.accuracy,
            val_macro_f1: metrics.macro_f1,
            lambdas: weights.lambdas(stage),
            probe_grad_max: probe_max,
        };
        if options.verbose {
            eprintln!(
                "epoch {:>3} {} L_total={:.5} L_cls={:.5} L_con={:.5} L_val={:.5} val_acc={:.4} val_f1={:.4}",
                epoch,
                stage.as_str(),
                record.l_total,
                record.l_cls,
                record.l_con,
                record.l_val,
                record.val_acc,
                record.val_macro_f1
            );
        }
        history.push(record);
        let improved = state.best.as_ref().is_none_or(|b| metrics.macro_f1 > b.macro_f1);
        if improved {
            state.best = Some(BestCheckpoint { epoch, macro_f1: metrics.macro_f1, store: state.model.store.clone() });
            since_best = 0;
            if let Some(path) = &options.checkpoint_path {
                let best = state.best_model();
                save_checkpoint(path, &state.meta(config), &best, Some(&state.optimizer))?;
            }
        } else {
            since_best += 1;
            if t.patience > 0 && since_best >= t.patience {
                break;
            }
        }
    }
    Ok((state, history))
}

/// Splits off the early-stopping ids from the training complement of a
/// fold, deterministically in `seed`.
pub fn split_validation(train_ids: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let n_val = (train_ids.len() as f64 * fraction).round() as usize;
    if n_val == 0 || n_val >= train_ids.len() {
        return (train_ids.to_vec(), Vec::new());
    }
    let mut ids = train_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = ids.split_off(ids.len() - n_val);
    (ids, val)
}

/// Trains on every fold except `fold`.
pub fn train_fold(dataset: &Dataset, folds: &FoldSplits, fold: usize, config: &Config, options: &TrainOptions) -> Result<(TrainState, Vec<EpochRecord>)> {
    if fold >= folds.k() {
        return Err(Error::Config(format!("fold {fold} out of range for k = {}", folds.k())));
    }
    let (train_ids, val_ids) = split_validation(&folds.complement(fold), config.train.val_fraction, config.train.seed.wrapping_add(fold as u64));
    train(dataset, &train_ids, &val_ids, config, options)
}

pub const HISTORY_HEADER: &str = "epoch,L_cls,L_con,L_val,L_total,val_acc,val_macro_f1,stage,lambda_cls,lambda_con,lambda_val,probe_grad_max";

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{HISTORY_HEADER}")?;
    for r in history {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.l_cls,
            r.l_con,
            r.l_val,
            r.l_total,
            r.val_acc,
            r.val_macro_f1,
            r.stage.as_str(),
            r.lambdas[0],
            r.lambdas[1],
            r.lambdas[2],
            r.probe_grad_max
        )?;
    }
    f.flush()?;
    Ok(())
}

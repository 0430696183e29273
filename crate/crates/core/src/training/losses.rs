//! Classification, supervised contrastive and valence losses, and the
//! staged objective.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::feature_store::Valence;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Refine,
}

impl Stage {
    pub fn at_epoch(epoch: usize, e_warm: usize) -> Self {
        if epoch < e_warm {
            Stage::Warmup
        } else {
            Stage::Refine
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Refine => "refine",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// `(λ_cls, λ_con, λ_val)` during warm-up.
    pub warmup: [f64; 3],
    /// `(λ_cls, λ_con)` during refinement.
    pub refine: [f64; 2],
    pub tau: f64,
    pub e_warm: usize,
}

impl LossWeights {
    /// `(λ_cls, λ_con, λ_val)` in effect at `stage`; refinement reports
    /// `λ_val = 0` because the term is not built at all.
    pub fn lambdas(&self, stage: Stage) -> [f64; 3] {
        match stage {
            Stage::Warmup => self.warmup,
            Stage::Refine => [self.refine[0], self.refine[1], 0.0],
        }
    }
}

/// Mean cross-entropy of `B × 2` logits.
pub fn cross_entropy(tape: &Tape, logits: Var, labels: &[u8]) -> Var {
    let (b, c) = tape.shape(logits);
    assert_eq!(b, labels.len(), "one label per logit row");
    let onehot = Matrix::from_fn(b, c, |i, j| if labels[i] as usize == j { 1.0 } else { 0.0 });
    let logp = tape.log_softmax_rows(logits);
    let picked = tape.sum_all(tape.mask_mul(logp, Rc::new(onehot)));
    tape.scale(picked, -1.0 / b as f64)
}

/// Supervised contrastive loss over unit-norm rows `z`.
///
/// For anchor `i`, positives `P(i)` share its label and the denominator runs
/// over every other row. Anchors without positives are left out of the
/// mean; if no anchor has one the batch is degenerate.
pub fn contrastive_loss(tape: &Tape, z: Var, labels: &[u8], tau: f64) -> Result<Var> {
    let b = tape.shape(z).0;
    if b != labels.len() {
        return Err(Error::ShapeMismatch(format!("{b} embeddings for {} labels", labels.len())));
    }
    let positives: Vec<usize> = (0..b).map(|i| (0..b).filter(|&p| p != i && labels[p] == labels[i]).count()).collect();
    let anchors = positives.iter().filter(|&&n| n > 0).count();
    if b < 2 || anchors == 0 {
        return Err(Error::DegenerateBatch);
    }
    let sim = tape.scale(tape.matmul(z, tape.transpose(z)), 1.0 / tau);
    let others: Vec<bool> = (0..b * b).map(|k| k / b != k % b).collect();
    let logp = tape.masked_log_softmax_rows(sim, others);
    let weights = Matrix::from_fn(b, b, |i, p| {
        if i != p && labels[i] == labels[p] {
            1.0 / (positives[i] as f64 * anchors as f64)
        } else {
            0.0
        }
    });
    let total = tape.sum_all(tape.mask_mul(logp, Rc::new(weights)));
    Ok(tape.scale(total, -1.0))
}

/// Mean squared error over the (sample, modality) pairs that carry a
/// target. Zero when none do.
pub fn valence_loss(tape: &Tape, outputs: &[[Var; 3]], targets: &[Option<Valence>]) -> Var {
    assert_eq!(outputs.len(), targets.len(), "one target triple per sample");
    let mut terms = Vec::new();
    for (out, target) in outputs.iter().zip(targets) {
        let Some(t) = target else { continue };
        for m in 0..3 {
            if let Some(v) = t[m] {
                let d = tape.affine(out[m], 1.0, -v);
                terms.push(tape.mul(d, d));
            }
        }
    }
    if terms.is_empty() {
        return tape.constant(Matrix::scalar(0.0));
    }
    let n = terms.len();
    let stacked = tape.concat_rows(&terms);
    tape.scale(tape.sum_all(stacked), 1.0 / n as f64)
}

/// Component losses of one batch. A `None` term is structurally absent.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub con: Option<Var>,
    pub val: Option<Var>,
}

/// Warm-up: `λ_cls L_cls + λ_con L_con + λ_val L_val`. Refinement drops the
/// valence term from the graph whatever `terms.val` holds.
pub fn total_loss(tape: &Tape, stage: Stage, terms: &LossTerms, lambdas: [f64; 3]) -> Var {
    let mut total = tape.scale(terms.cls, lambdas[0]);
    if let Some(c) = terms.con {
        total = tape.add(total, tape.scale(c, lambdas[1]));
    }
    if stage == Stage::Warmup {
        if let Some(v) = terms.val {
            total = tape.add(total, tape.scale(v, lambdas[2]));
        }
    }
    total
}

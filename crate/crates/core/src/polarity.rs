//! Shared polarity space, contradiction matrices and the valence probe.
//!
//! Two projector instances exist per model: the atomic one, shared by the
//! atomic attention and the composition graphs, and the contextual one used
//! by the conversation graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, Tape, Var};
use crate::encoding::{masked_mean, ModalSequence};
use crate::error::{Error, Result};
use crate::params::{normal, Linear, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectorScope {
    AtomicShared,
    Contextual,
}

/// Two-layer perceptron `d_enc → d_h → d_p` followed by guarded L2
/// normalization.
#[derive(Clone, Copy, Debug)]
pub struct PolarityProjector {
    pub hidden: Linear,
    pub out: Linear,
    pub scope: ProjectorScope,
    pub norm_eps: f64,
}

impl PolarityProjector {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_enc: usize,
        d_hidden: usize,
        d_pol: usize,
        scope: ProjectorScope,
        norm_eps: f64,
    ) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), d_enc, d_hidden, true),
            out: Linear::new(store, rng, &format!("{name}.out"), d_hidden, d_pol, true),
            scope,
            norm_eps,
        }
    }

    pub fn d_in(&self, store: &ParamStore) -> usize {
        self.hidden.dims(store).0
    }

    /// Perceptron output before normalization.
    pub fn pre_norm(&self, tape: &Tape, store: &ParamStore, x: Var) -> Var {
        let h = tape.relu(self.hidden.forward(tape, store, x));
        self.out.forward(tape, store, h)
    }
}

/// Unit-norm polarity rows `[L × d_p]`; masked rows are zero.
#[derive(Clone, Debug)]
pub struct PolaritySequence {
    pub rows: Var,
    pub mask: Vec<bool>,
}

/// Projects arbitrary rows (sequence rows or graph nodes) into the
/// polarity space.
pub fn project_rows(tape: &Tape, store: &ParamStore, feats: Var, mask: &[bool], proj: &PolarityProjector) -> Result<PolaritySequence> {
    let (rows, cols) = tape.shape(feats);
    if cols != proj.d_in(store) || rows != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "polarity input is {rows}x{cols} with {} mask entries, projector expects {} columns",
            mask.len(),
            proj.d_in(store)
        )));
    }
    let pre = proj.pre_norm(tape, store, feats);
    let unit = tape.l2_normalize_rows(pre, proj.norm_eps);
    Ok(PolaritySequence { rows: tape.mask_rows(unit, mask), mask: mask.to_vec() })
}

pub fn project_polarity(tape: &Tape, store: &ParamStore, seq: &ModalSequence, proj: &PolarityProjector) -> Result<PolaritySequence> {
    project_rows(tape, store, seq.feats, &seq.mask, proj)
}

/// `C[i][j] = 1 − P_q[i] · P_k[j]`.
pub fn contradiction_matrix(tape: &Tape, p_q: &PolaritySequence, p_k: &PolaritySequence) -> Result<Var> {
    let (_, dq) = tape.shape(p_q.rows);
    let (_, dk) = tape.shape(p_k.rows);
    if dq != dk {
        return Err(Error::ShapeMismatch(format!("polarity widths differ: {dq} vs {dk}")));
    }
    let kt = tape.transpose(p_k.rows);
    let cos = tape.matmul(p_q.rows, kt);
    Ok(tape.affine(cos, -1.0, 1.0))
}

/// Scalar readout `tanh(w · mean(P) + b)` for one modality.
#[derive(Clone, Copy, Debug)]
pub struct ValenceProbe {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ValenceProbe {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_pol: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), normal(rng, d_pol, 1, (1.0 / d_pol as f64).sqrt())),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, 1)),
        }
    }
}

pub fn valence_probe(tape: &Tape, store: &ParamStore, p: &PolaritySequence, probe: &ValenceProbe) -> Var {
    let pooled = masked_mean(tape, p.rows, &p.mask);
    let z = tape.matmul(pooled, store.var(tape, probe.weight));
    let z = tape.add(z, store.var(tape, probe.bias));
    tape.tanh(z)
}

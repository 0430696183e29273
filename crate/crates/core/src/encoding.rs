//! Projection of raw modality features into the shared encoding space.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::feature_store::VisualTensor;
use crate::params::{LayerNorm, Linear, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

    pub fn index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Audio => 1,
            Modality::Visual => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Audio => "a",
            Modality::Visual => "v",
        }
    }
}

/// Encoded sequence `[L × d_enc]` with its validity mask. Masked rows are
/// exactly zero.
#[derive(Clone, Debug)]
pub struct ModalSequence {
    pub feats: Var,
    pub mask: Vec<bool>,
    pub modality: Modality,
}

impl ModalSequence {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `Dropout(ReLU(LayerNorm(x W + b)))` for one modality.
#[derive(Clone, Copy, Debug)]
pub struct EncoderParams {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub dropout: f64,
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_enc: usize, dropout: f64, ln_eps: f64) -> Self {
        Self {
            proj: Linear::new(store, rng, &format!("{name}.proj"), d_in, d_enc, true),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_enc, ln_eps),
            dropout,
        }
    }
}

/// Frame-major flattening: row `i·K + j` holds frame `i`, subject `j`.
pub fn flatten_visual(visual: &VisualTensor) -> Result<(Matrix, Vec<bool>)> {
    let n = visual.frames * visual.subjects;
    if visual.data.len() != n * visual.dim || visual.present.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "visual tensor declares {}x{}x{} but holds {} values and {} flags",
            visual.frames,
            visual.subjects,
            visual.dim,
            visual.data.len(),
            visual.present.len()
        )));
    }
    let mut m = Matrix::from_vec(n, visual.dim, visual.data.clone());
    for (i, &p) in visual.present.iter().enumerate() {
        if !p {
            m.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
        }
    }
    Ok((m, visual.present.clone()))
}

/// Encodes one modality. Dropout runs only when `dropout_rng` is given;
/// masked rows are zeroed after the transform.
pub fn encode_modality(
    tape: &Tape,
    store: &ParamStore,
    raw: Var,
    mask: &[bool],
    params: &EncoderParams,
    modality: Modality,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ModalSequence> {
    let (rows, cols) = tape.shape(raw);
    let (d_in, _) = params.proj.dims(store);
    if cols != d_in || rows != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "{modality:?} input is {rows}x{cols} with {} mask entries, encoder expects {d_in} columns",
            mask.len()
        )));
    }
    let h = params.proj.forward(tape, store, raw);
    let h = params.norm.forward(tape, store, h);
    let mut h = tape.relu(h);
    if let Some(rng) = dropout_rng {
        if params.dropout > 0.0 {
            let keep = 1.0 - params.dropout;
            let (r, c) = tape.shape(h);
            let m = Matrix::from_fn(r, c, |_, _| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 });
            h = tape.mask_mul(h, Rc::new(m));
        }
    }
    let feats = tape.mask_rows(h, mask);
    Ok(ModalSequence { feats, mask: mask.to_vec(), modality })
}

/// Mean over valid rows as a `1 × d` node; all-invalid gives zeros.
pub fn masked_mean(tape: &Tape, feats: Var, mask: &[bool]) -> Var {
    let n = mask.iter().filter(|&&m| m).count();
    let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let weights = Matrix::from_fn(1, mask.len(), |_, j| if mask[j] { w } else { 0.0 });
    let weights = tape.constant(weights);
    tape.matmul(weights, feats)
}

/// Utterance-level anchor: masked temporal mean of an encoded sequence.
pub fn pool_anchor(tape: &Tape, seq: &ModalSequence) -> Var {
    masked_mean(tape, seq.feats, &seq.mask)
}

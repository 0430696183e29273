//! Precomputed-feature datasets: on-disk format, loading, synthetic
//! generation and cross-validation folds.

pub mod array;
mod folds;
mod manifest;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use folds::{make_folds, FoldSplits};
pub use manifest::{load_dataset, write_dataset};
pub use synth::{generate_synthetic, SynthConfig};

/// Declared array dimensions shared by every record of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "L_T")]
    pub l_t: usize,
    #[serde(rename = "L_A")]
    pub l_a: usize,
    #[serde(rename = "L_V")]
    pub l_v: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "d_T")]
    pub d_t: usize,
    #[serde(rename = "d_A")]
    pub d_a: usize,
    #[serde(rename = "d_V")]
    pub d_v: usize,
    #[serde(rename = "J")]
    pub j: usize,
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l_t, self.l_a, self.l_v, self.k, self.d_t, self.d_a, self.d_v];
        if all.contains(&0) {
            return Err(Error::Value(format!("all dims must be positive, got {self:?}")));
        }
        Ok(())
    }
}

impl Default for Dims {
    fn default() -> Self {
        Self { l_t: 8, l_a: 8, l_v: 4, k: 4, d_t: 12, d_a: 12, d_v: 12, j: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConflictMode {
    Modal,
    Contextual,
    None,
}

/// Visual features `[frames × subjects × dim]` with a presence flag per
/// (frame, subject) slot. Absent slots are all-zero.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTensor {
    pub frames: usize,
    pub subjects: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub present: Vec<bool>,
}

impl VisualTensor {
    pub fn zeros(frames: usize, subjects: usize, dim: usize) -> Self {
        Self { frames, subjects, dim, data: vec![0.0; frames * subjects * dim], present: vec![false; frames * subjects] }
    }

    pub fn slot(&self, frame: usize, subject: usize) -> &[f64] {
        let off = (frame * self.subjects + subject) * self.dim;
        &self.data[off..off + self.dim]
    }

    pub fn slot_mut(&mut self, frame: usize, subject: usize) -> &mut [f64] {
        let off = (frame * self.subjects + subject) * self.dim;
        &mut self.data[off..off + self.dim]
    }

    pub fn is_present(&self, frame: usize, subject: usize) -> bool {
        self.present[frame * self.subjects + subject]
    }
}

/// Raw features of one utterance in all three modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceFeatures {
    pub text: Matrix,
    pub text_mask: Vec<bool>,
    pub audio: Matrix,
    pub audio_mask: Vec<bool>,
    pub visual: VisualTensor,
}

impl UtteranceFeatures {
    pub fn zeros(dims: &Dims) -> Self {
        Self {
            text: Matrix::zeros(dims.l_t, dims.d_t),
            text_mask: vec![false; dims.l_t],
            audio: Matrix::zeros(dims.l_a, dims.d_a),
            audio_mask: vec![false; dims.l_a],
            visual: VisualTensor::zeros(dims.l_v, dims.k, dims.d_v),
        }
    }

    pub fn text_len(&self) -> usize {
        valid_prefix(&self.text_mask)
    }

    pub fn audio_len(&self) -> usize {
        valid_prefix(&self.audio_mask)
    }

    pub fn check(&self, dims: &Dims, what: &str) -> Result<()> {
        let shape = |name: &str, got: (usize, usize), want: (usize, usize)| {
            if got != want {
                Err(Error::ShapeMismatch(format!("{what}: {name} is {got:?}, manifest declares {want:?}")))
            } else {
                Ok(())
            }
        };
        shape("text", self.text.shape(), (dims.l_t, dims.d_t))?;
        shape("audio", self.audio.shape(), (dims.l_a, dims.d_a))?;
        let v = &self.visual;
        if (v.frames, v.subjects, v.dim) != (dims.l_v, dims.k, dims.d_v) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: visual is {:?}, manifest declares {:?}",
                (v.frames, v.subjects, v.dim),
                (dims.l_v, dims.k, dims.d_v)
            )));
        }
        if self.text_mask.len() != dims.l_t || self.audio_mask.len() != dims.l_a {
            return Err(Error::ShapeMismatch(format!("{what}: sequence mask length differs from declared length")));
        }
        for f in 0..v.frames {
            for s in 0..v.subjects {
                if !v.is_present(f, s) && v.slot(f, s).iter().any(|&x| x != 0.0) {
                    return Err(Error::Value(format!("{what}: absent visual slot ({f},{s}) is not zero-padded")));
                }
            }
        }
        Ok(())
    }
}

fn valid_prefix(mask: &[bool]) -> usize {
    mask.iter().take_while(|&&m| m).count()
}

/// One conversational turn preceding the target utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRecord {
    pub features: UtteranceFeatures,
    pub speaker: String,
    /// False for left-padding turns inserted when fewer than J turns exist.
    pub valid: bool,
}

impl HistoryRecord {
    pub fn padding(dims: &Dims) -> Self {
        Self { features: UtteranceFeatures::zeros(dims), speaker: String::new(), valid: false }
    }
}

/// Per-modality valence annotation `[text, audio, visual]`.
pub type Valence = [Option<f64>; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub features: UtteranceFeatures,
    /// Exactly J turns, oldest first; invalid padding sits at the front.
    pub history: Vec<HistoryRecord>,
    pub speaker: String,
    pub label: u8,
    pub valence: Option<Valence>,
    /// Planted conflict mechanism, known only for synthetic data.
    pub conflict_mode: Option<ConflictMode>,
}

impl UtteranceRecord {
    pub fn validate(&self, dims: &Dims) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Value(format!("record {}: label {} is not 0 or 1", self.id, self.label)));
        }
        if let Some(v) = &self.valence {
            for x in v.iter().flatten() {
                if !(-1.0..=1.0).contains(x) {
                    return Err(Error::Value(format!("record {}: valence {x} outside [-1, 1]", self.id)));
                }
            }
        }
        self.features.check(dims, &self.id)?;
        if self.history.len() != dims.j {
            return Err(Error::ShapeMismatch(format!(
                "record {}: {} history turns, expected {}",
                self.id,
                self.history.len(),
                dims.j
            )));
        }
        for (i, h) in self.history.iter().enumerate() {
            h.features.check(dims, &format!("{}/history[{i}]", self.id))?;
        }
        Ok(())
    }

    /// Left-pads or truncates `turns` (oldest first) to exactly `j` entries.
    pub fn fit_history(mut turns: Vec<HistoryRecord>, dims: &Dims) -> Vec<HistoryRecord> {
        if turns.len() > dims.j {
            turns.drain(..turns.len() - dims.j);
        }
        let missing = dims.j - turns.len();
        let mut out: Vec<HistoryRecord> = (0..missing).map(|_| HistoryRecord::padding(dims)).collect();
        out.extend(turns);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub records: Vec<UtteranceRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    /// Records whose ids appear in `ids`, in dataset order.
    pub fn subset(&self, ids: &[String]) -> Vec<&UtteranceRecord> {
        let wanted: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
        self.records.iter().filter(|r| wanted.contains(r.id.as_str())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Value(format!("duplicate record id {}", r.id)));
            }
            r.validate(&self.dims)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> Dims {
        Dims { l_t: 2, l_a: 2, l_v: 1, k: 2, d_t: 2, d_a: 2, d_v: 2, j: 2 }
    }

    #[test]
    fn fit_history_left_pads_and_truncates() {
        let d = dims();
        let turn = |s: &str| HistoryRecord { features: UtteranceFeatures::zeros(&d), speaker: s.into(), valid: true };
        let short = UtteranceRecord::fit_history(vec![turn("a")], &d);
        assert_eq!(short.len(), 2);
        assert!(!short[0].valid && short[1].valid);
        let long = UtteranceRecord::fit_history(vec![turn("a"), turn("b"), turn("c")], &d);
        let speakers: Vec<_> = long.iter().map(|h| h.speaker.as_str()).collect();
        assert_eq!(speakers, ["b", "c"]);
    }

    #[test]
    fn nonzero_absent_visual_slot_is_rejected() {
        let d = dims();
        let mut f = UtteranceFeatures::zeros(&d);
        f.visual.slot_mut(0, 1)[0] = 1.0;
        assert!(matches!(f.check(&d, "x"), Err(Error::Value(_))));
    }
}

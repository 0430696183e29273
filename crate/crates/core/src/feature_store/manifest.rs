//! JSON manifest plus one `.pcmf` array file per modality and turn.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::array::{read_array, write_array, ArrayF32};
use super::{ConflictMode, Dataset, Dims, HistoryRecord, UtteranceFeatures, UtteranceRecord, Valence, VisualTensor};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    dims: Dims,
    records: Vec<RecordEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileSet {
    text: String,
    audio: String,
    visual: String,
    visual_present: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordEntry {
    id: String,
    label: i64,
    speaker: String,
    valence: Option<Valence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conflict_mode: Option<ConflictMode>,
    files: FileSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio_len: Option<usize>,
    #[serde(default)]
    history: Vec<HistoryEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HistoryEntry {
    speaker: String,
    files: FileSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio_len: Option<usize>,
}

fn expect_dims(a: &ArrayF32, want: &[usize], path: &Path) -> Result<()> {
    if a.dims != want {
        return Err(Error::ShapeMismatch(format!("{} stores {:?}, manifest declares {:?}", path.display(), a.dims, want)));
    }
    Ok(())
}

fn load_matrix(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let a = read_array(path)?;
    expect_dims(&a, &[rows, cols], path)?;
    Ok(Matrix::from_vec(rows, cols, a.data.into_iter().map(f64::from).collect()))
}

fn prefix_mask(len: Option<usize>, total: usize, what: &str) -> Result<Vec<bool>> {
    let n = len.unwrap_or(total);
    if n > total {
        return Err(Error::ShapeMismatch(format!("{what}: valid length {n} exceeds declared length {total}")));
    }
    Ok((0..total).map(|i| i < n).collect())
}

fn load_features(root: &Path, files: &FileSet, text_len: Option<usize>, audio_len: Option<usize>, dims: &Dims, what: &str) -> Result<UtteranceFeatures> {
    let text = load_matrix(&root.join(&files.text), dims.l_t, dims.d_t)?;
    let audio = load_matrix(&root.join(&files.audio), dims.l_a, dims.d_a)?;
    let vpath = root.join(&files.visual);
    let v = read_array(&vpath)?;
    expect_dims(&v, &[dims.l_v, dims.k, dims.d_v], &vpath)?;
    let ppath = root.join(&files.visual_present);
    let p = read_array(&ppath)?;
    expect_dims(&p, &[dims.l_v, dims.k], &ppath)?;
    let mut present = Vec::with_capacity(p.data.len());
    for &x in &p.data {
        match x {
            0.0 => present.push(false),
            1.0 => present.push(true),
            other => return Err(Error::Value(format!("{}: presence flag {other} is not 0 or 1", ppath.display()))),
        }
    }
    Ok(UtteranceFeatures {
        text,
        text_mask: prefix_mask(text_len, dims.l_t, what)?,
        audio,
        audio_mask: prefix_mask(audio_len, dims.l_a, what)?,
        visual: VisualTensor {
            frames: dims.l_v,
            subjects: dims.k,
            dim: dims.d_v,
            data: v.data.into_iter().map(f64::from).collect(),
            present,
        },
    })
}

/// Loads and validates a dataset from its manifest. Array paths are
/// resolved relative to the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path.to_path_buf()));
    }
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let manifest: ManifestFile = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let dims = manifest.dims;
    dims.validate()?;
    let mut records = Vec::with_capacity(manifest.records.len());
    for entry in manifest.records {
        let label = u8::try_from(entry.label)
            .ok()
            .filter(|l| *l <= 1)
            .ok_or_else(|| Error::Value(format!("record {}: label {} is not 0 or 1", entry.id, entry.label)))?;
        let features = load_features(&root, &entry.files, entry.text_len, entry.audio_len, &dims, &entry.id)?;
        let mut turns = Vec::with_capacity(entry.history.len());
        for (i, h) in entry.history.iter().enumerate() {
            let what = format!("{}/history[{i}]", entry.id);
            let features = load_features(&root, &h.files, h.text_len, h.audio_len, &dims, &what)?;
            turns.push(HistoryRecord { features, speaker: h.speaker.clone(), valid: true });
        }
        let record = UtteranceRecord {
            id: entry.id,
            features,
            history: UtteranceRecord::fit_history(turns, &dims),
            speaker: entry.speaker,
            label,
            valence: entry.valence,
            conflict_mode: entry.conflict_mode,
        };
        record.validate(&dims)?;
        records.push(record);
    }
    let ds = Dataset { dims, records };
    ds.validate()?;
    Ok(ds)
}

fn to_f32(m: &Matrix) -> Vec<f32> {
    m.data().iter().map(|&x| x as f32).collect()
}

fn write_features(dir: &Path, rel: &str, f: &UtteranceFeatures, dims: &Dims) -> Result<FileSet> {
    let files = FileSet {
        text: format!("{rel}/text.pcmf"),
        audio: format!("{rel}/audio.pcmf"),
        visual: format!("{rel}/visual.pcmf"),
        visual_present: format!("{rel}/visual_present.pcmf"),
    };
    write_array(&dir.join(&files.text), &ArrayF32::new(vec![dims.l_t, dims.d_t], to_f32(&f.text)))?;
    write_array(&dir.join(&files.audio), &ArrayF32::new(vec![dims.l_a, dims.d_a], to_f32(&f.audio)))?;
    let v = &f.visual;
    write_array(
        &dir.join(&files.visual),
        &ArrayF32::new(vec![dims.l_v, dims.k, dims.d_v], v.data.iter().map(|&x| x as f32).collect()),
    )?;
    write_array(
        &dir.join(&files.visual_present),
        &ArrayF32::new(vec![dims.l_v, dims.k], v.present.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect()),
    )?;
    Ok(files)
}

fn len_field(mask: &[bool], len: usize) -> Option<usize> {
    (len < mask.len()).then_some(len)
}

/// Writes `dataset` under `dir` as `manifest.json` plus array files.
/// Padding history turns are not written; loading re-inserts them.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let dims = dataset.dims;
    let mut records = Vec::with_capacity(dataset.records.len());
    for (n, r) in dataset.records.iter().enumerate() {
        let rel = format!("arrays/{n:05}");
        let files = write_features(dir, &rel, &r.features, &dims)?;
        let mut history = Vec::new();
        for (i, h) in r.history.iter().enumerate().filter(|(_, h)| h.valid) {
            let files = write_features(dir, &format!("{rel}/h{i}"), &h.features, &dims)?;
            history.push(HistoryEntry {
                speaker: h.speaker.clone(),
                files,
                text_len: len_field(&h.features.text_mask, h.features.text_len()),
                audio_len: len_field(&h.features.audio_mask, h.features.audio_len()),
            });
        }
        records.push(RecordEntry {
            id: r.id.clone(),
            label: i64::from(r.label),
            speaker: r.speaker.clone(),
            valence: r.valence,
            conflict_mode: r.conflict_mode,
            files,
            text_len: len_field(&r.features.text_mask, r.features.text_len()),
            audio_len: len_field(&r.features.audio_mask, r.features.audio_len()),
            history,
        });
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&ManifestFile { dims, records })?)?;
    Ok(path)
}

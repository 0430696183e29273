//! Per-sample diagnostic files.
//!
//! * `attention.json`: per sample, every atomic branch with per-head
//!   attention, base scores and the additive modulation, plus the
//!   per-layer relation attention of the conversation graph.
//! * `routing.csv`: `id,label,pred,prob_sarcastic,a_mic,a_ctx,conflict_mode`.
//! * `embeddings.json`: per sample, the fused vector and `z_incon`.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::feature_store::{ConflictMode, UtteranceRecord};
use crate::model::{ForwardOptions, Model};
use crate::rgat::Relation;

#[derive(Serialize)]
struct HeadExport {
    weights: Vec<Vec<f64>>,
    base_scores: Vec<Vec<f64>>,
    /// Modulated minus base scores; absent without modulation.
    delta: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct BranchExport {
    branch: &'static str,
    /// True when every key row is padding; the branch then has no heads.
    degenerate: bool,
    query_mask: Vec<bool>,
    key_mask: Vec<bool>,
    heads: Vec<HeadExport>,
}

#[derive(Serialize)]
struct RelationExport {
    layer: usize,
    relation: &'static str,
    weights: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct AttentionExport {
    id: String,
    branches: Vec<BranchExport>,
    history_valid: Vec<bool>,
    relations: Vec<RelationExport>,
    s_comp: [f64; 2],
}

#[derive(Serialize)]
struct EmbeddingExport {
    id: String,
    label: u8,
    conflict_mode: Option<ConflictMode>,
    fused: Vec<f64>,
    z_incon: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportSummary {
    pub attention: PathBuf,
    pub routing: PathBuf,
    pub embeddings: PathBuf,
    pub samples: usize,
}

fn rows(tape: &Tape, v: Var) -> Vec<Vec<f64>> {
    let m = tape.value(v);
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn mode_str(m: Option<ConflictMode>) -> &'static str {
    match m {
        Some(ConflictMode::Modal) => "modal",
        Some(ConflictMode::Contextual) => "contextual",
        Some(ConflictMode::None) => "none",
        None => "",
    }
}

fn finite(values: &[f64], what: &str, id: &str) -> Result<()> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Value(format!("{id}: non-finite {what} in export")))
    }
}

pub fn export_diagnostics(model: &Model, records: &[&UtteranceRecord], out_dir: &Path) -> Result<ExportSummary> {
    std::fs::create_dir_all(out_dir)?;
    let mut attention = Vec::with_capacity(records.len());
    let mut embeddings = Vec::with_capacity(records.len());
    let routing_path = out_dir.join("routing.csv");
    let mut routing = std::io::BufWriter::new(std::fs::File::create(&routing_path)?);
    writeln!(routing, "id,label,pred,prob_sarcastic,a_mic,a_ctx,conflict_mode")?;
    for r in records {
        let tape = Tape::new();
        let out = model.forward(&tape, r, ForwardOptions::default())?;
        let [h_t, h_a, h_v] = &out.sequences;
        let mut branches = Vec::with_capacity(2);
        for (name, keys, branch) in [("text_audio", h_a, &out.atomic[0]), ("text_visual", h_v, &out.atomic[1])] {
            let heads = match branch {
                Some(b) => (0..b.weights.len())
                    .map(|h| HeadExport { weights: rows(&tape, b.weights[h]), base_scores: rows(&tape, b.base_scores[h]), delta: b.modulation.map(|m| rows(&tape, m)) })
                    .collect(),
                None => Vec::new(),
            };
            for h in &heads {
                finite(&h.weights.concat(), "attention", &r.id)?;
                finite(&h.base_scores.concat(), "scores", &r.id)?;
            }
            branches.push(BranchExport { branch: name, degenerate: branch.is_none(), query_mask: h_t.mask.clone(), key_mask: keys.mask.clone(), heads });
        }
        let relations = out
            .relation_attention
            .iter()
            .enumerate()
            .flat_map(|(layer, maps)| Relation::ALL.iter().zip(maps).map(move |(rel, &m)| (layer, rel.tag(), m)).collect::<Vec<_>>())
            .map(|(layer, relation, m)| RelationExport { layer, relation, weights: rows(&tape, m) })
            .collect();
        let s = tape.value(out.prior.s_comp);
        let logits = tape.value(out.logits);
        let prob = crate::fusion::prob_sarcastic(logits.data());
        let a = model.routing_pair(&tape.value(out.a_fuse));
        let fused = tape.value(out.fused).data().to_vec();
        let z = tape.value(out.z_incon).data().to_vec();
        finite(&[prob, a[0], a[1], s[(0, 0)], s[(0, 1)]], "routing", &r.id)?;
        finite(&fused, "fused embedding", &r.id)?;
        finite(&z, "z_incon", &r.id)?;
        writeln!(routing, "{},{},{},{},{},{},{}", r.id, r.label, u8::from(logits[(0, 1)] > logits[(0, 0)]), prob, a[0], a[1], mode_str(r.conflict_mode))?;
        attention.push(AttentionExport { id: r.id.clone(), branches, history_valid: out.history_valid.clone(), relations, s_comp: [s[(0, 0)], s[(0, 1)]] });
        embeddings.push(EmbeddingExport { id: r.id.clone(), label: r.label, conflict_mode: r.conflict_mode, fused, z_incon: z });
    }
    routing.flush()?;
    let attention_path = out_dir.join("attention.json");
    std::fs::write(&attention_path, serde_json::to_vec_pretty(&attention)?)?;
    let embeddings_path = out_dir.join("embeddings.json");
    std::fs::write(&embeddings_path, serde_json::to_vec_pretty(&embeddings)?)?;
    Ok(ExportSummary { attention: attention_path, routing: routing_path, embeddings: embeddings_path, samples: records.len() })
}

//! Prior-guided relational graph attention over the conversation.
//!
//! Node order is `[h_1, …, h_J, h̃_tgt]`, oldest history turn first. The
//! target node is seeded with the composition congruity prior; history nodes
//! come from text-anchored attention over their own audio and visual rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::atomic::{attend, MultiHeadAttention};
use crate::autograd::{ParamId, Tape, Var};
use crate::encoding::{masked_mean, Modality, ModalSequence};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, LayerNorm, Linear, ParamStore};
use crate::polarity::{contradiction_matrix, project_rows, PolarityProjector, ProjectorScope};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    Seq,
    Ctx,
    Spk,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::Seq, Relation::Ctx, Relation::Spk];

    pub fn tag(self) -> &'static str {
        match self {
            Relation::Seq => "seq",
            Relation::Ctx => "ctx",
            Relation::Spk => "spk",
        }
    }
}

/// Binary `(J+1) × (J+1)` masks, row-major, one per relation in
/// [`Relation::ALL`] order. Entry `(i, j)` means node `i` attends to `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationMasks {
    pub n: usize,
    pub masks: [Vec<bool>; 3],
}

impl RelationMasks {
    pub fn get(&self, r: Relation, i: usize, j: usize) -> bool {
        self.masks[r as usize][i * self.n + j]
    }

    pub fn node_mask(&self) -> Vec<bool> {
        (0..self.n).map(|i| self.get(Relation::Seq, i, i)).collect()
    }
}

/// Builds the three relation masks. `validity` covers the `J` history turns;
/// the target is always valid. `speakers` has `J + 1` entries.
pub fn relation_masks(j: usize, validity: &[bool], speakers: &[String]) -> Result<RelationMasks> {
    if validity.len() != j || speakers.len() != j + 1 {
        return Err(Error::ShapeMismatch(format!(
            "{} validity flags and {} speakers for J = {j}",
            validity.len(),
            speakers.len()
        )));
    }
    let n = j + 1;
    let valid = |i: usize| i == j || validity[i];
    let build = |edge: &dyn Fn(usize, usize) -> bool| {
        let mut m = vec![false; n * n];
        for a in 0..n {
            for b in 0..n {
                m[a * n + b] = valid(a) && valid(b) && (a == b || edge(a, b));
            }
        }
        m
    };
    let seq = build(&|a, b| a.abs_diff(b) == 1);
    let ctx = build(&|a, b| a == j || b == j);
    let spk = build(&|a, b| speakers[a] == speakers[b]);
    Ok(RelationMasks { n, masks: [seq, ctx, spk] })
}

#[derive(Clone, Debug)]
pub struct RgatLayerParams {
    /// Message transform per relation, `d × d`.
    pub transform: [ParamId; 3],
    /// Pair score weights per relation, `2d × 1` over `[H_i ∥ H_j]`.
    pub score: [ParamId; 3],
}

#[derive(Clone, Debug)]
pub struct RgatParams {
    pub history_attention: MultiHeadAttention,
    pub target_proj: Linear,
    pub w_pri: ParamId,
    pub prior_norm: LayerNorm,
    pub ctx_projector: PolarityProjector,
    pub alpha_ctx: ParamId,
    pub layers: Vec<RgatLayerParams>,
    pub leaky_slope: f64,
}

impl RgatParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        d_enc: usize,
        n_heads: usize,
        d_pol_hidden: usize,
        d_pol: usize,
        k_gnn: usize,
        alpha_ctx: f64,
        leaky_slope: f64,
        ln_eps: f64,
        norm_eps: f64,
    ) -> Result<Self> {
        let history_attention = MultiHeadAttention::new(store, rng, "rgat.hist", d_enc, n_heads)?;
        let target_proj = Linear::new(store, rng, "rgat.target", 3 * d_enc, d_enc, true);
        let w_pri = store.add("rgat.w_pri", xavier_uniform(rng, 2, d_enc));
        let prior_norm = LayerNorm::new(store, "rgat.prior_norm", d_enc, ln_eps);
        let ctx_projector = PolarityProjector::new(store, rng, "rgat.pol", d_enc, d_pol_hidden, d_pol, ProjectorScope::Contextual, norm_eps);
        let alpha_ctx = store.add("rgat.alpha_ctx", Matrix::scalar(alpha_ctx));
        let layers = (0..k_gnn)
            .map(|k| RgatLayerParams {
                transform: Relation::ALL.map(|r| store.add(format!("rgat.layer{k}.{}.transform", r.tag()), xavier_uniform(rng, d_enc, d_enc))),
                score: Relation::ALL.map(|r| store.add(format!("rgat.layer{k}.{}.score", r.tag()), xavier_uniform(rng, 2 * d_enc, 1))),
            })
            .collect();
        Ok(Self { history_attention, target_proj, w_pri, prior_norm, ctx_projector, alpha_ctx, layers, leaky_slope })
    }
}

/// Text-anchored attention: the pooled history text queries the turn's
/// concatenated audio and visual rows. Padding turns give the zero node.
pub fn init_history_node(
    tape: &Tape,
    store: &ParamStore,
    anchor_t: Var,
    h_a: &ModalSequence,
    h_v: &ModalSequence,
    mha: &MultiHeadAttention,
    valid: bool,
) -> Result<Var> {
    let d = mha.d_model(store);
    if !valid {
        return Ok(tape.constant(Matrix::zeros(1, d)));
    }
    let keys = ModalSequence {
        feats: tape.concat_rows(&[h_a.feats, h_v.feats]),
        mask: h_a.mask.iter().chain(&h_v.mask).copied().collect(),
        modality: Modality::Audio,
    };
    if keys.n_valid() == 0 {
        return Err(Error::DegenerateAttention("valid history turn without any valid audio or visual row".into()));
    }
    Ok(attend(tape, store, mha, anchor_t, &keys, None)?.output)
}

/// Pooled target sequences, concatenated and projected.
pub fn target_base(tape: &Tape, store: &ParamStore, seqs: [&ModalSequence; 3], proj: &Linear) -> Var {
    let pooled: Vec<Var> = seqs.iter().map(|s| masked_mean(tape, s.feats, &s.mask)).collect();
    proj.forward(tape, store, tape.concat_cols(&pooled))
}

/// `h_tgt + LayerNorm(s_comp W_pri)`.
pub fn inject_prior(tape: &Tape, store: &ParamStore, h_tgt: Var, s_comp: Var, w_pri: ParamId, norm: &LayerNorm) -> Var {
    let p = tape.matmul(s_comp, store.var(tape, w_pri));
    tape.add(h_tgt, norm.forward(tape, store, p))
}

pub struct RgatLayerOutput {
    pub h: Var,
    /// Per-relation attention `α_{ij,r}`, each `n × n`.
    pub attention: [Var; 3],
}

/// One relational attention layer. Polarities are recomputed from the
/// layer input; `modulate = false` drops the contradiction penalty.
pub fn rgat_layer(
    tape: &Tape,
    store: &ParamStore,
    h: Var,
    masks: &RelationMasks,
    params: &RgatParams,
    layer: usize,
    modulate: bool,
) -> Result<RgatLayerOutput> {
    let (n, d) = tape.shape(h);
    if n != masks.n {
        return Err(Error::ShapeMismatch(format!("{n} node rows for a {}-node relation mask", masks.n)));
    }
    let lp = &params.layers[layer];
    let node_mask = masks.node_mask();
    let penalty = if modulate {
        let p = project_rows(tape, store, h, &node_mask, &params.ctx_projector)?;
        let c = contradiction_matrix(tape, &p, &p)?;
        Some(tape.mul_scalar(c, store.var(tape, params.alpha_ctx)))
    } else {
        None
    };
    let ones_row = tape.constant(Matrix::filled(1, n, 1.0));
    let ones_col = tape.constant(Matrix::filled(n, 1, 1.0));
    let mut message = None;
    let mut attention = Vec::with_capacity(3);
    for (r, rel) in Relation::ALL.iter().enumerate() {
        let w = store.var(tape, lp.score[r]);
        let w_src = tape.slice_rows(w, 0, d);
        let w_dst = tape.slice_rows(w, d, 2 * d);
        let si = tape.matmul(tape.matmul(h, w_src), ones_row);
        let sj = tape.matmul(ones_col, tape.transpose(tape.matmul(h, w_dst)));
        let mut s = tape.add(si, sj);
        if let Some(pen) = penalty {
            s = tape.add(s, pen);
        }
        let s = tape.leaky_relu(s, params.leaky_slope);
        let a = tape.masked_softmax_rows(s, &masks.masks[*rel as usize]);
        let hw = tape.matmul(h, store.var(tape, lp.transform[r]));
        let m = tape.matmul(a, hw);
        message = Some(match message {
            Some(acc) => tape.add(acc, m),
            None => m,
        });
        attention.push(a);
    }
    let out = tape.relu(message.expect("three relations"));
    Ok(RgatLayerOutput { h: tape.mask_rows(out, &node_mask), attention: [attention[0], attention[1], attention[2]] })
}

/// Runs `K_gnn` layers and returns the target row plus per-layer attention.
pub fn contextual_embed(
    tape: &Tape,
    store: &ParamStore,
    h0: Var,
    masks: &RelationMasks,
    params: &RgatParams,
    modulate: bool,
) -> Result<(Var, Vec<[Var; 3]>)> {
    let mut h = h0;
    let mut maps = Vec::with_capacity(params.layers.len());
    for k in 0..params.layers.len() {
        let out = rgat_layer(tape, store, h, masks, params, k, modulate)?;
        h = out.h;
        maps.push(out.attention);
    }
    let n = masks.n;
    Ok((tape.row(h, n - 1), maps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn edges(m: &RelationMasks, r: Relation) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..m.n {
            for j in 0..m.n {
                if i != j && m.get(r, i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn single_turn_sequence_edges() {
        let m = relation_masks(1, &[true], &s(&["A", "B"])).unwrap();
        assert_eq!(edges(&m, Relation::Seq), vec![(0, 1), (1, 0)]);
        assert!(m.get(Relation::Seq, 0, 0) && m.get(Relation::Seq, 1, 1));
    }

    #[test]
    fn speaker_edges_follow_string_equality() {
        let m = relation_masks(3, &[true; 3], &s(&["A", "B", "A", "A"])).unwrap();
        assert_eq!(edges(&m, Relation::Spk), vec![(0, 2), (0, 3), (2, 0), (2, 3), (3, 0), (3, 2)]);
        assert_eq!(edges(&m, Relation::Ctx), vec![(0, 3), (1, 3), (2, 3), (3, 0), (3, 1), (3, 2)]);
    }

    #[test]
    fn invalid_history_leaves_target_self_loops() {
        let m = relation_masks(3, &[false; 3], &s(&["A", "A", "A", "A"])).unwrap();
        for r in Relation::ALL {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(m.get(r, i, j), i == 3 && j == 3, "{r:?} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn invalid_turns_break_sequence_chain() {
        let m = relation_masks(3, &[true, false, true], &s(&["A", "B", "C", "D"])).unwrap();
        assert_eq!(edges(&m, Relation::Seq), vec![(2, 3), (3, 2)]);
    }

    #[test]
    fn wrong_speaker_count_is_rejected() {
        assert!(relation_masks(2, &[true, true], &s(&["A", "B"])).is_err());
    }
}

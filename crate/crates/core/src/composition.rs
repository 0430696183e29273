//! Bipartite-dominant heterogeneous graphs over target-utterance nodes.
//!
//! Each (text, k) pair forms one joint graph. Cross-modal edges are dense
//! and weighted by polarity contradiction; intra-modal edges connect nodes
//! within a sliding window. After `L_mac` GCN layers the two node blocks are
//! pooled, and only two things leave this module: the cosine congruity
//! scalar per pair and the normalized discrepancy embedding for the
//! contrastive loss.

use rand::Rng;

use crate::autograd::{ParamId, Tape, Var};
use crate::encoding::{masked_mean, Modality, ModalSequence};
use crate::error::{Error, Result};
use crate::params::{normal, xavier_uniform, Linear, ParamStore};
use crate::polarity::{contradiction_matrix, project_rows, PolarityProjector};
use crate::tensor::Matrix;

/// One modality's contribution to a joint graph.
pub struct GraphPart<'a> {
    pub seq: &'a ModalSequence,
    pub type_embedding: ParamId,
    /// Temporal position of each row (frame index for visual rows).
    pub positions: Vec<usize>,
}

pub struct JointGraph {
    pub nodes: Var,
    pub mask: Vec<bool>,
    pub modality: Vec<Modality>,
    pub positions: Vec<usize>,
    /// `(modality, start, end)` row range of every part.
    pub blocks: Vec<(Modality, usize, usize)>,
}

impl JointGraph {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Node mask restricted to one block.
    pub fn block_mask(&self, block: usize) -> Vec<bool> {
        let (_, s, e) = self.blocks[block];
        (0..self.len()).map(|i| i >= s && i < e && self.mask[i]).collect()
    }
}

/// `[H_q + E_q ; H_k + E_k]` with type embeddings added to valid rows only.
pub fn build_joint_nodes(tape: &Tape, store: &ParamStore, parts: &[GraphPart<'_>]) -> Result<JointGraph> {
    let mut rows = Vec::with_capacity(parts.len());
    let mut mask = Vec::new();
    let mut modality = Vec::new();
    let mut positions = Vec::new();
    let mut blocks = Vec::new();
    let mut width = None;
    for part in parts {
        let (l, d) = tape.shape(part.seq.feats);
        if *width.get_or_insert(d) != d {
            return Err(Error::ShapeMismatch(format!("joint graph parts have widths {} and {d}", width.unwrap())));
        }
        if store.get(part.type_embedding).shape() != (1, d) {
            return Err(Error::ShapeMismatch(format!("type embedding is {:?}, expected (1, {d})", store.get(part.type_embedding).shape())));
        }
        if part.positions.len() != l || part.seq.mask.len() != l {
            return Err(Error::ShapeMismatch("positions or mask length differs from sequence length".into()));
        }
        let valid_col = Matrix::from_fn(l, 1, |i, _| if part.seq.mask[i] { 1.0 } else { 0.0 });
        let spread = tape.matmul(tape.constant(valid_col), store.var(tape, part.type_embedding));
        rows.push(tape.add(part.seq.feats, spread));
        let start = mask.len();
        mask.extend_from_slice(&part.seq.mask);
        modality.extend(std::iter::repeat_n(part.seq.modality, l));
        positions.extend_from_slice(&part.positions);
        blocks.push((part.seq.modality, start, mask.len()));
    }
    Ok(JointGraph { nodes: tape.concat_rows(&rows), mask, modality, positions, blocks })
}

pub struct Adjacency {
    /// Weighted adjacency before normalization.
    pub raw: Var,
    /// `D^{-1/2} A D^{-1/2}`.
    pub normalized: Var,
}

/// Polarity-modulated adjacency. `alpha_mac = None` disables modulation so
/// every cross-modal edge weighs 1.
pub fn build_modulated_adjacency(
    tape: &Tape,
    store: &ParamStore,
    graph: &JointGraph,
    proj: &PolarityProjector,
    alpha_mac: Option<Var>,
    window: usize,
) -> Result<Adjacency> {
    let n = graph.len();
    let both = |i: usize, j: usize| graph.mask[i] && graph.mask[j];
    let intra = Matrix::from_fn(n, n, |i, j| {
        let near = graph.positions[i].abs_diff(graph.positions[j]) <= window;
        if both(i, j) && graph.modality[i] == graph.modality[j] && near {
            1.0
        } else {
            0.0
        }
    });
    let cross = Matrix::from_fn(n, n, |i, j| if both(i, j) && graph.modality[i] != graph.modality[j] { 1.0 } else { 0.0 });
    let cross_rc = std::rc::Rc::new(cross.clone());
    let mut raw = tape.constant(intra.zip_map(&cross, |a, b| a + b));
    if let Some(alpha) = alpha_mac {
        let pol = project_rows(tape, store, graph.nodes, &graph.mask, proj)?;
        let c = contradiction_matrix(tape, &pol, &pol)?;
        let c_cross = tape.mask_mul(c, cross_rc);
        raw = tape.add(raw, tape.mul_scalar(c_cross, tape.sigmoid(alpha)));
    }
    let deg = tape.row_sums(raw);
    let d_inv = tape.inv_sqrt_pos(deg);
    let left = tape.mul_col(raw, d_inv);
    let normalized = tape.mul_row(left, tape.transpose(d_inv));
    Ok(Adjacency { raw, normalized })
}

/// `H^{(l)} = ReLU(Â H^{(l−1)} W^{(l)})`, masked rows re-zeroed each layer.
pub fn gcn_forward(tape: &Tape, store: &ParamStore, graph: &JointGraph, adjacency: Var, weights: &[ParamId]) -> Var {
    let mut h = graph.nodes;
    for &w in weights {
        let m = tape.matmul(adjacency, h);
        let z = tape.matmul(m, store.var(tape, w));
        h = tape.mask_rows(tape.relu(z), &graph.mask);
    }
    h
}

/// Cosine similarity of two `1 × d` rows with norms guarded by `eps`.
pub fn congruity_prior(tape: &Tape, a: Var, b: Var, eps: f64) -> Var {
    let na = tape.l2_normalize_rows(a, eps);
    let nb = tape.l2_normalize_rows(b, eps);
    tape.dot_rows(na, nb)
}

/// Two-layer ReLU perceptron over `[Δ_TA ∥ Δ_TV]`.
#[derive(Clone, Copy, Debug)]
pub struct DiffMlp {
    pub hidden: Linear,
    pub out: Linear,
    pub norm_eps: f64,
}

pub fn incongruity_representation(tape: &Tape, store: &ParamStore, delta_ta: Var, delta_tv: Var, mlp: &DiffMlp) -> Var {
    let x = tape.concat_cols(&[delta_ta, delta_tv]);
    let h = tape.relu(mlp.hidden.forward(tape, store, x));
    let z = mlp.out.forward(tape, store, h);
    tape.l2_normalize_rows(z, mlp.norm_eps)
}

#[derive(Clone, Debug)]
pub struct CompositionParams {
    /// Indexed by [`Modality::index`].
    pub type_embeddings: [ParamId; 3],
    pub gcn_ta: Vec<ParamId>,
    pub gcn_tv: Vec<ParamId>,
    pub alpha_mac: ParamId,
    pub diff: DiffMlp,
    pub window: usize,
}

impl CompositionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        d_enc: usize,
        d_z: usize,
        layers: usize,
        window: usize,
        alpha_mac: f64,
        norm_eps: f64,
    ) -> Self {
        let type_embeddings = Modality::ALL.map(|m| store.add(format!("comp.type_{}", m.tag()), normal(rng, 1, d_enc, 0.1)));
        let gcn_ta = (0..layers).map(|l| store.add(format!("comp.gcn_ta.{l}"), xavier_uniform(rng, d_enc, d_enc))).collect();
        let gcn_tv = (0..layers).map(|l| store.add(format!("comp.gcn_tv.{l}"), xavier_uniform(rng, d_enc, d_enc))).collect();
        let alpha_mac = store.add("comp.alpha_mac", Matrix::scalar(alpha_mac));
        let diff = DiffMlp {
            hidden: Linear::new(store, rng, "comp.diff.hidden", 2 * d_enc, d_enc, true),
            out: Linear::new(store, rng, "comp.diff.out", d_enc, d_z, true),
            norm_eps,
        };
        Self { type_embeddings, gcn_ta, gcn_tv, alpha_mac, diff, window }
    }
}

/// Everything the composition stage hands downstream, plus the pooled
/// block vectors for diagnostics and the direct-fusion ablation.
pub struct CongruityPrior {
    /// `1 × 2`: `[s_TA, s_TV]`.
    pub s_comp: Var,
    pub delta_ta: Var,
    pub delta_tv: Var,
    pub z_incon: Var,
    /// `[h_T^{TA}, h_A, h_T^{TV}, h_V]`.
    pub h_comp: [Var; 4],
}

fn graph_vectors(
    tape: &Tape,
    store: &ParamStore,
    parts: &[GraphPart<'_>],
    proj: &PolarityProjector,
    alpha_mac: Option<Var>,
    window: usize,
    weights: &[ParamId],
) -> Result<Vec<Var>> {
    let graph = build_joint_nodes(tape, store, parts)?;
    let adj = build_modulated_adjacency(tape, store, &graph, proj, alpha_mac, window)?;
    let h = gcn_forward(tape, store, &graph, adj.normalized, weights);
    Ok((0..graph.blocks.len()).map(|b| masked_mean(tape, h, &graph.block_mask(b))).collect())
}

/// Runs both pair graphs (or one merged tri-modal graph) and reduces them
/// to the congruity prior and the incongruity embedding.
#[allow(clippy::too_many_arguments)]
pub fn composition_congruity(
    tape: &Tape,
    store: &ParamStore,
    params: &CompositionParams,
    proj: &PolarityProjector,
    seqs: [&ModalSequence; 3],
    positions: [Vec<usize>; 3],
    modulate: bool,
    tripartite: bool,
) -> Result<CongruityPrior> {
    let alpha = modulate.then(|| store.var(tape, params.alpha_mac));
    let part = |m: usize| GraphPart { seq: seqs[m], type_embedding: params.type_embeddings[m], positions: positions[m].clone() };
    let eps = params.diff.norm_eps;
    let (h_t_a, h_a, h_t_v, h_v) = if tripartite {
        let v = graph_vectors(tape, store, &[part(0), part(1), part(2)], proj, alpha, params.window, &params.gcn_ta)?;
        (v[0], v[1], v[0], v[2])
    } else {
        let ta = graph_vectors(tape, store, &[part(0), part(1)], proj, alpha, params.window, &params.gcn_ta)?;
        let tv = graph_vectors(tape, store, &[part(0), part(2)], proj, alpha, params.window, &params.gcn_tv)?;
        (ta[0], ta[1], tv[0], tv[1])
    };
    let s_ta = congruity_prior(tape, h_t_a, h_a, eps);
    let s_tv = congruity_prior(tape, h_t_v, h_v, eps);
    let delta_ta = tape.sub(h_t_a, h_a);
    let delta_tv = tape.sub(h_t_v, h_v);
    let z_incon = incongruity_representation(tape, store, delta_ta, delta_tv, &params.diff);
    Ok(CongruityPrior { s_comp: tape.concat_cols(&[s_ta, s_tv]), delta_ta, delta_tv, z_incon, h_comp: [h_t_a, h_a, h_t_v, h_v] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polarity::ProjectorScope;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, PolarityProjector, [ParamId; 2]) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let proj = PolarityProjector::new(&mut store, &mut rng, "pol", 2, 4, 2, ProjectorScope::AtomicShared, 1e-8);
        let e = [store.add("e_q", Matrix::zeros(1, 2)), store.add("e_k", Matrix::zeros(1, 2))];
        (store, proj, e)
    }

    #[test]
    fn zero_type_embedding_is_identity() {
        let (store, _, e) = setup();
        let t = Tape::new();
        let q = ModalSequence { feats: t.constant(Matrix::from_rows(&[vec![1.0, 2.0]])), mask: vec![true], modality: Modality::Text };
        let k = ModalSequence { feats: t.constant(Matrix::from_rows(&[vec![3.0, 4.0]])), mask: vec![true], modality: Modality::Audio };
        let g = build_joint_nodes(
            &t,
            &store,
            &[GraphPart { seq: &q, type_embedding: e[0], positions: vec![0] }, GraphPart { seq: &k, type_embedding: e[1], positions: vec![0] }],
        )
        .unwrap();
        assert_eq!(t.value(g.nodes).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn masked_node_keeps_zero_with_type_embedding() {
        let (mut store, _, e) = setup();
        store.set("e_k", Matrix::row_vector(&[5.0, -5.0]));
        let t = Tape::new();
        let q = ModalSequence { feats: t.constant(Matrix::from_rows(&[vec![1.0, 2.0]])), mask: vec![true], modality: Modality::Text };
        let k = ModalSequence { feats: t.constant(Matrix::zeros(2, 2)), mask: vec![true, false], modality: Modality::Audio };
        let g = build_joint_nodes(
            &t,
            &store,
            &[GraphPart { seq: &q, type_embedding: e[0], positions: vec![0] }, GraphPart { seq: &k, type_embedding: e[1], positions: vec![0, 1] }],
        )
        .unwrap();
        let v = t.value(g.nodes);
        assert_eq!(v.row(1), &[5.0, -5.0]);
        assert_eq!(v.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn cosine_edge_cases() {
        let t = Tape::new();
        let a = t.constant(Matrix::row_vector(&[1.0, 2.0, -1.0]));
        let neg = t.constant(Matrix::row_vector(&[-1.0, -2.0, 1.0]));
        let orth = t.constant(Matrix::row_vector(&[2.0, -1.0, 0.0]));
        assert!((t.item(congruity_prior(&t, a, a, 1e-8)) - 1.0).abs() < 1e-15);
        assert!((t.item(congruity_prior(&t, a, neg, 1e-8)) + 1.0).abs() < 1e-15);
        assert!(t.item(congruity_prior(&t, a, orth, 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_weight_diff_mlp_returns_bias_direction() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = DiffMlp {
            hidden: Linear::new(&mut store, &mut rng, "h", 4, 3, true),
            out: Linear::new(&mut store, &mut rng, "o", 3, 2, true),
            norm_eps: 1e-8,
        };
        store.set("o.weight", Matrix::zeros(3, 2));
        store.set("o.bias", Matrix::row_vector(&[3.0, -4.0]));
        let t = Tape::new();
        let d = t.constant(Matrix::row_vector(&[0.3, -0.2]));
        let z = t.value(incongruity_representation(&t, &store, d, d, &mlp));
        assert!((z[(0, 0)] - 0.6).abs() < 1e-15 && (z[(0, 1)] + 0.8).abs() < 1e-15);
    }
}

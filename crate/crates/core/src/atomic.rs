//! Polarity-modulated cross attention from text to each non-verbal modality.

use rand::Rng;

use crate::autograd::{ParamId, Tape, Var};
use crate::encoding::{masked_mean, ModalSequence};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamStore};
use crate::tensor::Matrix;

/// Additive pre-softmax penalty for invalid keys.
pub const MASK_VALUE: f64 = -1e9;

/// Query/key/value/output projections of one multi-head attention block.
/// No biases: zero query and key weights make every base score zero.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!("d_enc = {d_model} is not divisible by {n_heads} heads")));
        }
        let mut w = |tag: &str| store.add(format!("{name}.{tag}"), xavier_uniform(rng, d_model, d_model));
        Ok(Self { w_q: w("w_q"), w_k: w("w_k"), w_v: w("w_v"), w_o: w("w_o"), n_heads })
    }

    pub fn d_model(&self, store: &ParamStore) -> usize {
        store.get(self.w_q).rows()
    }

    pub fn d_head(&self, store: &ParamStore) -> usize {
        self.d_model(store) / self.n_heads
    }

    /// Scaled dot-product scores of head `h` between query rows and key rows.
    pub fn head_scores(&self, tape: &Tape, store: &ParamStore, queries: Var, keys: Var, head: usize) -> Var {
        let d_head = self.d_head(store);
        let q = tape.matmul(queries, store.var(tape, self.w_q));
        let k = tape.matmul(keys, store.var(tape, self.w_k));
        let qh = tape.slice_cols(q, head * d_head, (head + 1) * d_head);
        let kh = tape.slice_cols(k, head * d_head, (head + 1) * d_head);
        let s = tape.matmul(qh, tape.transpose(kh));
        tape.scale(s, 1.0 / (d_head as f64).sqrt())
    }
}

/// Attention result before any residual.
pub struct Attended {
    /// `[L_q × d_model]` after the output projection.
    pub output: Var,
    /// Row-stochastic weights per head, `[L_q × L_k]`.
    pub weights: Vec<Var>,
    /// Scaled dot-product scores per head, without modulation or mask.
    pub base_scores: Vec<Var>,
}

/// Multi-head attention with an optional additive score bias shared by all
/// heads, and an additive key-padding mask.
pub fn attend(
    tape: &Tape,
    store: &ParamStore,
    mha: &MultiHeadAttention,
    queries: Var,
    keys: &ModalSequence,
    score_bias: Option<Var>,
) -> Result<Attended> {
    let (lq, dq) = tape.shape(queries);
    let (lk, dk) = tape.shape(keys.feats);
    let d = mha.d_model(store);
    if dq != d || dk != d || lk != keys.mask.len() {
        return Err(Error::ShapeMismatch(format!("attention inputs {lq}x{dq} and {lk}x{dk}, model width {d}")));
    }
    if let Some(b) = score_bias {
        if tape.shape(b) != (lq, lk) {
            return Err(Error::ShapeMismatch(format!("score bias is {:?}, expected {:?}", tape.shape(b), (lq, lk))));
        }
    }
    let d_head = mha.d_head(store);
    let q = tape.matmul(queries, store.var(tape, mha.w_q));
    let k = tape.matmul(keys.feats, store.var(tape, mha.w_k));
    let v = tape.matmul(keys.feats, store.var(tape, mha.w_v));
    let pad = tape.constant(Matrix::from_fn(lq, lk, |_, j| if keys.mask[j] { 0.0 } else { MASK_VALUE }));
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(mha.n_heads);
    let mut weights = Vec::with_capacity(mha.n_heads);
    let mut base_scores = Vec::with_capacity(mha.n_heads);
    for h in 0..mha.n_heads {
        let cols = (h * d_head, (h + 1) * d_head);
        let qh = tape.slice_cols(q, cols.0, cols.1);
        let kh = tape.slice_cols(k, cols.0, cols.1);
        let vh = tape.slice_cols(v, cols.0, cols.1);
        let base = tape.scale(tape.matmul(qh, tape.transpose(kh)), scale);
        let s = match score_bias {
            Some(b) => tape.add(base, b),
            None => base,
        };
        let a = tape.softmax_rows(tape.add(s, pad));
        heads.push(tape.matmul(a, vh));
        weights.push(a);
        base_scores.push(base);
    }
    let concat = tape.concat_cols(&heads);
    let output = tape.matmul(concat, store.var(tape, mha.w_o));
    Ok(Attended { output, weights, base_scores })
}

/// `S = scores_h(H_T, H_k) + α_mic · C` for one head.
#[allow(clippy::too_many_arguments)]
pub fn modulated_scores(
    tape: &Tape,
    store: &ParamStore,
    h_t: &ModalSequence,
    h_k: &ModalSequence,
    contradiction: Var,
    alpha_mic: Var,
    mha: &MultiHeadAttention,
    head: usize,
) -> Result<Var> {
    if tape.shape(contradiction) != (h_t.len(), h_k.len()) {
        return Err(Error::ShapeMismatch(format!(
            "contradiction matrix is {:?}, expected {:?}",
            tape.shape(contradiction),
            (h_t.len(), h_k.len())
        )));
    }
    let base = mha.head_scores(tape, store, h_t.feats, h_k.feats, head);
    Ok(tape.add(base, tape.mul_scalar(contradiction, alpha_mic)))
}

#[derive(Clone, Copy, Debug)]
pub struct AtomicParams {
    pub text_audio: MultiHeadAttention,
    pub text_visual: MultiHeadAttention,
    pub alpha_mic: ParamId,
}

impl AtomicParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d_enc: usize, n_heads: usize, alpha_mic: f64) -> Result<Self> {
        Ok(Self {
            text_audio: MultiHeadAttention::new(store, rng, "atomic.ta", d_enc, n_heads)?,
            text_visual: MultiHeadAttention::new(store, rng, "atomic.tv", d_enc, n_heads)?,
            alpha_mic: store.add("atomic.alpha_mic", Matrix::scalar(alpha_mic)),
        })
    }
}

/// One text→k branch with its diagnostics.
pub struct AtomicBranch {
    /// `[L_T × d_enc]`, zero at invalid text rows.
    pub output: Var,
    pub weights: Vec<Var>,
    pub base_scores: Vec<Var>,
    /// `α_mic · C`, the modulated-minus-base score difference, if modulated.
    pub modulation: Option<Var>,
}

/// `Softmax(S + M_mask) V · W_o + H_T`, with invalid query rows zeroed.
///
/// `contradiction` and `alpha_mic` are both present for the modulated form;
/// passing `None` gives plain multi-head attention.
pub fn atomic_branch(
    tape: &Tape,
    store: &ParamStore,
    h_t: &ModalSequence,
    h_k: &ModalSequence,
    modulation: Option<(Var, Var)>,
    mha: &MultiHeadAttention,
) -> Result<AtomicBranch> {
    if h_t.n_valid() > 0 && h_k.n_valid() == 0 {
        return Err(Error::DegenerateAttention(format!("{:?} branch: valid text queries but no valid keys", h_k.modality)));
    }
    let bias = match modulation {
        Some((c, alpha)) => {
            if tape.shape(c) != (h_t.len(), h_k.len()) {
                return Err(Error::ShapeMismatch(format!(
                    "contradiction matrix is {:?}, expected {:?}",
                    tape.shape(c),
                    (h_t.len(), h_k.len())
                )));
            }
            Some(tape.mul_scalar(c, alpha))
        }
        None => None,
    };
    let att = attend(tape, store, mha, h_t.feats, h_k, bias)?;
    let out = tape.add(att.output, h_t.feats);
    Ok(AtomicBranch {
        output: tape.mask_rows(out, &h_t.mask),
        weights: att.weights,
        base_scores: att.base_scores,
        modulation: bias,
    })
}

/// `MeanPool(E_TA) ∥ MeanPool(E_TV)` over valid text rows.
pub fn atomic_vector(tape: &Tape, e_ta: Var, e_tv: Var, text_mask: &[bool]) -> Var {
    let a = masked_mean(tape, e_ta, text_mask);
    let v = masked_mean(tape, e_tv, text_mask);
    tape.concat_cols(&[a, v])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::Modality;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(t: &Tape, m: Matrix, mask: Vec<bool>, modality: Modality) -> ModalSequence {
        ModalSequence { feats: t.constant(m), mask, modality }
    }

    #[test]
    fn zero_qk_gives_contradiction_scores() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "m", 4, 2).unwrap();
        store.set("m.w_q", Matrix::zeros(4, 4));
        let t = Tape::new();
        let ht = seq(&t, Matrix::from_fn(2, 4, |i, j| (i + j) as f64), vec![true; 2], Modality::Text);
        let hk = seq(&t, Matrix::from_fn(3, 4, |i, j| (i * j) as f64), vec![true; 3], Modality::Audio);
        let c = Matrix::from_fn(2, 3, |i, j| (i as f64) * 0.5 + j as f64 * 0.25);
        let cv = t.constant(c.clone());
        let alpha = t.constant(Matrix::scalar(1.0));
        for h in 0..2 {
            let s = t.value(modulated_scores(&t, &store, &ht, &hk, cv, alpha, &mha, h).unwrap());
            assert_eq!(s, c);
        }
    }

    #[test]
    fn all_keys_invalid_is_degenerate() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "m", 4, 2).unwrap();
        let t = Tape::new();
        let ht = seq(&t, Matrix::filled(2, 4, 1.0), vec![true; 2], Modality::Text);
        let hk = seq(&t, Matrix::zeros(3, 4), vec![false; 3], Modality::Visual);
        assert!(matches!(atomic_branch(&t, &store, &ht, &hk, None, &mha), Err(Error::DegenerateAttention(_))));
    }

    #[test]
    fn head_count_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(MultiHeadAttention::new(&mut store, &mut rng, "m", 6, 4), Err(Error::Config(_))));
    }

    #[test]
    fn single_valid_key_takes_all_weight() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "m", 4, 2).unwrap();
        store.set("m.w_v", Matrix::identity(4));
        store.set("m.w_o", Matrix::identity(4));
        let t = Tape::new();
        let ht = seq(&t, Matrix::from_fn(2, 4, |i, j| (i as f64) - j as f64), vec![true; 2], Modality::Text);
        let km = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.1);
        let hk = seq(&t, km.clone(), vec![false, true, false], Modality::Audio);
        let b = atomic_branch(&t, &store, &ht, &hk, None, &mha).unwrap();
        for w in &b.weights {
            let w = t.value(*w);
            for i in 0..2 {
                assert_eq!(w.row(i), &[0.0, 1.0, 0.0]);
            }
        }
        let out = t.value(b.output);
        let ht_v = t.value(ht.feats);
        for i in 0..2 {
            for j in 0..4 {
                assert!((out[(i, j)] - (km[(1, j)] + ht_v[(i, j)])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn atomic_vector_halves() {
        let t = Tape::new();
        let e = t.constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![7.0, 7.0]]));
        let v = t.value(atomic_vector(&t, e, e, &[true, false]));
        assert_eq!(v.data(), &[1.0, 2.0, 1.0, 2.0]);
    }
}

//! Dual-granularity fusion of the atomic and contextual vectors and the
//! binary classifier.

use rand::Rng;

use crate::autograd::{ParamId, Tape, Var};
use crate::params::{xavier_uniform, LayerNorm, Linear, ParamStore};
use crate::tensor::Matrix;

/// `γ · LayerNorm(GELU(x W + b))`.
#[derive(Clone, Copy, Debug)]
pub struct BranchProjection {
    pub linear: Linear,
    pub norm: LayerNorm,
    pub gamma: ParamId,
}

impl BranchProjection {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize, ln_eps: f64) -> Self {
        Self {
            linear: Linear::new(store, rng, &format!("{name}.linear"), d_in, d_out, true),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_out, ln_eps),
            gamma: store.add(format!("{name}.gamma"), Matrix::scalar(1.0)),
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Var {
        let h = tape.gelu(self.linear.forward(tape, store, x));
        let h = self.norm.forward(tape, store, h);
        tape.mul_scalar(h, store.var(tape, self.gamma))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    pub atomic: BranchProjection,
    pub inter: BranchProjection,
    /// Only built for the direct `h^comp` fusion ablation.
    pub comp: Option<BranchProjection>,
    pub w_f: ParamId,
    pub w_fuse: ParamId,
    pub classifier: Linear,
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d_enc: usize, d_a: usize, ln_eps: f64, with_comp: bool) -> Self {
        Self {
            atomic: BranchProjection::new(store, rng, "fusion.atomic", 2 * d_enc, d_enc, ln_eps),
            inter: BranchProjection::new(store, rng, "fusion.inter", d_enc, d_enc, ln_eps),
            comp: with_comp.then(|| BranchProjection::new(store, rng, "fusion.comp", 4 * d_enc, d_enc, ln_eps)),
            w_f: store.add("fusion.w_f", xavier_uniform(rng, d_enc, d_a)),
            w_fuse: store.add("fusion.w_fuse", xavier_uniform(rng, d_a, 1)),
            classifier: Linear::new(store, rng, "fusion.classifier", d_enc, 2, true),
        }
    }
}

pub struct Fused {
    /// Stacked projected rows `M_fuse`.
    pub rows: Var,
    /// `1 × n` routing weights.
    pub weights: Var,
    /// `1 × d_enc`.
    pub fused: Var,
}

/// `a = Softmax(w_fuseᵀ tanh(M W_F))`, `fused = aᵀ M`. `rows` are already
/// projected.
pub fn fuse_rows(tape: &Tape, store: &ParamStore, rows: &[Var], params: &FusionParams) -> Fused {
    let m = tape.concat_rows(rows);
    let hidden = tape.tanh(tape.matmul(m, store.var(tape, params.w_f)));
    let scores = tape.matmul(hidden, store.var(tape, params.w_fuse));
    let weights = tape.softmax_rows(tape.transpose(scores));
    let fused = tape.matmul(weights, m);
    Fused { rows: m, weights, fused }
}

/// Projects `e_atomic` and `e_inter` and fuses them. Either may be dropped
/// for ablations, and `h_comp` adds a third row when present.
pub fn fuse(
    tape: &Tape,
    store: &ParamStore,
    e_atomic: Option<Var>,
    e_inter: Option<Var>,
    h_comp: Option<Var>,
    params: &FusionParams,
) -> Fused {
    let mut rows = Vec::with_capacity(3);
    if let Some(e) = e_atomic {
        rows.push(params.atomic.forward(tape, store, e));
    }
    if let Some(e) = e_inter {
        rows.push(params.inter.forward(tape, store, e));
    }
    if let (Some(h), Some(p)) = (h_comp, params.comp.as_ref()) {
        rows.push(p.forward(tape, store, h));
    }
    assert!(!rows.is_empty(), "fusion needs at least one branch");
    fuse_rows(tape, store, &rows, params)
}

/// `1 × 2` logits.
pub fn classify(tape: &Tape, store: &ParamStore, fused: Var, params: &FusionParams) -> Var {
    params.classifier.forward(tape, store, fused)
}

/// Softmax component for class 1.
pub fn prob_sarcastic(logits: &[f64]) -> f64 {
    crate::autograd::sigmoid(logits[1] - logits[0])
}

//! Central-difference verification of the reverse sweep.
//!
//! A sampled scalar is skipped when moving it by `±ε` changes the branch
//! pattern of any piecewise op (ReLU family, norm guards), since the loss is
//! not differentiable across that interval.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{LossWeights, Stage};
use super::{batch_objective, ObjectiveOptions};
use crate::autograd::{ParamId, Tape, Var};
use crate::config::Config;
use crate::error::Result;
use crate::feature_store::{generate_synthetic, Dims, SynthConfig, UtteranceRecord};
use crate::model::Model;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Atomic,
    Composition,
    Rgat,
    Fusion,
    Full,
}

/// Module name and the parameter-name prefixes it owns.
pub const MODULES: [(&str, &[&str]); 6] = [
    ("encoding", &["enc", "ctx_enc"]),
    ("polarity", &["pol", "probe"]),
    ("atomic", &["atomic"]),
    ("composition", &["comp"]),
    ("contextual", &["rgat"]),
    ("fusion", &["fusion"]),
];

impl Scope {
    pub fn modules(self) -> Vec<(&'static str, &'static [&'static str])> {
        let only = |name: &str| MODULES.iter().filter(|(n, _)| *n == name).copied().collect();
        match self {
            Scope::Atomic => only("atomic"),
            Scope::Composition => only("composition"),
            Scope::Rgat => only("contextual"),
            Scope::Fusion => only("fusion"),
            Scope::Full => MODULES.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub available: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst: Option<EntryCheck>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub seconds: f64,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks the listed `(param, flat index)` entries of `loss` in order,
/// stopping once `limit` entries have been compared. Returns the
/// comparisons and the number of entries skipped at kinks.
pub fn check_entries(
    store: &mut ParamStore,
    entries: &[(ParamId, usize)],
    eps: f64,
    limit: usize,
    loss: &dyn Fn(&ParamStore, &Tape) -> Result<Var>,
) -> Result<(Vec<EntryCheck>, usize)> {
    let tape = Tape::new();
    let l = loss(store, &tape)?;
    let base_sig = tape.kink_signature();
    let grads = tape.backward(l);
    let eval = |store: &ParamStore| -> Result<(f64, _)> {
        let t = Tape::new();
        let v = loss(store, &t)?;
        Ok((t.item(v), t.kink_signature()))
    };
    let mut out = Vec::with_capacity(entries.len());
    let mut skipped = 0;
    for &(id, k) in entries {
        if out.len() >= limit {
            break;
        }
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[k]);
        let orig = store.get(id).data()[k];
        store.get_mut(id).data_mut()[k] = orig + eps;
        let (plus, sig_p) = eval(store)?;
        store.get_mut(id).data_mut()[k] = orig - eps;
        let (minus, sig_m) = eval(store)?;
        store.get_mut(id).data_mut()[k] = orig;
        if sig_p != base_sig || sig_m != base_sig {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        out.push(EntryCheck { param: store.name(id).to_string(), index: k, analytic, numeric, rel_err: relative_error(analytic, numeric) });
    }
    Ok((out, skipped))
}

/// Small float64 model and batch used by the command-line check.
pub fn fixture(seed: u64) -> Result<(Config, Model, Vec<UtteranceRecord>)> {
    let mut cfg = Config::default();
    let m = &mut cfg.model;
    m.d_enc = 8;
    m.n_heads = 2;
    m.d_pol = 4;
    m.d_pol_hidden = 16;
    m.d_z = 5;
    m.d_a = 6;
    m.window = 1;
    m.share_context_encoders = false;
    let dims = Dims { l_t: 4, l_a: 3, l_v: 2, k: 2, d_t: 5, d_a: 4, d_v: 3, j: 2 };
    cfg.synth = SynthConfig { n_samples: 4, noise_std: 0.3, seed, dims, ..SynthConfig::default() };
    let data = generate_synthetic(&cfg.synth)?;
    let model = Model::new(&cfg, dims, seed)?;
    Ok((cfg, model, data.records))
}

/// Warm-up objective (all three terms) in eval mode over `records`.
pub fn full_objective<'a>(cfg: &'a Config, template: &'a Model, records: &'a [UtteranceRecord]) -> impl Fn(&ParamStore, &Tape) -> Result<Var> + 'a {
    let weights = LossWeights::from_config(cfg);
    move |store, tape| {
        // Parameter handles are identical across stores of one layout.
        let model = Model { store: store.clone(), ..template.clone() };
        let refs: Vec<&UtteranceRecord> = records.iter().collect();
        let obj = batch_objective(&model, tape, &refs, Stage::Warmup, &weights, ObjectiveOptions::default())?;
        Ok(obj.total)
    }
}

pub fn grad_check(scope: Scope, eps: f64, seed: u64, per_group: usize) -> Result<GradCheckReport> {
    let start = Instant::now();
    let (cfg, mut model, records) = fixture(seed)?;
    let template = model.clone();
    let loss = full_objective(&cfg, &template, &records);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    for (module, prefixes) in scope.modules() {
        let mut flat: Vec<(ParamId, usize)> = prefixes
            .iter()
            .flat_map(|p| model.store.group(p))
            .flat_map(|id| (0..model.store.get(id).len()).map(move |k| (id, k)))
            .collect();
        if flat.is_empty() {
            continue;
        }
        flat.shuffle(&mut rng);
        let (checks, skipped) = check_entries(&mut model.store, &flat, eps, per_group, &loss)?;
        let worst = checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).cloned();
        groups.push(GroupReport {
            group: module.to_string(),
            available: flat.len(),
            checked: checks.len(),
            skipped_kinks: skipped,
            max_rel_err: worst.as_ref().map_or(0.0, |w| w.rel_err),
            worst,
        });
    }
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { eps, groups, max_rel_err, seconds: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let id = store.add("x", Matrix::scalar(3.0));
        let f = |s: &ParamStore, t: &Tape| {
            let x = s.var(t, 0);
            Ok(t.mul(x, x))
        };
        let (c, skipped) = check_entries(&mut store, &[(id, 0)], 1e-3, 1, &f).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(c[0].analytic, 6.0);
        assert!((c[0].numeric - 6.0).abs() < 1e-9);
    }

    #[test]
    fn unused_parameter_is_zero_on_both_sides() {
        let mut store = ParamStore::new();
        store.add("x", Matrix::scalar(1.5));
        let frozen = store.add("frozen", Matrix::scalar(-2.0));
        let f = |s: &ParamStore, t: &Tape| {
            let x = s.var(t, 0);
            Ok(t.tanh(x))
        };
        let (c, _) = check_entries(&mut store, &[(frozen, 0)], 1e-5, 1, &f).unwrap();
        assert_eq!((c[0].analytic, c[0].numeric), (0.0, 0.0));
    }

    #[test]
    fn relu_kink_is_skipped() {
        let mut store = ParamStore::new();
        let id = store.add("x", Matrix::scalar(1e-7));
        let f = |s: &ParamStore, t: &Tape| {
            let x = s.var(t, 0);
            Ok(t.relu(x))
        };
        let (c, skipped) = check_entries(&mut store, &[(id, 0)], 1e-5, 1, &f).unwrap();
        assert!(c.is_empty());
        assert_eq!(skipped, 1);
    }
}

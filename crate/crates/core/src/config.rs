//! TOML run configuration. Every field has a default, so an empty file is
//! a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_enc: usize,
    pub n_heads: usize,
    pub d_pol: usize,
    pub d_pol_hidden: usize,
    pub d_z: usize,
    pub d_a: usize,
    /// GCN layers per composition graph.
    pub l_mac: usize,
    /// Intra-modal temporal window.
    pub window: usize,
    pub k_gnn: usize,
    pub alpha_mic: f64,
    pub alpha_mac: f64,
    pub alpha_ctx: f64,
    pub dropout: f64,
    pub ln_eps: f64,
    pub norm_eps: f64,
    pub leaky_slope: f64,
    /// History turns reuse the target encoders when true.
    pub share_context_encoders: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_enc: 512,
            n_heads: 4,
            d_pol: 16,
            d_pol_hidden: 64,
            d_z: 128,
            d_a: 128,
            l_mac: 2,
            window: 3,
            k_gnn: 2,
            alpha_mic: 0.5,
            alpha_mac: 0.0,
            alpha_ctx: 0.1,
            dropout: 0.1,
            ln_eps: 1e-5,
            norm_eps: 1e-8,
            leaky_slope: 0.2,
            share_context_encoders: true,
        }
    }
}

/// Structural ablation switches; all off is the full model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Zero modulation in atomic attention and the conversation graph, and
    /// unit cross-modal edge weights in the composition graphs.
    pub no_modulation: bool,
    pub no_atomic: bool,
    pub no_inter: bool,
    /// One merged text-audio-visual composition graph.
    pub tripartite: bool,
    /// Adds the pooled composition-graph features as a third fusion row.
    pub direct_hcomp: bool,
    pub no_valence: bool,
    pub no_contrastive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation macro-F1 improvement before stopping;
    /// 0 disables early stopping.
    pub patience: usize,
    pub e_warm: usize,
    /// `(λ_cls, λ_con, λ_val)` during warm-up.
    pub warmup_weights: [f64; 3],
    /// `(λ_cls, λ_con)` during refinement.
    pub refine_weights: [f64; 2],
    pub tau: f64,
    pub seed: u64,
    /// Share of the training ids held out for early stopping; 0 monitors
    /// the training set itself.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            max_epochs: 15,
            patience: 5,
            e_warm: 5,
            warmup_weights: [1.0, 1.0, 1.0],
            refine_weights: [0.2, 0.8],
            tau: 0.07,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub k: usize,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { k: 5, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub ablation: AblationConfig,
    pub train: TrainConfig,
    pub cv: CvConfig,
    pub synth: SynthConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [("d_enc", m.d_enc), ("n_heads", m.n_heads), ("d_pol", m.d_pol), ("d_pol_hidden", m.d_pol_hidden), ("d_z", m.d_z), ("d_a", m.d_a)] {
            if v == 0 {
                return bad(format!("model.{name} must be positive"));
            }
        }
        if !m.d_enc.is_multiple_of(m.n_heads) {
            return bad(format!("model.d_enc = {} is not divisible by n_heads = {}", m.d_enc, m.n_heads));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad(format!("model.dropout must lie in [0, 1), got {}", m.dropout));
        }
        if !(m.ln_eps > 0.0 && m.norm_eps > 0.0) {
            return bad("model.ln_eps and model.norm_eps must be positive".into());
        }
        for (name, v) in [("alpha_mic", m.alpha_mic), ("alpha_mac", m.alpha_mac), ("alpha_ctx", m.alpha_ctx), ("leaky_slope", m.leaky_slope)] {
            if !v.is_finite() {
                return bad(format!("model.{name} must be finite"));
            }
        }
        let a = &self.ablation;
        if a.no_atomic && a.no_inter && !a.direct_hcomp {
            return bad("ablation removes every fusion branch".into());
        }
        let t = &self.train;
        if !(t.tau > 0.0 && t.tau.is_finite()) {
            return bad(format!("train.tau must be positive, got {}", t.tau));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || t.weight_decay < 0.0 {
            return bad("train.lr must be positive and train.weight_decay nonnegative".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.adam_eps <= 0.0 {
            return bad("AdamW betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if t.batch_size == 0 || t.max_epochs == 0 {
            return bad("train.batch_size and train.max_epochs must be positive".into());
        }
        if t.warmup_weights.iter().chain(&t.refine_weights).any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("loss weights must be finite and nonnegative".into());
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return bad(format!("train.val_fraction must lie in [0, 1), got {}", t.val_fraction));
        }
        if self.cv.k < 2 {
            return bad(format!("cv.k must be at least 2, got {}", self.cv.k));
        }
        self.synth.validate().map_err(|e| Error::Config(format!("synth: {e}")))
    }
}

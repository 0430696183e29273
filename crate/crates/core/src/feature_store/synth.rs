//! Seeded synthetic incongruity data.
//!
//! Each modality owns one unit "polarity direction" in its raw feature
//! space, drawn once from the seed. A valid row is `sign · u_m + noise`,
//! so the sign is the planted polarity of that modality.
//!
//! * `modal`: text `+u`, audio and visual `−u`, history aligned with the
//!   text. Label 1.
//! * `contextual`: all target modalities share a random sign, every valid
//!   history turn carries the opposite sign. Label 1.
//! * `none`: one random sign everywhere. Label 0.
//!
//! Valences are the planted sign plus the mean noise component along the
//! direction, clamped to `[-1, 1]`; at zero noise they are exactly `±1`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ConflictMode, Dataset, Dims, HistoryRecord, UtteranceFeatures, UtteranceRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    /// Per-sample conflict modes; empty means a balanced shuffled mix.
    #[serde(default)]
    pub modes: Vec<ConflictMode>,
    pub noise_std: f64,
    pub seed: u64,
    pub dims: Dims,
    #[serde(default = "default_speakers")]
    pub n_speakers: usize,
    /// Probability that a (frame, subject) visual slot holds a detection.
    #[serde(default = "default_present")]
    pub visual_present_prob: f64,
    /// Use the full declared length for every sequence (no padded tails).
    #[serde(default)]
    pub full_lengths: bool,
}

fn default_speakers() -> usize {
    4
}

fn default_present() -> f64 {
    0.75
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 64,
            modes: Vec::new(),
            noise_std: 0.3,
            seed: 0,
            dims: Dims::default(),
            n_speakers: default_speakers(),
            visual_present_prob: default_present(),
            full_lengths: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.dims.j == 0 {
            return Err(Error::Value("synthetic data needs J >= 1 history turns".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Value("n_samples must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Value(format!("noise_std must be finite and >= 0, got {}", self.noise_std)));
        }
        if !self.modes.is_empty() && self.modes.len() != self.n_samples {
            return Err(Error::Value(format!("{} modes given for {} samples", self.modes.len(), self.n_samples)));
        }
        if self.n_speakers == 0 {
            return Err(Error::Value("n_speakers must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.visual_present_prob) {
            return Err(Error::Value("visual_present_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn resolved_modes(&self, rng: &mut ChaCha8Rng) -> Vec<ConflictMode> {
        if !self.modes.is_empty() {
            return self.modes.clone();
        }
        let cycle = [ConflictMode::Modal, ConflictMode::Contextual, ConflictMode::None];
        let mut modes: Vec<_> = (0..self.n_samples).map(|i| cycle[i % 3]).collect();
        modes.shuffle(rng);
        modes
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = crate::tensor::norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct Planter<'a> {
    cfg: &'a SynthConfig,
    dirs: [Vec<f64>; 3],
    noise: Normal<f64>,
}

impl Planter<'_> {
    fn length(&self, rng: &mut ChaCha8Rng, total: usize) -> usize {
        if self.cfg.full_lengths {
            total
        } else {
            rng.random_range(total.div_ceil(2)..=total)
        }
    }

    /// Fills one row with `sign · u + noise`, returning the noise component
    /// along `u`.
    fn plant_row(&self, rng: &mut ChaCha8Rng, row: &mut [f64], modality: usize, sign: f64) -> f64 {
        let u = &self.dirs[modality];
        let mut along = 0.0;
        for (x, &d) in row.iter_mut().zip(u) {
            let n = self.noise.sample(rng);
            *x = sign * d + n;
            along += n * d;
        }
        along
    }

    /// Returns the features and the planted valence per modality.
    fn utterance(&self, rng: &mut ChaCha8Rng, signs: [f64; 3]) -> (UtteranceFeatures, [Option<f64>; 3]) {
        let dims = &self.cfg.dims;
        let mut f = UtteranceFeatures::zeros(dims);
        let mut valence = [None; 3];

        let lt = self.length(rng, dims.l_t);
        let mut along = 0.0;
        for i in 0..lt {
            along += self.plant_row(rng, f.text.row_mut(i), 0, signs[0]);
            f.text_mask[i] = true;
        }
        valence[0] = Some((signs[0] + along / lt as f64).clamp(-1.0, 1.0));

        let la = self.length(rng, dims.l_a);
        let mut along = 0.0;
        for i in 0..la {
            along += self.plant_row(rng, f.audio.row_mut(i), 1, signs[1]);
            f.audio_mask[i] = true;
        }
        valence[1] = Some((signs[1] + along / la as f64).clamp(-1.0, 1.0));

        let mut along = 0.0;
        let mut count = 0usize;
        for fr in 0..dims.l_v {
            for s in 0..dims.k {
                if rng.random_bool(self.cfg.visual_present_prob) {
                    let mut slot = vec![0.0; dims.d_v];
                    along += self.plant_row(rng, &mut slot, 2, signs[2]);
                    f.visual.slot_mut(fr, s).copy_from_slice(&slot);
                    f.visual.present[fr * dims.k + s] = true;
                    count += 1;
                }
            }
        }
        valence[2] = (count > 0).then(|| (signs[2] + along / count as f64).clamp(-1.0, 1.0));
        (f, valence)
    }
}

/// Pure function of `cfg`: the same config always yields the same dataset.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = cfg.dims;
    let dirs = [unit_direction(&mut rng, dims.d_t), unit_direction(&mut rng, dims.d_a), unit_direction(&mut rng, dims.d_v)];
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Value(e.to_string()))?;
    let planter = Planter { cfg, dirs, noise };
    let modes = cfg.resolved_modes(&mut rng);
    let speaker = |rng: &mut ChaCha8Rng| format!("spk{}", rng.random_range(0..cfg.n_speakers));

    let mut records = Vec::with_capacity(cfg.n_samples);
    for (n, &mode) in modes.iter().enumerate() {
        let random_sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (target, history_sign, label) = match mode {
            ConflictMode::Modal => ([1.0, -1.0, -1.0], 1.0, 1),
            ConflictMode::Contextual => ([random_sign; 3], -random_sign, 1),
            ConflictMode::None => ([random_sign; 3], random_sign, 0),
        };
        let (features, valence) = planter.utterance(&mut rng, target);
        let n_turns = rng.random_range(1..=dims.j);
        let mut turns = Vec::with_capacity(n_turns);
        for _ in 0..n_turns {
            let (f, _) = planter.utterance(&mut rng, [history_sign; 3]);
            turns.push(HistoryRecord { features: f, speaker: speaker(&mut rng), valid: true });
        }
        records.push(UtteranceRecord {
            id: format!("syn{n:05}"),
            features,
            history: UtteranceRecord::fit_history(turns, &dims),
            speaker: speaker(&mut rng),
            label,
            valence: Some(valence),
            conflict_mode: Some(mode),
        });
    }
    let ds = Dataset { dims, records };
    ds.validate()?;
    Ok(ds)
}

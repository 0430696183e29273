//! The full per-utterance forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::atomic::{atomic_branch, atomic_vector, AtomicBranch, AtomicParams};
use crate::autograd::{Tape, Var};
use crate::composition::{composition_congruity, CompositionParams, CongruityPrior};
use crate::config::{AblationConfig, Config, ModelConfig};
use crate::encoding::{encode_modality, flatten_visual, pool_anchor, EncoderParams, ModalSequence, Modality};
use crate::error::{Error, Result};
use crate::feature_store::{Dims, UtteranceFeatures, UtteranceRecord};
use crate::fusion::{classify, fuse, FusionParams};
use crate::params::ParamStore;
use crate::polarity::{contradiction_matrix, project_polarity, valence_probe, PolarityProjector, PolaritySequence, ProjectorScope, ValenceProbe};
use crate::tensor::Matrix;
use crate::rgat::{contextual_embed, init_history_node, inject_prior, relation_masks, target_base, RgatParams};

/// Parameter handles of every module. Values live in [`Model::store`].
#[derive(Clone, Debug)]
pub struct Parts {
    pub encoders: [EncoderParams; 3],
    /// Separate history encoders when context encoders are not shared.
    pub context_encoders: Option<[EncoderParams; 3]>,
    pub projector: PolarityProjector,
    pub probes: [ValenceProbe; 3],
    pub atomic: AtomicParams,
    pub composition: CompositionParams,
    pub rgat: RgatParams,
    pub fusion: FusionParams,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub ablation: AblationConfig,
    pub dims: Dims,
    pub store: ParamStore,
    pub parts: Parts,
}


impl Model {
    pub fn new(config: &Config, dims: Dims, seed: u64) -> Result<Self> {
        config.validate()?;
        dims.validate()?;
        let m = &config.model;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_in = [dims.d_t, dims.d_a, dims.d_v];
        let build_encoders = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str| {
            Modality::ALL.map(|md| EncoderParams::new(store, rng, &format!("{prefix}.{}", md.tag()), d_in[md.index()], m.d_enc, m.dropout, m.ln_eps))
        };
        let encoders = build_encoders(&mut store, &mut rng, "enc");
        let context_encoders = (!m.share_context_encoders).then(|| build_encoders(&mut store, &mut rng, "ctx_enc"));
        let projector = PolarityProjector::new(&mut store, &mut rng, "pol.atomic", m.d_enc, m.d_pol_hidden, m.d_pol, ProjectorScope::AtomicShared, m.norm_eps);
        let probes = Modality::ALL.map(|md| ValenceProbe::new(&mut store, &mut rng, &format!("probe.{}", md.tag()), m.d_pol));
        let atomic = AtomicParams::new(&mut store, &mut rng, m.d_enc, m.n_heads, m.alpha_mic)?;
        let composition = CompositionParams::new(&mut store, &mut rng, m.d_enc, m.d_z, m.l_mac, m.window, m.alpha_mac, m.norm_eps);
        let rgat = RgatParams::new(
            &mut store,
            &mut rng,
            m.d_enc,
            m.n_heads,
            m.d_pol_hidden,
            m.d_pol,
            m.k_gnn,
            m.alpha_ctx,
            m.leaky_slope,
            m.ln_eps,
            m.norm_eps,
        )?;
        let fusion = FusionParams::new(&mut store, &mut rng, m.d_enc, m.d_a, m.ln_eps, config.ablation.direct_hcomp);
        Ok(Self {
            config: m.clone(),
            ablation: config.ablation.clone(),
            dims,
            store,
            parts: Parts { encoders, context_encoders, projector, probes, atomic, composition, rgat, fusion },
        })
    }
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Enables dropout (training mode).
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    /// Detaches `s_comp` before it seeds the conversation graph.
    pub stop_prior_gradient: bool,
    /// Builds the valence probe readouts.
    pub valence: bool,
}

pub struct SampleOutput {
    /// `1 × 2`.
    pub logits: Var,
    /// `1 × d_z`, unit norm.
    pub z_incon: Var,
    /// Probe readouts `[t, a, v]`, each `1 × 1`, when requested.
    pub valence: Option<[Var; 3]>,
    /// Routing weights over the fusion rows that are present.
    pub a_fuse: Var,
    pub fused: Var,
    pub e_atomic: Var,
    pub e_inter: Var,
    pub prior: CongruityPrior,
    pub sequences: [ModalSequence; 3],
    pub polarity: [PolaritySequence; 3],
    /// Text→audio and text→visual branches. `None` marks a branch whose keys
    /// are all padding; it then passes the text rows through unchanged.
    pub atomic: [Option<AtomicBranch>; 2],
    /// Per-layer attention maps `[seq, ctx, spk]` over `J + 1` nodes.
    pub relation_attention: Vec<[Var; 3]>,
    pub history_valid: Vec<bool>,
}

fn encode_all(
    tape: &Tape,
    store: &ParamStore,
    features: &UtteranceFeatures,
    encoders: &[EncoderParams; 3],
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<[ModalSequence; 3]> {
    let (vis, vis_mask) = flatten_visual(&features.visual)?;
    let raw = [(features.text.clone(), features.text_mask.clone()), (features.audio.clone(), features.audio_mask.clone()), (vis, vis_mask)];
    let mut out = Vec::with_capacity(3);
    for (md, (x, mask)) in Modality::ALL.into_iter().zip(raw) {
        let x = tape.constant(x);
        out.push(encode_modality(tape, store, x, &mask, &encoders[md.index()], md, rng.as_deref_mut())?);
    }
    let [t, a, v]: [ModalSequence; 3] = out.try_into().map_err(|_| Error::ShapeMismatch("encoder count".into()))?;
    Ok([t, a, v])
}

impl Model {
    pub fn positions(&self) -> [Vec<usize>; 3] {
        let d = &self.dims;
        [(0..d.l_t).collect(), (0..d.l_a).collect(), (0..d.l_v * d.k).map(|i| i / d.k).collect()]
    }

    pub fn forward(&self, tape: &Tape, record: &UtteranceRecord, mut opts: ForwardOptions<'_>) -> Result<SampleOutput> {
        let store = &self.store;
        let p = &self.parts;
        let ab = &self.ablation;
        let modulate = !ab.no_modulation;

        let seqs = encode_all(tape, store, &record.features, &p.encoders, &mut opts.dropout_rng)?;
        let [h_t, h_a, h_v] = &seqs;
        let polarity = [
            project_polarity(tape, store, h_t, &p.projector)?,
            project_polarity(tape, store, h_a, &p.projector)?,
            project_polarity(tape, store, h_v, &p.projector)?,
        ];
        let valence = opts.valence.then(|| [0, 1, 2].map(|m| valence_probe(tape, store, &polarity[m], &p.probes[m])));

        let alpha_mic = store.var(tape, p.atomic.alpha_mic);
        let mut branches = Vec::with_capacity(2);
        let mut outputs = Vec::with_capacity(2);
        for (h_k, pol_k, mha) in [(h_a, &polarity[1], &p.atomic.text_audio), (h_v, &polarity[2], &p.atomic.text_visual)] {
            if h_k.n_valid() == 0 {
                outputs.push(h_t.feats);
                branches.push(None);
                continue;
            }
            let modulation = if modulate { Some((contradiction_matrix(tape, &polarity[0], pol_k)?, alpha_mic)) } else { None };
            let b = atomic_branch(tape, store, h_t, h_k, modulation, mha)?;
            outputs.push(b.output);
            branches.push(Some(b));
        }
        let e_atomic = atomic_vector(tape, outputs[0], outputs[1], &h_t.mask);

        let prior = composition_congruity(tape, store, &p.composition, &p.projector, [h_t, h_a, h_v], self.positions(), modulate, ab.tripartite)?;
        let s_comp = if opts.stop_prior_gradient { tape.detach(prior.s_comp) } else { prior.s_comp };

        let ctx_enc = p.context_encoders.as_ref().unwrap_or(&p.encoders);
        let mut nodes = Vec::with_capacity(self.dims.j + 1);
        let mut history_valid = Vec::with_capacity(self.dims.j);
        let mut speakers = Vec::with_capacity(self.dims.j + 1);
        for turn in &record.history {
            history_valid.push(turn.valid);
            speakers.push(turn.speaker.clone());
            if !turn.valid {
                nodes.push(tape.constant(Matrix::zeros(1, self.config.d_enc)));
                continue;
            }
            let [ht, ha, hv] = encode_all(tape, store, &turn.features, ctx_enc, &mut opts.dropout_rng)?;
            let anchor = pool_anchor(tape, &ht);
            nodes.push(init_history_node(tape, store, anchor, &ha, &hv, &p.rgat.history_attention, true)?);
        }
        speakers.push(record.speaker.clone());
        let h_tgt = target_base(tape, store, [h_t, h_a, h_v], &p.rgat.target_proj);
        nodes.push(inject_prior(tape, store, h_tgt, s_comp, p.rgat.w_pri, &p.rgat.prior_norm));
        let h0 = tape.concat_rows(&nodes);
        let masks = relation_masks(self.dims.j, &history_valid, &speakers)?;
        let (e_inter, relation_attention) = contextual_embed(tape, store, h0, &masks, &p.rgat, modulate)?;

        let h_comp = ab.direct_hcomp.then(|| tape.concat_cols(&prior.h_comp));
        let fused = fuse(tape, store, (!ab.no_atomic).then_some(e_atomic), (!ab.no_inter).then_some(e_inter), h_comp, &p.fusion);
        let logits = classify(tape, store, fused.fused, &p.fusion);

        Ok(SampleOutput {
            logits,
            z_incon: prior.z_incon,
            valence,
            a_fuse: fused.weights,
            fused: fused.fused,
            e_atomic,
            e_inter,
            prior,
            polarity,
            atomic: [branches.remove(0), branches.remove(0)],
            relation_attention,
            history_valid,
            sequences: seqs,
        })
    }

    /// Eval-mode class-1 probability and routing weights for one record.
    pub fn predict(&self, record: &UtteranceRecord) -> Result<Prediction> {
        let tape = Tape::new();
        let out = self.forward(&tape, record, ForwardOptions::default())?;
        let logits = tape.value(out.logits);
        let l = [logits[(0, 0)], logits[(0, 1)]];
        let prob = crate::fusion::prob_sarcastic(&l);
        Ok(Prediction {
            logits: l,
            prob_sarcastic: prob,
            label: u8::from(l[1] > l[0]),
            a_fuse: self.routing_pair(&tape.value(out.a_fuse)),
            fused: tape.value(out.fused).data().to_vec(),
            z_incon: tape.value(out.z_incon).data().to_vec(),
        })
    }

    /// `[a_mic, a_ctx]`; a dropped branch reports weight 0.
    pub fn routing_pair(&self, a: &Matrix) -> [f64; 2] {
        match (self.ablation.no_atomic, self.ablation.no_inter) {
            (false, false) => [a[(0, 0)], a[(0, 1)]],
            (true, false) => [0.0, a[(0, 0)]],
            (false, true) => [a[(0, 0)], 0.0],
            (true, true) => [0.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: [f64; 2],
    pub prob_sarcastic: f64,
    pub label: u8,
    pub a_fuse: [f64; 2],
    pub fused: Vec<f64>,
    pub z_incon: Vec<f64>,
}

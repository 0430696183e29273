mod common;

use pcmnet::autograd::Tape;
use pcmnet::config::Config;
use pcmnet::model::{ForwardOptions, Model};
use pcmnet::training::losses::{LossWeights, Stage};
use pcmnet::training::{batch_objective, train, ObjectiveOptions, TrainOptions};

fn objective_grads(cfg: &Config, stage: Stage) -> (Model, pcmnet::autograd::Gradients, bool) {
    let ds = common::synth(6, 0.3, 8, common::small_dims());
    let model = Model::new(cfg, ds.dims, 1).unwrap();
    let t = Tape::new();
    let recs: Vec<_> = ds.records.iter().collect();
    let obj = batch_objective(&model, &t, &recs, stage, &LossWeights::from_config(cfg), ObjectiveOptions::default()).unwrap();
    let has_val = obj.terms.val.is_some();
    let g = t.backward(obj.total);
    (model, g, has_val)
}

fn group_grad_max(model: &Model, g: &pcmnet::autograd::Gradients, prefix: &str) -> f64 {
    model.store.group(prefix).into_iter().filter_map(|id| g.param(id)).map(|m| m.max_abs()).fold(0.0, f64::max)
}

#[test]
fn zero_warmup_never_uses_valence() {
    let mut cfg = common::small_config();
    cfg.train.e_warm = 0;
    cfg.train.max_epochs = 3;
    let ds = common::synth(8, 0.3, 9, common::small_dims());
    let (_, hist) = train(&ds, &ds.ids(), &[], &cfg, &TrainOptions::default()).unwrap();
    for r in &hist {
        assert_eq!(r.stage, Stage::Refine);
        assert_eq!(r.lambdas[2], 0.0);
        assert_eq!(r.l_val, 0.0);
        assert_eq!(r.probe_grad_max, 0.0);
        assert_eq!(&r.lambdas[..2], &[0.2, 0.8]);
    }
}

#[test]
fn warmup_lambdas_follow_config() {
    let mut cfg = common::small_config();
    cfg.train.e_warm = 2;
    cfg.train.max_epochs = 3;
    cfg.train.warmup_weights = [0.5, 0.25, 2.0];
    let ds = common::synth(8, 0.3, 9, common::small_dims());
    let (_, hist) = train(&ds, &ds.ids(), &[], &cfg, &TrainOptions::default()).unwrap();
    let stages: Vec<Stage> = hist.iter().map(|r| r.stage).collect();
    assert_eq!(stages, [Stage::Warmup, Stage::Warmup, Stage::Refine]);
    assert_eq!(hist[0].lambdas, [0.5, 0.25, 2.0]);
    assert!(hist[0].l_val > 0.0 && hist[0].probe_grad_max > 0.0);
}

#[test]
fn no_modulation_freezes_every_alpha() {
    let mut cfg = common::small_config();
    cfg.ablation.no_modulation = true;
    let (model, g, _) = objective_grads(&cfg, Stage::Warmup);
    for name in ["atomic.alpha_mic", "comp.alpha_mac", "rgat.alpha_ctx"] {
        let id = model.store.id(name).unwrap();
        assert!(g.param(id).is_none_or(|m| m.max_abs() == 0.0), "{name}");
    }
    let (model, g, _) = objective_grads(&common::small_config(), Stage::Warmup);
    let id = model.store.id("atomic.alpha_mic").unwrap();
    assert!(g.param(id).unwrap().max_abs() > 0.0);
}

#[test]
fn dropped_branches_leave_their_parameters_untouched_by_classification() {
    let mut cfg = common::small_config();
    cfg.ablation.no_atomic = true;
    cfg.ablation.no_contrastive = true;
    let (model, g, _) = objective_grads(&cfg, Stage::Refine);
    assert_eq!(group_grad_max(&model, &g, "atomic"), 0.0);
    assert_eq!(group_grad_max(&model, &g, "fusion.atomic"), 0.0);
    cfg.ablation.no_atomic = false;
    cfg.ablation.no_inter = true;
    let (model, g, _) = objective_grads(&cfg, Stage::Refine);
    assert_eq!(group_grad_max(&model, &g, "rgat"), 0.0);
    assert!(group_grad_max(&model, &g, "atomic") > 0.0);
}

#[test]
fn no_valence_drops_the_probe_loss() {
    let mut cfg = common::small_config();
    cfg.ablation.no_valence = true;
    let (model, g, has_val) = objective_grads(&cfg, Stage::Warmup);
    assert!(!has_val);
    assert_eq!(group_grad_max(&model, &g, "probe"), 0.0);
}

#[test]
fn fusion_rows_track_ablation_flags() {
    let ds = common::synth(3, 0.3, 10, common::small_dims());
    let rows = |cfg: &Config| {
        let model = Model::new(cfg, ds.dims, 2).unwrap();
        let t = Tape::new();
        let out = model.forward(&t, &ds.records[0], ForwardOptions::default()).unwrap();
        let a = t.value(out.a_fuse);
        assert!((a.sum() - 1.0).abs() < 1e-12);
        a.cols()
    };
    let mut cfg = common::small_config();
    assert_eq!(rows(&cfg), 2);
    cfg.ablation.direct_hcomp = true;
    assert_eq!(rows(&cfg), 3);
    cfg.ablation.direct_hcomp = false;
    cfg.ablation.no_inter = true;
    assert_eq!(rows(&cfg), 1);
}

#[test]
fn tripartite_graph_changes_the_prior() {
    let ds = common::synth(3, 0.3, 11, common::small_dims());
    let s_comp = |cfg: &Config| {
        let model = Model::new(cfg, ds.dims, 2).unwrap();
        let t = Tape::new();
        let out = model.forward(&t, &ds.records[0], ForwardOptions::default()).unwrap();
        t.value(out.prior.s_comp)
    };
    let mut cfg = common::small_config();
    let a = s_comp(&cfg);
    cfg.ablation.tripartite = true;
    let b = s_comp(&cfg);
    assert!(b.is_finite() && a.max_abs_diff(&b) > 0.0);
    assert!(b.data().iter().all(|x| x.abs() <= 1.0));
}

#[test]
fn separate_context_encoders_are_trained_only_by_history() {
    let mut cfg = common::small_config();
    cfg.model.share_context_encoders = false;
    let (model, g, _) = objective_grads(&cfg, Stage::Warmup);
    assert!(group_grad_max(&model, &g, "ctx_enc") > 0.0);
    cfg.ablation.no_inter = true;
    cfg.ablation.no_contrastive = true;
    let (model, g, _) = objective_grads(&cfg, Stage::Refine);
    assert_eq!(group_grad_max(&model, &g, "ctx_enc"), 0.0);
}

#[test]
fn noise_free_valences_are_exact() {
    let ds = common::synth(30, 0.0, 12, common::small_dims());
    for r in &ds.records {
        for v in r.valence.unwrap().iter().flatten() {
            assert!(*v == 1.0 || *v == -1.0);
        }
    }
}

#[test]
fn synthetic_modes_are_balanced_and_labelled() {
    use pcmnet::feature_store::ConflictMode;
    let ds = common::synth(90, 0.3, 13, common::small_dims());
    for mode in [ConflictMode::Modal, ConflictMode::Contextual, ConflictMode::None] {
        let recs: Vec<_> = ds.records.iter().filter(|r| r.conflict_mode == Some(mode)).collect();
        assert_eq!(recs.len(), 30);
        let want = u8::from(mode != ConflictMode::None);
        assert!(recs.iter().all(|r| r.label == want));
    }
}

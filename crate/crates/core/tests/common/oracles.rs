//! Straight-line reference implementations of the taped forward passes.

use super::random_matrix;
use pcmnet::atomic::{attend, MultiHeadAttention};
use pcmnet::autograd::{sigmoid, Tape};
use pcmnet::composition::{build_joint_nodes, build_modulated_adjacency, gcn_forward, GraphPart};
use pcmnet::encoding::{Modality, ModalSequence};
use pcmnet::params::{normal, ParamStore};
use pcmnet::polarity::{PolarityProjector, ProjectorScope};
use pcmnet::rgat::{relation_masks, rgat_layer, Relation, RgatParams};
use pcmnet::tensor::{dot, Matrix};
use pcmnet::training::losses::contrastive_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn softmax_valid(scores: &[f64], valid: &[bool]) -> Vec<f64> {
    let max = scores.iter().zip(valid).filter(|(_, &v)| v).map(|(&s, _)| s).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().zip(valid).map(|(&s, &v)| if v { (s - max).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| if z > 0.0 { x / z } else { 0.0 }).collect()
}

pub fn vec_mat(x: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.cols()).map(|c| (0..w.rows()).map(|a| x[a] * w[(a, c)]).sum()).collect()
}

fn mha_oracle(store: &ParamStore, mha: &MultiHeadAttention, q: &Matrix, k: &Matrix, mask: &[bool], bias: Option<&Matrix>) -> (Matrix, Vec<Matrix>) {
    let (wq, wk, wv, wo) = (store.get(mha.w_q), store.get(mha.w_k), store.get(mha.w_v), store.get(mha.w_o));
    let d = wq.rows();
    let dh = d / mha.n_heads;
    let mut concat = Matrix::zeros(q.rows(), d);
    let mut weights = Vec::new();
    for h in 0..mha.n_heads {
        let mut a = Matrix::zeros(q.rows(), k.rows());
        for i in 0..q.rows() {
            let qi = vec_mat(q.row(i), wq);
            let scores: Vec<f64> = (0..k.rows())
                .map(|j| {
                    let kj = vec_mat(k.row(j), wk);
                    let s: f64 = (0..dh).map(|c| qi[h * dh + c] * kj[h * dh + c]).sum();
                    s / (dh as f64).sqrt() + bias.map_or(0.0, |b| b[(i, j)])
                })
                .collect();
            let w = softmax_valid(&scores, mask);
            for j in 0..k.rows() {
                a[(i, j)] = w[j];
                let vj = vec_mat(k.row(j), wv);
                for c in 0..dh {
                    concat[(i, h * dh + c)] += w[j] * vj[h * dh + c];
                }
            }
        }
        weights.push(a);
    }
    let out = Matrix::from_rows(&(0..q.rows()).map(|i| vec_mat(concat.row(i), wo)).collect::<Vec<_>>());
    (out, weights)
}

/// Largest deviation of [`attend`] from the per-pair loop.
pub fn attention_max_diff(seed: u64, trials: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let mut store = ParamStore::new();
        let heads = [1, 2, 4][trial % 3];
        let d = 4 * heads;
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "mha", d, heads).unwrap();
        let lq = rng.random_range(1..=6);
        let lk = rng.random_range(1..=6);
        let q = random_matrix(&mut rng, lq, d);
        let k = random_matrix(&mut rng, lk, d);
        let mut mask: Vec<bool> = (0..lk).map(|_| rng.random_bool(0.7)).collect();
        mask[0] = true;
        let bias = (trial % 2 == 0).then(|| random_matrix(&mut rng, lq, lk));
        let t = Tape::new();
        let keys = ModalSequence { feats: t.constant(k.clone()), mask: mask.clone(), modality: Modality::Audio };
        let b = bias.clone().map(|b| t.constant(b));
        let got = attend(&t, &store, &mha, t.constant(q.clone()), &keys, b).unwrap();
        let (want, want_w) = mha_oracle(&store, &mha, &q, &k, &mask, bias.as_ref());
        worst = worst.max(t.value(got.output).max_abs_diff(&want));
        for h in 0..heads {
            worst = worst.max(t.value(got.weights[h]).max_abs_diff(&want_w[h]));
        }
    }
    worst
}

pub fn polarity_oracle(store: &ParamStore, proj: &PolarityProjector, x: &[f64]) -> Vec<f64> {
    let w1 = store.get(proj.hidden.weight);
    let b1 = store.get(proj.hidden.bias.unwrap());
    let w2 = store.get(proj.out.weight);
    let b2 = store.get(proj.out.bias.unwrap());
    let h: Vec<f64> = vec_mat(x, w1).iter().zip(b1.data()).map(|(a, b)| (a + b).max(0.0)).collect();
    let o: Vec<f64> = vec_mat(&h, w2).iter().zip(b2.data()).map(|(a, b)| a + b).collect();
    let n = dot(&o, &o).sqrt().max(proj.norm_eps);
    o.iter().map(|v| v / n).collect()
}

struct GraphCase {
    store: ParamStore,
    proj: PolarityProjector,
    types: [usize; 2],
    weights: Vec<usize>,
    q: Matrix,
    k: Matrix,
    q_mask: Vec<bool>,
    k_mask: Vec<bool>,
    q_pos: Vec<usize>,
    k_pos: Vec<usize>,
    alpha: usize,
}

fn graph_case(rng: &mut ChaCha8Rng) -> GraphCase {
    let d = 4;
    let mut store = ParamStore::new();
    let proj = PolarityProjector::new(&mut store, rng, "pol", d, 6, 3, ProjectorScope::AtomicShared, 1e-8);
    let types = [store.add("type_q", normal(rng, 1, d, 0.3)), store.add("type_k", normal(rng, 1, d, 0.3))];
    let weights = (0..2).map(|l| store.add(format!("gcn.{l}"), random_matrix(rng, d, d))).collect();
    let alpha = store.add("alpha", Matrix::scalar(rng.random_range(-1.0..1.0)));
    let lq = rng.random_range(1..=4);
    let lk = rng.random_range(1..=8 - lq);
    let mut q_mask: Vec<bool> = (0..lq).map(|_| rng.random_bool(0.8)).collect();
    let mut k_mask: Vec<bool> = (0..lk).map(|_| rng.random_bool(0.8)).collect();
    q_mask[0] = true;
    k_mask[0] = true;
    let mut q = random_matrix(rng, lq, d);
    let mut k = random_matrix(rng, lk, d);
    for (m, mask) in [(&mut q, &q_mask), (&mut k, &k_mask)] {
        for (i, &v) in mask.iter().enumerate() {
            if !v {
                m.row_mut(i).fill(0.0);
            }
        }
    }
    let q_pos = (0..lq).collect();
    let k_pos = (0..lk).map(|i| i / 2).collect();
    GraphCase { store, proj, types, weights, q, k, q_mask, k_mask, q_pos, k_pos, alpha }
}

/// Dense weighted adjacency from the edge rules, before normalization.
fn adjacency_oracle(c: &GraphCase, nodes: &Matrix, modulate: bool, window: usize) -> Matrix {
    let lq = c.q.rows();
    let n = nodes.rows();
    let mask: Vec<bool> = c.q_mask.iter().chain(&c.k_mask).copied().collect();
    let pos: Vec<usize> = c.q_pos.iter().chain(&c.k_pos).copied().collect();
    let pol: Vec<Vec<f64>> = (0..n).map(|i| polarity_oracle(&c.store, &c.proj, nodes.row(i))).collect();
    let s = sigmoid(c.store.get(c.alpha).item());
    Matrix::from_fn(n, n, |i, j| {
        if !mask[i] || !mask[j] {
            return 0.0;
        }
        let same = (i < lq) == (j < lq);
        if same {
            if pos[i].abs_diff(pos[j]) <= window {
                1.0
            } else {
                0.0
            }
        } else if modulate {
            1.0 + s * (1.0 - dot(&pol[i], &pol[j]))
        } else {
            1.0
        }
    })
}

fn explicit_normalize(a: &Matrix) -> Matrix {
    let n = a.rows();
    let d = Matrix::from_fn(n, n, |i, j| {
        let deg: f64 = a.row(i).iter().sum();
        if i == j && deg > 0.0 {
            1.0 / deg.sqrt()
        } else {
            0.0
        }
    });
    d.matmul(a).matmul(&d)
}

/// Largest deviations `[raw adjacency, normalization, GCN output]`.
pub fn graph_max_diffs(seed: u64, trials: usize) -> [f64; 3] {
    let mut worst = [0.0f64; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let c = graph_case(&mut rng);
        let modulate = trial % 3 != 0;
        let window = trial % 3;
        let t = Tape::new();
        let qs = ModalSequence { feats: t.constant(c.q.clone()), mask: c.q_mask.clone(), modality: Modality::Text };
        let ks = ModalSequence { feats: t.constant(c.k.clone()), mask: c.k_mask.clone(), modality: Modality::Visual };
        let parts = [
            GraphPart { seq: &qs, type_embedding: c.types[0], positions: c.q_pos.clone() },
            GraphPart { seq: &ks, type_embedding: c.types[1], positions: c.k_pos.clone() },
        ];
        let g = build_joint_nodes(&t, &c.store, &parts).unwrap();
        let alpha = modulate.then(|| c.store.var(&t, c.alpha));
        let adj = build_modulated_adjacency(&t, &c.store, &g, &c.proj, alpha, window).unwrap();
        let h = gcn_forward(&t, &c.store, &g, adj.normalized, &c.weights);

        // Node features: valid rows get their type embedding.
        let n = g.len();
        let mask = &g.mask;
        let nodes = Matrix::from_fn(n, 4, |i, a| {
            let (src, row, ty) = if i < c.q.rows() { (&c.q, i, c.types[0]) } else { (&c.k, i - c.q.rows(), c.types[1]) };
            src[(row, a)] + if mask[i] { c.store.get(ty)[(0, a)] } else { 0.0 }
        });
        worst[0] = worst[0].max(t.value(g.nodes).max_abs_diff(&nodes));

        let raw = adjacency_oracle(&c, &nodes, modulate, window);
        worst[0] = worst[0].max(t.value(adj.raw).max_abs_diff(&raw));
        let norm = explicit_normalize(&raw);
        worst[1] = worst[1].max(t.value(adj.normalized).max_abs_diff(&norm));

        let mut x = nodes.clone();
        for &w in &c.weights {
            let w = c.store.get(w);
            x = Matrix::from_fn(n, 4, |i, col| {
                if !mask[i] {
                    return 0.0;
                }
                let s: f64 = (0..n).map(|j| norm[(i, j)] * (0..4).map(|a| x[(j, a)] * w[(a, col)]).sum::<f64>()).sum();
                s.max(0.0)
            });
        }
        worst[2] = worst[2].max(t.value(h).max_abs_diff(&x));
    }
    worst
}

/// Largest deviation of one relational attention layer (weights and
/// output) from the per-neighborhood loop.
pub fn rgat_max_diff(seed: u64, trials: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 6;
    for trial in 0..trials {
        let mut store = ParamStore::new();
        let params = RgatParams::new(&mut store, &mut rng, d, 2, 8, 3, 1, 0.0, 0.2, 1e-5, 1e-8).unwrap();
        store.set("rgat.alpha_ctx", Matrix::scalar(rng.random_range(-0.5..0.5)));
        let j = rng.random_range(1..=7);
        let validity: Vec<bool> = (0..j).map(|_| rng.random_bool(0.7)).collect();
        let speakers: Vec<String> = (0..=j).map(|_| format!("s{}", rng.random_range(0..3))).collect();
        let masks = relation_masks(j, &validity, &speakers).unwrap();
        let node_mask = masks.node_mask();
        let n = j + 1;
        let mut h = random_matrix(&mut rng, n, d);
        for i in 0..n {
            if !node_mask[i] {
                h.row_mut(i).fill(0.0);
            }
        }
        let t = Tape::new();
        let out = rgat_layer(&t, &store, t.constant(h.clone()), &masks, &params, 0, trial % 2 == 0).unwrap();

        let alpha = if trial % 2 == 0 { store.get(params.alpha_ctx).item() } else { 0.0 };
        let pol: Vec<Vec<f64>> = (0..n)
            .map(|i| if node_mask[i] { polarity_oracle(&store, &params.ctx_projector, h.row(i)) } else { vec![0.0; 3] })
            .collect();
        let lp = &params.layers[0];
        let mut want = Matrix::zeros(n, d);
        for (r, rel) in Relation::ALL.iter().enumerate() {
            let w = store.get(lp.score[r]);
            let wt = store.get(lp.transform[r]);
            let mut att = Matrix::zeros(n, n);
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|k| {
                        let src: f64 = (0..d).map(|a| h[(i, a)] * w[(a, 0)]).sum();
                        let dst: f64 = (0..d).map(|a| h[(k, a)] * w[(d + a, 0)]).sum();
                        let e = src + dst + alpha * (1.0 - dot(&pol[i], &pol[k]));
                        if e > 0.0 {
                            e
                        } else {
                            0.2 * e
                        }
                    })
                    .collect();
                let nb: Vec<bool> = (0..n).map(|k| masks.get(*rel, i, k)).collect();
                let a = softmax_valid(&scores, &nb);
                for k in 0..n {
                    att[(i, k)] = a[k];
                    let hw = vec_mat(h.row(k), wt);
                    for c in 0..d {
                        want[(i, c)] += a[k] * hw[c];
                    }
                }
            }
            worst = worst.max(t.value(out.attention[r]).max_abs_diff(&att));
        }
        for i in 0..n {
            for c in 0..d {
                want[(i, c)] = if node_mask[i] { want[(i, c)].max(0.0) } else { 0.0 };
            }
        }
        worst = worst.max(t.value(out.h).max_abs_diff(&want));
    }
    worst
}

/// Double loop over anchors, positives and the denominator set.
pub fn contrastive_oracle(z: &Matrix, labels: &[u8], tau: f64) -> Option<f64> {
    let b = z.rows();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let denom: f64 = (0..b).filter(|&a| a != i).map(|a| (dot(z.row(i), z.row(a)) / tau).exp()).sum();
        let mut s = 0.0;
        for &p in &pos {
            s += ((dot(z.row(i), z.row(p)) / tau).exp() / denom).ln();
        }
        total += s / pos.len() as f64;
    }
    (anchors > 0).then(|| -total / anchors as f64)
}

fn unit_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Matrix {
    let mut z = random_matrix(rng, b, d);
    for i in 0..b {
        let n = dot(z.row(i), z.row(i)).sqrt();
        z.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    z
}

/// Largest relative deviation from the double loop over random batches of
/// at most 8 rows; a missed degenerate batch counts as infinite.
pub fn contrastive_max_diff(seed: u64, trials: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let b = rng.random_range(1..=8);
        let z = unit_rows(&mut rng, b, 5);
        let labels: Vec<u8> = (0..b).map(|_| rng.random_range(0..2)).collect();
        let tau = [0.07, 0.5, 1.0][trial % 3];
        let t = Tape::new();
        let got = contrastive_loss(&t, t.constant(z.clone()), &labels, tau);
        match contrastive_oracle(&z, &labels, tau) {
            Some(want) => {
                let got = t.item(got.unwrap());
                worst = worst.max((got - want).abs() / want.abs().max(1.0));
                if got < 0.0 {
                    worst = f64::INFINITY;
                }
            }
            None => {
                if !matches!(got, Err(pcmnet::Error::DegenerateBatch)) {
                    worst = f64::INFINITY;
                }
            }
        }
    }
    worst
}


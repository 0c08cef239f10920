//! Forward passes recomputed with plain nested loops from the stored
//! parameters and compared with the tape.

mod common;

use common::randn;
use emdepart_core::alignment::{self, CrossAttention};
use emdepart_core::config::{ModelConfig, SimilarityVariant};
use emdepart_core::numerics::{LayerNorm, Linear, Session};
use emdepart_core::sdm::Sdm;
use emdepart_core::{seeded_rng, ParamId, ParamStore, Tape, Tensor};

type M = Vec<Vec<f64>>;

fn m(t: &Tensor) -> M {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn p(store: &ParamStore, id: ParamId) -> M {
    let t = &store.get(id).value;
    if t.rank() == 1 {
        vec![t.data().to_vec()]
    } else {
        m(t)
    }
}

fn matmul(a: &M, b: &M) -> M {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

fn add_row(a: &M, row: &[f64]) -> M {
    a.iter().map(|x| x.iter().zip(row).map(|(u, v)| u + v).collect()).collect()
}

fn linear(store: &ParamStore, l: &Linear, x: &M) -> M {
    let y = matmul(x, &p(store, l.w));
    match l.b {
        Some(b) => add_row(&y, &p(store, b)[0]),
        None => y,
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn mlp(store: &ParamStore, layers: &[Linear], x: &M) -> M {
    let mut h = x.clone();
    for (i, l) in layers.iter().enumerate() {
        if i > 0 {
            h = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        }
        h = linear(store, l, &h);
    }
    h
}

fn layer_norm(store: &ParamStore, ln: &LayerNorm, x: &M, eps: f64) -> M {
    let (g, b) = (&p(store, ln.gain)[0], &p(store, ln.bias)[0]);
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            r.iter().enumerate().map(|(j, v)| (v - mu) / (var + eps).sqrt() * g[j] + b[j]).collect()
        })
        .collect()
}

/// `(softmax(q kᵀ/√d) v, q kᵀ/√d)`.
fn attention(q: &M, k: &M, v: &M) -> (M, M) {
    let d = q[0].len() as f64;
    let logits: M = q
        .iter()
        .map(|qi| k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect())
        .collect();
    let weights: M = logits
        .iter()
        .map(|r| {
            let mx = r.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        })
        .collect();
    (matmul(&weights, v), logits)
}

fn close(a: &Tensor, b: &M, tol: f64) {
    assert_eq!(a.rows(), b.len());
    for (i, row) in b.iter().enumerate() {
        for (x, y) in a.row(i).iter().zip(row) {
            assert!((x - y).abs() <= tol, "row {i}: {x} vs {y}");
        }
    }
}

fn sdm_oracle(store: &ParamStore, sdm: &Sdm, local: &M, global: &[f64], eps: f64) -> (M, M, Vec<M>) {
    let mut e = p(store, sdm.e0);
    let mut logits = Vec::new();
    for blk in &sdm.blocks {
        let (att, a) = attention(
            &linear(store, &blk.q, &e),
            &linear(store, &blk.k, local),
            &linear(store, &blk.v, local),
        );
        logits.push(a);
        let e_hat = add(&matmul(&att, &p(store, blk.w_o)), &e);
        let h = mlp(store, &blk.mlp.layers, &layer_norm(store, &blk.ln, &e_hat, eps));
        e = add(&e_hat, &h);
    }
    let fused = if sdm.no_global { e.clone() } else { add_row(&e, global) };
    (layer_norm(store, &sdm.out_ln, &fused, eps), e, logits)
}

fn sdm_setup(no_global: bool, l: usize, seed: u64) -> (ModelConfig, ParamStore, Sdm) {
    let cfg = ModelConfig {
        r: 4,
        k: 2,
        sdm_layers: l,
        no_global,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new(seed);
    let mut rng = seeded_rng(seed);
    let sdm = Sdm::new(&mut store, &mut rng, "sdm_v", &cfg).unwrap();
    (cfg, store, sdm)
}

#[test]
fn aggregation_matches_loop_reference() {
    for (no_global, l, seed) in [(false, 1, 0), (false, 2, 1), (true, 3, 2)] {
        let (cfg, store, sdm) = sdm_setup(no_global, l, seed);
        let mut rng = seeded_rng(100 + seed);
        let local = randn(&[3, 4], &mut rng);
        let global = randn(&[1, 4], &mut rng);
        let (views, trace) = sdm.evaluate(&store, cfg.layer_norm_eps, &local, &global).unwrap();
        let (b, e, logits) = sdm_oracle(&store, &sdm, &m(&local), global.row(0), cfg.layer_norm_eps);
        close(&views.b, &b, 1e-12);
        close(&views.e_last, &e, 1e-12);
        assert_eq!(trace.logits.shape(), &[l, 2, 3]);
        for (t, a) in logits.iter().enumerate() {
            close(&trace.block(t), a, 1e-12);
        }
    }
}

#[test]
fn aggregation_ignores_patch_order_and_follows_view_order() {
    let (cfg, mut store, sdm) = sdm_setup(false, 2, 4);
    let mut rng = seeded_rng(5);
    let local = randn(&[5, 4], &mut rng);
    let global = randn(&[1, 4], &mut rng);
    let shuffled = Tensor::from_rows(&[4, 2, 0, 3, 1].map(|i| local.row(i).to_vec())).unwrap();
    let (a, _) = sdm.evaluate(&store, cfg.layer_norm_eps, &local, &global).unwrap();
    let (b, _) = sdm.evaluate(&store, cfg.layer_norm_eps, &shuffled, &global).unwrap();
    assert!(a.b.max_abs_diff(&b.b) < 1e-12);

    let e0 = store.get(sdm.e0).value.clone();
    store.get_mut(sdm.e0).value = Tensor::from_rows(&[e0.row(1).to_vec(), e0.row(0).to_vec()]).unwrap();
    let (c, _) = sdm.evaluate(&store, cfg.layer_norm_eps, &local, &global).unwrap();
    for i in 0..2 {
        for (x, y) in c.b.row(i).iter().zip(a.b.row(1 - i)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_attention_score_matches_loop_reference() {
    let r = 5;
    let mut store = ParamStore::new(7);
    let mut rng = seeded_rng(7);
    let cross = CrossAttention::new(&mut store, &mut rng, r).unwrap();
    let patches = randn(&[4, r], &mut rng);
    let words = randn(&[6, r], &mut rng);
    let eps = 1e-5;

    let mut s = Session::eval(&store, eps);
    let pv = s.tape.constant(patches.clone());
    let wv = s.tape.constant(words.clone());
    let fused = cross.fuse(&mut s, pv, wv).unwrap();
    let score = cross.score(&mut s, fused).unwrap();

    let (pm, wm) = (m(&patches), m(&words));
    let (att, _) = attention(
        &linear(&store, &cross.q, &pm),
        &linear(&store, &cross.k, &wm),
        &linear(&store, &cross.v, &wm),
    );
    let want = layer_norm(&store, &cross.ln, &add(&pm, &matmul(&att, &p(&store, cross.w_o))), eps);
    close(s.tape.value(fused), &want, 1e-12);
    let pooled: Vec<f64> = (0..r).map(|j| want.iter().map(|row| row[j]).sum::<f64>() / 4.0).collect();
    let d = p(&store, cross.d);
    let want_score: f64 = pooled.iter().zip(&d).map(|(x, dj)| x * dj[0]).sum();
    assert!((s.tape.value(score).item() - want_score).abs() < 1e-12);
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn chamfer(bv: &M, bt: &M) -> f64 {
    let lse = |xs: Vec<f64>| xs.iter().map(|x| x.exp()).sum::<f64>().ln();
    let a: f64 = bv.iter().map(|v| lse(bt.iter().map(|t| cos(v, t)).collect())).sum();
    let b: f64 = bt.iter().map(|t| lse(bv.iter().map(|v| cos(v, t)).collect())).sum();
    (a + b) / (bv.len() + bt.len()) as f64
}

#[test]
fn global_loss_matches_three_class_reference() {
    let mut rng = seeded_rng(11);
    let images: Vec<Tensor> = (0..2).map(|_| randn(&[3, 4], &mut rng)).collect();
    let classes: Vec<Tensor> = (0..3).map(|_| randn(&[3, 4], &mut rng)).collect();
    let labels = [1, 2];
    let tau = 0.2;

    let mut tape = Tape::new();
    let iv: Vec<_> = images.iter().map(|t| tape.constant(t.clone())).collect();
    let cv: Vec<_> = classes.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = alignment::loss_global(&mut tape, &iv, &cv, &labels, tau, SimilarityVariant::SmoothChamfer).unwrap();

    let mut want = 0.0;
    for (img, &y) in images.iter().zip(&labels) {
        let s: Vec<f64> = classes.iter().map(|c| chamfer(&m(img), &m(c)) / tau).collect();
        let z: f64 = s.iter().map(|x| x.exp()).sum();
        want += -(s[y].exp() / z).ln() / 2.0;
    }
    assert!((tape.value(loss).item() - want).abs() < 1e-12);
}

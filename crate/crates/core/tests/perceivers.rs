mod common;

use common::randn;
use emdepart_core::config::ModelConfig;
use emdepart_core::numerics::{Linear, Session};
use emdepart_core::perceivers::{ImagePerceiver, TextPerceiver};
use emdepart_core::{seeded_rng, ParamId, ParamStore, Tensor};

fn cfg() -> ModelConfig {
    ModelConfig {
        r: 8,
        k: 3,
        encoder_heads: 2,
        ..ModelConfig::default()
    }
}

fn value(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).value.data().to_vec()
}

fn zero(store: &mut ParamStore, id: ParamId) {
    store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
}

/// Row-major `x W + b` by plain loops.
fn affine(x: &[Vec<f64>], store: &ParamStore, l: &Linear) -> Vec<Vec<f64>> {
    let w = &store.get(l.w).value;
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    let b = l.b.map(|b| value(store, b)).unwrap_or(vec![0.0; d_out]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), d_in);
            (0..d_out).map(|j| b[j] + (0..d_in).map(|i| row[i] * w.at(i, j)).sum::<f64>()).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn assert_rows_close(got: &Tensor, want: &[Vec<f64>], tol: f64) {
    assert_eq!(got.rows(), want.len());
    for (i, w) in want.iter().enumerate() {
        for (a, b) in got.row(i).iter().zip(w) {
            assert!((a - b).abs() <= tol, "row {i}: {a} vs {b}");
        }
    }
}

#[test]
fn image_perceiver_with_zero_mlp_is_the_projection() {
    let cfg = cfg();
    let mut store = ParamStore::new(0);
    let mut rng = seeded_rng(0);
    let p = ImagePerceiver::new(&mut store, &mut rng, 5, &cfg).unwrap();
    let last = p.mlp.layers.last().unwrap().clone();
    zero(&mut store, last.w);
    let raw = randn(&[4, 5], &mut rng);
    let want = affine(&rows(&raw), &store, &p.proj);

    let mut s = Session::eval(&store, cfg.layer_norm_eps);
    let out = p.forward(&mut s, &raw).unwrap();
    let (g, l) = (s.tape.value(out.global).clone(), s.tape.value(out.local).clone());
    assert_eq!(g.shape(), &[1, 8]);
    assert_eq!(l.shape(), &[3, 8]);
    assert_rows_close(&g, &want[..1], 1e-12);
    assert_rows_close(&l, &want[1..], 1e-12);
}

#[test]
fn image_perceiver_rejects_a_lone_global_token() {
    let cfg = cfg();
    let mut store = ParamStore::new(0);
    let mut rng = seeded_rng(0);
    let p = ImagePerceiver::new(&mut store, &mut rng, 5, &cfg).unwrap();
    let mut s = Session::eval(&store, cfg.layer_norm_eps);
    assert!(p.forward(&mut s, &randn(&[1, 5], &mut rng)).is_err());
}

#[test]
fn zeroed_encoder_blocks_pass_cls_and_projected_tokens_through() {
    let cfg = cfg();
    let mut store = ParamStore::new(1);
    let mut rng = seeded_rng(1);
    let p = TextPerceiver::new(&mut store, &mut rng, 6, &cfg).unwrap();
    for b in &p.blocks {
        for &o in &b.attn.out {
            zero(&mut store, o);
        }
        zero(&mut store, b.attn.out_bias);
        zero(&mut store, b.ffn.layers.last().unwrap().w);
    }
    let tokens = randn(&[5, 6], &mut rng);
    let h = affine(&rows(&tokens), &store, &p.proj.layers[0]);
    let h: Vec<Vec<f64>> = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let projected = affine(&h, &store, &p.proj.layers[1]);

    let mut s = Session::eval(&store, cfg.layer_norm_eps);
    let out = p.forward(&mut s, &tokens).unwrap();
    assert_rows_close(s.tape.value(out.global), &[value(&store, p.cls)], 1e-12);
    assert_rows_close(s.tape.value(out.local), &projected, 1e-12);
}

#[test]
fn text_perceiver_is_token_order_equivariant() {
    let cfg = cfg();
    let mut store = ParamStore::new(2);
    let mut rng = seeded_rng(2);
    let p = TextPerceiver::new(&mut store, &mut rng, 6, &cfg).unwrap();
    let tokens = randn(&[7, 6], &mut rng);
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let permuted = Tensor::from_rows(&perm.iter().map(|&i| tokens.row(i).to_vec()).collect::<Vec<_>>()).unwrap();

    let run = |t: &Tensor| {
        let mut s = Session::eval(&store, cfg.layer_norm_eps);
        let out = p.forward(&mut s, t).unwrap();
        (s.tape.value(out.global).clone(), s.tape.value(out.local).clone())
    };
    let (g, l) = run(&tokens);
    let (gp, lp) = run(&permuted);
    assert_eq!(l.shape(), &[7, 8]);
    assert!(g.max_abs_diff(&gp) < 1e-12);
    for (new, &old) in perm.iter().enumerate() {
        for (a, b) in lp.row(new).iter().zip(l.row(old)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn dropout_only_acts_in_training_sessions() {
    let cfg = cfg();
    let mut store = ParamStore::new(3);
    let mut rng = seeded_rng(3);
    let p = TextPerceiver::new(&mut store, &mut rng, 6, &cfg).unwrap();
    let tokens = randn(&[4, 6], &mut rng);
    let eval = |store: &ParamStore| {
        let mut s = Session::eval(store, cfg.layer_norm_eps);
        let out = p.forward(&mut s, &tokens).unwrap();
        s.tape.value(out.local).clone()
    };
    let a = eval(&store);
    assert_eq!(a, eval(&store));

    let mut drng = seeded_rng(9);
    let mut s = Session::train(&store, cfg.layer_norm_eps, 0.5, &mut drng);
    let out = p.forward(&mut s, &tokens).unwrap();
    assert!(s.tape.value(out.local).max_abs_diff(&a) > 1e-6);
}

mod common;

use common::{rng, shift_mismatch};
use gauss_flow::gaussian::GaussianKernelSpec;
use gauss_flow::ggam::{gaussian_smooth, Ggam, GgamConfig, GgamMode};
use gauss_flow::gradcheck::{check, GradCheckConfig};
use gauss_flow::{Error, Graph, ParamStore, Tensor};

fn module(mode: GgamMode, c: usize, k: usize, sigma: f64, seed: u64) -> (ParamStore, Ggam) {
    let mut store = ParamStore::new();
    let cfg = GgamConfig {
        channels: c,
        window: k,
        sigma,
        mode,
    };
    let m = Ggam::new(&mut store, "ggam", cfg, seed).unwrap();
    (store, m)
}

fn randomized(mode: GgamMode, c: usize, k: usize, sigma: f64, seed: u64) -> (ParamStore, Ggam) {
    let (mut store, m) = module(mode, c, k, sigma, seed);
    common::randomize(&mut store, seed + 1, 0.5);
    (store, m)
}

fn run(store: &ParamStore, m: &Ggam, f_c: &Tensor, f_m: &Tensor) -> Tensor {
    let g = Graph::new();
    let out = m.forward(&g, store, g.constant(f_c.clone()), g.constant(f_m.clone()));
    out.unwrap().value().as_ref().clone()
}

fn smooth(x: &Tensor, spec: &GaussianKernelSpec) -> Tensor {
    let g = Graph::new();
    gaussian_smooth(g.constant(x.clone()), spec).unwrap().value().as_ref().clone()
}

fn context(store: &ParamStore, m: &Ggam, f_c: &Tensor) -> Tensor {
    let g = Graph::new();
    m.context_weights(&g, store, g.constant(f_c.clone())).unwrap().value().as_ref().clone()
}

/// Copies every parameter whose name exists in both stores.
fn copy_shared(from: &ParamStore, to: &mut ParamStore) {
    for p in to.iter_mut() {
        if let Some(id) = from.find(&p.name) {
            p.value = from.value(id).clone();
        }
    }
}

#[test]
fn smoothing_constant_input() {
    let spec = GaussianKernelSpec::new(5, 1.3).unwrap();
    let out = smooth(&Tensor::full(&[2, 7, 7], 0.8), &spec);
    let expected = 0.8 * spec.window().sum();
    assert!(common::interior_diff(&out, &Tensor::full(&[2, 7, 7], expected), 2) < 1e-14);
}

#[test]
fn narrow_smoothing_is_identity() {
    let spec = GaussianKernelSpec::new(3, 1e-3).unwrap();
    let x = Tensor::randn(&[3, 5, 6], 1.0, &mut rng(1));
    assert!(smooth(&x, &spec).max_abs_diff(&x) < 1e-12);
}

#[test]
fn smoothing_matches_convolution_oracle() {
    let spec = GaussianKernelSpec::new(3, 0.9).unwrap();
    let x = Tensor::randn(&[1, 5, 5], 1.0, &mut rng(2));
    assert!(smooth(&x, &spec).max_abs_diff(&common::gaussian_conv(&x, 3, 0.9)) < 1e-12);
}

#[test]
fn constant_context_gives_uniform_weights() {
    let (store, m) = randomized(GgamMode::Ggac, 3, 3, 1.0, 10);
    let f_c = Tensor::full(&[3, 5, 5], -0.4);
    let w = context(&store, &m, &f_c);
    for y in 1..4 {
        for x in 1..4 {
            for l in 0..9 {
                assert!((w.at(&[l, y * 5 + x]) - 1.0 / 9.0).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn context_columns_sum_to_one() {
    let (store, m) = randomized(GgamMode::Ggac, 4, 5, 1.0, 20);
    let w = context(&store, &m, &Tensor::randn(&[4, 6, 7], 1.0, &mut rng(21)));
    for n in 0..42 {
        let s: f64 = (0..25).map(|l| w.at(&[l, n])).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn context_weights_two_pixel_grid_by_hand() {
    let (mut store, m) = module(GgamMode::Ggac, 1, 3, 1.0, 30);
    let theta = m.theta.clone().unwrap();
    let phi = m.phi.clone().unwrap();
    *store.value_mut(theta.weight) = Tensor::full(&[1, 1], 2.0);
    *store.value_mut(theta.bias) = Tensor::zeros(&[1]);
    *store.value_mut(phi.weight) = Tensor::full(&[1, 1], 1.0);
    *store.value_mut(phi.bias) = Tensor::full(&[1], 0.5);
    let f_c = Tensor::new(&[1, 1, 2], vec![1.0, -1.0]).unwrap();
    let w = context(&store, &m, &f_c);
    // θ = [2, -2], φ = [1.5, -0.5]. Left pixel sees itself at l=4 and its
    // right neighbour at l=5; the right pixel sees its left neighbour at
    // l=3 and itself at l=4. Out-of-image slots score 0.
    let e = f64::exp;
    let z0 = e(3.0) + e(-3.0) + 7.0;
    let z1 = e(-1.0) + e(1.0) + 7.0;
    for l in 0..9 {
        let left = match l {
            4 => e(3.0),
            5 => e(-3.0),
            _ => 1.0,
        } / z0;
        let right = match l {
            3 => e(-1.0),
            4 => e(1.0),
            _ => 1.0,
        } / z1;
        assert!((w.at(&[l, 0]) - left).abs() < 1e-15, "l={l}");
        assert!((w.at(&[l, 1]) - right).abs() < 1e-15, "l={l}");
    }
    assert!(context(&store, &m, &f_c).max_abs_diff(&common::context_weights(&store, &m, &f_c)) < 1e-15);
}

#[test]
fn constant_context_reduces_to_scaled_smoothing() {
    for mode in [GgamMode::Ggac, GgamMode::Ggad] {
        let (mut store, m) = randomized(mode, 3, 3, 1.2, 40);
        if mode == GgamMode::Ggad {
            let head = m.offset_head.clone().unwrap();
            *store.value_mut(head.weight) = Tensor::zeros(&[3, 18]);
            *store.value_mut(head.bias) = Tensor::zeros(&[18]);
            *store.value_mut(m.lambda.unwrap()) = Tensor::scalar(0.0);
        }
        let f_c = Tensor::full(&[3, 6, 6], 0.3);
        let f_m = Tensor::randn(&[3, 6, 6], 1.0, &mut rng(41));
        let rho = common::affine_map(&store, &m.rho, &f_m);
        let expected = smooth(&rho, &m.spec).map(|v| v / 9.0);
        assert!(common::interior_diff(&run(&store, &m, &f_c, &f_m), &expected, 1) < 1e-14, "{mode}");
    }
}

#[test]
fn identity_embedding_keeps_constant_motion_constant() {
    let (mut store, m) = randomized(GgamMode::Ggac, 2, 3, 1.0, 50);
    *store.value_mut(m.rho.weight) = Tensor::eye(2);
    *store.value_mut(m.rho.bias) = Tensor::zeros(&[2]);
    let f_c = Tensor::randn(&[2, 6, 6], 1.0, &mut rng(51));
    let out = run(&store, &m, &f_c, &Tensor::full(&[2, 6, 6], 1.5));
    // interior weights differ per pixel, but every channel gets the same sum
    for y in 1..5 {
        for x in 1..5 {
            assert!((out.at(&[0, y, x]) - out.at(&[1, y, x])).abs() < 1e-14);
        }
    }
}

#[test]
fn identity_embedding_with_constant_context_is_constant() {
    let (mut store, m) = randomized(GgamMode::Ggac, 2, 3, 1.0, 55);
    *store.value_mut(m.rho.weight) = Tensor::eye(2);
    *store.value_mut(m.rho.bias) = Tensor::zeros(&[2]);
    let out = run(&store, &m, &Tensor::full(&[2, 6, 6], 0.1), &Tensor::full(&[2, 6, 6], 1.5));
    let expected = 1.5 * m.spec.window().sum() / 9.0;
    assert!(common::interior_diff(&out, &Tensor::full(&[2, 6, 6], expected), 1) < 1e-14);
}

#[test]
fn ggac_matches_loop_oracle() {
    let (store, m) = randomized(GgamMode::Ggac, 4, 3, 1.0, 60);
    let mut r = rng(61);
    let f_c = Tensor::randn(&[4, 6, 6], 1.0, &mut r);
    let f_m = Tensor::randn(&[4, 6, 6], 1.0, &mut r);
    let diff = run(&store, &m, &f_c, &f_m).max_abs_diff(&common::ggam(&store, &m, &f_c, &f_m));
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn ggad_matches_loop_oracle() {
    let (store, m) = randomized(GgamMode::Ggad, 4, 5, 1.4, 70);
    let mut r = rng(71);
    let f_c = Tensor::randn(&[4, 5, 6], 1.0, &mut r);
    let f_m = Tensor::randn(&[4, 5, 6], 1.0, &mut r);
    let diff = run(&store, &m, &f_c, &f_m).max_abs_diff(&common::ggam(&store, &m, &f_c, &f_m));
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn smooth_mode_matches_loop_oracle() {
    let (store, m) = randomized(GgamMode::Smooth, 3, 3, 0.8, 75);
    let f_m = Tensor::randn(&[3, 4, 5], 1.0, &mut rng(76));
    let out = run(&store, &m, &f_m, &f_m);
    assert!(out.max_abs_diff(&common::ggam(&store, &m, &f_m, &f_m)) < 1e-12);
}

#[test]
fn fresh_ggad_equals_ggac_exactly() {
    let (mut ac_store, ac) = randomized(GgamMode::Ggac, 4, 3, 1.0, 80);
    let (mut ad_store, ad) = module(GgamMode::Ggad, 4, 3, 1.0, 80);
    common::randomize(&mut ac_store, 81, 0.5);
    copy_shared(&ac_store, &mut ad_store);
    let mut r = rng(82);
    let f_c = Tensor::randn(&[4, 5, 5], 1.0, &mut r);
    let f_m = Tensor::randn(&[4, 5, 5], 1.0, &mut r);
    assert_eq!(run(&ac_store, &ac, &f_c, &f_m), run(&ad_store, &ad, &f_c, &f_m));
}

#[test]
fn kernels_are_nonnegative() {
    for mode in [GgamMode::Smooth, GgamMode::Ggac, GgamMode::Ggad] {
        let (mut store, m) = randomized(mode, 3, 3, 1.0, 90);
        if let Some(l) = m.lambda {
            // keeps 1 + ϑ·λ positive for these inputs
            *store.value_mut(l) = Tensor::scalar(0.05);
        }
        let mut r = rng(91);
        let f_c = Tensor::randn(&[3, 4, 4], 1.0, &mut r);
        let f_m = Tensor::randn(&[3, 4, 4], 1.0, &mut r);
        let g = Graph::new();
        let k = m
            .kernel(&g, &store, g.constant(f_c), g.constant(f_m), None)
            .unwrap()
            .value();
        assert_eq!(k.shape(), &[9, 16]);
        assert!(k.data().iter().all(|&v| v >= 0.0), "{mode}");
    }
}

#[test]
fn output_ignores_content_beyond_the_window() {
    for mode in [GgamMode::Ggac, GgamMode::Ggad] {
        let (store, m) = randomized(mode, 3, 3, 1.0, 100);
        let mut r = rng(101);
        let f_c = Tensor::randn(&[3, 9, 9], 1.0, &mut r);
        let f_m = Tensor::randn(&[3, 9, 9], 1.0, &mut r);
        let base = run(&store, &m, &f_c, &f_m);
        let (py, px) = (4, 4);
        let (mut c2, mut m2) = (f_c.clone(), f_m.clone());
        for ch in 0..3 {
            for y in 0..9usize {
                for x in 0..9usize {
                    if y.abs_diff(py).max(x.abs_diff(px)) >= 3 {
                        c2.set(&[ch, y, x], 10.0);
                        m2.set(&[ch, y, x], -7.0);
                    }
                }
            }
        }
        let moved = run(&store, &m, &c2, &m2);
        for ch in 0..3 {
            assert_eq!(base.at(&[ch, py, px]), moved.at(&[ch, py, px]), "{mode}");
        }
    }
}

#[test]
fn translation_equivariant_in_the_interior() {
    for mode in [GgamMode::Smooth, GgamMode::Ggac, GgamMode::Ggad] {
        let (store, m) = randomized(mode, 2, 3, 1.0, 110);
        // both inputs are stacked into one map so they shift together
        let d = shift_mismatch(4, 8, 9, (2, 1), 1, 111, |x| {
            let f_c = common::crop_channels(x, 0, 2);
            let f_m = common::crop_channels(x, 2, 4);
            run(&store, &m, &f_c, &f_m)
        });
        assert_eq!(d, 0.0, "{mode}");
    }
}

#[test]
fn ggad_gradients() {
    let (mut store, m) = randomized(GgamMode::Ggad, 4, 3, 1.0, 120);
    let mut r = rng(121);
    let inputs = [Tensor::randn(&[4, 5, 5], 1.0, &mut r), Tensor::randn(&[4, 5, 5], 1.0, &mut r)];
    let res = check(
        "ggad",
        &mut store,
        &inputs,
        |g, s, v| m.forward(g, s, v[0], v[1]),
        &GradCheckConfig::default(),
        122,
    )
    .unwrap();
    assert!(res.passed(), "{res:?}");
}

#[test]
fn ggac_gradients() {
    let (mut store, m) = randomized(GgamMode::Ggac, 3, 3, 1.0, 130);
    let mut r = rng(131);
    let inputs = [Tensor::randn(&[3, 4, 5], 1.0, &mut r), Tensor::randn(&[3, 4, 5], 1.0, &mut r)];
    let res = check(
        "ggac",
        &mut store,
        &inputs,
        |g, s, v| m.forward(g, s, v[0], v[1]),
        &GradCheckConfig::default(),
        132,
    )
    .unwrap();
    assert!(res.passed(), "{res:?}");
}

#[test]
fn spatial_mismatch_is_an_error() {
    let (store, m) = module(GgamMode::Ggac, 2, 3, 1.0, 140);
    let g = Graph::new();
    let f_c = g.constant(Tensor::zeros(&[2, 4, 4]));
    let f_m = g.constant(Tensor::zeros(&[2, 4, 5]));
    assert!(m.forward(&g, &store, f_c, f_m).is_err());
    assert!(m.forward(&g, &store, f_m, f_m.reshape(&[2, 5, 4])).is_err());
}

#[test]
fn exported_windows() {
    let f_m = Tensor::randn(&[2, 5, 5], 1.0, &mut rng(150));
    let (store, m) = randomized(GgamMode::Smooth, 2, 3, 1.0, 151);
    let win = m.attn_export(&store, &f_m, &f_m, (2, 3)).unwrap();
    assert_eq!(win, m.spec.window());

    let (store, m) = randomized(GgamMode::Ggac, 2, 3, 1.0, 152);
    let win = m.attn_export(&store, &Tensor::full(&[2, 5, 5], 0.2), &f_m, (2, 2)).unwrap();
    assert!(win.max_abs_diff(&m.spec.window().map(|v| v / 9.0)) < 1e-15);

    let err = m.attn_export(&store, &f_m, &f_m, (5, 0)).unwrap_err();
    assert!(matches!(err, Error::OutOfBounds { y: 5, x: 0, .. }));
}

#[test]
fn trained_offsets_move_the_window_away_from_context_kernel() {
    let (mut store, m) = randomized(GgamMode::Ggad, 2, 3, 1.0, 160);
    let head = m.offset_head.clone().unwrap();
    *store.value_mut(head.weight) = Tensor::zeros(&[2, 18]);
    *store.value_mut(head.bias) = Tensor::zeros(&[18]);
    *store.value_mut(m.lambda.unwrap()) = Tensor::scalar(0.0);
    let mut r = rng(161);
    let f_c = Tensor::randn(&[2, 5, 5], 1.0, &mut r);
    let f_m = Tensor::randn(&[2, 5, 5], 1.0, &mut r);
    let target = Tensor::randn(&[2, 5, 5], 1.0, &mut r);
    let before = m.attn_export(&store, &f_c, &f_m, (2, 2)).unwrap();
    for _ in 0..5 {
        store.zero_grad();
        let g = Graph::new();
        let out = m.forward(&g, &store, g.constant(f_c.clone()), g.constant(f_m.clone())).unwrap();
        let loss = out.sub(g.constant(target.clone())).abs().mean();
        g.backward(loss);
        store.accumulate(&g);
        for p in store.iter_mut() {
            let step: Vec<f64> = p.value.data().iter().zip(p.grad.data()).map(|(v, d)| v - 0.1 * d).collect();
            p.value = Tensor::new(p.value.shape(), step).unwrap();
        }
    }
    assert!(store.value(head.weight).norm() > 0.0);
    assert!(store.value(m.lambda.unwrap()).data()[0] != 0.0);
    let (mut ac_store, ac) = module(GgamMode::Ggac, 2, 3, 1.0, 160);
    copy_shared(&store, &mut ac_store);
    let reference = ac.attn_export(&ac_store, &f_c, &f_m, (2, 2)).unwrap();
    let after = m.attn_export(&store, &f_c, &f_m, (2, 2)).unwrap();
    assert!(after.max_abs_diff(&reference) > 0.0);
    assert!(before.max_abs_diff(&after) > 0.0);
}

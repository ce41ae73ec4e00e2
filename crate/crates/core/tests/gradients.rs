//! Analytic gradients against central finite differences in f64.

use dashfp::backbone::{BackboneConfig, EmbeddingModel};
use dashfp::metriclearn::{hinge_loss_grad, Triplet};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn tiny() -> BackboneConfig {
    BackboneConfig::small([4, 8, 16], 12, 8)
}

fn randn2(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
}

/// `|a − n| / max(|a|, |n|, 1e-4)`; the floor absorbs round-off on tiny gradients.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

#[test]
fn hinge_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let anchors = randn2(6, 5, &mut rng);
    let negatives = randn2(4, 5, &mut rng);
    let triplets = vec![
        Triplet { anchor: 0, positive: 1, negative: 2 },
        Triplet { anchor: 1, positive: 0, negative: 3 },
        Triplet { anchor: 4, positive: 5, negative: 0 },
    ];
    let margin = 3.0;
    let (_, g_a, g_n) = hinge_loss_grad(anchors.view(), negatives.view(), &triplets, margin);
    let f = |a: &Array2<f64>, n: &Array2<f64>| hinge_loss_grad(a.view(), n.view(), &triplets, margin).0.value;
    let h = 1e-6;
    for ((i, j), &g) in g_a.indexed_iter() {
        let (mut p, mut m) = (anchors.clone(), anchors.clone());
        p[[i, j]] += h;
        m[[i, j]] -= h;
        let fd = (f(&p, &negatives) - f(&m, &negatives)) / (2.0 * h);
        assert!(rel_err(g, fd) < 1e-6, "anchor grad [{i},{j}] {g} vs {fd}");
    }
    for ((i, j), &g) in g_n.indexed_iter() {
        let (mut p, mut m) = (negatives.clone(), negatives.clone());
        p[[i, j]] += h;
        m[[i, j]] -= h;
        let fd = (f(&anchors, &p) - f(&anchors, &m)) / (2.0 * h);
        assert!(rel_err(g, fd) < 1e-6, "negative grad [{i},{j}] {g} vs {fd}");
    }
}

#[test]
fn network_gradient_matches_differences() {
    // loss = <r, f(x)> in training mode; every parameter is checked
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = BackboneConfig {
        input_len: 48,
        ..tiny()
    };
    let mut model = EmbeddingModel::<f64>::new(cfg, 2).unwrap();
    let x = Array3::from_shape_simple_fn((5, 2, 48), || StandardNormal.sample(&mut rng));
    let r = randn2(5, 8, &mut rng);

    let (_, tape) = model.forward_train(&x, &mut rng).unwrap();
    model.net.zero_grad();
    model.backward(&tape, r.clone());
    let analytic: Vec<Vec<f64>> = model
        .net
        .named_params()
        .iter()
        .map(|(_, p)| p.grad.iter().copied().collect())
        .collect();

    let h = 1e-7;
    let mut checked = 0;
    let mut kinks = 0;
    let n_tensors = analytic.len();
    for t in 0..n_tensors {
        for e in 0..analytic[t].len() {
            let mut eval = |delta: f64, model: &mut EmbeddingModel<f64>| {
                let orig = {
                    let mut ps = model.net.params_mut();
                    let v = ps[t].value.as_slice_mut().unwrap();
                    let o = v[e];
                    v[e] = o + delta;
                    o
                };
                let (y, _) = model.forward_train(&x, &mut rng).unwrap();
                model.net.params_mut()[t].value.as_slice_mut().unwrap()[e] = orig;
                (&y * &r).sum()
            };
            let f0 = eval(0.0, &mut model);
            let fp = eval(h, &mut model);
            let fm = eval(-h, &mut model);
            let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
            // one-sided slopes disagree across a ReLU or max-pool kink
            if (fwd - bwd).abs() > 2e-5 * fwd.abs().max(bwd.abs()) + 1e-6 {
                kinks += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            assert!(rel_err(analytic[t][e], fd) < 1e-4, "tensor {t} elem {e}: {} vs {fd}", analytic[t][e]);
            checked += 1;
        }
    }
    assert!(kinks * 100 <= checked, "{kinks} kinks among {checked} parameters");
}

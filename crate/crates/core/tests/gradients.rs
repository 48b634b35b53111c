//! Analytic gradients of every loss and of the end-to-end URL objective
//! against central finite differences.

mod common;

use alldepth::autograd::Graph;
use alldepth::backbone::{
    url_loss, Backbone, BackboneArch, InputMode, ReferenceBackbone, UrlConfig,
};
use alldepth::depthmap::DepthMap;
use alldepth::fusion::fuse_residual_graph;
use alldepth::losses::{self, EdgeWeights, LossConfig, PNorm, Target};
use alldepth::spade::{SpadeArch, SpadeModel};
use alldepth::tensor::{Shape, Tensor};
use common::*;
use rand::Rng;

const EPS: f64 = 1e-3;
const H: usize = 6;
const W: usize = 6;

fn semi_dense_gt(r: &mut rand_chacha::ChaCha8Rng) -> DepthMap {
    let values: Vec<f64> = (0..H * W).map(|_| r.random_range(1.0..40.0)).collect();
    let valid: Vec<bool> = (0..H * W).map(|i| i % 5 != 0).collect();
    DepthMap::new(H, W, values, valid).unwrap()
}

/// Random depths whose neighbouring differences stay clear of the `|.|` kink
/// by more than the probe width.
fn kink_free_depths(r: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    loop {
        let d: Vec<f64> = (0..H * W).map(|_| r.random_range(1.0..40.0)).collect();
        let clear = (0..H).all(|y| {
            (0..W).all(|x| {
                let v = d[y * W + x];
                (x + 1 == W || (d[y * W + x + 1] - v).abs() > 10.0 * EPS)
                    && (y + 1 == H || (d[(y + 1) * W + x] - v).abs() > 10.0 * EPS)
            })
        });
        if clear {
            return d;
        }
    }
}

fn shape() -> Shape {
    Shape::new(1, 1, H, W)
}

/// Checks the gradient of `build(input)` w.r.t. `input` at every element.
fn check(
    name: &str,
    x0: Vec<f64>,
    tol: f64,
    build: impl Fn(&mut Graph, alldepth::autograd::Var) -> alldepth::autograd::Var,
) {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(shape(), x0.clone()));
    let loss = build(&mut g, x);
    let grads = g.backward(loss);
    let analytic = grads.get(x).unwrap().data().to_vec();
    let mut f = |v: &[f64]| {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(shape(), v.to_vec()));
        let out = build(&mut g, x);
        g.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let numeric = central_diff(&mut f, &x0, i, EPS);
        if analytic[i].abs().max(numeric.abs()) < 1e-10 {
            continue;
        }
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    assert!(worst < tol, "{name}: worst relative error {worst:e}");
}

#[test]
fn depth_loss_gradient() {
    for seed in 0..3 {
        let mut r = rng(seed);
        let gt = semi_dense_gt(&mut r);
        let target = Target::new(&[&gt]).unwrap();
        let zhat: Vec<f64> = (0..H * W).map(|_| r.random_range(1.0..40.0)).collect();
        check("depth_l2", zhat, 1e-4, |g, z| {
            losses::depth_l2(g, z, &target).unwrap()
        });
    }
}

#[test]
fn uncertainty_loss_gradient_in_both_arguments() {
    for seed in 0..3 {
        let mut r = rng(10 + seed);
        let gt = semi_dense_gt(&mut r);
        let target = Target::new(&[&gt]).unwrap();
        let zhat: Vec<f64> = (0..H * W).map(|_| r.random_range(1.0..40.0)).collect();
        let sigma: Vec<f64> = (0..H * W).map(|_| r.random_range(-3.0..3.0)).collect();
        let s_t = Tensor::from_vec(shape(), sigma.clone());
        let z_t = Tensor::from_vec(shape(), zhat.clone());
        check("log_uncertainty / zhat", zhat, 1e-4, |g, z| {
            let s = g.constant(s_t.clone());
            losses::log_uncertainty(g, z, s, &target).unwrap()
        });
        check("log_uncertainty / sigma", sigma, 1e-4, |g, s| {
            let z = g.constant(z_t.clone());
            losses::log_uncertainty(g, z, s, &target).unwrap()
        });
    }
}

#[test]
fn supervised_loss_gradient_for_both_norms() {
    for seed in 0..3 {
        let mut r = rng(20 + seed);
        let gt = semi_dense_gt(&mut r);
        let target = Target::new(&[&gt]).unwrap();
        let d: Vec<f64> = (0..H * W).map(|_| r.random_range(1.0..40.0)).collect();
        for p in [PNorm::L1, PNorm::L2] {
            check("supervised", d.clone(), 1e-4, |g, x| {
                losses::supervised(g, x, &target, p).unwrap()
            });
        }
    }
}

#[test]
fn smoothness_loss_gradient() {
    for seed in 0..3 {
        let mut r = rng(30 + seed);
        let img = random_image(H, W, &mut r);
        let weights = EdgeWeights::new(&[&img]).unwrap();
        let d = kink_free_depths(&mut r);
        check("smoothness", d, 1e-4, |g, x| {
            losses::smoothness(g, x, &weights).unwrap()
        });
    }
}

#[test]
fn fused_gradient_is_scaled_by_one_minus_lambda() {
    let mut r = rng(40);
    let gt = semi_dense_gt(&mut r);
    let target = Target::new(&[&gt]).unwrap();
    let zhat = Tensor::from_vec(
        shape(),
        (0..H * W).map(|_| r.random_range(1.0..40.0)).collect(),
    );
    let lam = Tensor::from_vec(
        shape(),
        (0..H * W).map(|_| r.random_range(0.0..1.0)).collect(),
    );
    let dhat0 = Tensor::from_vec(
        shape(),
        (0..H * W).map(|_| r.random_range(1.0..40.0)).collect(),
    );

    let mut g = Graph::new();
    let dhat = g.leaf(dhat0.clone());
    let d = fuse_residual_graph(&mut g, &zhat, dhat, &lam);
    let d_value = g.value(d).clone();
    let loss = losses::supervised(&mut g, d, &target, PNorm::L2).unwrap();
    let by_dhat = g.backward(loss).take(dhat).unwrap();

    let mut g = Graph::new();
    let d = g.leaf(d_value);
    let loss = losses::supervised(&mut g, d, &target, PNorm::L2).unwrap();
    let by_d = g.backward(loss).take(d).unwrap();

    for i in 0..H * W {
        let expected = (1.0 - lam.data()[i]) * by_d.data()[i];
        assert!(
            (by_dhat.data()[i] - expected).abs() <= 1e-15 * expected.abs().max(1.0),
            "pixel {i}"
        );
    }
    // and the same against finite differences of the fused objective
    check("fused supervised", dhat0.data().to_vec(), 1e-4, |g, x| {
        let d = fuse_residual_graph(g, &zhat, x, &lam);
        losses::supervised(g, d, &target, PNorm::L2).unwrap()
    });
}

#[test]
fn end_to_end_url_objective_matches_finite_differences() {
    let mut r = rng(50);
    let spade = SpadeModel::new(
        SpadeArch {
            levels: 2,
            base_channels: 4,
            ..Default::default()
        },
        5,
    )
    .unwrap();
    let mut bb = ReferenceBackbone::new(
        BackboneArch {
            levels: 2,
            base_channels: 4,
            ..Default::default()
        },
        InputMode::Packed,
        6,
    )
    .unwrap();
    // move away from the zero-initialized head so every layer receives gradient
    for id in bb.params().ids().collect::<Vec<_>>() {
        let p = &mut bb.params_mut().get_mut(id).tensor;
        for v in p.data_mut() {
            *v = r.random_range(-0.15..0.15);
        }
    }
    let batch = vec![random_sample(H, W, &mut r), random_sample(H, W, &mut r)];
    let cfg = UrlConfig {
        loss: LossConfig {
            p_norm: PNorm::L1,
            w_sup: 1.0,
            w_sm: 0.1,
        },
        ..Default::default()
    };

    let objective = |bb: &ReferenceBackbone| {
        let mut g = Graph::new();
        let p = bb.params().bind(&mut g, |_| false);
        let (loss, _) = url_loss(&mut g, &p, &batch, &spade, bb, &cfg).unwrap();
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let p = bb.params().bind(&mut g, |_| true);
    let (loss, _) = url_loss(&mut g, &p, &batch, &spade, &bb, &cfg).unwrap();
    let grads = g.backward(loss);

    let ids: Vec<_> = bb.params().ids().collect();
    let mut probes = 0;
    while probes < 10 {
        let id = ids[r.random_range(0..ids.len())];
        let n = bb.params().get(id).tensor.data().len();
        let k = r.random_range(0..n);
        let analytic = grads.get(p.var(id)).unwrap().data()[k];
        let x0 = bb.params().get(id).tensor.data()[k];
        let mut probe = bb.clone();
        probe.params_mut().get_mut(id).tensor.data_mut()[k] = x0 + EPS;
        let up = objective(&probe);
        probe.params_mut().get_mut(id).tensor.data_mut()[k] = x0 - EPS;
        let down = objective(&probe);
        let numeric = (up - down) / (2.0 * EPS);
        if analytic.abs().max(numeric.abs()) < 1e-9 {
            continue;
        }
        let e = rel_err(analytic, numeric);
        assert!(
            e < 1e-3,
            "{}[{k}]: analytic {analytic:e} numeric {numeric:e} rel {e:e}",
            bb.params().get(id).name
        );
        probes += 1;
    }
}

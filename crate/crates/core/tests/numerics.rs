use contextvit::numerics::{
    finite_diff_check, randn_seeded, Activation, GradCheckOptions, Graph, Tensor, Var,
};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    // Random weights make every output coordinate matter to the loss.
    let w = randn_seeded(g.value(x).shape(), seed ^ 0xabcd, 1.0).unwrap();
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

fn check(params: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> contextvit::Result<Var>) -> f64 {
    finite_diff_check(params, &GradCheckOptions::default(), f)
        .unwrap()
        .max_rel_error
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::eye(2));
    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);

    let bad = g.constant(t(&[3, 1], &[1.0, 1.0, 1.0]));
    assert!(g.matmul(a, bad).is_err());
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = randn_seeded(&[3, 4], 1, 1.0).unwrap();
    let b = randn_seeded(&[4, 2], 2, 1.0).unwrap();
    let err = check(&[a, b], |g, v| {
        let c = g.matmul(v[0], v[1])?;
        g.sum(c)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[0.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let x = g.constant(t(&[2], &[0.0, 2f64.ln()]));
    let s = g.softmax(x, 0).unwrap();
    let d = g.value(s).data();
    assert!((d[0] - 1.0 / 3.0).abs() < 1e-15 && (d[1] - 2.0 / 3.0).abs() < 1e-15);

    let x = g.constant(t(&[2], &[1000.0, 1000.0]));
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let x = g.constant(t(&[2], &[f64::NAN, 0.0]));
    assert!(g.softmax(x, 0).is_err());
    let x = g.constant(t(&[2], &[0.0, 0.0]));
    assert!(g.softmax(x, 1).is_err());
}

#[test]
fn softmax_along_leading_axis() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 3.0]));
    let s = g.softmax(x, 0).unwrap();
    let d = g.value(s).data();
    assert_eq!(d[0], 0.5);
    assert_eq!(d[2], 0.5);
    assert!((d[1] + d[3] - 1.0).abs() < 1e-15);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::full(&[2], 1.0));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[1, 2], &[3.0, 3.0]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);

    let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-11 && (d[1] + 1.0).abs() < 1e-11);

    assert!(g.layer_norm(x, gain, bias, 0.0).is_err());
    let wide = g.constant(Tensor::full(&[3], 1.0));
    assert!(g.layer_norm(x, wide, bias, 1e-5).is_err());
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let x = randn_seeded(&[3, 5], 4, 1.0).unwrap();
    let gain = randn_seeded(&[5], 5, 1.0).unwrap();
    let bias = randn_seeded(&[5], 6, 1.0).unwrap();
    let err = check(&[x, gain, bias], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        Ok(weighted_sum(g, y, 9))
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = g.constant(t(&[1], &[0.0]));
    let ge = g.gelu(z).unwrap();
    assert_eq!(g.value(ge).data(), &[0.0]);
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    let x = randn_seeded(&[4, 3], 12, 2.0).unwrap();
    let err = check(&[x], |g, v| {
        let y = g.gelu(v[0])?;
        Ok(weighted_sum(g, y, 1))
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn mean_axes_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let all = g.mean_axes(x, &[0, 1]).unwrap();
    assert_eq!(g.value(all).data(), &[2.5]);
    let rows = g.mean_axes(x, &[0]).unwrap();
    assert_eq!(g.value(rows).data(), &[2.0, 3.0]);
    let grads = g.backward(all).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);

    assert!(g.mean_axes(x, &[0, 0]).is_err());
    assert!(g.mean_axes(x, &[2]).is_err());
    let mut g = Graph::new();
    let empty = g.constant(Tensor::new(vec![0, 3], vec![]).unwrap());
    assert!(g.mean_axes(empty, &[0]).is_err());
}

#[test]
fn stop_gradient_examples() {
    let x0 = randn_seeded(&[3], 3, 1.0).unwrap();

    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let d = g.stop_gradient(x).unwrap();
    assert_eq!(g.value(d), &x0);
    let loss = g.sum(d).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0; 3]);

    let mut g = Graph::new();
    let x = g.param(x0);
    let d = g.stop_gradient(x).unwrap();
    let s = g.add(x, d).unwrap();
    let loss = g.sum(s).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 3]);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let loss = g.sum(x).unwrap();
    assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[1.0; 3]);

    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[2.0, 4.0]);
    assert!(g.backward(sq).is_err());
}

#[test]
fn two_layer_composite_matches_finite_differences() {
    let params = vec![
        randn_seeded(&[4, 3], 21, 1.0).unwrap(),
        randn_seeded(&[3, 6], 22, 0.5).unwrap(),
        randn_seeded(&[6], 23, 0.1).unwrap(),
        randn_seeded(&[6, 2], 24, 0.5).unwrap(),
        randn_seeded(&[2], 25, 0.1).unwrap(),
    ];
    let err = check(&params, |g, v| {
        let h = g.linear(v[0], v[1], Some(v[2]))?;
        let h = g.gelu(h)?;
        let o = g.linear(h, v[3], Some(v[4]))?;
        g.cross_entropy(o, &[0, 1, 1, 0])
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let l = g.param(Tensor::zeros(&[5]));
    let ce = g.cross_entropy(l, &[2]).unwrap();
    assert!((g.value(ce).data()[0] - 5f64.ln()).abs() < 1e-15);

    let l2 = g.param(t(&[2], &[10.0, -10.0]));
    let ce2 = g.cross_entropy(l2, &[0]).unwrap();
    // log(1 + e^-20)
    let expected = (-20f64).exp().ln_1p();
    let got = g.value(ce2).data()[0];
    assert!((got - expected).abs() / expected < 1e-6, "{got} vs {expected}");

    let grads = g.backward(ce).unwrap();
    let gl = grads.get(l).unwrap();
    for (j, v) in gl.data().iter().enumerate() {
        let want = 0.2 - if j == 2 { 1.0 } else { 0.0 };
        assert!((v - want).abs() < 1e-15);
    }
    assert!(g.cross_entropy(l, &[5]).is_err());
}

#[test]
fn finite_diff_check_examples() {
    let x = randn_seeded(&[6], 31, 1.0).unwrap();
    let linear = finite_diff_check(std::slice::from_ref(&x), &GradCheckOptions::default(), |g, v| {
        Ok(weighted_sum(g, v[0], 3))
    })
    .unwrap();
    assert!(linear.max_rel_error <= 1e-10, "{}", linear.max_rel_error);

    let quad = finite_diff_check(std::slice::from_ref(&x), &GradCheckOptions::default(), |g, v| {
        let sq = g.mul(v[0], v[0])?;
        Ok(weighted_sum(g, sq, 4))
    })
    .unwrap();
    assert!(quad.max_rel_error <= 1e-6, "{}", quad.max_rel_error);

    let bad = GradCheckOptions {
        step: 0.0,
        ..GradCheckOptions::default()
    };
    assert!(finite_diff_check(&[x], &bad, |g, v| g.sum(v[0])).is_err());
}

#[test]
fn finite_diff_check_only_sees_the_differentiable_subgraph() {
    // f(x) = sum(x * detach(x)): the analytic gradient is detach(x) only.
    let x = randn_seeded(&[4], 41, 1.0).unwrap();
    let f = |g: &mut Graph, v: &[Var]| {
        let d = g.stop_gradient(v[0])?;
        let p = g.mul(v[0], d)?;
        g.sum(p)
    };
    let frozen = finite_diff_check(std::slice::from_ref(&x), &GradCheckOptions::default(), f).unwrap();
    assert!(frozen.max_rel_error < 1e-9, "{}", frozen.max_rel_error);

    let raw = GradCheckOptions {
        freeze_detached: false,
        ..GradCheckOptions::default()
    };
    // Through the detached path the directional difference is 2x, not x.
    let unfrozen = finite_diff_check(std::slice::from_ref(&x), &raw, f).unwrap();
    assert!(unfrozen.max_rel_error > 0.4);

    // Pure detach: analytic gradient 0, raw differences nonzero.
    let g_only = |g: &mut Graph, v: &[Var]| {
        let d = g.stop_gradient(v[0])?;
        let sq = g.mul(d, d)?;
        g.sum(sq)
    };
    let r = finite_diff_check(std::slice::from_ref(&x), &raw, g_only).unwrap();
    let worst = r.worst.unwrap();
    assert_eq!(worst.analytic, 0.0);
    assert!(worst.numeric.abs() > 1e-3);
    let r = finite_diff_check(&[x], &GradCheckOptions::default(), g_only).unwrap();
    assert_eq!(r.max_rel_error, 0.0);
}

#[test]
fn detached_edge_contributes_exactly_zero() {
    // Same graph with the detached edge replaced by a constant of equal
    // value must give identical gradients, bit for bit.
    let x0 = randn_seeded(&[3, 4], 51, 1.0).unwrap();
    let w0 = randn_seeded(&[4, 4], 52, 1.0).unwrap();
    let run = |use_detach: bool| {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let w = g.param(w0.clone());
        let h = g.matmul(x, w).unwrap();
        let m = g.mean_axes(h, &[0]).unwrap();
        let side = if use_detach {
            g.stop_gradient(m).unwrap()
        } else {
            let v = g.value(m).clone();
            g.constant(v)
        };
        let s = g.add_row(h, side).unwrap();
        let a = g.gelu(s).unwrap();
        let loss = g.sum(a).unwrap();
        let grads = g.backward(loss).unwrap();
        (grads.get(x).unwrap(), grads.get(w).unwrap())
    };
    let (gx1, gw1) = run(true);
    let (gx2, gw2) = run(false);
    assert_eq!(gx1, gx2);
    assert_eq!(gw1, gw2);
}

#[test]
fn gather_concat_and_attention_gradients() {
    let x = randn_seeded(&[4, 3], 61, 1.0).unwrap();
    let y = randn_seeded(&[2, 3], 62, 1.0).unwrap();
    let err = check(&[x, y], |g, v| {
        let c = g.concat_rows(&[v[0], v[1]])?;
        let r = g.gather_rows(c, &[5, 0, 0, 3, 4])?;
        Ok(weighted_sum(g, r, 7))
    });
    assert!(err < 1e-8, "{err}");

    // Two tokens, two heads.
    let qkv = randn_seeded(&[2, 12], 63, 1.0).unwrap();
    let err = check(&[qkv], |g, v| {
        let o = g.attention(v[0], 1, 2, 2)?;
        Ok(weighted_sum(g, o, 8))
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn attention_over_one_token_has_unit_weight() {
    let mut g = Graph::new();
    let qkv = g.constant(randn_seeded(&[1, 6], 3, 5.0).unwrap());
    let o = g.attention(qkv, 1, 1, 1).unwrap();
    assert_eq!(g.attention_weights(o).unwrap(), &[1.0]);
    // Output equals v.
    assert_eq!(g.value(o).data(), &g.value(qkv).data()[4..6]);
}

#[test]
fn reproducible_forward_and_backward() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(randn_seeded(&[5, 4], 71, 1.0).unwrap());
        let w = g.param(randn_seeded(&[4, 12], 72, 1.0).unwrap());
        let qkv = g.matmul(x, w).unwrap();
        let o = g.attention(qkv, 1, 5, 2).unwrap();
        let loss = g.sum(o).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(o).clone(), grads.get(w).unwrap())
    };
    assert_eq!(run(), run());
}

fn small_shape() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=8, 1usize..=8)
}

fn away_from_zero(t: Tensor) -> Tensor {
    let data = t
        .data()
        .iter()
        .map(|v| v.signum() * (0.05 + v.abs()))
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn every_op_passes_the_gradient_oracle((m, n) in small_shape(), k in 1usize..=8, seed in 0u64..1_000_000) {
        let tol = 1e-4;
        let a = randn_seeded(&[m, k], seed, 1.0).unwrap();
        let b = randn_seeded(&[k, n], seed + 1, 1.0).unwrap();
        let bias = randn_seeded(&[n], seed + 2, 1.0).unwrap();
        let x = randn_seeded(&[m, n], seed + 3, 1.0).unwrap();

        let e = check(&[a.clone(), b.clone(), bias.clone()], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            Ok(weighted_sum(g, y, seed))
        });
        prop_assert!(e < tol, "linear {}", e);

        let e = check(&[a, b], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            Ok(weighted_sum(g, y, seed))
        });
        prop_assert!(e < tol, "matmul {}", e);

        for axis in 0..2 {
            let e = check(std::slice::from_ref(&x), |g, v| {
                let y = g.softmax(v[0], axis)?;
                Ok(weighted_sum(g, y, seed))
            });
            prop_assert!(e < tol, "softmax {}", e);
        }

        if n > 1 {
            let gain = randn_seeded(&[n], seed + 4, 1.0).unwrap();
            let e = check(&[x.clone(), gain, bias.clone()], |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                Ok(weighted_sum(g, y, seed))
            });
            prop_assert!(e < tol, "layer_norm {}", e);
        }

        for kind in [Activation::Gelu, Activation::Relu] {
            let e = check(&[away_from_zero(x.clone())], |g, v| {
                let y = g.activation(v[0], kind)?;
                Ok(weighted_sum(g, y, seed))
            });
            prop_assert!(e < tol, "{:?} {}", kind, e);
        }

        for axes in [vec![0], vec![1], vec![0, 1]] {
            let e = check(std::slice::from_ref(&x), |g, v| {
                let y = g.mean_axes(v[0], &axes)?;
                Ok(weighted_sum(g, y, seed))
            });
            prop_assert!(e < tol, "mean {:?} {}", axes, e);
        }

        let e = check(&[x.clone(), bias.clone()], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            let y = g.mul(y, v[0])?;
            let y = g.scale(y, 0.7)?;
            Ok(weighted_sum(g, y, seed))
        });
        prop_assert!(e < tol, "add_row/mul/scale {}", e);

        let labels: Vec<usize> = (0..m).map(|i| (i * 7 + seed as usize) % n).collect();
        let e = check(std::slice::from_ref(&x), |g, v| g.cross_entropy(v[0], &labels));
        prop_assert!(e < tol, "cross_entropy {}", e);

        let heads = if n % 2 == 0 { 2 } else { 1 };
        let qkv = randn_seeded(&[m, 3 * n], seed + 5, 1.0).unwrap();
        let e = check(&[qkv], |g, v| {
            let y = g.attention(v[0], 1, m, heads)?;
            Ok(weighted_sum(g, y, seed))
        });
        prop_assert!(e < tol, "attention {}", e);
    }

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let n = data.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, n], data).unwrap());
        let s = g.softmax(x, 1).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(g.value(s).data().iter().all(|&p| p >= 0.0));
    }
}

use flowpose_tensor::gradcheck::GradCheck;
use flowpose_tensor::{Graph, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn assert_grads(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let report = GradCheck::default().run(inputs, f);
    assert!(report.passed(), "gradient check failed: {report:?}");
}

/// Weighted sum so every output entry gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, y: Var) -> Var {
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i as f64) * 0.37).sin() + 0.3);
    let w = g.constant(w);
    let p = g.mul(y, w);
    g.sum(p)
}

#[test]
fn elementwise_and_broadcast_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[3, 1]);
    let c = rand_tensor(&mut rng, &[4]).map(|x| x.abs() + 0.5);
    assert_grads(&[a, b, c], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[2]);
        let m = g.mul(d, v[1]);
        let q = g.div(m, v[2]);
        weighted_sum(g, q)
    });
}

#[test]
fn unary_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[5, 3]).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    assert_grads(&[x.clone()], |g, v| {
        let a = g.tanh(v[0]);
        let b = g.sigmoid(v[0]);
        let c = g.softplus(v[0]);
        let d = g.relu(v[0]);
        let e = g.exp(v[0]);
        let f = g.square(v[0]);
        let n = g.neg(v[0]);
        let s1 = g.add(a, b);
        let s2 = g.add(c, d);
        let s3 = g.add(e, f);
        let s4 = g.add(s1, s2);
        let s5 = g.add(s3, n);
        let s = g.add(s4, s5);
        let s = g.scale(s, 0.7);
        let s = g.add_scalar(s, 2.0);
        weighted_sum(g, s)
    });
    let pos = x.map(|v| v.abs() + 0.2);
    assert_grads(&[pos], |g, v| {
        let r = g.sqrt(v[0]);
        weighted_sum(g, r)
    });
}

#[test]
fn matmul_gradients_cover_transposes_and_batching() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        // batched x batched
        let a = rand_tensor(&mut rng, if ta { &[3, 4, 2] } else { &[3, 2, 4] });
        let b = rand_tensor(&mut rng, if tb { &[3, 5, 4] } else { &[3, 4, 5] });
        assert_grads(&[a, b], |g, v| {
            let c = g.matmul_t(v[0], v[1], ta, tb);
            weighted_sum(g, c)
        });
        // batched x shared
        let a = rand_tensor(&mut rng, if ta { &[2, 3, 4, 2] } else { &[2, 3, 2, 4] });
        let b = rand_tensor(&mut rng, if tb { &[5, 4] } else { &[4, 5] });
        assert_grads(&[a, b], |g, v| {
            let c = g.matmul_t(v[0], v[1], ta, tb);
            weighted_sum(g, c)
        });
        // shared x batched
        let a = rand_tensor(&mut rng, if ta { &[4, 2] } else { &[2, 4] });
        let b = rand_tensor(&mut rng, if tb { &[3, 5, 4] } else { &[3, 4, 5] });
        assert_grads(&[a, b], |g, v| {
            let c = g.matmul_t(v[0], v[1], ta, tb);
            weighted_sum(g, c)
        });
    }
}

#[test]
fn matmul_matches_naive_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[4, 5]);
    let mut g = Graph::inference();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb);
    let c = g.value(c);
    assert_eq!(c.shape(), &[2, 3, 5]);
    for bt in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.get(&[bt, i, k]) * b.get(&[k, j])).sum();
                assert!((c.get(&[bt, i, j]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn shape_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let y = rand_tensor(&mut rng, &[2, 2, 4]);
    assert_grads(&[x, y], |g, v| {
        let p = g.permute(v[0], &[2, 0, 1]);
        let p = g.reshape(p, &[4, 6]);
        let t = g.transpose(p);
        let n = g.narrow(v[0], 1, 1, 2);
        let c = g.concat(&[n, v[1], v[0]], 1);
        let s = g.sum_axis(c, 1);
        let m = g.mean_axis(v[0], 2);
        let a = weighted_sum(g, t);
        let b = weighted_sum(g, s);
        let d = weighted_sum(g, m);
        let ab = g.add(a, b);
        g.add(ab, d)
    });
}

#[test]
fn permute_moves_entries() {
    let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let p = g.permute(v, &[1, 2, 0]);
    let p = g.value(p);
    assert_eq!(p.shape(), &[3, 4, 2]);
    for i in 0..2 {
        for j in 0..3 {
            for k in 0..4 {
                assert_eq!(p.get(&[j, k, i]), x.get(&[i, j, k]));
            }
        }
    }
}

#[test]
fn softmax_and_layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let gamma = rand_tensor(&mut rng, &[5]);
    let beta = rand_tensor(&mut rng, &[5]);
    assert_grads(&[x.clone()], |g, v| {
        let s = g.softmax(v[0]);
        weighted_sum(g, s)
    });
    assert_grads(&[x, gamma, beta], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
        weighted_sum(g, y)
    });
}

#[test]
fn softmax_rows_are_stochastic_and_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[4, 6]).map(|v| 20.0 * v);
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let s = g.softmax(v);
    let shifted = g.add_scalar(v, 123.0);
    let s2 = g.softmax(shifted);
    for row in g.value(s).data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
    assert!(g.value(s).max_abs_diff(g.value(s2)) < 1e-12);
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, o) = (w.shape()[0], w.shape()[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, oh, ow, o]);
    for bi in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..o {
                    let mut acc = b.get(&[oc]);
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ic in 0..c {
                                acc += x.get(&[bi, iy as usize, ix as usize, ic]) * w.get(&[ky, kx, ic, oc]);
                            }
                        }
                    }
                    out.set(&[bi, oy, ox, oc], acc);
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_convolution_and_has_correct_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[2, 7, 6, 3]);
    let w = rand_tensor(&mut rng, &[3, 3, 3, 4]);
    let b = rand_tensor(&mut rng, &[4]);
    let mut g = Graph::inference();
    let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(vx, vw, vb, 2, 1);
    let want = naive_conv(&x, &w, &b, 2, 1);
    assert_eq!(g.value(y).shape(), want.shape());
    assert!(g.value(y).max_abs_diff(&want) < 1e-12);

    assert_grads(&[x, w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2, 1);
        weighted_sum(g, y)
    });
}

#[test]
fn bilinear_sample_and_cross_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let field = rand_tensor(&mut rng, &[2, 6, 7, 2]);
    // interior, non-integer positions
    let pts = Tensor::from_fn(&[2, 3, 2], |i| 0.5 + (i as f64 * 0.731) % 4.9 + 0.13);
    let f2 = field.clone();
    assert_grads(&[pts], move |g, v| {
        let s = g.bilinear_sample(&f2, v[0]);
        weighted_sum(g, s)
    });
    let a = rand_tensor(&mut rng, &[4, 3]);
    let b = rand_tensor(&mut rng, &[4, 3]);
    assert_grads(&[a, b], |g, v| {
        let c = g.cross(v[0], v[1]);
        weighted_sum(g, c)
    });
}

#[test]
fn bilinear_sample_is_exact_on_linear_fields() {
    // f(x, y) = 2x - 3y + 1 is reproduced exactly by bilinear interpolation.
    let (h, w) = (5, 6);
    let field = Tensor::from_fn(&[1, h, w, 1], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        2.0 * x - 3.0 * y + 1.0
    });
    let mut g = Graph::inference();
    let p = g.constant(Tensor::from_vec(&[1, 2, 2], vec![1.25, 2.5, 4.75, 0.1]));
    let s = g.bilinear_sample(&field, p);
    let s = g.value(s).data().to_vec();
    assert!((s[0] - (2.0 * 1.25 - 3.0 * 2.5 + 1.0)).abs() < 1e-12);
    assert!((s[1] - (2.0 * 4.75 - 3.0 * 0.1 + 1.0)).abs() < 1e-12);
    // clamped to the border outside the image
    let p = g.constant(Tensor::from_vec(&[1, 1, 2], vec![-3.0, 10.0]));
    let s = g.bilinear_sample(&field, p);
    assert!((g.value(s).item() - (0.0 - 3.0 * 4.0 + 1.0)).abs() < 1e-12);
}

#[test]
fn shared_subexpressions_accumulate_gradients() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(&[1], vec![3.0]));
    let y = g.mul(x, x);
    let z = g.add(y, x);
    let s = g.sum(z);
    let grads = g.backward(s);
    assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
}

#[test]
fn bound_parameters_report_gradients_by_name() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::from_vec(&[2], vec![1.0, 2.0]));
    store.insert("frozen", Tensor::from_vec(&[2], vec![5.0, 5.0]));
    let mut g = Graph::new();
    let w = g.bind(&store, "w", true);
    let w2 = g.bind(&store, "w", true);
    assert_eq!(w, w2);
    let f = g.bind(&store, "frozen", false);
    let p = g.mul(w, f);
    let s = g.sum(p);
    let grads = g.backward(s);
    let named = grads.params();
    assert_eq!(named.len(), 1);
    assert_eq!(named["w"].data(), &[5.0, 5.0]);
}

proptest! {
    #[test]
    fn broadcast_add_grad_sums_over_broadcast_axes(rows in 1usize..5, cols in 1usize..5) {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[rows, cols]));
        let b = g.input(Tensor::zeros(&[cols]));
        let y = g.add(x, b);
        let s = g.sum(y);
        let grads = g.backward(s);
        prop_assert!(grads.get(b).unwrap().data().iter().all(|&v| v == rows as f64));
        prop_assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_then_narrow_is_identity(a in 1usize..4, b in 1usize..4, inner in 1usize..4) {
        let x = Tensor::from_fn(&[2, a, inner], |i| i as f64);
        let y = Tensor::from_fn(&[2, b, inner], |i| -(i as f64));
        let mut g = Graph::inference();
        let (vx, vy) = (g.constant(x.clone()), g.constant(y.clone()));
        let c = g.concat(&[vx, vy], 1);
        let back_x = g.narrow(c, 1, 0, a);
        let back_y = g.narrow(c, 1, a, b);
        prop_assert_eq!(g.value(back_x), &x);
        prop_assert_eq!(g.value(back_y), &y);
    }
}

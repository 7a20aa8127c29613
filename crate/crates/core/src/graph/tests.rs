use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::grad_check;
use crate::params::ParamStore;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn m(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_identity_and_scalar() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random(&mut rng, &[3, 4]);
    let mut g = Graph::new();
    let i3 = g.constant(Tensor::eye(3)).unwrap();
    let bv = g.constant(b.clone()).unwrap();
    let out = g.matmul(i3, bv).unwrap();
    assert_eq!(g.value(out).unwrap(), &b);

    let a = g.constant(m(&[&[2.0]])).unwrap();
    let b = g.constant(m(&[&[3.0]])).unwrap();
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).unwrap().data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let mut oracle = [[0.0f64; 2]; 3];
    for (i, row) in oracle.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            for p in 0..4 {
                *cell += a.get2(i, p) * b.get2(p, j);
            }
        }
    }
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a).unwrap(), g.constant(b).unwrap());
    let out = g.matmul(av, bv).unwrap();
    let t = g.value(out).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            assert_abs_diff_eq!(t.get2(i, j), oracle[i][j], epsilon = 1e-6);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn softmax_uniform_shift_and_reference() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::<f64>::zeros(&[1, 4])).unwrap();
    let s = g.softmax_rows(z).unwrap();
    for &v in g.value(s).unwrap().data() {
        assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
    }

    let x = m(&[&[1.0, 2.0, 3.0]]);
    let shifted = x.map(|v| v + 17.5);
    let (xv, sv) = (g.constant(x).unwrap(), g.constant(shifted).unwrap());
    let (a, b) = (g.softmax_rows(xv).unwrap(), g.softmax_rows(sv).unwrap());
    let (ta, tb) = (g.value(a).unwrap().clone(), g.value(b).unwrap().clone());
    let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (k, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert_abs_diff_eq!(ta.data()[k], v.exp() / denom, epsilon = 1e-12);
        assert_abs_diff_eq!(ta.data()[k], tb.data()[k], epsilon = 1e-12);
    }
}

#[test]
fn activations_reference_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2], vec![0.0f64, 1.0]).unwrap()).unwrap();
    let s = g.silu(x).unwrap();
    let sg = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).unwrap().data()[0], 0.0);
    assert_eq!(g.value(sg).unwrap().data()[0], 0.5);
    assert_abs_diff_eq!(g.value(s).unwrap().data()[1], 1.0 / (1.0 + (-1.0f64).exp()), epsilon = 1e-15);

    let mut g32 = Graph::<f32>::new();
    let x = g32.constant(Tensor::scalar(1.0f32)).unwrap();
    let s = g32.silu(x).unwrap();
    let reference = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((g32.value(s).unwrap().data()[0] as f64 - reference).abs() < 1e-6);
}

#[test]
fn layer_norm_constant_and_two_pass_oracle() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::ones(&[3])).unwrap();
    let beta = g.constant(Tensor::zeros(&[3])).unwrap();
    let x = g.constant(Tensor::full(&[2, 3], 4.2f64)).unwrap();
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert!(g.value(y).unwrap().data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xt = random(&mut rng, &[2, 3]);
    let x = g.constant(xt.clone()).unwrap();
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    let yt = g.value(y).unwrap();
    for r in 0..2 {
        let row = xt.row(r);
        let mean = row.iter().sum::<f64>() / 3.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        for j in 0..3 {
            assert_abs_diff_eq!(yt.get2(r, j), (row[j] - mean) / (var + 1e-5).sqrt(), epsilon = 1e-6);
        }
        let out = yt.row(r);
        let m2 = out.iter().sum::<f64>() / 3.0;
        let v2 = out.iter().map(|v| (v - m2).powi(2)).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(m2, 0.0, epsilon = 1e-4);
        assert_abs_diff_eq!(v2, 1.0, epsilon = 1e-4);
    }
}

#[test]
fn conv1d_delta_zero_and_sliding_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xt = random(&mut rng, &[5, 2]);
    let mut g = Graph::new();
    let x = g.constant(xt.clone()).unwrap();

    let delta = g.constant(m(&[&[0.0, 0.0], &[1.0, 1.0], &[0.0, 0.0]])).unwrap();
    let zb = g.constant(Tensor::zeros(&[2])).unwrap();
    let y = g.conv1d_same(x, delta, zb).unwrap();
    assert_eq!(g.value(y).unwrap(), &xt);

    let zk = g.constant(Tensor::zeros(&[3, 2])).unwrap();
    let b = g.constant(Tensor::new(&[2], vec![0.5, -2.0]).unwrap()).unwrap();
    let y = g.conv1d_same(x, zk, b).unwrap();
    for r in 0..5 {
        assert_eq!(g.value(y).unwrap().row(r), &[0.5, -2.0]);
    }

    let kt = random(&mut rng, &[3, 2]);
    let bt = random(&mut rng, &[2]);
    let (k, b) = (g.constant(kt.clone()).unwrap(), g.constant(bt.clone()).unwrap());
    let y = g.conv1d_same(x, k, b).unwrap();
    let yt = g.value(y).unwrap();
    assert_eq!(yt.shape(), &[5, 2]);
    for t in 0..5i64 {
        for ch in 0..2 {
            let mut acc = bt.data()[ch];
            for (o, off) in (-1i64..=1).enumerate() {
                let src = t + off;
                if (0..5).contains(&src) {
                    acc += kt.get2(o, ch) * xt.get2(src as usize, ch);
                }
            }
            assert_abs_diff_eq!(yt.get2(t as usize, ch), acc, epsilon = 1e-6);
        }
    }

    let even = g.constant(Tensor::zeros(&[2, 2])).unwrap();
    assert!(matches!(g.conv1d_same(x, even, zb), Err(Error::Config(_))));
}

#[test]
fn linear_zero_identity_and_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xt = random(&mut rng, &[4, 3]);
    let mut g = Graph::new();
    let x = g.constant(xt.clone()).unwrap();

    let w0 = g.constant(Tensor::zeros(&[3, 2])).unwrap();
    let b = g.constant(Tensor::new(&[2], vec![1.5, -0.5]).unwrap()).unwrap();
    let y = g.linear(x, w0, b).unwrap();
    for r in 0..4 {
        assert_eq!(g.value(y).unwrap().row(r), &[1.5, -0.5]);
    }

    let eye = g.constant(Tensor::eye(3)).unwrap();
    let zb = g.constant(Tensor::zeros(&[3])).unwrap();
    let y = g.linear(x, eye, zb).unwrap();
    assert_eq!(g.value(y).unwrap(), &xt);

    let wt = random(&mut rng, &[3, 2]);
    let w = g.constant(wt.clone()).unwrap();
    let y = g.linear(x, w, b).unwrap();
    let mmv = g.matmul(x, w).unwrap();
    let ones = g.constant(Tensor::ones(&[4, 1])).unwrap();
    let br = g.reshape(b, &[1, 2]).unwrap();
    let bias = g.matmul(ones, br).unwrap();
    let oracle = g.add(mmv, bias).unwrap();
    for (a, o) in g.value(y).unwrap().data().iter().zip(g.value(oracle).unwrap().data()) {
        assert_abs_diff_eq!(a, o, epsilon = 1e-12);
    }

    let x3 = g.constant(random(&mut rng, &[2, 2, 3])).unwrap();
    let y3 = g.linear(x3, w, b).unwrap();
    assert_eq!(g.shape(y3).unwrap(), &[2, 2, 2]);
}

#[test]
fn backward_polynomial_and_disconnected() {
    let mut store = ParamStore::new();
    let x = store.insert("x", Tensor::scalar(3.0f64)).unwrap();
    let unused = store.insert("unused", Tensor::scalar(1.0f64)).unwrap();
    let mut g = Graph::with_params(&store);
    let xv = g.param(x).unwrap();
    let _ = g.param(unused).unwrap();
    let loss = g.square(xv).unwrap();
    let grads = g.backward(loss).unwrap().params(&store);
    assert_eq!(grads.get(x).data(), &[6.0]);
    assert_eq!(grads.get(unused).data(), &[0.0]);
}

#[test]
fn repeated_use_accumulates() {
    let mut store = ParamStore::new();
    let x = store.insert("x", Tensor::scalar(2.0f64)).unwrap();
    let mut g = Graph::with_params(&store);
    let a = g.param(x).unwrap();
    let b = g.param(x).unwrap();
    let p = g.mul(a, b).unwrap();
    let loss = g.add(p, a).unwrap();
    let grads = g.backward(loss).unwrap().params(&store);
    assert_eq!(grads.get(x).data(), &[5.0]);
}

#[test]
fn silu_linear_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let w = store.insert("w", random(&mut rng, &[3, 4])).unwrap();
    let b = store.insert("b", random(&mut rng, &[4])).unwrap();
    let xt = random(&mut rng, &[5, 3]);
    let report = grad_check(&store, 1e-5, |g| {
        let x = g.constant(xt.clone())?;
        let (wv, bv) = (g.param(w)?, g.param(b)?);
        let y = g.linear(x, wv, bv)?;
        let s = g.silu(y)?;
        g.sum(s)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");

    let lin = grad_check(&store, 1e-5, |g| {
        let x = g.constant(xt.clone())?;
        let (wv, bv) = (g.param(w)?, g.param(b)?);
        let y = g.linear(x, wv, bv)?;
        g.sum(y)
    })
    .unwrap();
    assert!(lin.max_rel_error < 1e-7, "{lin:?}");
}

#[test]
fn every_op_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let a = store.insert("a", random(&mut rng, &[4, 3])).unwrap();
    let b = store.insert("b", random(&mut rng, &[3, 4])).unwrap();
    let gamma = store.insert("gamma", random(&mut rng, &[3])).unwrap();
    let beta = store.insert("beta", random(&mut rng, &[3])).unwrap();
    let k = store.insert("k", random(&mut rng, &[3, 3])).unwrap();
    let cb = store.insert("cb", random(&mut rng, &[3])).unwrap();
    let s = store.insert("s", random(&mut rng, &[1])).unwrap();
    let decay = store.insert("decay", random(&mut rng, &[3]).map(|v| 0.5 * v)).unwrap();
    let sb = store.insert("sb", random(&mut rng, &[3])).unwrap();
    let sc = store.insert("sc", random(&mut rng, &[3])).unwrap();
    let sd = store.insert("sd", random(&mut rng, &[3])).unwrap();
    let target = random(&mut rng, &[4, 6]);

    let report = grad_check(&store, 1e-5, |g| {
        let av = g.param(a)?;
        let bv = g.param(b)?;
        let ln = {
            let (gm, bt) = (g.param(gamma)?, g.param(beta)?);
            g.layer_norm(av, gm, bt, 1e-5)?
        };
        let conv = {
            let (kv, cbv) = (g.param(k)?, g.param(cb)?);
            g.conv1d_same(ln, kv, cbv)?
        };
        let sig = g.sigmoid(conv)?;
        let gated = g.mul(sig, av)?;
        let scores = g.matmul(gated, bv)?;
        let att = g.softmax_rows(scores)?;
        let bt = g.transpose(bv)?;
        let ctx = g.matmul(att, bt)?;
        let sv = g.param(s)?;
        let ctx = g.scale_by(ctx, sv)?;
        let scan = {
            let (d, i, o, sk) = (g.param(decay)?, g.param(sb)?, g.param(sc)?, g.param(sd)?);
            g.diag_scan(ctx, d, i, o, sk)?
        };
        let cat = g.concat_cols(&[scan, av])?;
        let row0 = g.rows(cat, 0, 1)?;
        let stacked = g.concat_rows(&[row0, cat])?;
        let first4 = g.rows(stacked, 1, 6)?;
        let picked = g.gather(first4, &[0, 7, 13, 13])?;
        let picked = g.reshape(picked, &[2, 2])?;
        let t = g.constant(target.clone())?;
        let diff = g.sub(cat, t)?;
        let sq = g.square(diff)?;
        let m = g.mean(sq)?;
        let p = g.sum(picked)?;
        let p = g.scale(p, 0.1)?;
        let sil = g.silu(p)?;
        g.add(m, sil)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn scan_identity_and_steady_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ut = random(&mut rng, &[6, 2]);
    let mut g = Graph::new();
    let u = g.constant(ut.clone()).unwrap();
    let zero = g.constant(Tensor::zeros(&[2])).unwrap();
    let one = g.constant(Tensor::ones(&[2])).unwrap();
    let y = g.diag_scan(u, zero, zero, zero, one).unwrap();
    assert_eq!(g.value(y).unwrap(), &ut);
    let y = g.diag_scan(u, zero, one, one, zero).unwrap();
    assert_eq!(g.value(y).unwrap(), &ut);

    let (lambda, gain, x) = (0.8f64, 0.5f64, 1.5f64);
    let u = g.constant(Tensor::full(&[200, 1], x)).unwrap();
    let a = g.constant(Tensor::scalar(lambda)).unwrap();
    let bi = g.constant(Tensor::scalar(gain)).unwrap();
    let c1 = g.constant(Tensor::scalar(1.0)).unwrap();
    let d0 = g.constant(Tensor::scalar(0.0)).unwrap();
    let y = g.diag_scan(u, a, bi, c1, d0).unwrap();
    let yt = g.value(y).unwrap();
    for t in [0usize, 3, 10] {
        let closed = gain * x * (1.0 - lambda.powi(t as i32 + 1)) / (1.0 - lambda);
        assert_abs_diff_eq!(yt.data()[t], closed, epsilon = 1e-12);
    }
    assert_abs_diff_eq!(yt.data()[199], gain * x / (1.0 - lambda), epsilon = 1e-12);
}

#[test]
fn stale_and_foreign_vars_are_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(1.0)).unwrap();
    let loss = g.square(x).unwrap();
    g.reset();
    assert!(matches!(g.backward(loss), Err(Error::GraphLifetime(_))));

    let mut other = Graph::<f64>::new();
    let y = other.variable(Tensor::scalar(2.0)).unwrap();
    assert!(matches!(g.square(y), Err(Error::GraphLifetime(_))));
}

#[test]
fn non_scalar_backward_is_a_contract_error() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn non_finite_outputs_are_caught() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::scalar(f32::MAX)).unwrap();
    assert!(matches!(g.square(x), Err(Error::NonFinite { op: "square" })));
    assert!(g.constant(Tensor::scalar(f32::NAN)).is_err());
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let w = store.insert("w", random(&mut rng, &[6, 6]).cast::<f32>()).unwrap();
        let xt = random(&mut rng, &[6, 6]).cast::<f32>();
        let mut g = Graph::with_params(&store);
        let x = g.constant(xt).unwrap();
        let wv = g.param(w).unwrap();
        let y = g.matmul(x, wv).unwrap();
        let y = g.softmax_rows(y).unwrap();
        let loss = g.sum(y).unwrap();
        let sq = g.square(loss).unwrap();
        g.backward(sq).unwrap().params(&store)
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..9,
        seed in any::<u64>(),
        scale in 0.1f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random(&mut rng, &[rows, cols]).map(|v| v * scale);
        let mut g = Graph::new();
        let x = g.constant(t.cast::<f32>()).unwrap();
        let s = g.softmax_rows(x).unwrap();
        for r in 0..rows {
            let row = g.value(s).unwrap().row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_and_norm_preserve_shape(l in 1usize..12, d in 1usize..6, half in 0usize..3) {
        let w = 2 * half + 1;
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[l, d])).unwrap();
        let k = g.constant(Tensor::ones(&[w, d])).unwrap();
        let b = g.constant(Tensor::zeros(&[d])).unwrap();
        let gm = g.constant(Tensor::ones(&[d])).unwrap();
        let y = g.conv1d_same(x, k, b).unwrap();
        let z = g.layer_norm(y, gm, b, 1e-5).unwrap();
        prop_assert_eq!(g.shape(y).unwrap(), &[l, d]);
        prop_assert_eq!(g.shape(z).unwrap(), &[l, d]);
    }
}

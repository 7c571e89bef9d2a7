mod common;

use common::{fd_max_err, probe_sum, random, rng};
use proptest::prelude::*;
use st_tree_core::{Error, ParamStore, Padding, Tape, Tensor, Window};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_hand_cases() {
    let mut tape = Tape::new();
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let y = tape.matmul(i, b).unwrap();
    assert_eq!(tape.data(y), [5.0, 6.0, 7.0, 8.0]);

    let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let y = tape.matmul(a, c).unwrap();
    assert_eq!(tape.data(y), [11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let (a, b) = (random(&[3, 4], &mut r), random(&[4, 2], &mut r));
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let y = tape.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.get(&[i, k]) * b.get(&[k, j]);
            }
            assert!((tape.value(y).get(&[i, j]) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, Error::Shape { .. }));
}

#[test]
fn conv1d_hand_cases() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let k = tape.constant(t(&[1, 1, 2], &[1.0, 1.0]));
    let y = tape.conv1d(x, k, Padding::Valid).unwrap();
    assert_eq!(tape.data(y), [3.0, 5.0, 7.0]);

    let z = tape.constant(Tensor::zeros(&[1, 1, 2]));
    let y = tape.conv1d(x, z, Padding::Valid).unwrap();
    assert!(tape.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn conv1d_matches_sliding_window() {
    let mut r = rng(2);
    let (x, k) = (random(&[2, 3, 16], &mut r), random(&[2, 3, 3], &mut r));
    let mut tape = Tape::new();
    let (vx, vk) = (tape.constant(x.clone()), tape.constant(k.clone()));
    let y = tape.conv1d(vx, vk, Padding::Valid).unwrap();
    assert_eq!(tape.shape(y), [2, 2, 14]);
    for b in 0..2 {
        for f in 0..2 {
            for j in 0..14 {
                let mut s = 0.0;
                for c in 0..3 {
                    for q in 0..3 {
                        s += x.get(&[b, c, j + q]) * k.get(&[f, c, q]);
                    }
                }
                assert!((tape.value(y).get(&[b, f, j]) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv1d_same_padding_keeps_length() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
    let k = tape.constant(t(&[1, 1, 3], &[1.0, 1.0, 1.0]));
    let y = tape.conv1d(x, k, Padding::Same).unwrap();
    assert_eq!(tape.data(y), [3.0, 6.0, 5.0]);
}

#[test]
fn conv1d_rejects_long_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 2]));
    let k = tape.constant(Tensor::zeros(&[1, 1, 3]));
    assert!(matches!(tape.conv1d(x, k, Padding::Valid), Err(Error::KernelTooLong { .. })));
}

#[test]
fn maxpool_cases_and_tie_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 1, 4], &[3.0, 1.0, 4.0, 1.0]));
    let y = tape.maxpool1d(x, Window::Global).unwrap();
    assert_eq!(tape.data(y), [4.0]);

    let x = tape.leaf(t(&[1, 1, 2], &[5.0, 5.0]).with_requires_grad(true));
    let y = tape.maxpool1d(x, Window::Global).unwrap();
    assert_eq!(tape.data(y), [5.0]);
    let s = tape.sum(y);
    let g = tape.gradients(s).unwrap();
    assert_eq!(g.get(x).unwrap(), [1.0, 0.0]);
}

#[test]
fn maxpool_matches_scan_and_rejects_empty() {
    let mut r = rng(3);
    let x = random(&[2, 3, 32], &mut r);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.maxpool1d(v, Window::Global).unwrap();
    for (row, &m) in x.data().chunks(32).zip(tape.data(y)) {
        let mut best = f64::NEG_INFINITY;
        for &e in row {
            if e > best {
                best = e;
            }
        }
        assert_eq!(m, best);
    }
    let w = tape.maxpool1d(v, Window::Size(4)).unwrap();
    assert_eq!(tape.shape(w), [2, 3, 8]);

    let e = tape.constant(Tensor::zeros(&[1, 1, 0]));
    assert!(matches!(tape.maxpool1d(e, Window::Global), Err(Error::EmptyTensor { .. })));
}

#[test]
fn avgpool_cases() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2], &[2.0, 4.0]));
    let y = tape.avgpool1d(x, Window::Global).unwrap();
    assert_eq!(tape.data(y), [3.0]);

    let c = tape.constant(Tensor::full(&[1, 2, 6], 1.75));
    let y = tape.avgpool1d(c, Window::Size(3)).unwrap();
    assert!(tape.data(y).iter().all(|&v| v == 1.75));

    let mut r = rng(4);
    let x = random(&[1, 2, 10], &mut r);
    let v = tape.constant(x.clone());
    let y = tape.avgpool1d(v, Window::Global).unwrap();
    for (row, &m) in x.data().chunks(10).zip(tape.data(y)) {
        let mut s = 0.0;
        for &e in row {
            s += e;
        }
        assert!((m - s / 10.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_cases() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.data(y), [0.5, 0.5]);

    let x = tape.constant(t(&[2], &[1000.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.data(y)[0], 1.0);
    assert!(tape.data(y)[1] >= 0.0 && tape.data(y)[1] < 1e-300);

    let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
    assert!(matches!(tape.softmax(x, 0), Err(Error::NanInput { .. })));
}

#[test]
fn softmax_matches_direct_formula() {
    let mut r = rng(5);
    let x = random(&[5], &mut r);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.softmax(v, 0).unwrap();
    let exps: Vec<f64> = x.data().iter().map(|v| v.exp()).collect();
    let z: f64 = exps.iter().sum();
    for (a, e) in tape.data(y).iter().zip(&exps) {
        assert!((a - e / z).abs() < 1e-12);
    }
}

#[test]
fn elementwise_cases() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item(), 0.5);
    let c = tape.constant(Tensor::scalar(9.21));
    let cl = tape.clamp(c, 0.0, 1.0);
    assert_eq!(tape.value(cl).item(), 1.0);
    let bad = tape.constant(t(&[2], &[1.0, 0.0]));
    assert!(matches!(tape.log(bad), Err(Error::Domain { .. })));
    let neg = tape.constant(t(&[1], &[-1.0]));
    assert!(matches!(tape.sqrt(neg), Err(Error::Domain { .. })));
}

#[test]
fn x_sigmoid_x_gradient_matches_fd() {
    let err = fd_max_err(&[Tensor::scalar(0.7)], |tape, v| {
        let s = tape.sigmoid(v[0]);
        let p = tape.mul(v[0], s).unwrap();
        tape.sum(p)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn clamp_gradient_only_inside() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[-0.5, 0.5, 1.5]).with_requires_grad(true));
    let y = tape.clamp(x, 0.0, 1.0);
    let s = tape.sum(y);
    let g = tape.gradients(s).unwrap();
    assert_eq!(g.get(x).unwrap(), [0.0, 1.0, 0.0]);
}

#[test]
fn layer_norm_cases() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::full(&[4], 1.0));
    let b = tape.constant(Tensor::zeros(&[4]));
    let x = tape.constant(Tensor::full(&[1, 4], 3.0));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(tape.data(y).iter().all(|&v| v == 0.0));

    let g2 = tape.constant(Tensor::full(&[2], 1.0));
    let b2 = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
    let y = tape.layer_norm(x, g2, b2, 1e-5).unwrap();
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((tape.data(y)[0] - scale).abs() < 1e-15);
    assert!((tape.data(y)[1] + scale).abs() < 1e-15);

    let mut r = rng(6);
    let x = tape.constant(random(&[1, 4], &mut r));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    let d = tape.data(y);
    let mean = d.iter().sum::<f64>() / 4.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-10);
    assert!((var - 1.0).abs() < 1e-4, "{var}");
}

#[test]
fn layer_norm_unit_variance_for_wide_rows() {
    let mut r = rng(7);
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::full(&[64], 1.0));
    let b = tape.constant(Tensor::zeros(&[64]));
    let x = tape.constant(Tensor::from_fn(&[1, 64], |_| 10.0 * rand::Rng::gen_range(&mut r, -1.0..1.0)));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    let d = tape.data(y);
    let mean = d.iter().sum::<f64>() / 64.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
    assert!(mean.abs() < 1e-10);
    assert!((var - 1.0).abs() < 1e-6, "{var}");
}

#[test]
fn backward_sum_and_zero_and_accumulate() {
    let mut store = ParamStore::new();
    let id = store.insert("p", Tensor::from_fn(&[2, 3], |i| i as f64));
    let mut tape = Tape::new();
    let p = tape.param(&store, id);
    let s = tape.sum(p);
    tape.backward(s, &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), [1.0; 6]);
    tape.backward(s, &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), [2.0; 6]);

    store.zero_grad();
    let mut tape = Tape::new();
    let p = tape.param(&store, id);
    let z = tape.scale(p, 0.0);
    let s = tape.sum(z);
    tape.backward(s, &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), [0.0; 6]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut store = ParamStore::new();
    let id = store.insert("p", Tensor::zeros(&[3]));
    let mut tape = Tape::new();
    let p = tape.param(&store, id);
    assert!(matches!(tape.backward(p, &mut store), Err(Error::Rank { .. })));
}

#[test]
fn gradients_of_each_op_match_fd() {
    let mut r = rng(8);
    let checks: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[st_tree_core::Var]) -> st_tree_core::Var>)> = vec![
        ("matmul", vec![random(&[3, 4], &mut r), random(&[4, 2], &mut r)], Box::new(|tp, v| {
            let y = tp.matmul(v[0], v[1]).unwrap();
            probe_sum(tp, y)
        })),
        ("bmm", vec![random(&[2, 3, 4], &mut r), random(&[2, 4, 2], &mut r)], Box::new(|tp, v| {
            let y = tp.bmm(v[0], v[1]).unwrap();
            probe_sum(tp, y)
        })),
        ("broadcast add/sub/mul", vec![random(&[2, 3, 4], &mut r), random(&[2, 1, 4], &mut r)], Box::new(|tp, v| {
            let a = tp.add(v[0], v[1]).unwrap();
            let s = tp.sub(v[1], a).unwrap();
            let m = tp.mul(s, v[1]).unwrap();
            probe_sum(tp, m)
        })),
        ("conv1d same", vec![random(&[2, 3, 7], &mut r), random(&[2, 3, 3], &mut r)], Box::new(|tp, v| {
            let y = tp.conv1d(v[0], v[1], Padding::Same).unwrap();
            probe_sum(tp, y)
        })),
        ("conv1d valid", vec![random(&[1, 2, 9], &mut r), random(&[3, 2, 4], &mut r)], Box::new(|tp, v| {
            let y = tp.conv1d(v[0], v[1], Padding::Valid).unwrap();
            probe_sum(tp, y)
        })),
        ("pools", vec![random(&[2, 2, 8], &mut r)], Box::new(|tp, v| {
            let a = tp.maxpool1d(v[0], Window::Size(2)).unwrap();
            let b = tp.avgpool1d(a, Window::Global).unwrap();
            probe_sum(tp, b)
        })),
        ("softmax", vec![random(&[3, 4, 2], &mut r)], Box::new(|tp, v| {
            let y = tp.softmax(v[0], 1).unwrap();
            probe_sum(tp, y)
        })),
        ("layer_norm", vec![random(&[3, 5], &mut r), random(&[5], &mut r), random(&[5], &mut r)], Box::new(|tp, v| {
            let y = tp.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            probe_sum(tp, y)
        })),
        ("unary chain", vec![random(&[6], &mut r)], Box::new(|tp, v| {
            let s = tp.sigmoid(v[0]);
            let e = tp.exp(s);
            let l = tp.log(e).unwrap();
            let sq = tp.sqrt(l).unwrap();
            let c = tp.clamp(v[0], -0.5, 0.5);
            let rl = tp.relu(c);
            let y = tp.add(sq, rl).unwrap();
            let y = tp.add_scalar(y, 3.0);
            probe_sum(tp, y)
        })),
        ("reshape/transpose/select/concat", vec![random(&[2, 3, 4], &mut r), random(&[2, 2, 4], &mut r)], Box::new(|tp, v| {
            let c = tp.concat(&[v[0], v[1]], 1).unwrap();
            let tr = tp.transpose(c).unwrap();
            let sel = tp.index_select(tr, 2, &[4, 0, 0, 2]).unwrap();
            let rs = tp.reshape(sel, &[8, 4]).unwrap();
            let row = tp.select_per_row(rs, &[0, 1, 2, 3, 3, 2, 1, 0]).unwrap();
            let m = tp.mean(row);
            let all = probe_sum(tp, rs);
            tp.add(m, all).unwrap()
        })),
        ("linear", vec![random(&[2, 3, 4], &mut r), random(&[4, 5], &mut r), random(&[5], &mut r)], Box::new(|tp, v| {
            let y = tp.linear(v[0], v[1], v[2]).unwrap();
            probe_sum(tp, y)
        })),
    ];
    for (name, inputs, f) in checks {
        let err = fd_max_err(&inputs, |tp, v| f(tp, v));
        assert!(err < 1e-4, "{name}: max relative error {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shift(xs in prop::collection::vec(-30.0f64..30.0, 1..12), c in -50.0f64..50.0) {
        let n = xs.len();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![n], xs.clone()).unwrap());
        let b = tape.constant(Tensor::new(vec![n], xs.iter().map(|v| v + c).collect()).unwrap());
        let ya = tape.softmax(a, 0).unwrap();
        let yb = tape.softmax(b, 0).unwrap();
        let s: f64 = tape.data(ya).iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
        for (p, q) in tape.data(ya).iter().zip(tape.data(yb)) {
            prop_assert!(*p > 0.0);
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn reshape_preserves_data(a in 1usize..5, b in 1usize..5, c in 1usize..5, seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = random(&[a, b, c], &mut r);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.reshape(v, &[c, a * b]).unwrap();
        let z = tape.reshape(y, &[a * b * c]).unwrap();
        prop_assert_eq!(tape.data(z), x.data());
    }

    #[test]
    fn random_probe_gradients_match_fd(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let inputs = vec![random(&[1, 2, 6], &mut r), random(&[1, 2, 3], &mut r)];
        let err = fd_max_err(&inputs, |tp, v| {
            let y = tp.conv1d(v[0], v[1], Padding::Same).unwrap();
            let s = tp.sigmoid(y);
            let m = tp.softmax(s, 2).unwrap();
            probe_sum(tp, m)
        });
        prop_assert!(err < 1e-4, "{}", err);
    }
}

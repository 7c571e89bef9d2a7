mod common;

use common::{probe_sum, random, rel_err, rng};
use st_tree_core::attention::{attention_apply, channel_attention, spatial_attention, AttentionParams};
use st_tree_core::{ParamStore, Tape, Tensor};

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn params(seed: u64) -> (ParamStore, AttentionParams) {
    let mut store = ParamStore::new();
    let p = AttentionParams::register(&mut store, "att", 3, seed).unwrap();
    (store, p)
}

fn zero_kernels(store: &mut ParamStore, p: &AttentionParams) {
    store.get_mut(p.channel_kernel).data_mut().fill(0.0);
    store.get_mut(p.spatial_kernel).data_mut().fill(0.0);
}

/// Same-padded size-3 conv of a 2-row descriptor, by hand.
fn conv_same(rows: [&[f64]; 2], k: &[f64]) -> Vec<f64> {
    let n = rows[0].len();
    (0..n)
        .map(|j| {
            let mut s = 0.0;
            for (r, row) in rows.iter().enumerate() {
                for t in 0..3 {
                    let p = j as isize + t as isize - 1;
                    if p >= 0 && (p as usize) < n {
                        s += row[p as usize] * k[r * 3 + t];
                    }
                }
            }
            s
        })
        .collect()
}

#[test]
fn zero_kernels_give_half_gates_and_quarter_output() {
    let (mut store, p) = params(0);
    zero_kernels(&mut store, &p);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 3, 5], 1.3));
    let ca = channel_attention(&mut tape, &store, &p, x).unwrap();
    assert!(tape.data(ca).iter().all(|&v| v == 0.5));
    let mut r = rng(1);
    let z = random(&[2, 3, 5], &mut r);
    let zv = tape.constant(z.clone());
    let y = attention_apply(&mut tape, &store, &p, zv).unwrap();
    for (a, b) in tape.data(y).iter().zip(z.data()) {
        assert!((a - b / 4.0).abs() < 1e-15);
    }
}

#[test]
fn channel_attention_matches_straight_line_oracle() {
    let (store, p) = params(2);
    let mut r = rng(3);
    let x = random(&[1, 3, 4], &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let ca = channel_attention(&mut tape, &store, &p, xv).unwrap();
    assert_eq!(tape.shape(ca), [1, 3, 1]);

    let rows: Vec<&[f64]> = x.data().chunks(4).collect();
    let avg: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / 4.0).collect();
    let max: Vec<f64> = rows.iter().map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
    let k = store.get(p.channel_kernel).data();
    let expect: Vec<f64> = conv_same([&avg, &max], k).into_iter().map(sig).collect();
    for (a, b) in tape.data(ca).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
        assert!(*a > 0.0 && *a < 1.0);
    }
}

#[test]
fn spatial_attention_matches_straight_line_oracle() {
    let (store, p) = params(4);
    let mut r = rng(5);
    let x = random(&[1, 3, 6], &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let sa = spatial_attention(&mut tape, &store, &p, xv).unwrap();
    assert_eq!(tape.shape(sa), [1, 1, 6]);

    let col = |t: usize| (0..3).map(|c| x.get(&[0, c, t])).collect::<Vec<f64>>();
    let avg: Vec<f64> = (0..6).map(|t| col(t).iter().sum::<f64>() / 3.0).collect();
    let max: Vec<f64> = (0..6).map(|t| col(t).into_iter().fold(f64::NEG_INFINITY, f64::max)).collect();
    let k = store.get(p.spatial_kernel).data();
    let expect: Vec<f64> = conv_same([&avg, &max], k).into_iter().map(sig).collect();
    for (a, b) in tape.data(sa).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
        assert!(*a > 0.0 && *a < 1.0);
    }
}

#[test]
fn single_channel_descriptors_equal_input() {
    // With one channel, avg and max over channels are the input itself,
    // so the spatial map equals sigmoid(conv([x; x])).
    let (store, p) = params(6);
    let x = Tensor::new(vec![1, 1, 5], vec![0.3, -1.0, 2.0, 0.5, 0.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let sa = spatial_attention(&mut tape, &store, &p, xv).unwrap();
    let k = store.get(p.spatial_kernel).data();
    let expect: Vec<f64> = conv_same([x.data(), x.data()], k).into_iter().map(sig).collect();
    for (a, b) in tape.data(sa).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn apply_preserves_shape() {
    let (store, p) = params(7);
    let mut r = rng(8);
    for shape in [[1, 1, 1], [2, 5, 3], [3, 8, 11]] {
        let mut tape = Tape::new();
        let x = tape.constant(random(&shape, &mut r));
        let y = attention_apply(&mut tape, &store, &p, x).unwrap();
        assert_eq!(tape.shape(y), shape);
    }
}

#[test]
fn apply_gradient_matches_fd() {
    let (mut store, p) = params(9);
    let mut r = rng(10);
    let x = random(&[2, 4, 5], &mut r);
    let loss = |store: &ParamStore, x: &Tensor| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = attention_apply(&mut tape, store, &p, xv).unwrap();
        let l = probe_sum(&mut tape, y);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let y = attention_apply(&mut tape, &store, &p, xv).unwrap();
    let l = probe_sum(&mut tape, y);
    let grads = tape.backward(l, &mut store).unwrap();
    let h = 1e-5;

    let gx = grads.get(xv).unwrap().to_vec();
    for e in 0..x.numel() {
        let (mut up, mut down) = (x.clone(), x.clone());
        up.data_mut()[e] += h;
        down.data_mut()[e] -= h;
        let numeric = (loss(&store, &up) - loss(&store, &down)) / (2.0 * h);
        assert!(rel_err(gx[e], numeric) < 1e-4, "input {e}");
    }
    for id in [p.channel_kernel, p.spatial_kernel] {
        let analytic = store.get(id).grad().unwrap().to_vec();
        for e in 0..6 {
            let mut s = store.clone();
            s.get_mut(id).data_mut()[e] += h;
            let up = loss(&s, &x);
            s.get_mut(id).data_mut()[e] -= 2.0 * h;
            let down = loss(&s, &x);
            let numeric = (up - down) / (2.0 * h);
            assert!(rel_err(analytic[e], numeric) < 1e-4, "{} {e}", store.name(id));
        }
    }
}

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::rng::Rng;
use crate::testkit::{max_gradient_error, random_tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_identity_and_known_product() {
    let mut tape = Tape::new();
    let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let c = tape.matmul(i2, b).unwrap();
    assert_eq!(tape.data(c), &[5.0, 6.0, 7.0, 8.0]);
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let c = tape.matmul(a, b).unwrap();
    let oracle = naive_matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
    assert_eq!(tape.data(c), oracle.as_slice());
    assert_eq!(oracle, vec![19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_matches_naive_oracle_on_random_shapes() {
    let mut rng = Rng::new(11);
    for (m, k, n) in [(3, 4, 5), (1, 7, 2), (6, 1, 3)] {
        let a = random_tensor(&mut rng, &[m, k], 1.0);
        let b = random_tensor(&mut rng, &[k, n], 1.0);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let oracle = naive_matmul(a.data(), b.data(), m, k, n);
        for (x, y) in tape.data(c).iter().zip(&oracle) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.data(y), &[0.25; 4]);
    let x = tape.constant(t(&[2], &[2f64.ln(), 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_abs_diff_eq!(tape.data(y)[0], 2.0 / 3.0, epsilon = 1e-15);
    assert_abs_diff_eq!(tape.data(y)[1], 1.0 / 3.0, epsilon = 1e-15);
    assert!(matches!(tape.softmax(x, 1), Err(Error::Index(_))));
}

#[test]
fn softmax_along_inner_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
    let y = tape.softmax(x, 0).unwrap();
    // columns are uniform
    assert_eq!(tape.data(y), &[0.5, 0.5, 0.5, 0.5]);
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 100.0]));
    let y = tape.masked_softmax(x, &[true, true, false]).unwrap();
    let d = tape.data(y);
    assert_eq!(d[2], 0.0);
    assert_abs_diff_eq!(d[0] + d[1], 1.0, epsilon = 1e-15);
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let x = tape.constant(Tensor::full(&[1, 3], 4.2));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    assert!(tape.data(y).iter().all(|v| v.abs() < 1e-9));

    let g2 = tape.constant(Tensor::full(&[2], 1.0));
    let b2 = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = tape.layer_norm(x, g2, b2, 1e-300).unwrap();
    assert_abs_diff_eq!(tape.data(y)[0], -1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(tape.data(y)[1], 1.0, epsilon = 1e-12);

    let zero = tape.constant(Tensor::zeros(&[3]));
    let beta = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
    let x = tape.constant(t(&[2, 3], &[1.0, -7.0, 3.0, 0.1, 0.2, 9.0]));
    let y = tape.layer_norm(x, zero, beta, 1e-12).unwrap();
    assert_eq!(tape.data(y), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);

    let bad = tape.constant(Tensor::zeros(&[4]));
    assert!(matches!(tape.layer_norm(x, bad, beta, 1e-12), Err(Error::Dimension { .. })));
}

#[test]
fn gelu_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 10.0, 1.0]));
    let y = tape.gelu(x).unwrap();
    let d = tape.data(y);
    assert_eq!(d[0], 0.0);
    assert_abs_diff_eq!(d[1], 10.0, epsilon = 1e-6);
    // scalar formula oracle, written out independently
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let oracle = 0.5 * (1.0 + (c * (1.0 + 0.044715)).tanh());
    assert_abs_diff_eq!(d[2], oracle, epsilon = 1e-15);
    assert_abs_diff_eq!(d[2], 0.841_191_990_608_276_8, epsilon = 1e-12);
}

#[test]
fn embedding_lookup_examples() {
    let table = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad(true);
    let mut tape = Tape::new();
    let tv = tape.leaf(&table);
    let first = tape.gather_rows(tv, &[0]).unwrap();
    assert_eq!(tape.data(first), &[1.0, 2.0]);
    let dup = tape.gather_rows(tv, &[2, 2]).unwrap();
    assert_eq!(tape.data(dup), &[5.0, 6.0, 5.0, 6.0]);
    let s = tape.sum(dup).unwrap();
    let g = tape.gradients(s).unwrap();
    assert_eq!(g.wrt(tv).unwrap(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
    match tape.gather_rows(tv, &[3]) {
        Err(Error::Index(msg)) => assert!(msg.contains('3')),
        other => panic!("{other:?}"),
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let peaked = tape.constant(t(&[1, 3], &[0.0, 1e4, 0.0]));
    let l = tape.cross_entropy(peaked, &[1]).unwrap();
    assert!(tape.value(l).item() < 1e-12);

    let uniform = tape.constant(Tensor::zeros(&[2, 5]));
    let l = tape.cross_entropy(uniform, &[0, 4]).unwrap();
    assert_abs_diff_eq!(tape.value(l).item(), 5f64.ln(), epsilon = 1e-15);

    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    // scalar oracle: logsumexp(1, 2) - logit[target]
    let lse = (1f64.exp() + 2f64.exp()).ln();
    let l = tape.cross_entropy(x, &[0]).unwrap();
    assert_abs_diff_eq!(tape.value(l).item(), lse - 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(tape.value(l).item(), (1.0 + std::f64::consts::E).ln(), epsilon = 1e-15);
    let l = tape.cross_entropy(x, &[1]).unwrap();
    assert_abs_diff_eq!(tape.value(l).item(), (1.0 + std::f64::consts::E).ln() - 1.0, epsilon = 1e-15);

    let empty = tape.constant(Tensor::zeros(&[0, 2]));
    assert!(matches!(tape.cross_entropy(empty, &[]), Err(Error::Domain(_))));
    assert!(matches!(tape.cross_entropy(x, &[2]), Err(Error::Index(_))));
}

#[test]
fn backward_quadratic_and_reuse() {
    let x = t(&[3], &[1.0, -2.0, 0.5]).with_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.gradients(s).unwrap();
    assert_eq!(g.wrt(v).unwrap(), &[2.0, -4.0, 1.0]);

    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let y = tape.add(v, v).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.gradients(s).unwrap();
    assert_eq!(g.wrt(v).unwrap(), &[2.0, 2.0, 2.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let v = tape.leaf(&Tensor::zeros(&[2]).with_grad(true));
    assert!(matches!(tape.gradients(v), Err(Error::Domain(_))));
}

#[test]
fn backward_twice_accumulates_double() {
    let mut store = ParamStore::new();
    let id = store.insert("w", t(&[2], &[0.3, -0.7])).unwrap();
    let mut tape = Tape::new();
    let w = tape.param(&store, id);
    let sq = tape.mul(w, w).unwrap();
    let l = tape.sum(sq).unwrap();
    tape.backward(l, &mut store).unwrap();
    let once = store.get(id).grad().unwrap().to_vec();
    tape.backward(l, &mut store).unwrap();
    let twice = store.get(id).grad().unwrap();
    for (a, b) in once.iter().zip(twice) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn param_reads_are_cached() {
    let mut store = ParamStore::new();
    let id = store.insert("w", t(&[1], &[2.0])).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&store, id);
    let b = tape.param(&store, id);
    assert_eq!(a, b);
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = ParamStore::new();
    let id = store.insert("w", t(&[1], &[2.0])).unwrap();
    store.set_trainable(id, false);
    let mut tape = Tape::new();
    let w = tape.param(&store, id);
    assert!(!tape.requires_grad(w));
}

#[test]
fn adam_zero_grad_leaves_params() {
    let mut store = ParamStore::new();
    let id = store.insert("w", t(&[2], &[1.0, -1.0])).unwrap();
    store.zero_grads();
    let mut st = AdamState::new(&store, AdamConfig::with_lr(0.1));
    adam_step(&mut store, &mut st).unwrap();
    assert_eq!(store.get(id).data(), &[1.0, -1.0]);
    assert_eq!(st.step_count(), 1);
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let mut store = ParamStore::new();
    let id = store.insert("w", t(&[3], &[0.0, 0.0, 0.0])).unwrap();
    store.get_mut(id).accumulate_grad(&[0.5, -3.0, 1e-3]);
    let lr = 1e-3;
    let mut st = AdamState::new(&store, AdamConfig::with_lr(lr));
    adam_step(&mut store, &mut st).unwrap();
    // scalar oracle: m̂ = g, v̂ = g², Δ = -lr·g/(|g|+eps)
    for (p, g) in store.get(id).data().iter().zip([0.5f64, -3.0, 1e-3]) {
        let expected = -lr * g / (g.abs() + 1e-8);
        assert_abs_diff_eq!(*p, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(*p, -lr * g.signum(), epsilon = 1e-7);
    }
    assert!(store.get(id).grad().unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn adam_missing_grad_names_parameter() {
    let mut store = ParamStore::new();
    store.insert("encoder.w", t(&[1], &[1.0])).unwrap();
    let mut st = AdamState::new(&store, AdamConfig::default());
    match adam_step(&mut store, &mut st) {
        Err(Error::State(msg)) => assert!(msg.contains("encoder.w")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn adam_runs_are_bitwise_reproducible() {
    let run = || {
        let mut rng = Rng::new(5);
        let mut store = ParamStore::new();
        let id = store.insert("w", random_tensor(&mut rng, &[4, 4], 1.0)).unwrap();
        let mut st = AdamState::new(&store, AdamConfig::with_lr(0.01));
        for _ in 0..10 {
            store.zero_grads();
            let mut tape = Tape::new();
            let w = tape.param(&store, id);
            let y = tape.tanh(w).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let l = tape.sum(sq).unwrap();
            tape.backward(l, &mut store).unwrap();
            adam_step(&mut store, &mut st).unwrap();
        }
        store.get(id).data().to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

const GRAD_TOL: f64 = 1e-6;

fn check_op<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
{
    let mut rng = Rng::new(1000 + name.len() as u64);
    for instance in 0..5 {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s, 1.0)).collect();
        let err = max_gradient_error(&inputs, &f).unwrap();
        assert!(err < GRAD_TOL, "{name} instance {instance}: relative error {err:e}");
    }
}

fn reduce(tape: &mut Tape, x: Var, rng_seed: u64) -> crate::Result<Var> {
    // Random projection so every output element carries a distinct weight.
    let n = tape.value(x).numel();
    let mut rng = Rng::new(rng_seed);
    let w = (0..n).map(|_| rng.next_f64() - 0.5).collect();
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(Tensor::new(shape, w).unwrap());
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

#[test]
fn gradcheck_elementwise_and_linear_ops() {
    check_op("add", &[&[3, 4], &[3, 4]], |t, v| {
        let y = t.add(v[0], v[1])?;
        reduce(t, y, 1)
    });
    check_op("sub", &[&[3, 4], &[3, 4]], |t, v| {
        let y = t.sub(v[0], v[1])?;
        reduce(t, y, 2)
    });
    check_op("mul", &[&[3, 4], &[3, 4]], |t, v| {
        let y = t.mul(v[0], v[1])?;
        reduce(t, y, 3)
    });
    check_op("add_bias", &[&[3, 4], &[4]], |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        reduce(t, y, 4)
    });
    check_op("scale_add_scalar", &[&[5]], |t, v| {
        let y = t.scale(v[0], -1.7)?;
        let y = t.add_scalar(y, 0.3)?;
        reduce(t, y, 5)
    });
    check_op("matmul", &[&[3, 4], &[4, 2]], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        reduce(t, y, 6)
    });
    check_op("matmul_bt", &[&[3, 4], &[5, 4]], |t, v| {
        let y = t.matmul_bt(v[0], v[1])?;
        reduce(t, y, 7)
    });
    check_op("batch_matmul", &[&[2, 3, 4], &[2, 4, 2]], |t, v| {
        let y = t.batch_matmul(v[0], v[1], false)?;
        reduce(t, y, 8)
    });
    check_op("batch_matmul_t", &[&[2, 3, 4], &[2, 5, 4]], |t, v| {
        let y = t.batch_matmul(v[0], v[1], true)?;
        reduce(t, y, 9)
    });
    check_op("reshape_permute", &[&[2, 3, 4]], |t, v| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        let y = t.reshape(y, &[4, 6])?;
        reduce(t, y, 10)
    });
    check_op("mean", &[&[3, 3]], |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.mean(y)
    });
}

#[test]
fn gradcheck_nonlinear_ops() {
    check_op("softmax_last", &[&[3, 4]], |t, v| {
        let y = t.softmax(v[0], 1)?;
        reduce(t, y, 11)
    });
    check_op("softmax_first", &[&[3, 4]], |t, v| {
        let y = t.softmax(v[0], 0)?;
        reduce(t, y, 12)
    });
    check_op("masked_softmax", &[&[2, 4]], |t, v| {
        let y = t.masked_softmax(v[0], &[true, false, true, true, true, true, false, false])?;
        reduce(t, y, 13)
    });
    check_op("layer_norm", &[&[3, 5], &[5], &[5]], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-12)?;
        reduce(t, y, 14)
    });
    check_op("gelu", &[&[6]], |t, v| {
        let y = t.gelu(v[0])?;
        reduce(t, y, 15)
    });
    check_op("tanh", &[&[6]], |t, v| {
        let y = t.tanh(v[0])?;
        reduce(t, y, 16)
    });
    check_op("relu", &[&[6]], |t, v| {
        // shift away from the kink
        let y = t.add_scalar(v[0], 0.05)?;
        let y = t.mul(y, y)?;
        let y = t.add_scalar(y, -0.2)?;
        let y = t.relu(y)?;
        reduce(t, y, 17)
    });
    check_op("normalize_rows", &[&[3, 4]], |t, v| {
        let y = t.normalize_rows(v[0])?;
        reduce(t, y, 18)
    });
}

#[test]
fn gradcheck_indexing_and_losses() {
    check_op("gather_rows", &[&[4, 3]], |t, v| {
        let y = t.gather_rows(v[0], &[1, 3, 1, 0])?;
        reduce(t, y, 19)
    });
    check_op("replace_rows", &[&[4, 3], &[2, 3]], |t, v| {
        let y = t.replace_rows(v[0], &[2, 0], v[1])?;
        reduce(t, y, 20)
    });
    check_op("cross_entropy", &[&[4, 3]], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]));
    check_op("cross_entropy_masked_weighted", &[&[4, 3]], |t, v| {
        t.cross_entropy_masked(v[0], &[Some(0), None, Some(1), Some(2)], Some(&[0.5, 1.0, 2.0, 0.0]))
    });
    let target = [0.2, 0.3, 0.5, 0.9, 0.1, 0.0];
    check_op("kl_div", &[&[2, 3]], move |t, v| t.kl_div(v[0], &target, Some(&[1.0, 0.4])));
}

#[test]
fn all_zero_weight_cross_entropy_has_zero_gradient() {
    let x = t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]).with_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let l = tape.cross_entropy_masked(v, &[Some(0), Some(1)], Some(&[0.0, 0.0])).unwrap();
    let g = tape.gradients(l).unwrap();
    assert!(g.wrt(v).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.data(y).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn softmax_shift_invariant(data in prop::collection::vec(-10.0f64..10.0, 5), c in -50.0f64..50.0) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![5], data.clone()).unwrap());
        let shifted = tape.constant(Tensor::new(vec![5], data.iter().map(|v| v + c).collect()).unwrap());
        let a = tape.softmax(x, 0).unwrap();
        let b = tape.softmax(shifted, 0).unwrap();
        for (p, q) in tape.data(a).iter().zip(tape.data(b)) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_standardized(data in prop::collection::vec(-5.0f64..5.0, 8)) {
        let spread = data.iter().cloned().fold(f64::MIN, f64::max) - data.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 8], data).unwrap());
        let g = tape.constant(Tensor::full(&[8], 1.0));
        let b = tape.constant(Tensor::zeros(&[8]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let row = tape.data(y);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        prop_assert!(mean.abs() < 1e-10);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ops_are_deterministic(data in prop::collection::vec(-3.0f64..3.0, 16)) {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![4, 4], data.clone()).unwrap());
            let y = tape.matmul(x, x).unwrap();
            let y = tape.gelu(y).unwrap();
            let y = tape.softmax(y, 1).unwrap();
            tape.data(y).to_vec()
        };
        let (a, b) = (run(), run());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

use nbc_core::tensor::{finite_difference_check, Mode, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = fn(&mut Tape, &[Var]) -> nbc_core::tensor::Result<Var>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces any output to a scalar through fixed pseudo-random weights so every
/// output coordinate carries a distinct upstream gradient.
fn weighted_sum(t: &mut Tape, y: Var) -> nbc_core::tensor::Result<Var> {
    let v = t.value(y).clone();
    let w: Vec<f64> = (0..v.len()).map(|i| ((i as f64) * 0.731 + 0.3).sin()).collect();
    let w = t.constant(Tensor::new(v.shape().to_vec(), w).unwrap());
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn check(name: &str, shapes: &[&[usize]], lo: f64, hi: f64, build: Build) {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s, lo, hi)).collect();
        let err = finite_difference_check(
            |t: &mut Tape, v: &[Var]| {
                let y = build(t, v)?;
                weighted_sum(t, y)
            },
            &params,
            1e-6,
            100,
            seed,
        )
        .unwrap();
        assert!(err <= 1e-4, "{name} seed {seed}: relative error {err}");
    }
}

#[test]
fn every_differentiable_op_passes_gradient_check() {
    check("add", &[&[3, 4], &[3, 4]], -1.0, 1.0, |t, v| t.add(v[0], v[1]));
    check("sub", &[&[3, 4], &[3, 4]], -1.0, 1.0, |t, v| t.sub(v[0], v[1]));
    check("mul", &[&[3, 4], &[3, 4]], -1.0, 1.0, |t, v| t.mul(v[0], v[1]));
    check("scale", &[&[5]], -1.0, 1.0, |t, v| t.scale(v[0], -2.5));
    check("add_scalar", &[&[5]], -1.0, 1.0, |t, v| t.add_scalar(v[0], 0.7));
    check("add_row", &[&[4, 3], &[3]], -1.0, 1.0, |t, v| t.add_row(v[0], v[1]));
    check("matmul", &[&[3, 4], &[4, 5]], -1.0, 1.0, |t, v| t.matmul(v[0], v[1]));
    check("matmul_bt", &[&[3, 4], &[5, 4]], -1.0, 1.0, |t, v| t.matmul_bt(v[0], v[1]));
    check("transpose", &[&[3, 4]], -1.0, 1.0, |t, v| t.transpose(v[0]));
    check("concat_cols", &[&[3, 2], &[3, 4]], -1.0, 1.0, |t, v| t.concat_cols(&[v[0], v[1]]));
    check("concat_rows", &[&[2, 3], &[4, 3]], -1.0, 1.0, |t, v| t.concat_rows(&[v[0], v[1]]));
    check("slice", &[&[5, 6]], -1.0, 1.0, |t, v| t.slice(v[0], 1, 3, 2, 3));
    check("embedding", &[&[6, 3]], -1.0, 1.0, |t, v| t.embedding(v[0], &[0, 5, 2, 2, 1]));
    check("sliding_window", &[&[12, 3], &[9, 4]], -1.0, 1.0, |t, v| {
        t.sliding_window(v[0], v[1], 6, 3)
    });
    check("segment_max", &[&[12, 5]], -1.0, 1.0, |t, v| t.segment_max(v[0], 4));
    check("segment_mean", &[&[12, 5]], -1.0, 1.0, |t, v| t.segment_mean(v[0], 3));
    check("masked_mean", &[&[4, 3]], -1.0, 1.0, |t, v| t.masked_mean(v[0], &[1.0, 0.0, 1.0, 1.0]));
    check("relu", &[&[4, 6]], -1.0, 1.0, |t, v| t.relu(v[0]));
    check("tanh", &[&[4, 6]], -2.0, 2.0, |t, v| t.tanh(v[0]));
    check("exp", &[&[4, 6]], -2.0, 2.0, |t, v| t.exp(v[0]));
    check("log", &[&[4, 6]], 0.2, 3.0, |t, v| t.log(v[0]));
    check("softmax", &[&[4, 6]], -2.0, 2.0, |t, v| t.softmax_rows(v[0]));
    check("log_softmax", &[&[4, 6]], -2.0, 2.0, |t, v| t.log_softmax_rows(v[0]));
    check("l2_normalize", &[&[4, 6]], -1.0, 1.0, |t, v| t.l2_normalize_rows(v[0]));
    check("cosine_similarity", &[&[3, 4], &[5, 4]], -1.0, 1.0, |t, v| {
        t.cosine_similarity(v[0], v[1])
    });
    check("sum", &[&[3, 3]], -1.0, 1.0, |t, v| t.sum(v[0]));
    check("mean", &[&[3, 3]], -1.0, 1.0, |t, v| t.mean(v[0]));
    check("row_sum", &[&[3, 4]], -1.0, 1.0, |t, v| t.row_sum(v[0]));
    check("pick_per_row", &[&[3, 4]], -1.0, 1.0, |t, v| t.pick_per_row(v[0], &[3, 0, 2]));
    check("masked_logsumexp", &[&[3, 3]], -2.0, 2.0, |t, v| {
        let mask = [false, true, true, true, false, true, true, true, false];
        t.masked_logsumexp(v[0], &mask)
    });
    check("arc_margin", &[&[3, 4]], -0.9, 0.9, |t, v| t.arc_margin(v[0], &[1, 3, 0], 0.5));
}

#[test]
fn dropout_gradient_matches_its_fixed_mask() {
    // With a fixed seed inside the closure the loss is deterministic.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&mut rng, &[4, 5], -1.0, 1.0);
    let err = finite_difference_check(
        |t, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(42);
            let y = t.dropout(v[0], 0.5, Mode::Train, &mut mask_rng)?;
            weighted_sum(t, y)
        },
        &[x],
        1e-6,
        100,
        0,
    )
    .unwrap();
    assert!(err <= 1e-8, "{err}");
}

#[test]
fn square_has_derivative_six_at_three() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(3.0));
    let y = t.mul(x, x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 6.0);
}

#[test]
fn fan_out_accumulates() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(1.0));
    let y = t.add(x, x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 2.0);
}

#[test]
fn softmax_cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut t = Tape::new();
    let z = t.param(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let ls = t.log_softmax_rows(z).unwrap();
    let picked = t.pick_per_row(ls, &[0]).unwrap();
    let s = t.sum(picked).unwrap();
    let loss = t.scale(s, -1.0).unwrap();
    t.backward(loss).unwrap();
    let g = t.grad(z).unwrap().data();
    let expected = [-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
    for (a, b) in g.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15, "{g:?}");
    }
}

#[test]
fn backward_rejects_non_scalar_root_and_empty_tape() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(TensorError::NonScalarRoot(_))));
    let mut t = Tape::new();
    let s = t.param(Tensor::scalar(1.0));
    assert_eq!(t.backward(s), Err(TensorError::EmptyTape));
}

#[test]
fn backward_visits_each_operation_once() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![0.5, -1.0, 2.0]));
    let a = t.tanh(x).unwrap();
    let b = t.mul(a, x).unwrap();
    let c = t.add(a, b).unwrap();
    let s = t.sum(c).unwrap();
    let stats = t.backward(s).unwrap();
    assert_eq!(stats.ops_visited, t.op_count());
}

#[test]
fn quadratic_loss_gradient_is_exact() {
    let params = vec![Tensor::vector(vec![0.3, -1.2, 2.5, 0.0])];
    let err = finite_difference_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        },
        &params,
        1e-4,
        100,
        0,
    )
    .unwrap();
    assert!(err <= 1e-8, "{err}");
}

#[test]
fn softmax_cross_entropy_on_random_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = random(&mut rng, &[4, 3], -2.0, 2.0);
    let err = finite_difference_check(
        |t, v| {
            let ls = t.log_softmax_rows(v[0])?;
            let p = t.pick_per_row(ls, &[0, 2, 1, 1])?;
            let m = t.mean(p)?;
            t.scale(m, -1.0)
        },
        &[logits],
        1e-6,
        100,
        0,
    )
    .unwrap();
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn gradient_of_a_sum_is_the_sum_of_gradients() {
    let x0 = Tensor::vector(vec![0.4, -0.7, 1.3]);
    let grad_of = |which: u8| {
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let e = t.exp(x).unwrap();
        let ea = t.sum(e).unwrap();
        let th = t.tanh(x).unwrap();
        let tb = t.sum(th).unwrap();
        let root = match which {
            0 => ea,
            1 => tb,
            _ => t.add(ea, tb).unwrap(),
        };
        t.backward(root).unwrap();
        t.grad(x).unwrap().clone()
    };
    let (ga, gb, gab) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..3 {
        assert!((ga.data()[i] + gb.data()[i] - gab.data()[i]).abs() < 1e-14);
    }
}

#[test]
fn gradient_check_detects_nondeterminism() {
    use std::cell::Cell;
    let calls = Cell::new(0.0);
    let err = finite_difference_check(
        |t, v| {
            calls.set(calls.get() + 1.0);
            let s = t.sum(v[0])?;
            t.add_scalar(s, calls.get())
        },
        &[Tensor::vector(vec![1.0])],
        1e-5,
        10,
        0,
    )
    .unwrap_err();
    assert!(matches!(err, TensorError::NonDeterministic { .. }));
}

#[test]
fn gradient_check_rejects_bad_epsilon() {
    let r = finite_difference_check(|t, v| t.sum(v[0]), &[Tensor::vector(vec![1.0])], 1e-2, 10, 0);
    assert!(matches!(r, Err(TensorError::InvalidArgument(_))));
}

#[test]
fn evaluation_is_deterministic() {
    let build = || {
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = t.param(random(&mut rng, &[3, 4], -1.0, 1.0));
        let w = t.param(random(&mut rng, &[4, 2], -1.0, 1.0));
        let y = t.matmul(x, w).unwrap();
        let s = t.softmax_rows(y).unwrap();
        t.value(s).clone()
    };
    assert_eq!(build(), build());
}

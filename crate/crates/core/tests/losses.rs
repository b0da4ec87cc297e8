use nbc_core::losses::{
    arcface_loss, class_mean_block, class_means, cosface_loss, multisimilarity_loss, nbc_negative_term,
    nbc_softmax_combined, negative_block_term, softmax_cross_entropy, LossConfig, MultiSimilarityParams,
};
use nbc_core::tensor::{finite_difference_check, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn eval(build: impl FnOnce(&mut Tape) -> Var) -> f64 {
    let mut t = Tape::new();
    let v = build(&mut t);
    t.value(v).item()
}

#[test]
fn softmax_ce_uniform_logits_is_log_c() {
    let v = eval(|t| {
        let z = t.constant(Tensor::from_rows(&[vec![0.3, -1.0]]).unwrap());
        let w = t.constant(Tensor::zeros(&[3, 2]));
        softmax_cross_entropy(t, z, &[1], w).unwrap()
    });
    assert!((v - 3f64.ln()).abs() < 1e-15);
}

#[test]
fn softmax_ce_single_sample() {
    // logits [2, 0, 0] from identity weights on a one-hot-ish embedding
    let loss = |rows: Vec<Vec<f64>>, labels: Vec<usize>| {
        eval(|t| {
            let z = t.constant(Tensor::from_rows(&rows).unwrap());
            let w = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap());
            softmax_cross_entropy(t, z, &labels, w).unwrap()
        })
    };
    let single = loss(vec![vec![2.0, 0.0]], vec![0]);
    // oracle: log(1 + 2e^-2)
    assert!((single - 0.239_544_766_221_884_53).abs() < 1e-14);
    let double = loss(vec![vec![2.0, 0.0], vec![2.0, 0.0]], vec![0, 0]);
    assert!((single - double).abs() < 1e-15);
}

#[test]
fn combined_is_convex_mix_and_degenerates_at_the_ends() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z0 = random(&mut rng, 6, 4);
    let w0 = random(&mut rng, 3, 4);
    let labels = [0, 1, 2, 0, 1, 2];
    let run = |alpha: f64| {
        let mut t = Tape::new();
        let z = t.constant(z0.clone());
        let w = t.constant(w0.clone());
        let cfg = LossConfig {
            alpha,
            ..LossConfig::singletask()
        };
        let comb = nbc_softmax_combined(&mut t, z, &labels, w, &cfg).unwrap();
        let sce = softmax_cross_entropy(&mut t, z, &labels, w).unwrap();
        let (means, _) = class_mean_block(&mut t, z, &labels).unwrap();
        let neg = negative_block_term(&mut t, means, &cfg).unwrap().loss;
        (t.value(comb).item(), t.value(sce).item(), t.value(neg).item())
    };
    let (c1, s, _) = run(1.0);
    // equal counts over all classes: bit-for-bit
    assert_eq!(c1.to_bits(), s.to_bits());
    let (c0, _, n) = run(0.0);
    assert_eq!(c0.to_bits(), n.to_bits());
    let (c, s, n) = run(0.5);
    assert!((c - (0.5 * s + 0.5 * n)).abs() < 1e-15);

    let mut t = Tape::new();
    let a = t.constant(Tensor::scalar(1.0));
    let b = t.constant(Tensor::scalar(0.4));
    let mixed = nbc_core::losses::combine(&mut t, a, b, 0.5).unwrap();
    assert!((t.value(mixed).item() - 0.7).abs() < 1e-15);
}

fn margin_case(build: fn(&mut Tape, Var, &[usize], Var, f64, f64) -> nbc_core::losses::Result<Var>, m: f64) -> f64 {
    eval(|t| {
        // target cos = 1, other class cos = 0
        let z = t.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let w = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        build(t, z, &[0], w, 1.0, m).unwrap()
    })
}

#[test]
fn cosface_direct_evaluation() {
    assert!((margin_case(cosface_loss, 0.0) - 0.313_261_687_518_222_86).abs() < 1e-14);
    assert!((margin_case(cosface_loss, 0.35) - 0.420_055_335_702_715_2).abs() < 1e-14);
}

#[test]
fn cosface_without_margin_is_normalized_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (z0, w0) = (random(&mut rng, 5, 3), random(&mut rng, 4, 3));
    let labels = [0, 3, 1, 1, 2];
    let mut t = Tape::new();
    let z = t.constant(z0);
    let w = t.constant(w0);
    let cf = cosface_loss(&mut t, z, &labels, w, 7.0, 0.0).unwrap();
    let zn = t.l2_normalize_rows(z).unwrap();
    let wn = t.l2_normalize_rows(w).unwrap();
    let zs = t.scale(zn, 7.0).unwrap();
    let sm = softmax_cross_entropy(&mut t, zs, &labels, wn).unwrap();
    assert!((t.value(cf).item() - t.value(sm).item()).abs() < 1e-12);
}

#[test]
fn arcface_direct_evaluation_and_zero_margin() {
    let v = margin_case(arcface_loss, 0.5);
    assert!((v - 0.347_685_444_867_250_7).abs() < 1e-12, "{v}");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (z0, w0) = (random(&mut rng, 5, 3), random(&mut rng, 4, 3));
    let labels = [2, 0, 1, 3, 3];
    let mut t = Tape::new();
    let z = t.constant(z0);
    let w = t.constant(w0);
    let af = arcface_loss(&mut t, z, &labels, w, 30.0, 0.0).unwrap();
    let cf = cosface_loss(&mut t, z, &labels, w, 30.0, 0.0).unwrap();
    assert_eq!(t.value(af).item().to_bits(), t.value(cf).item().to_bits());
}

#[test]
fn arcface_clamps_past_pi() {
    // target almost opposite its class weight: θ ≈ π, θ + m > π
    let v = eval(|t| {
        let z = t.constant(Tensor::from_rows(&[vec![-1.0, 1e-3]]).unwrap());
        let w = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        arcface_loss(t, z, &[0], w, 30.0, 0.5).unwrap()
    });
    assert!(v.is_finite());
}

#[test]
fn margin_losses_reject_negative_margin() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let w = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    assert!(cosface_loss(&mut t, z, &[0], w, 1.0, -0.1).is_err());
    assert!(arcface_loss(&mut t, z, &[0], w, 1.0, -0.1).is_err());
}

#[test]
fn multisimilarity_cases() {
    let params = MultiSimilarityParams::default();
    // single sample: no pairs at all
    let mut t = Tape::new();
    let z = t.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let out = multisimilarity_loss(&mut t, z, &[0], &params).unwrap();
    assert_eq!(out.valid_pairs, 0);
    assert_eq!(t.value(out.loss).item(), 0.0);

    // two samples, different labels, similarity exactly λ = 1
    let mut t = Tape::new();
    let z = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap());
    let out = multisimilarity_loss(&mut t, z, &[0, 1], &params).unwrap();
    assert!((t.value(out.loss).item() - 2f64.ln() / 50.0).abs() < 1e-15);
}

#[test]
fn multisimilarity_duplicates_get_identical_anchor_terms() {
    // Per-anchor terms are read off by putting each anchor in a batch-sized
    // one-hot weighting: compare the batch loss with an anchor and its copy
    // swapped, which must be unchanged.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base = random(&mut rng, 4, 3);
    let mut rows: Vec<Vec<f64>> = (0..4).map(|i| base.row(i).to_vec()).collect();
    rows.extend((0..4).map(|i| base.row(i).to_vec()));
    let labels = [0, 1, 0, 2, 0, 1, 0, 2];
    let mut swapped = rows.clone();
    swapped.swap(1, 5);
    let loss = |rows: &[Vec<f64>]| {
        eval(|t| {
            let z = t.constant(Tensor::from_rows(rows).unwrap());
            multisimilarity_loss(t, z, &labels, &MultiSimilarityParams::default()).unwrap().loss
        })
    };
    assert_eq!(loss(&rows).to_bits(), loss(&swapped).to_bits());
}

#[test]
fn negative_term_costs_c_prime_squared_similarities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (b, classes) in [(200usize, 5usize), (64, 8), (7, 7)] {
        let mut t = Tape::new();
        let z = t.param(random(&mut rng, b, 6));
        let labels: Vec<usize> = (0..b).map(|i| i % classes).collect();
        let (means, _) = class_mean_block(&mut t, z, &labels).unwrap();
        let term = negative_block_term(&mut t, means, &LossConfig::default()).unwrap();
        assert_eq!(term.similarity_evaluations, classes * classes);
        assert!(term.similarity_evaluations < b * classes || b == classes);
    }
}

#[test]
fn every_loss_passes_gradient_check() {
    let labels = [0, 1, 2, 0, 1, 3, 3, 0];
    let cfg = LossConfig::singletask();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![random(&mut rng, 8, 5), random(&mut rng, 4, 5)];
        let checks: [(&str, Box<dyn Fn(&mut Tape, &[Var]) -> nbc_core::tensor::Result<Var>>); 5] = [
            (
                "softmax",
                Box::new(|t, v| Ok(softmax_cross_entropy(t, v[0], &labels, v[1]).map_err(to_tensor)?)),
            ),
            (
                "nbc",
                Box::new(|t, v| Ok(nbc_softmax_combined(t, v[0], &labels, v[1], &cfg).map_err(to_tensor)?)),
            ),
            (
                "cosface",
                Box::new(|t, v| Ok(cosface_loss(t, v[0], &labels, v[1], 4.0, 0.35).map_err(to_tensor)?)),
            ),
            (
                "arcface",
                Box::new(|t, v| Ok(arcface_loss(t, v[0], &labels, v[1], 4.0, 0.5).map_err(to_tensor)?)),
            ),
            (
                "multisimilarity",
                Box::new(|t, v| {
                    let ms = MultiSimilarityParams::default();
                    Ok(multisimilarity_loss(t, v[0], &labels, &ms).map_err(to_tensor)?.loss)
                }),
            ),
        ];
        for (name, f) in &checks {
            let err = finite_difference_check(|t, v| f(t, v), &params, 1e-6, 100, seed).unwrap();
            assert!(err <= 1e-4, "{name} seed {seed}: {err}");
        }
    }
}

fn to_tensor(e: nbc_core::losses::LossError) -> nbc_core::tensor::TensorError {
    nbc_core::tensor::TensorError::InvalidArgument(e.to_string())
}

proptest! {
    #[test]
    fn rescaling_normalized_logits_keeps_the_argmax(
        seed in 0u64..1000,
        k in 0.01f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let z = t.constant(random(&mut rng, 6, 4));
        let w = t.constant(random(&mut rng, 5, 4));
        let cos = t.cosine_similarity(z, w).unwrap();
        let scaled = t.scale(cos, k).unwrap();
        let argmax = |m: &Tensor, i: usize| {
            let row = m.row(i);
            (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b })
        };
        for i in 0..6 {
            prop_assert_eq!(argmax(t.value(cos), i), argmax(t.value(scaled), i));
        }
    }

    #[test]
    fn negative_term_ignores_order_within_a_class(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random(&mut rng, 9, 3);
        let labels = [0, 1, 2, 0, 1, 2, 0, 1, 2];
        let cfg = LossConfig::default();
        let a = nbc_negative_term(&class_means(&z, &labels).unwrap(), &cfg).unwrap();
        // permute the class-0 rows (0, 3, 6)
        let mut rows: Vec<Vec<f64>> = (0..9).map(|i| z.row(i).to_vec()).collect();
        rows.swap(0, 6);
        rows.swap(3, 6);
        let zp = Tensor::from_rows(&rows).unwrap();
        let b = nbc_negative_term(&class_means(&zp, &labels).unwrap(), &cfg).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn negative_term_grows_with_pair_similarity(
        phi_small in 0.0f64..1.5,
        gap in 0.01f64..1.5,
        tau in 0.05f64..2.0,
        c_scale in 0.1f64..5.0,
    ) {
        // a and b move in the plane orthogonal to c, so only sim(a, b) changes.
        let term = |phi: f64| {
            let rows = vec![
                vec![phi.cos(), phi.sin(), 0.0],
                vec![1.0, 0.0, 0.0],
                vec![0.0, 0.0, c_scale],
            ];
            let z = Tensor::from_rows(&rows).unwrap();
            let cfg = LossConfig { tau, ..LossConfig::default() };
            nbc_negative_term(&class_means(&z, &[0, 1, 2]).unwrap(), &cfg).unwrap()
        };
        let closer = term(phi_small);
        let farther = term(phi_small + gap);
        prop_assert!(closer >= farther);
    }
}

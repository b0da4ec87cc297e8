use nbc_core::retrieval::{
    euclidean, evaluate, mean_reciprocal_rank, rank_all, rank_by_similarity, recall_at_k, Measure, DEFAULT_KS,
};
use nbc_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_embeddings(n: usize, d: usize, authors: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|i| i % authors).collect();
    (Tensor::matrix(n, d, data).unwrap(), labels)
}

/// Ranks computed by counting, for every candidate, how many others beat it.
fn oracle(z: &Tensor, authors: &[usize], measure: Measure, ks: &[usize]) -> (f64, Vec<f64>) {
    let n = z.rows();
    let sim = |a: usize, b: usize| -> f64 {
        let (x, y) = (z.row(a), z.row(b));
        match measure {
            Measure::Cosine => {
                let ux: Vec<f64> = {
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    x.iter().map(|v| v / norm).collect()
                };
                let uy: Vec<f64> = {
                    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                    y.iter().map(|v| v / norm).collect()
                };
                ux.iter().zip(&uy).map(|(a, b)| a * b).sum()
            }
            Measure::Euclidean => -x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
        }
    };
    let mut first_ranks = Vec::new();
    for q in 0..n {
        let mut best: Option<usize> = None;
        for j in (0..n).filter(|&j| j != q && authors[j] == authors[q]) {
            let sj = sim(q, j);
            let beaten_by = (0..n)
                .filter(|&i| i != q && i != j)
                .filter(|&i| {
                    let si = sim(q, i);
                    si > sj || (si == sj && i < j)
                })
                .count();
            let rank = beaten_by + 1;
            best = Some(best.map_or(rank, |b| b.min(rank)));
        }
        if let Some(r) = best {
            first_ranks.push(r);
        }
    }
    let m = first_ranks.len() as f64;
    let mrr = first_ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / m;
    let recalls = ks
        .iter()
        .map(|&k| first_ranks.iter().filter(|&&r| r <= k).count() as f64 / m)
        .collect();
    (mrr, recalls)
}

fn check_against_oracle(n: usize, authors: usize, seed: u64) {
    let (z, labels) = random_embeddings(n, 8, authors, seed);
    for measure in [Measure::Cosine, Measure::Euclidean] {
        let report = evaluate(&z, &labels, measure).unwrap();
        let (mrr, recalls) = oracle(&z, &labels, measure, &DEFAULT_KS);
        assert_eq!(report.mrr, mrr, "{measure:?}");
        for (k, r) in DEFAULT_KS.iter().zip(recalls) {
            assert_eq!(report.recall_at(*k).unwrap(), r, "{measure:?} R@{k}");
        }
    }
}

#[test]
fn matches_oracle_on_small_sets() {
    for seed in 0..5 {
        check_against_oracle(20, 4, seed);
    }
}

#[test]
fn matches_oracle_on_200_embeddings() {
    check_against_oracle(200, 10, 42);
}

#[test]
fn cosine_and_euclidean_agree_on_the_sphere() {
    let (z, labels) = random_embeddings(30, 5, 3, 1);
    let rows: Vec<Vec<f64>> = (0..z.rows())
        .map(|i| {
            let r = z.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let unit = Tensor::from_rows(&rows).unwrap();
    let a = rank_all(&unit, &labels, Measure::Cosine).unwrap();
    let b = rank_all(&unit, &labels, Measure::Euclidean).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.ranked, y.ranked);
    }
}

#[test]
fn full_depth_recall_is_one() {
    let (z, labels) = random_embeddings(12, 4, 3, 2);
    let r = rank_all(&z, &labels, Measure::Cosine).unwrap();
    assert_eq!(recall_at_k(&r, 11).unwrap(), 1.0);
    assert_eq!(recall_at_k(&r, 100).unwrap(), 1.0);
}

#[test]
fn ranked_lists_are_permutations_with_falling_scores() {
    let (z, labels) = random_embeddings(25, 4, 5, 3);
    for r in rank_all(&z, &labels, Measure::Euclidean).unwrap() {
        let mut ids = r.ranked.clone();
        ids.sort_unstable();
        assert_eq!(ids, (0..25).filter(|&i| i != r.query_id).collect::<Vec<_>>());
        assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
    }
}

fn vec3() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 3)
}

proptest! {
    #[test]
    fn euclidean_is_a_metric(a in vec3(), b in vec3(), c in vec3()) {
        prop_assert_eq!(euclidean(&a, &a), 0.0);
        prop_assert!(euclidean(&a, &b) >= 0.0);
        prop_assert_eq!(euclidean(&a, &b), euclidean(&b, &a));
        prop_assert!(euclidean(&a, &c) <= euclidean(&a, &b) + euclidean(&b, &c) + 1e-12);
    }

    #[test]
    fn recall_grows_with_k_and_bounds_mrr(seed in 0u64..1000) {
        let (z, labels) = random_embeddings(16, 3, 4, seed);
        let r = rank_all(&z, &labels, Measure::Cosine).unwrap();
        let rs: Vec<f64> = (1..=15).map(|k| recall_at_k(&r, k).unwrap()).collect();
        prop_assert!(rs.windows(2).all(|w| w[0] <= w[1]));
        let mrr = mean_reciprocal_rank(&r).unwrap();
        prop_assert!(mrr >= rs[0]);
        prop_assert!(mrr <= 1.0);
    }

    #[test]
    fn cosine_rankings_ignore_rescaling(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let (z, labels) = random_embeddings(12, 4, 3, seed);
        let scaled = z.map(|v| v * scale);
        let a = rank_all(&z, &labels, Measure::Cosine).unwrap();
        let b = rank_all(&scaled, &labels, Measure::Cosine).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.ranked, &y.ranked);
        }
    }
}

#[test]
fn single_query_rank_four() {
    let q = [1.0, 0.0];
    let c: Vec<[f64; 2]> = vec![[1.0, 0.1], [1.0, 0.2], [1.0, 0.3], [1.0, 0.4]];
    let cands: Vec<(usize, &[f64])> = c.iter().enumerate().map(|(i, v)| (i, v.as_slice())).collect();
    let r = rank_by_similarity(&q, &cands, Measure::Cosine).unwrap();
    assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
}

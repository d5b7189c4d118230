//! Property tests over the numeric invariants.

use proptest::prelude::*;

use fedfs::client::{make_batches, ClientUpdate};
use fedfs::encoder::{EncoderConfig, EncoderParams};
use fedfs::eval::{auroc, histogram_overlap, tpir_at_fpir, ScoreSet};
use fedfs::losses::adaptive_soft_labels;
use fedfs::server::fedavg;
use fedfs::tensor::{cosine_similarity, softmax, Tensor, NORM_EPS};

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_probability_vector(values in prop::collection::vec(-300.0f64..300.0, 1..12)) {
        let p = softmax(&values).unwrap();
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
    }

    #[test]
    fn cosine_symmetric_and_scale_invariant(
        a in finite_vec(6),
        b in finite_vec(6),
        scale in 0.001f64..1000.0,
    ) {
        let ab = cosine_similarity(&a, &b, NORM_EPS);
        let ba = cosine_similarity(&b, &a, NORM_EPS);
        prop_assert!((ab - ba).abs() < 1e-12);

        let a_scaled: Vec<f64> = a.iter().map(|x| x * scale).collect();
        let scaled = cosine_similarity(&a_scaled, &b, NORM_EPS);
        if a.iter().any(|&x| x != 0.0) && b.iter().any(|&x| x != 0.0) {
            prop_assert!((ab - scaled).abs() < 1e-9, "{ab} vs {scaled}");
        }
    }

    #[test]
    fn soft_label_rows_are_distributions(
        n in 2usize..7,
        k_raw in 1usize..6,
        gamma in 0.1f64..5.0,
        exponent in 0.2f64..3.0,
        seed in any::<u64>(),
    ) {
        let k = k_raw.min(n - 1);
        let mut rng = fedfs::rng::SplitMix64::new(seed);
        let fused = Tensor::new(&[n, 4], rng.gauss_vec(n * 4)).unwrap();
        let reference = Tensor::new(&[n, 2], rng.gauss_vec(n * 2)).unwrap();
        let labels = adaptive_soft_labels(&fused, &reference, k, gamma, exponent).unwrap();
        for i in 0..n {
            let row = labels.alpha.row(i);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            let nonzero = labels.beta.row(i).iter().filter(|&&b| b != 0.0).count();
            prop_assert!(nonzero <= k + 1);
        }
    }

    #[test]
    fn auroc_in_range_and_tie_symmetric(
        pos in prop::collection::vec(0.0f64..1.0, 1..20),
        neg in prop::collection::vec(0.0f64..1.0, 1..20),
    ) {
        let a = auroc(&pos, &neg).unwrap();
        let b = auroc(&neg, &pos).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tpir_monotone_in_fpir(seed in any::<u64>()) {
        let mut rng = fedfs::rng::SplitMix64::new(seed);
        let scores = ScoreSet {
            mated: (0..25).map(|_| (rng.next_f64(), rng.next_f64() < 0.5)).collect(),
            non_mated: (0..100).map(|_| rng.next_f64()).collect(),
        };
        let mut last = 0.0;
        for fpir in [0.02, 0.1, 0.25, 0.5, 0.9] {
            let t = tpir_at_fpir(&scores, fpir).unwrap();
            prop_assert!(t >= last, "tpir {t} < {last} at fpir {fpir}");
            last = t;
        }
    }

    #[test]
    fn histogram_overlap_in_unit_interval(
        pos in prop::collection::vec(-1.0f64..1.0, 1..60),
        neg in prop::collection::vec(-1.0f64..1.0, 1..60),
    ) {
        let h = histogram_overlap(&pos, &neg, 64).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&h.overlap));
    }

    #[test]
    fn fedavg_convex_hull_and_permutation(
        params in prop::collection::vec((-10.0f64..10.0, 1usize..40), 1..6),
        rotation in any::<usize>(),
    ) {
        let config = EncoderConfig { input_dim: 1, hidden_dims: vec![], embed_dim: 1 };
        let updates: Vec<ClientUpdate> = params
            .iter()
            .enumerate()
            .map(|(i, (value, samples))| ClientUpdate {
                client_id: i as u32 + 1,
                global: EncoderParams::from_flat(config.clone(), &[*value, -value]).unwrap(),
                num_samples: *samples,
                loss_trace: Vec::new(),
            })
            .collect();
        let avg = fedavg(&updates).unwrap().to_flat();
        let lo = params.iter().map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        let hi = params.iter().map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(avg[0] >= lo - 1e-12 && avg[0] <= hi + 1e-12);

        let mut rotated = updates.clone();
        rotated.rotate_left(rotation % updates.len());
        prop_assert_eq!(fedavg(&rotated).unwrap().to_flat(), avg);
    }

    #[test]
    fn batching_partitions_the_rows(
        n in 2usize..40,
        batch in 2usize..10,
        seed in any::<u64>(),
    ) {
        let train = Tensor::new(&[n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        let batches = make_batches(&train, batch, seed).unwrap();
        let mut seen: Vec<i64> = batches
            .iter()
            .flat_map(|b| b.data().iter().map(|&x| x as i64).collect::<Vec<_>>())
            .collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n as i64).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| b.rows() >= 2));
    }
}

// chance behavior, asserted statistically rather than property-wise
#[test]
fn tpir_matches_fpir_under_identical_distributions() {
    let mut rng = fedfs::rng::SplitMix64::new(424242);
    let scores = ScoreSet {
        mated: (0..20_000).map(|_| (rng.next_f64(), true)).collect(),
        non_mated: (0..20_000).map(|_| rng.next_f64()).collect(),
    };
    for fpir in [0.1, 0.01] {
        let t = tpir_at_fpir(&scores, fpir).unwrap();
        assert!(
            (t - fpir).abs() < 0.25 * fpir + 0.005,
            "tpir {t} far from chance level {fpir}"
        );
    }
}

#[test]
fn auroc_is_half_under_identical_distributions() {
    let mut rng = fedfs::rng::SplitMix64::new(99);
    let pos: Vec<f64> = (0..5_000).map(|_| rng.next_f64()).collect();
    let neg: Vec<f64> = (0..5_000).map(|_| rng.next_f64()).collect();
    let a = auroc(&pos, &neg).unwrap();
    assert!((a - 0.5).abs() < 0.02, "auroc {a}");
}

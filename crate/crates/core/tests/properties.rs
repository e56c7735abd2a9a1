//! Randomized invariants.

mod common;

use common::{brute_conv, random_references, random_unit, record, unit};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xdomain::adaptive_conv::{apply, block_diagonal};
use xdomain::conv::{conv2d_forward, Conv2dSpec};
use xdomain::datamodel::{
    pose_distance, AppearanceFilter, ContentFeature, Embedding, PoseAnnotation,
};
use xdomain::localization::{evaluate_embeddings, retrieve, Query, RecallReport, Reference};
use xdomain::losses::{cons_content, nce};
use xdomain::pairing::{mine_positives, refresh_source_target};
use xdomain::tensor::Tensor;

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `(channels, groups, k, h, w)` with `groups | channels` and odd `k`.
fn conv_shape() -> impl Strategy<Value = (usize, usize, usize, usize, usize)> {
    (1usize..=3, 1usize..=3, 0usize..=2, 3usize..=7, 3usize..=7)
        .prop_map(|(per_group, groups, kk, h, w)| (per_group * groups, groups, 2 * kk + 1, h, w))
}

fn filter(c: usize, groups: usize, k: usize, bias: bool, rng: &mut ChaCha8Rng) -> AppearanceFilter {
    let w = Tensor::randn(&[c, c / groups, k, k], 1.0, rng);
    let b = bias.then(|| Tensor::randn(&[c], 1.0, rng));
    AppearanceFilter::new(w, groups, b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grouped_conv_matches_brute_force_and_block_diagonal(
        (c, groups, k, h, w) in conv_shape(),
        bias in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = seeded(seed);
        let f = ContentFeature::new(Tensor::randn(&[c, h, w], 1.0, &mut rng)).unwrap();
        let filt = filter(c, groups, k, bias, &mut rng);
        let out = apply(&f, &filt).unwrap();
        let brute = brute_conv(f.tensor(), filt.weights(), filt.bias(), 1, k / 2, groups);
        let dense = conv2d_forward(f.tensor(), &block_diagonal(&filt), filt.bias(), Conv2dSpec::same(k, 1)).unwrap();
        prop_assert!(out.tensor().max_abs_diff(&brute) < 1e-9);
        prop_assert!(out.tensor().max_abs_diff(&dense) < 1e-9);
    }

    #[test]
    fn strided_conv_matches_brute_force(
        c_in in 1usize..=4, c_out in 1usize..=4, k in 1usize..=4,
        stride in 1usize..=3, pad in 0usize..=2, h in 4usize..=9, w in 4usize..=9,
        seed in any::<u64>(),
    ) {
        let mut rng = seeded(seed);
        let x = Tensor::randn(&[c_in, h, w], 1.0, &mut rng);
        let wt = Tensor::randn(&[c_out, c_in, k, k], 1.0, &mut rng);
        let y = conv2d_forward(&x, &wt, None, Conv2dSpec::new(stride, pad, 1)).unwrap();
        prop_assert!(y.max_abs_diff(&brute_conv(&x, &wt, None, stride, pad, 1)) < 1e-9);
    }

    #[test]
    fn adaptive_conv_is_affine_in_features(
        (c, groups, k, h, w) in conv_shape(),
        alpha in -2.0f64..2.0, beta in -2.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let mut rng = seeded(seed);
        let f1 = Tensor::randn(&[c, h, w], 1.0, &mut rng);
        let f2 = Tensor::randn(&[c, h, w], 1.0, &mut rng);
        let filt = filter(c, groups, k, true, &mut rng);
        let run = |t: &Tensor| apply(&ContentFeature::new(t.clone()).unwrap(), &filt).unwrap().tensor().clone();
        let mixed = f1.zip_map(&f2, |a, b| alpha * a + beta * b);
        let bias = filt.bias().unwrap();
        let plane = h * w;
        let lhs = run(&mixed);
        let (y1, y2) = (run(&f1), run(&f2));
        let mut rhs = y1.zip_map(&y2, |a, b| alpha * a + beta * b);
        for (i, v) in rhs.data_mut().iter_mut().enumerate() {
            *v -= (alpha + beta - 1.0) * bias.data()[i / plane];
        }
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-6);
    }

    #[test]
    fn nce_ignores_negative_order(n in 1usize..12, dim in 2usize..10, tau in 0.05f64..2.0, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let q = random_unit(dim, &mut rng);
        let p = random_unit(dim, &mut rng);
        let mut negs: Vec<Embedding> = (0..n).map(|_| random_unit(dim, &mut rng)).collect();
        let before = nce(&q, &p, &negs, tau).unwrap();
        negs.shuffle(&mut rng);
        // Summation order changes rounding only.
        prop_assert!((before - nce(&q, &p, &negs, tau).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn nce_decreases_with_positive_similarity(
        angles in prop::collection::vec(0.0f64..3.1, 2..6),
        tau in 0.05f64..1.0,
        seed in any::<u64>(),
    ) {
        // z_pos(θ) = cos θ·e0 + sin θ·e1, so z_q·z_pos = cos θ with z_q = e0.
        let mut rng = seeded(seed);
        let dim = 6;
        let q = unit(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let negs: Vec<Embedding> = (0..4).map(|_| random_unit(dim, &mut rng)).collect();
        let mut sorted = angles.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
        let losses: Vec<f64> = sorted
            .iter()
            .map(|t| {
                let p = unit(vec![t.cos(), t.sin(), 0.0, 0.0, 0.0, 0.0]);
                nce(&q, &p, &negs, tau).unwrap()
            })
            .collect();
        // Larger angle, smaller similarity, larger loss.
        for w in losses.windows(2) {
            prop_assert!(w[0] < w[1], "{:?}", losses);
        }
    }

    #[test]
    fn content_consistency_is_translation_invariant(
        shift in -3.0f64..3.0,
        m_c in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = seeded(seed);
        let t: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[2, 3, 3], 1.0, &mut rng)).collect();
        let offset = Tensor::randn(&[2, 3, 3], 1.0, &mut rng).scale(shift);
        let cf = |x: &Tensor| ContentFeature::new(x.clone()).unwrap();
        let moved: Vec<Tensor> = t.iter().map(|x| x.zip_map(&offset, |a, b| a + b)).collect();
        let a = cons_content(&cf(&t[0]), &cf(&t[1]), &cf(&t[2]), m_c).unwrap();
        let b = cons_content(&cf(&moved[0]), &cf(&moved[1]), &cf(&moved[2]), m_c).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mining_ignores_common_rigid_motion(
        x in -50.0f64..50.0, y in -50.0f64..50.0, yaw in -180.0f64..180.0,
        seed in any::<u64>(),
    ) {
        let mut rng = seeded(seed);
        let recs = random_references(30, &mut rng);
        let emb: Vec<Embedding> = (0..30).map(|_| random_unit(8, &mut rng)).collect();
        let by = PoseAnnotation::planar(x, y, yaw);
        let moved: Vec<_> = recs
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.pose = r.pose.map(|p| p.transformed(&by));
                r
            })
            .collect();
        let a = mine_positives(&recs, &emb, 10, 8.0, 7.0).unwrap();
        let b = mine_positives(&moved, &emb, 10, 8.0, 7.0).unwrap();
        // Skip queries with a candidate on a threshold edge, where rounding
        // in the transform could flip the decision.
        for (i, (pa, pb)) in a.positives.iter().zip(&b.positives).enumerate() {
            let near_edge = a.negatives[i].iter().chain(pa).any(|&j| {
                let (r, t) = pose_distance(&recs[i].pose.unwrap(), &recs[j].pose.unwrap()).unwrap();
                (r - 8.0).abs() < 1e-6 || (t - 7.0).abs() < 1e-6
            });
            if !near_edge {
                prop_assert_eq!(pa, pb);
            }
        }
    }

    #[test]
    fn assignments_always_cross_domains(n in 2usize..40, domains in 2usize..5, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let names = ["day", "dusk", "snow", "night"];
        let recs: Vec<_> = (0..n).map(|i| record(i, names[i % domains], i % domains, None)).collect();
        let emb: Vec<Embedding> = (0..n).map(|_| random_unit(4, &mut rng)).collect();
        for a in refresh_source_target(&recs, &emb).unwrap() {
            prop_assert_ne!(&recs[a.source_idx].domain.name, &recs[a.target_idx].domain.name);
        }
    }

    #[test]
    fn recall_is_monotone_across_buckets(
        errors in prop::collection::vec((0.0f64..30.0, 0.0f64..10.0), 1..50),
    ) {
        let tagged: Vec<(String, (f64, f64))> = errors
            .iter()
            .enumerate()
            .map(|(i, e)| (format!("g{}", i % 3), *e))
            .collect();
        let rep = RecallReport::from_errors(&tagged);
        for g in rep.groups.values().chain(std::iter::once(&rep.overall)) {
            prop_assert!(g.recall.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(g.recall.iter().all(|r| (0.0..=1.0).contains(r)));
        }
    }

    #[test]
    fn retrieval_matches_brute_force_and_ignores_db_order(n in 1usize..30, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let db: Vec<Reference> = (0..n)
            .map(|i| Reference {
                embedding: random_unit(5, &mut rng),
                pose: PoseAnnotation::planar(i as f64, 0.0, 0.0),
            })
            .collect();
        let queries: Vec<Query> = (0..10)
            .map(|i| Query {
                embedding: random_unit(5, &mut rng),
                pose: PoseAnnotation::planar(i as f64 * 0.5, 0.1, 1.0),
                group: "q".into(),
            })
            .collect();
        for q in &queries {
            let sims: Vec<f64> = db.iter().map(|r| q.embedding.similarity(&r.embedding)).collect();
            let best = (0..n).fold(0, |b, i| if sims[i] > sims[b] { i } else { b });
            prop_assert_eq!(retrieve(&q.embedding, &db).unwrap(), best);
        }
        let mut shuffled = db.clone();
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(
            evaluate_embeddings(&queries, &db).unwrap(),
            evaluate_embeddings(&queries, &shuffled).unwrap()
        );
    }

    #[test]
    fn pose_distance_is_symmetric(
        a in (-10.0f64..10.0, -10.0f64..10.0, -180.0f64..180.0),
        b in (-10.0f64..10.0, -10.0f64..10.0, -180.0f64..180.0),
    ) {
        let pa = PoseAnnotation::planar(a.0, a.1, a.2);
        let pb = PoseAnnotation::planar(b.0, b.1, b.2);
        prop_assert_eq!(pose_distance(&pa, &pb).unwrap(), pose_distance(&pb, &pa).unwrap());
        prop_assert_eq!(pose_distance(&pa, &pa).unwrap(), (0.0, 0.0));
    }
}

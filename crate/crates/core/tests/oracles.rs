//! Independent oracles: closed forms, brute-force enumerations and pinned
//! values computed outside this crate.

mod common;

use common::{random_unit, uniform, unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use xdomain::autograd::Tape;
use xdomain::config::TrainConfig;
use xdomain::datamodel::{
    pose_distance, AppearanceFilter, ContentFeature, DomainLabel, Embedding, Image, PoseAnnotation,
};
use xdomain::losses;
use xdomain::pairing::sample_nce_negatives;
use xdomain::synthdata::{
    count_near_pairs, render, trajectory, AppearanceSpec, PoseJitter, SceneSpec,
    DEFAULT_VIEW_EXTENT_M,
};
use xdomain::tensor::Tensor;
use xdomain::trainer::{self, lr_at};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn canonical_render_matches_golden_checksum() {
    let scene = SceneSpec::new(
        7,
        PoseAnnotation::planar(3.0, -2.0, 15.0),
        DEFAULT_VIEW_EXTENT_M,
    );
    let look = AppearanceSpec::canonical(DomainLabel {
        name: "day".into(),
        id: 0,
    });
    let img = render(&scene, &look, (32, 32)).unwrap();
    let mut shades: Vec<u64> = img.data().iter().map(|v| v.to_bits()).collect();
    shades.sort_unstable();
    shades.dedup();
    assert!(shades.len() >= 4, "render is nearly blank");
    let mut h = Sha256::new();
    for v in img.data() {
        h.update(v.to_bits().to_le_bytes());
    }
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(
        hex,
        "51c654a2c3a0762c6d5f7ea359383cf6faeaabd42d4a3c607b099e66e8085b51"
    );
}

#[test]
fn near_pair_count_matches_exhaustive_enumeration() {
    for (seed, jitter) in [
        (1, PoseJitter::default()),
        (
            2,
            PoseJitter {
                step_m: 1.5,
                turn_deg: 6.0,
            },
        ),
    ] {
        let poses = trajectory(200, jitter, seed);
        let mut brute = 0;
        for i in 0..poses.len() {
            for j in i + 1..poses.len() {
                let (r, t) = pose_distance(&poses[i], &poses[j]).unwrap();
                brute += usize::from(r <= 8.0 && t <= 7.0);
            }
        }
        assert!(brute > 0);
        assert_eq!(count_near_pairs(&poses, 8.0, 7.0).unwrap(), brute);
    }
}

#[test]
fn quarter_turn_about_z() {
    let a = PoseAnnotation::planar(1.0, 2.0, 10.0);
    let b = PoseAnnotation::planar(1.0, 2.0, 100.0);
    let (r, t) = pose_distance(&a, &b).unwrap();
    assert!((r - 90.0).abs() < 1e-9 && t == 0.0);
}

#[test]
fn gem_with_large_exponent_approaches_channel_max() {
    // One dominant positive value per channel, the rest small.
    let mut r = rng(11);
    let (c, hw) = (4, 25);
    let mut x = uniform(&[c, 5, 5], 0.0, 0.05, &mut r);
    let maxes = [0.7, 1.3, 2.0, 4.5];
    for (ch, m) in maxes.iter().enumerate() {
        x.data_mut()[ch * hw + ch * 3] = *m;
    }
    let tape = Tape::new();
    let g = tape
        .constant(x)
        .gem_pool(tape.scalar(100.0), 1e-6)
        .unwrap()
        .value();
    for (ch, m) in maxes.iter().enumerate() {
        // (m^p / n)^(1/p) = m · n^(-1/p): 25^(-0.01) ≈ 0.968.
        let v = g.data()[ch];
        assert!((v - m).abs() / m < 0.05, "channel {ch}: {v} vs max {m}");
    }
}

#[test]
fn adversarial_losses_match_scalar_formula() {
    let mut r = rng(12);
    let maps: Vec<Tensor> = (0..3)
        .map(|_| uniform(&[1, 4, 4], 0.01, 0.99, &mut r))
        .collect();
    let mean = |t: &Tensor, f: fn(f64) -> f64| {
        t.data().iter().map(|&p| f(p)).sum::<f64>() / t.numel() as f64
    };
    let nl = |p: f64| -p.ln();
    let nlc = |p: f64| -(1.0 - p).ln();

    let img = losses::adv_image(&maps[0], &maps[1], &maps[2]).unwrap();
    let want_d = mean(&maps[0], nl) + mean(&maps[1], nl) + mean(&maps[2], nlc);
    assert!((img.loss_d - want_d).abs() < 1e-12);
    assert!((img.loss_g - mean(&maps[2], nl)).abs() < 1e-12);

    let app = losses::adv_appearance(&maps[0], &maps[1]).unwrap();
    assert!((app.loss_d - (mean(&maps[0], nl) + mean(&maps[1], nlc))).abs() < 1e-12);
    assert!((app.loss_g - mean(&maps[1], nl)).abs() < 1e-12);
}

#[test]
fn reconstruction_is_mean_absolute_difference() {
    let mut r = rng(13);
    let mk = |r: &mut ChaCha8Rng| {
        Image::new(6, 5, (0..90).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let (a, b) = (mk(&mut r), mk(&mut r));
    let brute = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / 90.0;
    assert!((losses::rec_self(&a, &b).unwrap() - brute).abs() < 1e-12);
    assert!((losses::rec_cycle(&a, &b).unwrap() - brute).abs() < 1e-12);
}

#[test]
fn content_hinge_plugged_into_formula() {
    // f_s = f_st and mean squared distance to f_neg of 0.05 with m_c = 0.1.
    let f = ContentFeature::new(Tensor::zeros(&[2, 2, 5])).unwrap();
    let neg = ContentFeature::new(Tensor::full(&[2, 2, 5], 0.05f64.sqrt())).unwrap();
    let v = losses::cons_content(&f, &f, &neg, 0.1).unwrap();
    assert!((v - 0.05).abs() < 1e-15);
}

#[test]
fn appearance_hinge_matches_cosine_formula() {
    let mut r = rng(14);
    let cos = |a: &Tensor, b: &Tensor| a.dot(b) / (a.norm() * b.norm());
    for _ in 0..20 {
        let ws: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&[3, 1, 3, 3], 1.0, &mut r))
            .collect();
        let f: Vec<AppearanceFilter> = ws
            .iter()
            .map(|w| AppearanceFilter::new(w.clone(), 3, None).unwrap())
            .collect();
        let want = (1.0 - cos(&ws[0], &ws[1]) + cos(&ws[0], &ws[2])).max(0.0);
        assert!((losses::cons_appearance(&f[0], &f[1], &f[2]).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn nce_matches_high_precision_reference() {
    // z_q = e0, z_pos·z_q = 0.6, negative similarities 0.2, -0.1, 0.5, τ = 0.5.
    // Reference from 50-digit arithmetic.
    let e = |i: usize, s: f64| {
        let mut v = vec![0.0; 5];
        v[0] = s;
        v[i] = (1.0 - s * s).sqrt();
        unit(v)
    };
    let q = unit(vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    let negs = [e(2, 0.2), e(3, -0.1), e(4, 0.5)];
    let v = losses::nce(&q, &e(1, 0.6), &negs, 0.5).unwrap();
    assert!((v - 0.922_136_285_739_259_8).abs() < 1e-12, "{v}");
}

#[test]
fn nce_matches_softmax_cross_entropy_on_random_vectors() {
    let mut r = rng(15);
    for _ in 0..20 {
        let q = random_unit(8, &mut r);
        let p = random_unit(8, &mut r);
        let negs: Vec<Embedding> = (0..5).map(|_| random_unit(8, &mut r)).collect();
        let tau = r.random_range(0.05..1.0);
        let logits: Vec<f64> = std::iter::once(&p)
            .chain(&negs)
            .map(|e| q.similarity(e) / tau)
            .collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let want = lse - logits[0];
        assert!((losses::nce(&q, &p, &negs, tau).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn negative_sampling_is_uniform() {
    let (n, excluded, k, draws) = (21usize, [3usize, 9], 4usize, 10_000usize);
    let mut counts = vec![0usize; n];
    for d in 0..draws {
        for j in sample_nce_negatives(0, n, &excluded, k, d as u64).unwrap() {
            counts[j] += 1;
        }
    }
    let eligible = n - 1 - excluded.len();
    let p = k as f64 / eligible as f64;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (j, &c) in counts.iter().enumerate() {
        if j == 0 || excluded.contains(&j) {
            assert_eq!(c, 0, "index {j} must never be drawn");
        } else {
            assert!(
                (c as f64 - mean).abs() <= 3.0 * sigma,
                "index {j}: {c} vs {mean} ± {sigma}"
            );
        }
    }
}

#[test]
fn weight_init_has_configured_spread() {
    let cfg = TrainConfig::default();
    let params = trainer::init_params(&cfg, 64);
    let mut w = Vec::new();
    for (_, set) in params.iter() {
        for (name, t) in set.entries() {
            if !name.ends_with(".b") && name != "gem.p" {
                w.extend_from_slice(t.data());
            }
        }
    }
    assert!(w.len() >= 100_000, "only {} weights", w.len());
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((std - 0.001).abs() < 0.05 * 0.001, "std {std}");
}

#[test]
fn schedule_flat_then_linear_decay() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg).unwrap(), 2e-4);
    assert_eq!(lr_at(34, &cfg).unwrap(), 2e-4);
    // 8th decay epoch of 15.
    assert!((lr_at(42, &cfg).unwrap() - 2e-4 * (1.0 - 8.0 / 15.0)).abs() < 1e-18);
    assert!(lr_at(50, &cfg).is_err());
}

#[test]
fn contrastive_head_gradient_reaches_gem_exponent() {
    let mut cfg = TrainConfig::default();
    cfg.content_channels = 6;
    cfg.embed_dim = 5;
    cfg.head_hidden = 7;
    cfg.hyper.init_std = 0.5;
    let mut params = trainer::init_params(&cfg, 64);
    let mut r = rng(16);
    let feature = uniform(&[6, 4, 4], 0.1, 2.0, &mut r);
    let probe = Tensor::randn(&[5], 1.0, &mut r);

    let value = |h: &xdomain::networks::ParamSet| {
        let tape = Tape::new();
        let b = h.bind(&tape, false);
        let z = xdomain::networks::embed(&b, tape.constant(feature.clone())).unwrap();
        z.dot(tape.constant(probe.clone())).item()
    };
    let tape = Tape::new();
    let b = params.h.bind(&tape, true);
    let z = xdomain::networks::embed(&b, tape.constant(feature.clone())).unwrap();
    let grads = tape.backward(z.dot(tape.constant(probe.clone()))).unwrap();
    let analytic = grads.get(b.get("gem.p").unwrap()).unwrap().item();
    assert!(analytic.abs() > 1e-6, "gradient vanished: {analytic}");

    let eps = 1e-4;
    let mut shift = |d: f64| {
        let slot = params
            .h
            .entries_mut()
            .iter_mut()
            .find(|(n, _)| n == "gem.p")
            .unwrap();
        slot.1.data_mut()[0] += d;
        value(&params.h)
    };
    let up = shift(eps);
    let down = shift(-2.0 * eps);
    let numeric = (up - down) / (2.0 * eps);
    assert!(
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()) < 1e-3,
        "{analytic} vs {numeric}"
    );
}

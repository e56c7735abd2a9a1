#![allow(dead_code)]

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use xdomain::autograd::{Tape, Var};
use xdomain::config::TrainConfig;
use xdomain::datamodel::{DatasetRecord, DomainLabel, Embedding, PoseAnnotation};
use xdomain::synthdata::{generate_dataset, AppearanceSpec, GenerateConfig, GeneratedDataset};
use xdomain::tensor::Tensor;

pub const FD_EPS: f64 = 1e-3;

/// Largest relative error between analytic and central finite-difference
/// gradients of `f` over all inputs, measured per input as
/// `‖g_a − g_fd‖ / max(‖g_a‖, ‖g_fd‖, 1e-8)`.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> xdomain::Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&tape, &vars).expect("forward").item()
    };
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let grads = tape
        .backward(f(&tape, &vars).expect("forward"))
        .expect("backward");
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut numeric = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].numel() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += FD_EPS;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * FD_EPS;
            let down = eval(&xs);
            numeric.data_mut()[i] = (up - down) / (2.0 * FD_EPS);
        }
        let diff = analytic.zip_map(&numeric, |a, b| a - b).norm();
        let scale = analytic.norm().max(numeric.norm()).max(1e-8);
        worst = worst.max(diff / scale);
    }
    worst
}

/// Nested-loop grouped cross-correlation, `C×H×W` input, `Co×Cg×k×k` weight.
pub fn brute_conv(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor {
    let [c_in, h, wd] = x.shape().try_into().unwrap();
    let [c_out, cin_g, k, _] = w.shape().try_into().unwrap();
    assert_eq!(cin_g * groups, c_in);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let cout_g = c_out / groups;
    let mut y = vec![0.0; c_out * ho * wo];
    for co in 0..c_out {
        let g = co / cout_g;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                for j in 0..cin_g {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                continue;
                            }
                            let ci = g * cin_g + j;
                            acc += w.data()[((co * cin_g + j) * k + ky) * k + kx]
                                * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
                y[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(&[c_out, ho, wo], y).unwrap()
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

pub fn unit(v: Vec<f64>) -> Embedding {
    Embedding::normalized(v).unwrap()
}

pub fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Embedding {
    unit(randn(&[dim], rng).into_data())
}

pub fn record(i: usize, domain: &str, id: usize, pose: Option<PoseAnnotation>) -> DatasetRecord {
    DatasetRecord {
        image_path: format!("{domain}_{i}.png"),
        domain: DomainLabel {
            name: domain.into(),
            id,
        },
        pose,
        is_reference: pose.is_some(),
        scene: Some(format!("s{i}")),
    }
}

/// Reference records scattered over a small area so that many pose pairs
/// fall within mining thresholds.
pub fn random_references(n: usize, rng: &mut ChaCha8Rng) -> Vec<DatasetRecord> {
    (0..n)
        .map(|i| {
            let pose = PoseAnnotation::planar(
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(-30.0..30.0),
            );
            record(i, "day", 0, Some(pose))
        })
        .collect()
}

/// Preset domains in order, ids by position.
pub fn domains(names: &[&str]) -> Vec<AppearanceSpec> {
    names
        .iter()
        .enumerate()
        .map(|(i, n)| AppearanceSpec::preset(n, i).unwrap())
        .collect()
}

pub fn dataset(
    dir: &Path,
    scenes: usize,
    names: &[&str],
    size: usize,
    seed: u64,
) -> GeneratedDataset {
    let mut cfg = GenerateConfig::new(scenes, domains(names));
    cfg.size = (size, size);
    cfg.seed = seed;
    generate_dataset(&cfg, dir).unwrap()
}

/// A 32×32 model small enough for a few epochs in seconds.
pub fn tiny_config(out_dir: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for (k, v) in [
        ("image_size", "32"),
        ("content_channels", "8"),
        ("ea_hidden", "16"),
        ("embed_dim", "16"),
        ("head_hidden", "16"),
        ("disc_channels", "8"),
        ("n_neg", "4"),
        ("epochs_flat", "2"),
        ("epochs_decay", "2"),
        ("steps_per_epoch", "3"),
        ("checkpoint_every", "1"),
        ("seed", "17"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.out_dir = out_dir.to_path_buf();
    cfg
}

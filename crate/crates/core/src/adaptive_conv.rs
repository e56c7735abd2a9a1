//! Appearance filters: generated from a target image's backbone features and
//! applied to content features by grouped convolution, `f ⊗ W`.
//!
//! With `groups = c` the filter is depthwise: one `k×k` kernel per content
//! channel, `c_out = c`.

use crate::autograd::{Tape, Var};
use crate::backbone::FeatureMap;
use crate::conv::{conv2d_forward, Conv2dSpec};
use crate::datamodel::{AppearanceFilter, ContentFeature, Image};
use crate::error::{Error, Result};
use crate::networks::{Bound, Model, NetConfig, ParamSet};
use crate::tensor::Tensor;

/// Length of the filter encoder's output vector (weights, then bias).
pub fn encoder_output_dim(cfg: &NetConfig) -> usize {
    let weights: usize = cfg.filter_shape().iter().product();
    weights
        + if cfg.filter_bias {
            cfg.content_channels
        } else {
            0
        }
}

/// Differentiable `E_a`: pooled backbone features → filter weights and bias.
pub fn filter_vars<'t>(
    cfg: &NetConfig,
    features: Var<'t>,
    e_a: &Bound<'t>,
) -> Result<(Var<'t>, Option<Var<'t>>)> {
    let w1 = e_a.get("fc1.w")?;
    let expected = w1.shape()[1];
    let shape = features.shape();
    if shape.len() != 3 || shape[0] != expected {
        return Err(Error::validation(format!(
            "filter encoder expects {expected}-channel features, got {shape:?}"
        )));
    }
    let pooled = features.global_avg_pool();
    let hidden = pooled.linear(w1, Some(e_a.get("fc1.b")?))?.relu();
    let out = hidden.linear(e_a.get("fc2.w")?, Some(e_a.get("fc2.b")?))?;
    let wshape = cfg.filter_shape();
    let n_w: usize = wshape.iter().product();
    if out.shape() != [encoder_output_dim(cfg)] {
        return Err(Error::validation(format!(
            "filter encoder output {:?} does not match config ({})",
            out.shape(),
            encoder_output_dim(cfg)
        )));
    }
    let weights = out.slice_flat(0, &wshape)?;
    let bias = if cfg.filter_bias {
        Some(out.slice_flat(n_w, &[cfg.content_channels])?)
    } else {
        None
    };
    Ok((weights, bias))
}

pub fn generate_filter(
    cfg: &NetConfig,
    features: &FeatureMap,
    e_a: &ParamSet,
) -> Result<AppearanceFilter> {
    let tape = Tape::new();
    let b = e_a.bind(&tape, false);
    let (w, bias) = filter_vars(cfg, tape.constant(features.tensor().clone()), &b)?;
    AppearanceFilter::new(
        (*w.value()).clone(),
        cfg.filter_groups,
        bias.map(|b| (*b.value()).clone()),
    )
}

fn check_geometry(f_shape: &[usize], w_shape: &[usize], groups: usize) -> Result<Conv2dSpec> {
    let [c_out, c_in_g, k, k2] = *w_shape else {
        return Err(Error::validation(format!(
            "filter must be 4-D, got {w_shape:?}"
        )));
    };
    if k != k2 {
        return Err(Error::validation("filter kernel must be square"));
    }
    if k % 2 == 0 {
        return Err(Error::Config(format!(
            "filter size {k} is even; same padding is undefined"
        )));
    }
    if f_shape.len() != 3 {
        return Err(Error::validation(format!(
            "content feature must be c×h×w, got {f_shape:?}"
        )));
    }
    if groups == 0 || c_out % groups != 0 || c_in_g * groups != f_shape[0] {
        return Err(Error::validation(format!(
            "filter {w_shape:?} with {groups} groups cannot be applied to {} channels",
            f_shape[0]
        )));
    }
    Ok(Conv2dSpec::same(k, groups))
}

/// Differentiable `f ⊗ W`.
pub fn apply_vars<'t>(
    f: Var<'t>,
    w: Var<'t>,
    bias: Option<Var<'t>>,
    groups: usize,
) -> Result<Var<'t>> {
    let spec = check_geometry(&f.shape(), &w.shape(), groups)?;
    f.conv2d(w, bias, spec)
}

pub fn apply(f: &ContentFeature, w: &AppearanceFilter) -> Result<ContentFeature> {
    let spec = check_geometry(f.tensor().shape(), w.weights().shape(), w.groups())?;
    ContentFeature::new(conv2d_forward(f.tensor(), w.weights(), w.bias(), spec)?)
}

/// `G(E_c(source) ⊗ E_a(target))`.
pub fn translate(model: &Model, source: &Image, target: &Image) -> Result<Image> {
    model.translate(source, target)
}

/// Depthwise filter whose centre tap is 1: `apply` returns its input.
pub fn identity_filter(channels: usize, k: usize) -> Result<AppearanceFilter> {
    let mut w = Tensor::zeros(&[channels, 1, k, k]);
    let centre = (k / 2) * k + k / 2;
    for ch in 0..channels {
        w.data_mut()[ch * k * k + centre] = 1.0;
    }
    AppearanceFilter::new(w, channels, Some(Tensor::zeros(&[channels])))
}

/// 1×1 depthwise filter mapping per-channel statistics `(μ_s, σ_s)` onto
/// `(μ_t, σ_t)`: the adaptive-instance-normalization restyling.
pub fn normalization_filter(
    source_mean: &[f64],
    source_std: &[f64],
    target_mean: &[f64],
    target_std: &[f64],
) -> Result<AppearanceFilter> {
    let c = source_mean.len();
    if [source_std.len(), target_mean.len(), target_std.len()] != [c; 3] {
        return Err(Error::validation("statistics vectors differ in length"));
    }
    if source_std.iter().any(|&s| s <= 0.0) {
        return Err(Error::validation(
            "source standard deviations must be positive",
        ));
    }
    let w: Vec<f64> = (0..c).map(|i| target_std[i] / source_std[i]).collect();
    let b: Vec<f64> = (0..c)
        .map(|i| target_mean[i] - w[i] * source_mean[i])
        .collect();
    AppearanceFilter::new(Tensor::new(&[c, 1, 1, 1], w)?, c, Some(Tensor::vector(b)))
}

/// Expands a grouped filter to the equivalent dense `(c_out, c_in, k, k)`
/// block-diagonal filter.
pub fn block_diagonal(w: &AppearanceFilter) -> Tensor {
    let [c_out, c_in_g, k, _] = *w.weights().shape() else {
        unreachable!("filter is 4-D")
    };
    let c_in = w.in_channels();
    let c_out_g = c_out / w.groups();
    let mut dense = Tensor::zeros(&[c_out, c_in, k, k]);
    let src = w.weights().data();
    let dst = dense.data_mut();
    for o in 0..c_out {
        let g = o / c_out_g;
        for j in 0..c_in_g {
            let i = g * c_in_g + j;
            dst[(o * c_in + i) * k * k..][..k * k]
                .copy_from_slice(&src[(o * c_in_g + j) * k * k..][..k * k]);
        }
    }
    dense
}

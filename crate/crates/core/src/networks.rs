//! The trainable networks: content encoder, appearance filter encoder,
//! generator, image and appearance discriminators, and the contrastive head.
//!
//! Layer shapes are derived from [`NetConfig`] alone:
//!
//! * content encoder: 3×3 stem (c/4), two 4×4 stride-2 convs (c/2, c),
//!   `res_blocks` residual blocks, instance norm after every conv except the
//!   last conv of the final block;
//! * generator: `res_blocks` residual blocks, two (nearest ×2 upsample, 3×3
//!   conv) stages (c/2, c/4), 3×3 output conv and `tanh`; layer norm after
//!   every hidden conv;
//! * discriminators: three 4×4 stride-2 convs (d, 2d, 1), leaky ReLU 0.2,
//!   sigmoid patch map;
//! * contrastive head: GeM pooling with trainable exponent, two linear
//!   layers, L2 normalization;
//! * appearance filter encoder: global average pool, two linear layers,
//!   reshape into the grouped filter (see [`crate::adaptive_conv`]).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::adaptive_conv;
use crate::autograd::{concat, Gradients, Tape, Var};
use crate::backbone::ConvBackbone;
use crate::conv::Conv2dSpec;
use crate::datamodel::{AppearanceFilter, ContentFeature, Embedding, Image, ENCODER_STRIDE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const GEM_EPS: f64 = 1e-6;
pub const GEM_INIT_P: f64 = 3.0;
/// Head entry holding the mean pooled descriptor. It is set from data by the
/// trainer and never receives a gradient.
pub const HEAD_CENTER: &str = "center";
pub const LEAKY_SLOPE: f64 = 0.2;
/// Three stride-2 discriminator convs.
pub const DISC_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Square input side `H = W`.
    pub image_size: usize,
    /// Content channels `c`; must be divisible by 4.
    pub content_channels: usize,
    pub res_blocks: usize,
    pub filter_k: usize,
    /// Groups of the appearance convolution; `c` gives the depthwise filter.
    pub filter_groups: usize,
    pub filter_bias: bool,
    pub ea_hidden: usize,
    /// Contrastive embedding dimension `K`.
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub disc_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            content_channels: 64,
            res_blocks: 2,
            filter_k: 5,
            filter_groups: 64,
            filter_bias: true,
            ea_hidden: 128,
            embed_dim: 128,
            head_hidden: 128,
            disc_channels: 32,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.content_channels;
        if c == 0 || !c.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "content_channels must be a positive multiple of 4, got {c}"
            )));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(DISC_STRIDE) {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of {DISC_STRIDE}, got {}",
                self.image_size
            )));
        }
        if self.filter_k.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "filter_k must be odd so same padding is defined, got {}",
                self.filter_k
            )));
        }
        if self.filter_groups == 0 || !c.is_multiple_of(self.filter_groups) {
            return Err(Error::Config(format!(
                "filter_groups {} must divide content_channels {c}",
                self.filter_groups
            )));
        }
        for (name, v) in [
            ("ea_hidden", self.ea_hidden),
            ("embed_dim", self.embed_dim),
            ("head_hidden", self.head_hidden),
            ("disc_channels", self.disc_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Spatial side of the content feature.
    pub fn feature_size(&self) -> usize {
        self.image_size / ENCODER_STRIDE
    }

    /// Shape of the generated appearance filter weights.
    pub fn filter_shape(&self) -> [usize; 4] {
        let c = self.content_channels;
        [c, c / self.filter_groups, self.filter_k, self.filter_k]
    }
}

/// Named tensors of one network, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Puts every tensor on `tape`, as trainable params or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Order-sensitive digest of every value, for change detection.
    pub fn checksum(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (n, t) in &self.entries {
            n.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// A [`ParamSet`] placed on a tape.
pub struct Bound<'t> {
    vars: Vec<(String, Var<'t>)>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::validation(format!("missing parameter '{name}'")))
    }

    /// Gradients in [`ParamSet`] order; unused parameters get zeros.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|(_, v)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&v.shape()))
            })
            .collect()
    }
}

/// The six trainable parameter collections.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub e_c: ParamSet,
    pub e_a: ParamSet,
    pub g: ParamSet,
    pub d_i: ParamSet,
    pub d_a: ParamSet,
    pub h: ParamSet,
}

pub const COLLECTIONS: [&str; 6] = ["e_c", "e_a", "g", "d_i", "d_a", "h"];

impl ModelParams {
    pub fn collection(&self, name: &str) -> Option<&ParamSet> {
        Some(match name {
            "e_c" => &self.e_c,
            "e_a" => &self.e_a,
            "g" => &self.g,
            "d_i" => &self.d_i,
            "d_a" => &self.d_a,
            "h" => &self.h,
            _ => return None,
        })
    }

    pub fn collection_mut(&mut self, name: &str) -> Option<&mut ParamSet> {
        Some(match name {
            "e_c" => &mut self.e_c,
            "e_a" => &mut self.e_a,
            "g" => &mut self.g,
            "d_i" => &mut self.d_i,
            "d_a" => &mut self.d_a,
            "h" => &mut self.h,
            _ => return None,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &ParamSet)> {
        COLLECTIONS
            .iter()
            .map(move |&n| (n, self.collection(n).expect("known collection")))
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, p)| p.all_finite())
    }
}

/// Every parameter name and shape, per collection, in [`COLLECTIONS`] order.
pub fn param_shapes(
    cfg: &NetConfig,
    backbone_channels: usize,
) -> Vec<(&'static str, Vec<(String, Vec<usize>)>)> {
    let c = cfg.content_channels;
    let (c2, c4) = (c / 2, c / 4);
    let conv = |name: &str, o: usize, i: usize, k: usize| {
        vec![
            (format!("{name}.w"), vec![o, i, k, k]),
            (format!("{name}.b"), vec![o]),
        ]
    };
    let linear = |name: &str, o: usize, i: usize| {
        vec![
            (format!("{name}.w"), vec![o, i]),
            (format!("{name}.b"), vec![o]),
        ]
    };
    let res = |out: &mut Vec<(String, Vec<usize>)>| {
        for r in 0..cfg.res_blocks {
            out.extend(conv(&format!("res{r}.conv1"), c, c, 3));
            out.extend(conv(&format!("res{r}.conv2"), c, c, 3));
        }
    };

    let mut e_c = Vec::new();
    e_c.extend(conv("stem", c4, 3, 3));
    e_c.extend(conv("down1", c2, c4, 4));
    e_c.extend(conv("down2", c, c2, 4));
    res(&mut e_c);

    let mut e_a = Vec::new();
    e_a.extend(linear("fc1", cfg.ea_hidden, backbone_channels));
    e_a.extend(linear(
        "fc2",
        adaptive_conv::encoder_output_dim(cfg),
        cfg.ea_hidden,
    ));

    let mut g = Vec::new();
    res(&mut g);
    g.extend(conv("up1", c2, c, 3));
    g.extend(conv("up2", c4, c2, 3));
    g.extend(conv("out", 3, c4, 3));

    let disc = |in_ch: usize| {
        let d = cfg.disc_channels;
        let mut v = Vec::new();
        v.extend(conv("conv1", d, in_ch, 4));
        v.extend(conv("conv2", 2 * d, d, 4));
        v.extend(conv("conv3", 1, 2 * d, 4));
        v
    };

    let mut h = vec![
        ("gem.p".to_string(), Vec::new()),
        (HEAD_CENTER.to_string(), vec![c]),
    ];
    h.push(("fc1.w".to_string(), vec![cfg.head_hidden, c]));
    h.push(("fc2.w".to_string(), vec![cfg.embed_dim, cfg.head_hidden]));

    vec![
        ("e_c", e_c),
        ("e_a", e_a),
        ("g", g),
        ("d_i", disc(3)),
        ("d_a", disc(6)),
        ("h", h),
    ]
}

/// Parameter counts per collection, derived from the config only.
pub fn parameter_report(cfg: &NetConfig, backbone_channels: usize) -> Vec<(&'static str, usize)> {
    param_shapes(cfg, backbone_channels)
        .into_iter()
        .map(|(n, shapes)| {
            (
                n,
                shapes
                    .iter()
                    .map(|(_, s)| s.iter().product::<usize>())
                    .sum(),
            )
        })
        .collect()
}

fn conv_layer<'t>(b: &Bound<'t>, name: &str, x: Var<'t>, spec: Conv2dSpec) -> Result<Var<'t>> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    x.conv2d(w, Some(bias), spec)
}

fn expect_shape(v: &Var<'_>, want: &[usize], what: &str) -> Result<()> {
    let got = v.shape();
    if got != want {
        return Err(Error::validation(format!(
            "{what}: expected shape {want:?}, got {got:?}"
        )));
    }
    Ok(())
}

/// Content encoder `E_c`: `3×H×W → c×H/4×W/4`.
pub fn encode_content<'t>(cfg: &NetConfig, b: &Bound<'t>, image: Var<'t>) -> Result<Var<'t>> {
    let s = cfg.image_size;
    expect_shape(&image, &[3, s, s], "content encoder input")?;
    let mut x = conv_layer(b, "stem", image, Conv2dSpec::same(3, 1))?
        .instance_norm(NORM_EPS)
        .relu();
    x = conv_layer(b, "down1", x, Conv2dSpec::new(2, 1, 1))?
        .instance_norm(NORM_EPS)
        .relu();
    x = conv_layer(b, "down2", x, Conv2dSpec::new(2, 1, 1))?
        .instance_norm(NORM_EPS)
        .relu();
    for r in 0..cfg.res_blocks {
        let y = conv_layer(b, &format!("res{r}.conv1"), x, Conv2dSpec::same(3, 1))?
            .instance_norm(NORM_EPS)
            .relu();
        let mut y = conv_layer(b, &format!("res{r}.conv2"), y, Conv2dSpec::same(3, 1))?;
        if r + 1 < cfg.res_blocks {
            y = y.instance_norm(NORM_EPS);
        }
        x = x + y;
    }
    Ok(x)
}

/// Generator `G`: `c×H/4×W/4 → 3×H×W` in `(-1, 1)`.
pub fn generate_image<'t>(cfg: &NetConfig, b: &Bound<'t>, feature: Var<'t>) -> Result<Var<'t>> {
    let f = cfg.feature_size();
    expect_shape(&feature, &[cfg.content_channels, f, f], "generator input")?;
    let mut x = feature;
    for r in 0..cfg.res_blocks {
        let y = conv_layer(b, &format!("res{r}.conv1"), x, Conv2dSpec::same(3, 1))?
            .layer_norm(NORM_EPS)
            .relu();
        let y = conv_layer(b, &format!("res{r}.conv2"), y, Conv2dSpec::same(3, 1))?
            .layer_norm(NORM_EPS);
        x = x + y;
    }
    for up in ["up1", "up2"] {
        x = conv_layer(b, up, x.upsample_nearest2x(), Conv2dSpec::same(3, 1))?
            .layer_norm(NORM_EPS)
            .relu();
    }
    Ok(conv_layer(b, "out", x, Conv2dSpec::same(3, 1))?.tanh())
}

/// Patch discriminator: probability map of size `H/8 × W/8`.
pub fn discriminate<'t>(b: &Bound<'t>, input: Var<'t>) -> Result<Var<'t>> {
    let spec = Conv2dSpec::new(2, 1, 1);
    let x = conv_layer(b, "conv1", input, spec)?.leaky_relu(LEAKY_SLOPE);
    let x = conv_layer(b, "conv2", x, spec)?.leaky_relu(LEAKY_SLOPE);
    Ok(conv_layer(b, "conv3", x, spec)?.sigmoid())
}

/// Appearance discriminator on the channel concatenation of two images.
pub fn discriminate_pair<'t>(b: &Bound<'t>, a: Var<'t>, other: Var<'t>) -> Result<Var<'t>> {
    if a.shape() != other.shape() {
        return Err(Error::validation(format!(
            "appearance discriminator inputs differ in size: {:?} vs {:?}",
            a.shape(),
            other.shape()
        )));
    }
    discriminate(b, concat(&[a, other])?)
}

/// Contrastive head `H`: GeM → subtract center → linear → LeakyReLU →
/// linear → L2 normalize.
///
/// Instance norm gives every content channel nearly the same statistics in
/// every image, so pooled descriptors share a dominant common part (cosine
/// about 0.996 between unrelated images). Subtracting the mean descriptor
/// exposes the image-specific part. Both linear layers are bias-free: with
/// weights initialized near zero, an Adam-updated bias outgrows `W·x` within
/// a few steps and maps every input to one direction. LeakyReLU keeps hidden
/// units from switching off for all images at once.
pub fn embed<'t>(b: &Bound<'t>, feature: Var<'t>) -> Result<Var<'t>> {
    embed_pooled(b, pool(b, feature)?, b.get(HEAD_CENTER)?.detach())
}

/// GeM pooling with the head's exponent.
pub fn pool<'t>(b: &Bound<'t>, feature: Var<'t>) -> Result<Var<'t>> {
    if !feature.value().is_finite() {
        return Err(Error::NonFinite(
            "content feature fed to the contrastive head".into(),
        ));
    }
    feature.gem_pool(b.get("gem.p")?, GEM_EPS)
}

/// The head after pooling, centered on `center`.
pub fn embed_pooled<'t>(b: &Bound<'t>, pooled: Var<'t>, center: Var<'t>) -> Result<Var<'t>> {
    let x = (pooled - center)
        .linear(b.get("fc1.w")?, None)?
        .leaky_relu(LEAKY_SLOPE);
    x.linear(b.get("fc2.w")?, None)?.l2_normalize()
}

/// Parameters plus the frozen backbone: everything needed for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: NetConfig,
    pub params: ModelParams,
    pub backbone: ConvBackbone,
}

impl Model {
    fn check_image(&self, img: &Image) -> Result<()> {
        img.check_encoder_shape()?;
        let s = self.config.image_size;
        if img.height() != s || img.width() != s {
            return Err(Error::validation(format!(
                "model expects {s}×{s} images, got {}×{}",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    pub fn encode_content(&self, img: &Image) -> Result<ContentFeature> {
        self.check_image(img)?;
        let tape = Tape::new();
        let b = self.params.e_c.bind(&tape, false);
        let f = encode_content(&self.config, &b, tape.constant(img.to_tensor()))?;
        ContentFeature::new((*f.value()).clone())
    }

    pub fn appearance_filter(&self, img: &Image) -> Result<AppearanceFilter> {
        self.check_image(img)?;
        let feats = self.backbone.extract(img)?;
        adaptive_conv::generate_filter(&self.config, &feats, &self.params.e_a)
    }

    pub fn generate_image(&self, f: &ContentFeature) -> Result<Image> {
        let tape = Tape::new();
        let b = self.params.g.bind(&tape, false);
        let y = generate_image(&self.config, &b, tape.constant(f.tensor().clone()))?;
        Image::from_tensor(&y.value())
    }

    /// `G(E_c(source) ⊗ E_a(target))`.
    pub fn translate(&self, source: &Image, target: &Image) -> Result<Image> {
        let f = self.encode_content(source)?;
        let w = self.appearance_filter(target)?;
        self.generate_image(&adaptive_conv::apply(&f, &w)?)
    }

    pub fn embed(&self, f: &ContentFeature) -> Result<Embedding> {
        let tape = Tape::new();
        let b = self.params.h.bind(&tape, false);
        let z = embed(&b, tape.constant(f.tensor().clone()))?;
        Embedding::new(z.value().data().to_vec())
    }

    /// GeM-pooled content feature, the input of the head before centering.
    pub fn pooled_descriptor(&self, img: &Image) -> Result<Tensor> {
        let f = self.encode_content(img)?;
        let tape = Tape::new();
        let b = self.params.h.bind(&tape, false);
        let pooled = pool(&b, tape.constant(f.tensor().clone()))?;
        Ok((*pooled.value()).clone())
    }

    /// `H(E_c(img))`, the retrieval descriptor.
    pub fn embed_image(&self, img: &Image) -> Result<Embedding> {
        self.embed(&self.encode_content(img)?)
    }

    pub fn discriminate_image(&self, img: &Image) -> Result<Tensor> {
        self.check_image(img)?;
        let tape = Tape::new();
        let b = self.params.d_i.bind(&tape, false);
        let y = discriminate(&b, tape.constant(img.to_tensor()))?;
        Ok((*y.value()).clone())
    }

    pub fn discriminate_appearance(&self, a: &Image, other: &Image) -> Result<Tensor> {
        self.check_image(a)?;
        self.check_image(other)?;
        let tape = Tape::new();
        let b = self.params.d_a.bind(&tape, false);
        let y = discriminate_pair(
            &b,
            tape.constant(a.to_tensor()),
            tape.constant(other.to_tensor()),
        )?;
        Ok((*y.value()).clone())
    }

    pub fn parameter_report(&self) -> Vec<(&'static str, usize)> {
        parameter_report(&self.config, self.backbone.out_channels())
    }
}

/// Weights `~ N(0, std²)` drawn in declaration order, biases zero, GeM
/// exponent [`GEM_INIT_P`].
pub fn init_params<R: rand::Rng + ?Sized>(
    cfg: &NetConfig,
    backbone_channels: usize,
    std: f64,
    rng: &mut R,
) -> ModelParams {
    let mut map = HashMap::new();
    for (coll, shapes) in param_shapes(cfg, backbone_channels) {
        for (name, shape) in shapes {
            let t = if name == "gem.p" {
                Tensor::scalar(GEM_INIT_P)
            } else if name.ends_with(".b") || name == HEAD_CENTER {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, std, rng)
            };
            map.insert(format!("{coll}.{name}"), t);
        }
    }
    params_from_map(cfg, backbone_channels, map).expect("shapes come from the same table")
}

/// Name → tensor lookup used when restoring collections from a checkpoint.
pub(crate) fn params_from_map(
    cfg: &NetConfig,
    backbone_channels: usize,
    mut map: HashMap<String, Tensor>,
) -> Result<ModelParams> {
    let mut sets = Vec::new();
    for (coll, shapes) in param_shapes(cfg, backbone_channels) {
        let mut entries = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let key = format!("{coll}.{name}");
            let t = map
                .remove(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{key}'")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{key}' has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            entries.push((name, t));
        }
        sets.push(ParamSet::new(entries));
    }
    let mut it = sets.into_iter();
    let mut next = || it.next().expect("six collections");
    Ok(ModelParams {
        e_c: next(),
        e_a: next(),
        g: next(),
        d_i: next(),
        d_a: next(),
        h: next(),
    })
}

//! Training configuration and its flat `key = value` file format.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional
//! and unknown keys are rejected. The canonical form lists every key in
//! sorted order; its SHA-256 is embedded in checkpoints. `out_dir` is not
//! part of the canonical form, so a run directory can be moved and resumed.
//!
//! | key | meaning |
//! |---|---|
//! | `m_c`, `tau`, `n_neg` | content margin, NCE temperature, NCE negatives |
//! | `beta_rs`, `beta_rc`, `beta_cc`, `beta_ca`, `beta_nce` | loss weights |
//! | `filter_k` | appearance filter size (odd) |
//! | `filter_groups` | `depthwise` or a divisor of `content_channels` |
//! | `filter_bias` | `true` / `false` |
//! | `rot_thresh_deg`, `trans_thresh_m`, `k_candidates` | positive mining |
//! | `adam_beta1`, `adam_beta2`, `lr`, `init_std` | optimizer and init |
//! | `epochs_flat`, `epochs_decay` | constant-then-linear lr schedule |
//! | `batch_size` | must be 1 |
//! | `image_size`, `content_channels`, `res_blocks`, `ea_hidden`, `embed_dim`, `head_hidden`, `disc_channels` | architecture |
//! | `nce_view` | `translated`, or `color_jitter` to contrast against a jittered source |
//! | `steps_per_epoch` | cap on assignments visited per epoch, `0` = all |
//! | `checkpoint_every` | epochs between checkpoints |
//! | `backbone` | `random:SEED` or a path to a JSON weights file |
//! | `backbone_tap` | tap layer name |
//! | `seed` | master seed |
//! | `out_dir` | run directory |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::backbone::{ConvBackbone, DEFAULT_TAP};
use crate::datamodel::HyperParams;
use crate::error::{Error, Result};
use crate::networks::NetConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum BackboneSource {
    Random(u64),
    File(PathBuf),
}

impl BackboneSource {
    fn parse(s: &str) -> Result<Self> {
        match s.strip_prefix("random:") {
            Some(seed) => seed
                .parse()
                .map(BackboneSource::Random)
                .map_err(|_| Error::Config(format!("bad backbone seed '{seed}'"))),
            None => Ok(BackboneSource::File(PathBuf::from(s))),
        }
    }

    fn render(&self) -> String {
        match self {
            BackboneSource::Random(s) => format!("random:{s}"),
            BackboneSource::File(p) => p.display().to_string(),
        }
    }
}

/// What the NCE term contrasts the source against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NceView {
    /// The content of the translated image (full model).
    Translated,
    /// The content of a randomly color-jittered copy of the source, an
    /// ablation without translation.
    ColorJitter,
}

impl NceView {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "translated" => Ok(NceView::Translated),
            "color_jitter" => Ok(NceView::ColorJitter),
            _ => Err(Error::Config(format!(
                "nce_view must be 'translated' or 'color_jitter', got '{s}'"
            ))),
        }
    }

    fn render(self) -> &'static str {
        match self {
            NceView::Translated => "translated",
            NceView::ColorJitter => "color_jitter",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hyper: HyperParams,
    pub image_size: usize,
    pub content_channels: usize,
    pub res_blocks: usize,
    /// `None` means depthwise (`groups = content_channels`).
    pub filter_groups: Option<usize>,
    pub filter_bias: bool,
    pub ea_hidden: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub disc_channels: usize,
    pub k_candidates: usize,
    pub nce_view: NceView,
    pub steps_per_epoch: usize,
    pub checkpoint_every: usize,
    pub backbone: BackboneSource,
    pub backbone_tap: String,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        Self {
            hyper: HyperParams::default(),
            image_size: net.image_size,
            content_channels: net.content_channels,
            res_blocks: net.res_blocks,
            filter_groups: None,
            filter_bias: net.filter_bias,
            ea_hidden: net.ea_hidden,
            embed_dim: net.embed_dim,
            head_hidden: net.head_hidden,
            disc_channels: net.disc_channels,
            k_candidates: 20,
            nce_view: NceView::Translated,
            steps_per_epoch: 0,
            checkpoint_every: 1,
            backbone: BackboneSource::Random(0),
            backbone_tap: DEFAULT_TAP.to_string(),
            seed: 0,
            out_dir: PathBuf::from("run"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
}

impl TrainConfig {
    pub fn net(&self) -> NetConfig {
        NetConfig {
            image_size: self.image_size,
            content_channels: self.content_channels,
            res_blocks: self.res_blocks,
            filter_k: self.hyper.filter_k,
            filter_groups: self.filter_groups.unwrap_or(self.content_channels),
            filter_bias: self.filter_bias,
            ea_hidden: self.ea_hidden,
            embed_dim: self.embed_dim,
            head_hidden: self.head_hidden,
            disc_channels: self.disc_channels,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.hyper.epochs_flat + self.hyper.epochs_decay
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.net().validate()?;
        if self.total_epochs() == 0 {
            return Err(Error::Config("at least one epoch is required".into()));
        }
        if self.k_candidates == 0 {
            return Err(Error::Config("k_candidates must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn load_backbone(&self) -> Result<ConvBackbone> {
        match &self.backbone {
            BackboneSource::Random(seed) => {
                let bb = ConvBackbone::random(*seed);
                if self.backbone_tap != DEFAULT_TAP {
                    let specs: serde_json::Value = serde_json::from_str(&bb.to_json()?)?;
                    let layers = serde_json::from_value(specs["layers"].clone())?;
                    return ConvBackbone::from_specs(layers, &self.backbone_tap);
                }
                Ok(bb)
            }
            BackboneSource::File(p) => ConvBackbone::load_json(p, &self.backbone_tap),
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let h = &mut self.hyper;
        match key.trim() {
            "m_c" => h.m_c = parse_num(key, v)?,
            "tau" => h.tau = parse_num(key, v)?,
            "n_neg" => h.n_neg = parse_num(key, v)?,
            "beta_rs" => h.betas.rs = parse_num(key, v)?,
            "beta_rc" => h.betas.rc = parse_num(key, v)?,
            "beta_cc" => h.betas.cc = parse_num(key, v)?,
            "beta_ca" => h.betas.ca = parse_num(key, v)?,
            "beta_nce" => h.betas.nce = parse_num(key, v)?,
            "filter_k" => h.filter_k = parse_num(key, v)?,
            "rot_thresh_deg" => h.rot_thresh_deg = parse_num(key, v)?,
            "trans_thresh_m" => h.trans_thresh_m = parse_num(key, v)?,
            "adam_beta1" => h.adam_beta1 = parse_num(key, v)?,
            "adam_beta2" => h.adam_beta2 = parse_num(key, v)?,
            "lr" => h.lr = parse_num(key, v)?,
            "epochs_flat" => h.epochs_flat = parse_num(key, v)?,
            "epochs_decay" => h.epochs_decay = parse_num(key, v)?,
            "batch_size" => h.batch_size = parse_num(key, v)?,
            "init_std" => h.init_std = parse_num(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "content_channels" => self.content_channels = parse_num(key, v)?,
            "res_blocks" => self.res_blocks = parse_num(key, v)?,
            "filter_groups" => {
                self.filter_groups = if v == "depthwise" {
                    None
                } else {
                    Some(parse_num(key, v)?)
                }
            }
            "filter_bias" => self.filter_bias = parse_num(key, v)?,
            "ea_hidden" => self.ea_hidden = parse_num(key, v)?,
            "embed_dim" => self.embed_dim = parse_num(key, v)?,
            "head_hidden" => self.head_hidden = parse_num(key, v)?,
            "disc_channels" => self.disc_channels = parse_num(key, v)?,
            "k_candidates" => self.k_candidates = parse_num(key, v)?,
            "nce_view" => self.nce_view = NceView::parse(v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "backbone" => self.backbone = BackboneSource::parse(v)?,
            "backbone_tap" => self.backbone_tap = v.to_string(),
            "seed" => self.seed = parse_num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` or `key = value`.
    pub fn set_assignment(&mut self, text: &str) -> Result<()> {
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{text}'")))?;
        self.set(k, v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            cfg.set(k, v).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let h = &self.hyper;
        let mut e = vec![
            ("m_c", h.m_c.to_string()),
            ("tau", h.tau.to_string()),
            ("n_neg", h.n_neg.to_string()),
            ("beta_rs", h.betas.rs.to_string()),
            ("beta_rc", h.betas.rc.to_string()),
            ("beta_cc", h.betas.cc.to_string()),
            ("beta_ca", h.betas.ca.to_string()),
            ("beta_nce", h.betas.nce.to_string()),
            ("filter_k", h.filter_k.to_string()),
            ("rot_thresh_deg", h.rot_thresh_deg.to_string()),
            ("trans_thresh_m", h.trans_thresh_m.to_string()),
            ("adam_beta1", h.adam_beta1.to_string()),
            ("adam_beta2", h.adam_beta2.to_string()),
            ("lr", h.lr.to_string()),
            ("epochs_flat", h.epochs_flat.to_string()),
            ("epochs_decay", h.epochs_decay.to_string()),
            ("batch_size", h.batch_size.to_string()),
            ("init_std", h.init_std.to_string()),
            ("image_size", self.image_size.to_string()),
            ("content_channels", self.content_channels.to_string()),
            ("res_blocks", self.res_blocks.to_string()),
            (
                "filter_groups",
                self.filter_groups
                    .map_or_else(|| "depthwise".to_string(), |g| g.to_string()),
            ),
            ("filter_bias", self.filter_bias.to_string()),
            ("ea_hidden", self.ea_hidden.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
            ("disc_channels", self.disc_channels.to_string()),
            ("k_candidates", self.k_candidates.to_string()),
            ("nce_view", self.nce_view.render().to_string()),
            ("steps_per_epoch", self.steps_per_epoch.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("backbone", self.backbone.render()),
            ("backbone_tap", self.backbone_tap.clone()),
            ("seed", self.seed.to_string()),
        ];
        e.sort_by_key(|(k, _)| *k);
        e
    }

    /// Sorted `key = value` lines of every setting except `out_dir`.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Canonical form plus `out_dir`, suitable for echoing.
    pub fn render(&self) -> String {
        format!("{}out_dir = {}\n", self.canonical(), self.out_dir.display())
    }

    /// Hex SHA-256 of [`Self::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

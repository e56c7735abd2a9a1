//! Single-file training checkpoints.
//!
//! Layout: the 8-byte magic `XDCKPT01`, a little-endian `u64` header length,
//! a JSON header, then every tensor as raw little-endian `f64` in header
//! order. The header holds the epoch and step counters, the canonical config
//! and its hash, the backbone weights, Adam step counts and a tensor index.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ConvBackbone;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::networks::{params_from_map, Model, ModelParams, ParamSet, COLLECTIONS};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"XDCKPT01";

/// Everything the training loop mutates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    /// One optimizer per collection, in [`COLLECTIONS`] order.
    pub optims: Vec<Adam>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Steps taken so far.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    epoch: usize,
    step: u64,
    config_hash: String,
    config: String,
    backbone: String,
    adam_steps: Vec<u64>,
    adam_betas: Vec<(f64, f64)>,
    tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub backbone: ConvBackbone,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model {
            config: self.config.net(),
            params: self.state.params.clone(),
            backbone: self.backbone.clone(),
        }
    }

    pub fn into_model(self) -> Model {
        Model {
            config: self.config.net(),
            params: self.state.params,
            backbone: self.backbone,
        }
    }
}

fn push_set<'a>(prefix: &str, set: &'a ParamSet, out: &mut Vec<(String, &'a Tensor)>) {
    for (n, t) in set.entries() {
        out.push((format!("{prefix}.{n}"), t));
    }
}

pub fn save(
    path: &Path,
    cfg: &TrainConfig,
    backbone: &ConvBackbone,
    state: &TrainState,
) -> Result<()> {
    if state.optims.len() != COLLECTIONS.len() {
        return Err(Error::Checkpoint(
            "expected one optimizer per collection".into(),
        ));
    }
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (coll, set) in state.params.iter() {
        push_set(&format!("param.{coll}"), set, &mut tensors);
    }
    for (coll, opt) in COLLECTIONS.iter().zip(&state.optims) {
        for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
            tensors.push((format!("adam.{coll}.m.{i}"), m));
            tensors.push((format!("adam.{coll}.v.{i}"), v));
        }
    }
    let header = Header {
        epoch: state.epoch,
        step: state.step,
        config_hash: cfg.hash(),
        config: cfg.canonical(),
        backbone: backbone.to_json()?,
        adam_steps: state.optims.iter().map(|o| o.step).collect(),
        adam_betas: state.optims.iter().map(|o| (o.beta1, o.beta2)).collect(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let n_values: usize = tensors.iter().map(|(_, t)| t.numel()).sum();
    let mut buf = Vec::with_capacity(16 + header.len() + 8 * n_values);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut config = TrainConfig::parse(&header.config)?;
    if config.hash() != header.config_hash {
        return Err(Error::Checkpoint(
            "config hash does not match stored config".into(),
        ));
    }
    config.out_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let backbone: ConvBackbone = {
        let v: serde_json::Value = serde_json::from_str(&header.backbone)?;
        let layers = serde_json::from_value(v["layers"].clone())?;
        ConvBackbone::from_specs(layers, &config.backbone_tap)?
    };

    let mut data = &bytes[16 + hlen..];
    let mut params = std::collections::HashMap::new();
    let mut moments: std::collections::HashMap<String, Tensor> = std::collections::HashMap::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        if data.len() < 8 * n {
            return Err(Error::Checkpoint(format!(
                "truncated data at '{}'",
                entry.name
            )));
        }
        let values = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[8 * n..];
        let t = Tensor::new(&entry.shape, values)?;
        if let Some(name) = entry.name.strip_prefix("param.") {
            params.insert(name.to_string(), t);
        } else {
            moments.insert(entry.name, t);
        }
    }
    if !data.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    let params = params_from_map(&config.net(), backbone.out_channels(), params)?;
    if header.adam_steps.len() != COLLECTIONS.len() || header.adam_betas.len() != COLLECTIONS.len()
    {
        return Err(Error::Checkpoint("optimizer state count mismatch".into()));
    }
    let mut optims = Vec::with_capacity(COLLECTIONS.len());
    for (k, coll) in COLLECTIONS.iter().enumerate() {
        let set = params.collection(coll).expect("known collection");
        let (beta1, beta2) = header.adam_betas[k];
        let mut opt = Adam::new(set, beta1, beta2);
        opt.step = header.adam_steps[k];
        for i in 0..set.len() {
            for (which, dst) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                let key = format!("adam.{coll}.{which}.{i}");
                let t = moments
                    .remove(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing '{key}'")))?;
                if t.shape() != dst.shape() {
                    return Err(Error::Checkpoint(format!("'{key}' has the wrong shape")));
                }
                *dst = t;
            }
        }
        optims.push(opt);
    }
    Ok(Checkpoint {
        config,
        config_hash: header.config_hash,
        backbone,
        state: TrainState {
            params,
            optims,
            epoch: header.epoch,
            step: header.step,
        },
    })
}

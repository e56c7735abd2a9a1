//! Frozen perceptual feature extractor feeding the appearance filter encoder.
//!
//! A backbone is a list of named layers (`conv`, `relu`, `maxpool`) evaluated
//! up to a tap layer. Two sources are supported:
//!
//! * [`ConvBackbone::random`]: three seeded He-initialized 3×3 conv+ReLU
//!   layers with total stride 4, tapped at `relu3`. This is the default.
//! * [`ConvBackbone::load_json`]: a weights file in the JSON format below,
//!   which can hold e.g. a converted VGG-16 and be tapped at `relu3_3`.
//!
//! ```json
//! {"layers": [
//!   {"type": "conv", "name": "conv1_1", "shape": [64, 3, 3, 3],
//!    "weight": [...], "bias": [...], "stride": 1, "padding": 1},
//!   {"type": "relu", "name": "relu1_1"},
//!   {"type": "maxpool", "name": "pool1"}
//! ]}
//! ```
//!
//! Weights are added to the tape as constants, so gradients reach the input
//! image but never the backbone itself.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::conv::{output_size, Conv2dSpec};
use crate::datamodel::Image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TAP: &str = "relu3";

/// `c_b×h_b×w_b` backbone activation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::validation("feature map must be C×H×W"));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("backbone features".into()));
        }
        Ok(Self(values))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        name: String,
        shape: [usize; 4],
        weight: Vec<f64>,
        bias: Vec<f64>,
        stride: usize,
        padding: usize,
    },
    Relu {
        name: String,
    },
    Maxpool {
        name: String,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv { name, .. }
            | LayerSpec::Relu { name }
            | LayerSpec::Maxpool { name } => name,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsFile {
    layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv {
        weight: Tensor,
        bias: Tensor,
        spec: Conv2dSpec,
    },
    Relu,
    MaxPool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBackbone {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    tap: usize,
    out_channels: usize,
    stride: usize,
}

impl ConvBackbone {
    /// Seeded random 3-layer stack; channel widths `[16, 32, 64]`.
    pub fn random(seed: u64) -> Self {
        Self::random_with_widths(seed, [16, 32, 64])
    }

    pub fn random_with_widths(seed: u64, widths: [usize; 3]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut specs = Vec::new();
        let mut c_in = 3;
        for (i, (&c_out, stride)) in widths.iter().zip([1, 2, 2]).enumerate() {
            let fan_in = (c_in * 9) as f64;
            let w = Tensor::randn(&[c_out, c_in, 3, 3], (2.0 / fan_in).sqrt(), &mut rng);
            specs.push(LayerSpec::Conv {
                name: format!("conv{}", i + 1),
                shape: [c_out, c_in, 3, 3],
                weight: w.into_data(),
                bias: vec![0.0; c_out],
                stride,
                padding: 1,
            });
            specs.push(LayerSpec::Relu {
                name: format!("relu{}", i + 1),
            });
            c_in = c_out;
        }
        Self::from_specs(specs, DEFAULT_TAP).expect("built-in backbone is well formed")
    }

    pub fn from_specs(specs: Vec<LayerSpec>, tap: &str) -> Result<Self> {
        let tap_idx = specs
            .iter()
            .position(|s| s.name() == tap)
            .ok_or_else(|| Error::Config(format!("backbone has no layer named '{tap}'")))?;
        let mut layers = Vec::with_capacity(specs.len());
        let mut channels = 3;
        let mut out_channels = None;
        let mut stride = 1;
        for (i, s) in specs.iter().enumerate() {
            let layer = match s {
                LayerSpec::Conv {
                    name,
                    shape,
                    weight,
                    bias,
                    stride: st,
                    padding,
                } => {
                    if shape[1] != channels || shape[2] != shape[3] || bias.len() != shape[0] {
                        return Err(Error::Config(format!(
                            "backbone layer '{name}' has shape {shape:?} but receives {channels} channels"
                        )));
                    }
                    channels = shape[0];
                    if i <= tap_idx {
                        stride *= st;
                    }
                    Layer::Conv {
                        weight: Tensor::new(shape, weight.clone())?,
                        bias: Tensor::vector(bias.clone()),
                        spec: Conv2dSpec::new(*st, *padding, 1),
                    }
                }
                LayerSpec::Relu { .. } => Layer::Relu,
                LayerSpec::Maxpool { .. } => {
                    if i <= tap_idx {
                        stride *= 2;
                    }
                    Layer::MaxPool
                }
            };
            if i == tap_idx {
                out_channels = Some(channels);
            }
            layers.push(layer);
        }
        Ok(Self {
            specs,
            layers,
            tap: tap_idx,
            out_channels: out_channels.expect("tap index is in range"),
            stride,
        })
    }

    pub fn load_json(path: &Path, tap: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: WeightsFile = serde_json::from_str(&text)?;
        Self::from_specs(file.layers, tap)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&WeightsFile {
            layers: self.specs.clone(),
        })?)
    }

    pub fn tap_name(&self) -> &str {
        self.specs[self.tap].name()
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Total downsampling factor up to the tap.
    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Output spatial size for an `h×w` input, or an error if the input is
    /// below the backbone's minimum size.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for layer in &self.layers[..=self.tap] {
            match layer {
                Layer::Conv { weight, spec, .. } => {
                    (h, w) = output_size(h, w, weight.shape()[2], *spec).map_err(|_| {
                        Error::validation("image size below the backbone's minimum")
                    })?;
                }
                Layer::MaxPool => {
                    if h < 2 || w < 2 {
                        return Err(Error::validation("image size below the backbone's minimum"));
                    }
                    (h, w) = (h / 2, w / 2);
                }
                Layer::Relu => {}
            }
        }
        Ok((h, w))
    }

    /// Differentiable forward pass of a `3×H×W` image var.
    pub fn forward<'t>(&self, tape: &'t Tape, image: Var<'t>) -> Result<Var<'t>> {
        let shape = image.shape();
        let [3, h, w] = shape[..] else {
            return Err(Error::validation(format!(
                "backbone input must be 3×H×W, got {shape:?}"
            )));
        };
        self.output_dims(h, w)?;
        let mut x = image;
        for layer in &self.layers[..=self.tap] {
            x = match layer {
                Layer::Conv { weight, bias, spec } => {
                    let wv = tape.constant(weight.clone());
                    let bv = tape.constant(bias.clone());
                    x.conv2d(wv, Some(bv), *spec)?
                }
                Layer::Relu => x.relu(),
                Layer::MaxPool => x.max_pool2x2(),
            };
        }
        Ok(x)
    }

    pub fn extract(&self, image: &Image) -> Result<FeatureMap> {
        let tape = Tape::new();
        let x = tape.constant(image.to_tensor());
        let y = self.forward(&tape, x)?;
        FeatureMap::new((*y.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extraction_is_deterministic() {
        let bb = ConvBackbone::random(7);
        let img = Image::new(
            8,
            8,
            (0..192).map(|i| ((i % 17) as f64 / 8.5) - 1.0).collect(),
        )
        .unwrap();
        assert_eq!(bb.extract(&img).unwrap(), bb.extract(&img).unwrap());
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let bb = ConvBackbone::random(1);
        let img = Image::filled(16, 16, [0.0; 3]).unwrap();
        let f = bb.extract(&img).unwrap();
        assert!(f.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stride_four_shape() {
        let bb = ConvBackbone::random(2);
        assert_eq!(bb.stride(), 4);
        let img = Image::filled(64, 64, [0.2, -0.1, 0.4]).unwrap();
        assert_eq!(bb.extract(&img).unwrap().tensor().shape(), &[64, 16, 16]);
    }

    #[test]
    fn json_round_trip_preserves_weights() {
        let bb = ConvBackbone::random(3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bb.json");
        std::fs::write(&p, bb.to_json().unwrap()).unwrap();
        assert_eq!(ConvBackbone::load_json(&p, DEFAULT_TAP).unwrap(), bb);
    }

    #[test]
    fn earlier_tap_changes_stride_and_channels() {
        let bb = ConvBackbone::random(3);
        let json = bb.to_json().unwrap();
        let file: WeightsFile = serde_json::from_str(&json).unwrap();
        let early = ConvBackbone::from_specs(file.layers, "relu2").unwrap();
        assert_eq!(early.stride(), 2);
        assert_eq!(early.out_channels(), 32);
    }

    #[test]
    fn unknown_tap_is_config_error() {
        let bb = ConvBackbone::random(3);
        let file: WeightsFile = serde_json::from_str(&bb.to_json().unwrap()).unwrap();
        assert!(matches!(
            ConvBackbone::from_specs(file.layers, "relu3_3"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn too_small_image_is_rejected() {
        let specs = vec![
            LayerSpec::Conv {
                name: "c".into(),
                shape: [1, 3, 5, 5],
                weight: vec![0.0; 75],
                bias: vec![0.0],
                stride: 1,
                padding: 0,
            },
            LayerSpec::Relu { name: "r".into() },
        ];
        let bb = ConvBackbone::from_specs(specs, "r").unwrap();
        let img = Image::filled(4, 4, [0.0; 3]).unwrap();
        assert!(matches!(bb.extract(&img), Err(Error::Validation(_))));
    }
}

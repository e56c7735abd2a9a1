//! Domain types shared by every stage, the line-delimited dataset manifest,
//! and pose geometry.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Total downsampling factor of the content encoder; image sides must be
/// multiples of it.
pub const ENCODER_STRIDE: usize = 4;

/// An `H×W×3` picture with values in `[-1, 1]`, stored interleaved (HWC).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("image must be non-empty"));
        }
        if data.len() != height * width * 3 {
            return Err(Error::validation(format!(
                "image {height}×{width}×3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::validation(format!(
                "pixel value {v} outside [-1, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    /// Checks the encoder divisibility contract.
    pub fn check_encoder_shape(&self) -> Result<()> {
        if !self.height.is_multiple_of(ENCODER_STRIDE) || !self.width.is_multiple_of(ENCODER_STRIDE)
        {
            return Err(Error::validation(format!(
                "image {}×{} is not a multiple of the encoder stride {ENCODER_STRIDE}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-planar `3×H×W` tensor for the networks.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c];
            }
        }
        Tensor::from_parts(vec![3, self.height, self.width], out)
    }

    /// Inverse of [`Image::to_tensor`]; values are clamped into `[-1, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [3, h, w] => (*h, *w),
            s => {
                return Err(Error::validation(format!(
                    "expected 3×H×W tensor, got {s:?}"
                )))
            }
        };
        let n = h * w;
        let mut data = vec![0.0; 3 * n];
        for c in 0..3 {
            for i in 0..n {
                data[i * 3 + c] = t.data()[c * n + i].clamp(-1.0, 1.0);
            }
        }
        Self::new(h, w, data)
    }

    /// Per-channel mean and standard deviation `[μr, μg, μb, σr, σg, σb]`.
    pub fn color_stats(&self) -> [f64; 6] {
        let n = (self.height * self.width) as f64;
        let mut mean = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                mean[c] += px[c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                var[c] += (px[c] - mean[c]).powi(2);
            }
        }
        [
            mean[0],
            mean[1],
            mean[2],
            (var[0] / n).sqrt(),
            (var[1] / n).sqrt(),
            (var[2] / n).sqrt(),
        ]
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::validation("image size mismatch"));
        }
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(total / self.data.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainLabel {
    pub name: String,
    pub id: usize,
}

/// Camera pose: unit quaternion `(w, x, y, z)` and translation in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseAnnotation {
    rotation: [f64; 4],
    translation: [f64; 3],
}

const QUAT_NORM_TOL: f64 = 1e-6;

impl PoseAnnotation {
    pub fn new(rotation: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self {
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0; 3],
        }
    }

    /// Rotation by `yaw_deg` about +z at position `(x, y, 0)`.
    pub fn planar(x: f64, y: f64, yaw_deg: f64) -> Self {
        let half = yaw_deg.to_radians() / 2.0;
        Self {
            rotation: [half.cos(), 0.0, 0.0, half.sin()],
            translation: [x, y, 0.0],
        }
    }

    pub fn rotation(&self) -> [f64; 4] {
        self.rotation
    }

    pub fn translation(&self) -> [f64; 3] {
        self.translation
    }

    /// Heading about +z in degrees (exact for planar poses).
    pub fn yaw_deg(&self) -> f64 {
        let [w, x, y, z] = self.rotation;
        (2.0 * (w * z + x * y))
            .atan2(1.0 - 2.0 * (y * y + z * z))
            .to_degrees()
    }

    pub fn validate(&self) -> Result<()> {
        if !self
            .rotation
            .iter()
            .chain(&self.translation)
            .all(|v| v.is_finite())
        {
            return Err(Error::validation("pose has non-finite components"));
        }
        let norm = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > QUAT_NORM_TOL {
            return Err(Error::validation(format!(
                "pose quaternion norm {norm} is not 1 (±{QUAT_NORM_TOL})"
            )));
        }
        Ok(())
    }

    /// Applies a rigid transform `(R, t)` on the left: `R·self`, `R·p + t`.
    pub fn transformed(&self, by: &PoseAnnotation) -> PoseAnnotation {
        let rotation = quat_mul(by.rotation, self.rotation);
        let n = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        let p = quat_rotate(by.rotation, self.translation);
        PoseAnnotation {
            rotation: rotation.map(|v| v / n),
            translation: [
                p[0] + by.translation[0],
                p[1] + by.translation[1],
                p[2] + by.translation[2],
            ],
        }
    }
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

fn quat_rotate(q: [f64; 4], v: [f64; 3]) -> [f64; 3] {
    let p = quat_mul(
        quat_mul(q, [0.0, v[0], v[1], v[2]]),
        [q[0], -q[1], -q[2], -q[3]],
    );
    [p[1], p[2], p[3]]
}

/// Rotation angle (degrees, in `[0, 180]`) of the relative rotation and
/// Euclidean translation distance (meters) between two poses.
///
/// The angle is `2·acos(|⟨q_a, q_b⟩|)`, so `q` and `-q` are the same rotation.
pub fn pose_distance(a: &PoseAnnotation, b: &PoseAnnotation) -> Result<(f64, f64)> {
    a.validate()?;
    b.validate()?;
    let na = a.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    let inner: f64 = a
        .rotation
        .iter()
        .zip(&b.rotation)
        .map(|(x, y)| x * y)
        .sum::<f64>()
        / (na * nb);
    let angle = 2.0 * inner.abs().min(1.0).acos();
    let dist = a
        .translation
        .iter()
        .zip(&b.translation)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok((angle.to_degrees(), dist))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub image_path: String,
    pub domain: DomainLabel,
    pub pose: Option<PoseAnnotation>,
    pub is_reference: bool,
    /// Optional content group. Records sharing it depict the same scene; the
    /// synthetic generator always sets it.
    pub scene: Option<String>,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        if self.is_reference && self.pose.is_none() {
            return Err(Error::validation(format!(
                "reference record {} has no pose",
                self.image_path
            )));
        }
        if let Some(p) = &self.pose {
            p.validate()?;
        }
        Ok(())
    }

    /// Path of the image, resolved against the manifest's directory when relative.
    pub fn resolve(&self, base: &Path) -> PathBuf {
        let p = Path::new(&self.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

/// Wire form of one manifest line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    path: String,
    domain: String,
    reference: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose: Option<PoseLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseLine {
    q: [f64; 4],
    t: [f64; 3],
}

/// Reads a line-delimited JSON manifest. Domain ids are assigned in order of
/// first appearance; blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut domains: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let next_id = domains.len();
        let id = *domains.entry(parsed.domain.clone()).or_insert(next_id);
        let pose = parsed
            .pose
            .map(|p| PoseAnnotation::new(p.q, p.t))
            .transpose()
            .map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
        let record = DatasetRecord {
            image_path: parsed.path,
            domain: DomainLabel {
                name: parsed.domain,
                id,
            },
            pose,
            is_reference: parsed.reference,
            scene: parsed.scene,
        };
        record.validate().map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("line {line_no}: {msg}")),
            other => other,
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn save_manifest(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        r.validate()?;
        let line = ManifestLine {
            path: r.image_path.clone(),
            domain: r.domain.name.clone(),
            reference: r.is_reference,
            pose: r.pose.map(|p| PoseLine {
                q: p.rotation,
                t: p.translation,
            }),
            scene: r.scene.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// `c×h×w` content tensor from the content encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentFeature(Tensor);

impl ContentFeature {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::validation(format!(
                "content feature must be c×h×w, got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("content feature".into()));
        }
        Ok(Self(values))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    /// Mean squared elementwise difference.
    pub fn mean_sq_distance(&self, other: &ContentFeature) -> Result<f64> {
        if self.0.shape() != other.0.shape() {
            return Err(Error::validation("content feature shape mismatch"));
        }
        let d = self.0.zip_map(&other.0, |a, b| (a - b) * (a - b));
        Ok(d.mean())
    }
}

/// Grouped convolution weights `(c_out, c_in_per_group, k, k)` with an
/// optional per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceFilter {
    weights: Tensor,
    groups: usize,
    bias: Option<Tensor>,
}

impl AppearanceFilter {
    pub fn new(weights: Tensor, groups: usize, bias: Option<Tensor>) -> Result<Self> {
        let [c_out, _, k, k2] = weights.shape() else {
            return Err(Error::validation(format!(
                "appearance filter must be 4-D, got {:?}",
                weights.shape()
            )));
        };
        if groups == 0 || c_out % groups != 0 {
            return Err(Error::validation(format!(
                "{c_out} output channels not divisible by {groups} groups"
            )));
        }
        if k != k2 {
            return Err(Error::validation("appearance filter kernel must be square"));
        }
        if let Some(b) = &bias {
            if b.numel() != *c_out {
                return Err(Error::validation(format!(
                    "filter bias has {} entries for {c_out} channels",
                    b.numel()
                )));
            }
            if !b.is_finite() {
                return Err(Error::NonFinite("appearance filter bias".into()));
            }
        }
        if !weights.is_finite() {
            return Err(Error::NonFinite("appearance filter weights".into()));
        }
        Ok(Self {
            weights,
            groups,
            bias,
        })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Input channels this filter expects: `c_in_per_group × groups`.
    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1] * self.groups
    }
}

/// Unit-norm descriptor from the contrastive head.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

pub const EMBEDDING_NORM_TOL: f64 = 1e-5;

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > EMBEDDING_NORM_TOL {
            return Err(Error::validation(format!("embedding norm {norm} is not 1")));
        }
        Ok(Self(values))
    }

    /// Normalizes an arbitrary non-zero vector.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::validation("cannot normalize a zero vector"));
        }
        Self::new(values.into_iter().map(|v| v / norm).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Dot product, which is the cosine similarity for unit vectors.
    pub fn similarity(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Loss weights of the full objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Betas {
    pub rs: f64,
    pub rc: f64,
    pub cc: f64,
    pub ca: f64,
    pub nce: f64,
}

impl Default for Betas {
    fn default() -> Self {
        Self {
            rs: 100.0,
            rc: 100.0,
            cc: 10.0,
            ca: 1.0,
            nce: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub m_c: f64,
    pub tau: f64,
    pub n_neg: usize,
    pub betas: Betas,
    pub filter_k: usize,
    pub rot_thresh_deg: f64,
    pub trans_thresh_m: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lr: f64,
    pub epochs_flat: usize,
    pub epochs_decay: usize,
    pub batch_size: usize,
    pub init_std: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            m_c: 0.1,
            tau: 0.07,
            n_neg: 16,
            betas: Betas::default(),
            filter_k: 5,
            rot_thresh_deg: 8.0,
            trans_thresh_m: 7.0,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            lr: 2e-4,
            epochs_flat: 35,
            epochs_decay: 15,
            batch_size: 1,
            init_std: 0.001,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m_c", self.m_c),
            ("tau", self.tau),
            ("beta_rs", self.betas.rs),
            ("beta_rc", self.betas.rc),
            ("beta_cc", self.betas.cc),
            ("beta_ca", self.betas.ca),
            ("beta_nce", self.betas.nce),
            ("rot_thresh_deg", self.rot_thresh_deg),
            ("trans_thresh_m", self.trans_thresh_m),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("lr", self.lr),
            ("init_std", self.init_std),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_neg < 1 {
            return Err(Error::Config("n_neg must be at least 1".into()));
        }
        if self.filter_k == 0 || self.filter_k.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "filter_k must be odd for same padding, got {}",
                self.filter_k
            )));
        }
        if self.batch_size != 1 {
            return Err(Error::Config("only batch_size = 1 is supported".into()));
        }
        if self.epochs_flat + self.epochs_decay == 0 {
            return Err(Error::Config("total epochs must be positive".into()));
        }
        if self.adam_beta1 >= 1.0 || self.adam_beta2 >= 1.0 {
            return Err(Error::Config("Adam betas must be below 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(
        path: &str,
        domain: &str,
        id: usize,
        reference: bool,
        pose: Option<PoseAnnotation>,
    ) -> DatasetRecord {
        DatasetRecord {
            image_path: path.into(),
            domain: DomainLabel {
                name: domain.into(),
                id,
            },
            pose,
            is_reference: reference,
            scene: None,
        }
    }

    #[test]
    fn pose_distance_identity_is_zero() {
        let p = PoseAnnotation::planar(1.0, 2.0, 30.0);
        assert_eq!(pose_distance(&p, &p).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn pose_distance_ninety_degrees_about_z() {
        let a = PoseAnnotation::identity();
        let h = std::f64::consts::FRAC_PI_4;
        let b = PoseAnnotation::new([h.cos(), 0.0, 0.0, h.sin()], [0.0; 3]).unwrap();
        let (angle, dist) = pose_distance(&a, &b).unwrap();
        assert!((angle - 90.0).abs() < 1e-9);
        assert_eq!(dist, 0.0);
    }

    #[test]
    fn pose_distance_three_four_five() {
        let a = PoseAnnotation::identity();
        let b = PoseAnnotation::new([1.0, 0.0, 0.0, 0.0], [3.0, 4.0, 0.0]).unwrap();
        assert_eq!(pose_distance(&a, &b).unwrap(), (0.0, 5.0));
    }

    #[test]
    fn pose_rejects_non_unit_quaternion() {
        assert!(PoseAnnotation::new([1.1, 0.0, 0.0, 0.0], [0.0; 3]).is_err());
    }

    #[test]
    fn quaternion_sign_is_irrelevant() {
        let a = PoseAnnotation::planar(0.0, 0.0, 20.0);
        let r = a.rotation();
        let b = PoseAnnotation::new([-r[0], -r[1], -r[2], -r[3]], [0.0; 3]).unwrap();
        let (angle, _) = pose_distance(&a, &b).unwrap();
        assert!(angle.abs() < 1e-6);
    }

    #[test]
    fn manifest_three_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            "{\"path\":\"a.png\",\"domain\":\"day\",\"reference\":true,\"pose\":{\"q\":[1,0,0,0],\"t\":[0,0,0]}}\n\
             {\"path\":\"b.png\",\"domain\":\"night\",\"reference\":false}\n\
             {\"path\":\"c.png\",\"domain\":\"day\",\"reference\":false}\n",
        )
        .unwrap();
        let recs = load_manifest(&p).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(
            recs[1].domain,
            DomainLabel {
                name: "night".into(),
                id: 1
            }
        );
        assert_eq!(recs[2].domain.id, 0);
    }

    #[test]
    fn manifest_reference_without_pose_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            "{\"path\":\"a.png\",\"domain\":\"day\",\"reference\":true}\n",
        )
        .unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn manifest_parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            "{\"path\":\"a.png\",\"domain\":\"day\",\"reference\":false}\nnot json\n",
        )
        .unwrap();
        match load_manifest(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_missing_file() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/m.jsonl")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn save_rejects_invalid_record() {
        let dir = tempfile::tempdir().unwrap();
        let bad = rec("a.png", "day", 0, true, None);
        assert!(save_manifest(&dir.path().join("m.jsonl"), &[bad]).is_err());
    }

    #[test]
    fn image_range_is_enforced() {
        assert!(Image::new(1, 1, vec![0.0, 1.0, -1.0]).is_ok());
        assert!(Image::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(Image::new(1, 1, vec![0.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn image_tensor_round_trip() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| (i as f64 / 20.0) - 0.4).collect();
        let img = Image::new(2, 3, data).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert_eq!(t.data()[0], img.pixel(0, 0)[0]);
        assert_eq!(t.data()[6], img.pixel(0, 0)[1]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn embedding_norm_contract() {
        assert!(Embedding::new(vec![0.6, 0.8]).is_ok());
        assert!(Embedding::new(vec![0.6, 0.9]).is_err());
        let e = Embedding::normalized(vec![3.0, 4.0]).unwrap();
        assert!((e.values()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn filter_shape_contract() {
        assert!(AppearanceFilter::new(
            Tensor::zeros(&[64, 1, 5, 5]),
            64,
            Some(Tensor::zeros(&[64]))
        )
        .is_ok());
        assert!(AppearanceFilter::new(Tensor::zeros(&[6, 1, 5, 5]), 4, None).is_err());
        assert!(
            AppearanceFilter::new(Tensor::zeros(&[4, 1, 5, 5]), 4, Some(Tensor::zeros(&[3])))
                .is_err()
        );
    }

    #[test]
    fn default_hyperparams_are_valid() {
        HyperParams::default().validate().unwrap();
        let hp = HyperParams {
            filter_k: 4,
            ..HyperParams::default()
        };
        assert!(hp.validate().is_err());
    }
}

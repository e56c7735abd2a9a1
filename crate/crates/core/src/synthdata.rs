//! Procedural multi-domain dataset with known content, appearance and pose.
//!
//! A world is an infinite plane of flat-shaded primitives hashed from a seed
//! on a 12 m grid. A camera pose picks an oriented square window of that
//! plane; an [`AppearanceSpec`] then maps base shades through a per-channel
//! affine transform plus optional noise. Because every domain is affine in
//! the base shades, the standardized-luminance edge map of a scene is the
//! same in every domain up to noise and clamping.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    pose_distance, save_manifest, DatasetRecord, DomainLabel, Image, PoseAnnotation,
};
use crate::error::{Error, Result};
use crate::image_io;
use crate::par;

const CELL_M: f64 = 12.0;
pub const DEFAULT_VIEW_EXTENT_M: f64 = 32.0;
pub const DEFAULT_SIZE: usize = 64;
/// Sobel magnitude threshold on standardized luminance.
pub const EDGE_THRESHOLD: f64 = 1.5;

/// Base RGB shades; luminances are -0.5, -0.25, 0, 0.25, 0.5 so that any two
/// distinct shades produce a strong luminance edge.
const PALETTE: [[f64; 3]; 5] = [
    [0.05, 0.0, -0.05],
    [-0.55, -0.45, -0.5],
    [-0.15, -0.35, -0.25],
    [0.35, 0.2, 0.2],
    [0.5, 0.45, 0.55],
];
const BACKGROUND: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    Rect {
        center: [f64; 2],
        half: [f64; 2],
        angle: f64,
        shade: usize,
    },
    Circle {
        center: [f64; 2],
        radius: f64,
        shade: usize,
    },
    Polyline {
        points: Vec<[f64; 2]>,
        half_width: f64,
        shade: usize,
    },
}

impl Primitive {
    fn shade(&self) -> usize {
        match self {
            Primitive::Rect { shade, .. }
            | Primitive::Circle { shade, .. }
            | Primitive::Polyline { shade, .. } => *shade,
        }
    }

    fn draw_order(&self) -> u8 {
        match self {
            Primitive::Polyline { .. } => 0,
            Primitive::Rect { .. } => 1,
            Primitive::Circle { .. } => 2,
        }
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        match self {
            Primitive::Rect {
                center,
                half,
                angle,
                ..
            } => {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                let (s, c) = angle.sin_cos();
                let (lx, ly) = (c * dx + s * dy, -s * dx + c * dy);
                lx.abs() <= half[0] && ly.abs() <= half[1]
            }
            Primitive::Circle { center, radius, .. } => {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                dx * dx + dy * dy <= radius * radius
            }
            Primitive::Polyline {
                points, half_width, ..
            } => points
                .windows(2)
                .any(|seg| segment_distance(p, seg[0], seg[1]) <= *half_width),
        }
    }

    /// Radius of a disc around the primitive's anchor that contains it.
    fn bounding(&self) -> ([f64; 2], f64) {
        match self {
            Primitive::Rect { center, half, .. } => (*center, half[0].hypot(half[1])),
            Primitive::Circle { center, radius, .. } => (*center, *radius),
            Primitive::Polyline {
                points, half_width, ..
            } => {
                let c = points[0];
                let r = points
                    .iter()
                    .map(|q| (q[0] - c[0]).hypot(q[1] - c[1]))
                    .fold(0.0, f64::max);
                (c, r + half_width)
            }
        }
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let (apx, apy) = (p[0] - a[0], p[1] - a[1]);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (apx - t * abx).hypot(apy - t * aby)
}

fn mix(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

fn cell_seed(seed: u64, cx: i64, cy: i64) -> u64 {
    mix(seed ^ mix(cx as u64 ^ mix(cy as u64 ^ 0x9e37_79b9_7f4a_7c15)))
}

fn cell_primitives(seed: u64, cx: i64, cy: i64) -> Vec<Primitive> {
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, cx, cy));
    let origin = [cx as f64 * CELL_M, cy as f64 * CELL_M];
    let at = |rng: &mut ChaCha8Rng| {
        [
            origin[0] + rng.random_range(0.0..CELL_M),
            origin[1] + rng.random_range(0.0..CELL_M),
        ]
    };
    let count = rng.random_range(1..=3);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let shade = rng.random_range(1..PALETTE.len());
        let kind = rng.random_range(0..10);
        let prim = if kind < 5 {
            Primitive::Rect {
                center: at(&mut rng),
                half: [rng.random_range(1.5..4.0), rng.random_range(1.5..4.0)],
                angle: rng.random_range(0.0..std::f64::consts::PI),
                shade,
            }
        } else if kind < 8 {
            Primitive::Circle {
                center: at(&mut rng),
                radius: rng.random_range(1.2..2.6),
                shade,
            }
        } else {
            let start = at(&mut rng);
            let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mut points = vec![start];
            let mut h = heading;
            for _ in 0..2 {
                let last = *points.last().expect("non-empty");
                let len = rng.random_range(5.0..10.0);
                points.push([last[0] + len * h.cos(), last[1] + len * h.sin()]);
                h += rng.random_range(-0.8..0.8);
            }
            Primitive::Polyline {
                points,
                half_width: rng.random_range(0.7..1.3),
                shade,
            }
        };
        out.push(prim);
    }
    out
}

/// Scene content seen from one camera pose.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub layout: Vec<Primitive>,
    pub camera_pose: PoseAnnotation,
    pub view_extent_m: f64,
}

impl SceneSpec {
    /// Layout is a pure function of `(seed, pose, view_extent_m)`.
    pub fn new(seed: u64, camera_pose: PoseAnnotation, view_extent_m: f64) -> Self {
        let [x, y, _] = camera_pose.translation();
        let reach = view_extent_m * std::f64::consts::FRAC_1_SQRT_2;
        // Primitives may extend up to ~20 m beyond their cell.
        let margin = reach + 20.0;
        let (cx0, cx1) = (
            ((x - margin) / CELL_M).floor() as i64,
            ((x + margin) / CELL_M).floor() as i64,
        );
        let (cy0, cy1) = (
            ((y - margin) / CELL_M).floor() as i64,
            ((y + margin) / CELL_M).floor() as i64,
        );
        let mut layout = Vec::new();
        for cy in cy0..=cy1 {
            for cx in cx0..=cx1 {
                for p in cell_primitives(seed, cx, cy) {
                    let (c, r) = p.bounding();
                    if (c[0] - x).hypot(c[1] - y) <= reach + r {
                        layout.push(p);
                    }
                }
            }
        }
        layout.sort_by_key(|p| p.draw_order());
        Self {
            seed,
            layout,
            camera_pose,
            view_extent_m,
        }
    }

    /// Base-shade index of every pixel.
    fn shade_map(&self, h: usize, w: usize) -> Vec<usize> {
        let [tx, ty, _] = self.camera_pose.translation();
        let yaw = self.camera_pose.yaw_deg().to_radians();
        let (s, c) = yaw.sin_cos();
        let e = self.view_extent_m;
        let mut out = vec![BACKGROUND; h * w];
        for i in 0..h {
            let v = (0.5 - (i as f64 + 0.5) / h as f64) * e;
            for j in 0..w {
                let u = ((j as f64 + 0.5) / w as f64 - 0.5) * e;
                let p = [tx + c * u - s * v, ty + s * u + c * v];
                if let Some(prim) = self.layout.iter().rev().find(|prim| prim.contains(p)) {
                    out[i * w + j] = prim.shade();
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceSpec {
    pub domain: DomainLabel,
    pub global_tint: [f64; 3],
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
}

impl AppearanceSpec {
    /// Identity appearance: renders the base shades unchanged.
    pub fn canonical(domain: DomainLabel) -> Self {
        Self {
            domain,
            global_tint: [0.0; 3],
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.0,
        }
    }

    /// Built-in domains: `day`, `dusk`, `snow`, `fog`, `night`.
    pub fn preset(name: &str, id: usize) -> Option<Self> {
        let domain = DomainLabel {
            name: name.to_string(),
            id,
        };
        let (tint, brightness, contrast, noise) = match name {
            "day" => ([0.0, 0.0, 0.0], 0.0, 1.0, 0.0),
            "dusk" => ([0.2, 0.0, -0.2], -0.15, 0.8, 0.0),
            "snow" => ([-0.05, 0.05, 0.15], 0.3, 0.6, 0.005),
            "fog" => ([0.0, 0.0, 0.0], 0.15, 0.35, 0.0),
            "night" => ([-0.1, -0.05, 0.2], -0.5, 0.45, 0.01),
            _ => return None,
        };
        Some(Self {
            domain,
            global_tint: tint,
            brightness,
            contrast,
            noise_sigma: noise,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let vals =
            self.global_tint
                .iter()
                .chain([&self.brightness, &self.contrast, &self.noise_sigma]);
        if vals.clone().any(|v| !v.is_finite()) {
            return Err(Error::validation("appearance has non-finite fields"));
        }
        if self.contrast <= 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::validation(
                "appearance needs positive contrast and non-negative noise",
            ));
        }
        Ok(())
    }
}

/// Parses a comma-separated domain list. Each entry is either a preset name
/// or `name:tr/tg/tb:brightness:contrast:noise`. The first entry becomes the
/// reference domain.
pub fn parse_domains(spec: &str) -> Result<Vec<AppearanceSpec>> {
    let mut out: Vec<AppearanceSpec> = Vec::new();
    for (id, entry) in spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .enumerate()
    {
        let parts: Vec<&str> = entry.split(':').collect();
        let app = match parts.as_slice() {
            [name] => AppearanceSpec::preset(name, id)
                .ok_or_else(|| Error::Config(format!("unknown domain preset '{name}'")))?,
            [name, tint, b, c, n] => {
                let tint: Vec<f64> = tint
                    .split('/')
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Config(format!("bad tint in '{entry}': {e}")))?;
                let [tr, tg, tb] = tint[..] else {
                    return Err(Error::Config(format!(
                        "tint in '{entry}' needs 3 components"
                    )));
                };
                let num = |s: &str| {
                    s.parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad number '{s}' in '{entry}': {e}")))
                };
                AppearanceSpec {
                    domain: DomainLabel {
                        name: name.to_string(),
                        id,
                    },
                    global_tint: [tr, tg, tb],
                    brightness: num(b)?,
                    contrast: num(c)?,
                    noise_sigma: num(n)?,
                }
            }
            _ => return Err(Error::Config(format!("malformed domain entry '{entry}'"))),
        };
        app.validate()?;
        if out.iter().any(|o| o.domain.name == app.domain.name) {
            return Err(Error::Config(format!(
                "duplicate domain '{}'",
                app.domain.name
            )));
        }
        out.push(app);
    }
    Ok(out)
}

fn noise_seed(scene: &SceneSpec, domain_id: usize) -> u64 {
    let [x, y, z] = scene.camera_pose.translation();
    let r = scene.camera_pose.rotation();
    let mut h = mix(scene.seed ^ 0x51ed_2701);
    for v in [x, y, z, r[0], r[1], r[2], r[3]] {
        h = mix(h ^ v.to_bits());
    }
    mix(h ^ domain_id as u64)
}

/// Renders a scene under an appearance. Deterministic in all inputs.
pub fn render(
    scene: &SceneSpec,
    appearance: &AppearanceSpec,
    size: (usize, usize),
) -> Result<Image> {
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(Error::validation("render size must be positive"));
    }
    if scene.layout.is_empty() {
        return Err(Error::validation("scene layout is empty"));
    }
    appearance.validate()?;
    let shades = scene.shade_map(h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(scene, appearance.domain.id));
    let noise = (appearance.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, appearance.noise_sigma).expect("sigma validated"));
    let mut data = Vec::with_capacity(h * w * 3);
    for &s in &shades {
        for (c, &base) in PALETTE[s].iter().enumerate() {
            let mut v =
                appearance.contrast * base + appearance.brightness + appearance.global_tint[c];
            if let Some(n) = &noise {
                v += n.sample(&mut rng);
            }
            data.push(v.clamp(-1.0, 1.0));
        }
    }
    Image::new(h, w, data)
}

/// Binary edge map: Sobel magnitude of per-image standardized luminance,
/// thresholded at [`EDGE_THRESHOLD`]. Borders replicate the nearest pixel.
pub fn edge_map(img: &Image) -> Vec<bool> {
    let (h, w) = (img.height(), img.width());
    let lum: Vec<f64> = img
        .data()
        .chunks_exact(3)
        .map(|p| (p[0] + p[1] + p[2]) / 3.0)
        .collect();
    let n = lum.len() as f64;
    let mean = lum.iter().sum::<f64>() / n;
    let std = (lum.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-9 {
        return vec![false; h * w];
    }
    let z: Vec<f64> = lum.iter().map(|v| (v - mean) / std).collect();
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        z[yy * w + xx]
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * w + x as usize] = gx.hypot(gy) > EDGE_THRESHOLD;
        }
    }
    out
}

/// Fraction of pixels whose edge labels agree.
pub fn edge_agreement(a: &Image, b: &Image) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::validation("edge agreement needs equal sizes"));
    }
    let (ea, eb) = (edge_map(a), edge_map(b));
    let same = ea.iter().zip(&eb).filter(|(x, y)| x == y).count();
    Ok(same as f64 / ea.len() as f64)
}

/// Per-scene motion of the camera along its trajectory. Both zero means all
/// scenes share one pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseJitter {
    /// Mean forward step between consecutive scenes, meters.
    pub step_m: f64,
    /// Maximum heading change between consecutive scenes, degrees.
    pub turn_deg: f64,
}

impl Default for PoseJitter {
    fn default() -> Self {
        Self {
            step_m: 4.0,
            turn_deg: 4.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GenerateConfig {
    pub n_scenes: usize,
    pub domains: Vec<AppearanceSpec>,
    pub pose_jitter: PoseJitter,
    pub size: (usize, usize),
    pub seed: u64,
    pub view_extent_m: f64,
}

impl GenerateConfig {
    pub fn new(n_scenes: usize, domains: Vec<AppearanceSpec>) -> Self {
        Self {
            n_scenes,
            domains,
            pose_jitter: PoseJitter::default(),
            size: (DEFAULT_SIZE, DEFAULT_SIZE),
            seed: 0,
            view_extent_m: DEFAULT_VIEW_EXTENT_M,
        }
    }
}

/// Camera poses of a trajectory: each scene advances along its heading by a
/// jittered step and turns by a bounded random angle.
pub fn trajectory(n: usize, jitter: PoseJitter, seed: u64) -> Vec<PoseAnnotation> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x7a11));
    let (mut x, mut y, mut yaw) = (0.0f64, 0.0f64, 0.0f64);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            let step = jitter.step_m * rng.random_range(0.6..1.4);
            let turn = jitter.turn_deg * rng.random_range(-1.0..1.0);
            yaw += turn;
            let r = yaw.to_radians();
            x -= step * r.sin();
            y += step * r.cos();
        }
        out.push(PoseAnnotation::planar(x, y, yaw));
    }
    out
}

/// Number of unordered pose pairs within both thresholds, via a spatial hash
/// with cells of the translation threshold.
pub fn count_near_pairs(poses: &[PoseAnnotation], rot_deg: f64, trans_m: f64) -> Result<usize> {
    let cell = trans_m.max(1e-9);
    let key = |p: &PoseAnnotation| {
        let [x, y, z] = p.translation();
        (
            (x / cell).floor() as i64,
            (y / cell).floor() as i64,
            (z / cell).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in poses.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let mut count = 0;
    for (i, p) in poses.iter().enumerate() {
        let (kx, ky, kz) = key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&(kx + dx, ky + dy, kz + dz)) else {
                        continue;
                    };
                    for &j in bucket.iter().filter(|&&j| j > i) {
                        let (angle, dist) = pose_distance(p, &poses[j])?;
                        if angle <= rot_deg && dist <= trans_m {
                            count += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(count)
}

#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    /// Training manifest; poses only on reference records.
    pub manifest_path: PathBuf,
    /// Non-reference records with ground-truth poses, for localization.
    pub queries_path: PathBuf,
    pub records: Vec<DatasetRecord>,
    pub poses: Vec<PoseAnnotation>,
    pub near_pairs: usize,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";

pub fn scene_name(i: usize) -> String {
    format!("s{i:04}")
}

/// Renders `n_scenes × domains` images to `out_dir/images/` and writes the
/// manifests. The first domain is the reference domain.
pub fn generate_dataset(cfg: &GenerateConfig, out_dir: &Path) -> Result<GeneratedDataset> {
    if cfg.n_scenes < 2 {
        return Err(Error::validation("need at least 2 scenes"));
    }
    if cfg.domains.len() < 2 {
        return Err(Error::validation("need at least 2 domains"));
    }
    for (i, d) in cfg.domains.iter().enumerate() {
        d.validate()?;
        if d.domain.id != i {
            return Err(Error::validation(format!(
                "domain '{}' has id {} but position {i}",
                d.domain.name, d.domain.id
            )));
        }
    }
    let poses = trajectory(cfg.n_scenes, cfg.pose_jitter, cfg.seed);
    let images = par::try_map_range(cfg.n_scenes, |s| {
        let scene = SceneSpec::new(cfg.seed, poses[s], cfg.view_extent_m);
        cfg.domains
            .iter()
            .map(|d| render(&scene, d, cfg.size))
            .collect::<Result<Vec<_>>>()
    })?;

    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::new();
    let mut queries = Vec::new();
    for (s, per_domain) in images.iter().enumerate() {
        for (d, img) in cfg.domains.iter().zip(per_domain) {
            let rel = format!("images/{}_{}.png", d.domain.name, scene_name(s));
            image_io::save_png(img, &out_dir.join(&rel))?;
            let is_reference = d.domain.id == 0;
            let record = DatasetRecord {
                image_path: rel,
                domain: d.domain.clone(),
                pose: is_reference.then_some(poses[s]),
                is_reference,
                scene: Some(scene_name(s)),
            };
            if !is_reference {
                queries.push(DatasetRecord {
                    pose: Some(poses[s]),
                    ..record.clone()
                });
            }
            records.push(record);
        }
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let queries_path = out_dir.join(QUERIES_FILE);
    save_manifest(&manifest_path, &records)?;
    save_manifest(&queries_path, &queries)?;
    let near_pairs = count_near_pairs(&poses, 8.0, 7.0)?;
    Ok(GeneratedDataset {
        manifest_path,
        queries_path,
        records,
        poses,
        near_pairs,
    })
}

//! Retrieval-based localization: a query takes the pose of its most similar
//! reference, and recall is reported at nested pose-error thresholds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{load_manifest, pose_distance, Embedding, Image, PoseAnnotation};
use crate::error::{Error, Result};
use crate::image_io::load_png;
use crate::networks::Model;
use crate::par;

/// `(meters, degrees)` thresholds, fine to coarse. A query passes a bucket
/// only if both errors are within bounds.
pub const BUCKETS: [(f64, f64); 3] = [(0.25, 2.0), (0.5, 5.0), (5.0, 10.0)];

/// One reference image: its descriptor and pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub embedding: Embedding,
    pub pose: PoseAnnotation,
}

/// A query descriptor with its ground truth and report group.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub embedding: Embedding,
    pub pose: PoseAnnotation,
    pub group: String,
}

/// Index of the most similar reference, lowest index on ties.
pub fn retrieve(query: &Embedding, db: &[Reference]) -> Result<usize> {
    if db.is_empty() {
        return Err(Error::validation("reference database is empty"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, r) in db.iter().enumerate() {
        if r.embedding.dim() != query.dim() {
            return Err(Error::validation(format!(
                "reference {i} has dimension {}, query has {}",
                r.embedding.dim(),
                query.dim()
            )));
        }
        let s = query.similarity(&r.embedding);
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

/// Pose of the reference closest to `query` in the content embedding.
pub fn localize(query: &Image, db: &[Reference], model: &Model) -> Result<PoseAnnotation> {
    if db.is_empty() {
        return Err(Error::validation("reference database is empty"));
    }
    let z = model.embed_image(query)?;
    Ok(db[retrieve(&z, db)?].pose)
}

pub fn build_reference_db(
    model: &Model,
    images: &[Image],
    poses: &[PoseAnnotation],
) -> Result<Vec<Reference>> {
    if images.len() != poses.len() {
        return Err(Error::validation(format!(
            "{} reference images but {} poses",
            images.len(),
            poses.len()
        )));
    }
    let emb = par::try_map_range(images.len(), |i| model.embed_image(&images[i]))?;
    Ok(emb
        .into_iter()
        .zip(poses)
        .map(|(embedding, &pose)| Reference { embedding, pose })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRecall {
    pub queries: usize,
    pub hits: [usize; 3],
    pub recall: [f64; 3],
}

impl GroupRecall {
    fn from_errors(errors: &[(f64, f64)]) -> Self {
        let mut hits = [0; 3];
        for &(rot, trans) in errors {
            for (h, &(m, deg)) in hits.iter_mut().zip(&BUCKETS) {
                if trans <= m && rot <= deg {
                    *h += 1;
                }
            }
        }
        let n = errors.len();
        let recall = hits.map(|h| if n == 0 { 0.0 } else { h as f64 / n as f64 });
        Self {
            queries: n,
            hits,
            recall,
        }
    }
}

/// Recall per query group plus the pooled total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub buckets: [(f64, f64); 3],
    pub groups: BTreeMap<String, GroupRecall>,
    pub overall: GroupRecall,
}

impl RecallReport {
    /// Recall from `(rotation degrees, translation meters)` errors per group.
    pub fn from_errors(errors: &[(String, (f64, f64))]) -> Self {
        let mut by_group: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for (g, e) in errors {
            by_group.entry(g.clone()).or_default().push(*e);
        }
        let all: Vec<(f64, f64)> = errors.iter().map(|(_, e)| *e).collect();
        Self {
            buckets: BUCKETS,
            groups: by_group
                .iter()
                .map(|(g, e)| (g.clone(), GroupRecall::from_errors(e)))
                .collect(),
            overall: GroupRecall::from_errors(&all),
        }
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let head: Vec<String> = self
            .buckets
            .iter()
            .map(|(m, d)| format!("{m}m/{d}°"))
            .collect();
        let _ = writeln!(out, "{:<12} {:>7}  {}", "group", "queries", head.join("  "));
        let rows = self
            .groups
            .iter()
            .map(|(g, r)| (g.as_str(), r))
            .chain(std::iter::once(("all", &self.overall)));
        for (g, r) in rows {
            let cells: Vec<String> = r
                .recall
                .iter()
                .zip(&head)
                .map(|(v, h)| format!("{:>w$.1}", 100.0 * v, w = h.chars().count()))
                .collect();
            let _ = writeln!(out, "{g:<12} {:>7}  {}", r.queries, cells.join("  "));
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Localizes every query and aggregates recall.
pub fn evaluate_embeddings(queries: &[Query], db: &[Reference]) -> Result<RecallReport> {
    let errors = par::try_map_range(queries.len(), |i| -> Result<(String, (f64, f64))> {
        let q = &queries[i];
        let est = db[retrieve(&q.embedding, db)?].pose;
        Ok((q.group.clone(), pose_distance(&est, &q.pose)?))
    })?;
    Ok(RecallReport::from_errors(&errors))
}

/// Query images with ground-truth poses, grouped by `groups`.
pub fn evaluate(
    queries: &[(Image, PoseAnnotation, String)],
    db: &[Reference],
    model: &Model,
) -> Result<RecallReport> {
    if db.is_empty() {
        return Err(Error::validation("reference database is empty"));
    }
    let embedded = par::try_map_range(queries.len(), |i| -> Result<Query> {
        let (img, pose, group) = &queries[i];
        Ok(Query {
            embedding: model.embed_image(img)?,
            pose: *pose,
            group: group.clone(),
        })
    })?;
    evaluate_embeddings(&embedded, db)
}

/// Loads the posed images of a manifest with their domain names, optionally
/// only the reference records.
pub fn load_posed(
    manifest: &Path,
    references_only: bool,
) -> Result<Vec<(Image, PoseAnnotation, String)>> {
    let mut records = load_manifest(manifest)?;
    if references_only {
        records.retain(|r| r.is_reference);
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    par::try_map_range(records.len(), |i| {
        let r = &records[i];
        let pose = r
            .pose
            .ok_or_else(|| Error::validation(format!("record {} has no pose", r.image_path)))?;
        Ok((load_png(&r.resolve(base))?, pose, r.domain.name.clone()))
    })
}

/// Full protocol from two manifests: the reference records of `references`
/// form the database, every record of `queries` is reported per domain.
pub fn evaluate_manifests(
    model: &Model,
    queries: &Path,
    references: &Path,
) -> Result<RecallReport> {
    let refs = load_posed(references, true)?;
    let (images, poses): (Vec<Image>, Vec<PoseAnnotation>) =
        refs.into_iter().map(|(i, p, _)| (i, p)).unzip();
    let db = build_reference_db(model, &images, &poses)?;
    evaluate(&load_posed(queries, false)?, &db, model)
}

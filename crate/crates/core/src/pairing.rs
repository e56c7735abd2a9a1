//! Training pairs from embedding similarity: pose-verified positives among
//! reference images, NCE negatives, and cross-domain source→target pairs.
//!
//! Similarity is the dot product of unit embeddings. All searches are exact.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{pose_distance, DatasetRecord, Embedding};
use crate::error::{Error, Result};
use crate::par;

pub const DEFAULT_K_CANDIDATES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAssignment {
    pub source_idx: usize,
    pub target_idx: usize,
    pub similarity: f64,
}

/// Per query: the candidates that passed the pose check, and the rest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MinedPairs {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

fn check_lengths(records: &[DatasetRecord], embeddings: &[Embedding]) -> Result<()> {
    if records.len() != embeddings.len() {
        return Err(Error::validation(format!(
            "{} records but {} embeddings",
            records.len(),
            embeddings.len()
        )));
    }
    Ok(())
}

/// The `k` most similar other items, most similar first, ties by index.
pub fn top_k_candidates(query: usize, embeddings: &[Embedding], k: usize) -> Vec<usize> {
    let q = &embeddings[query];
    let mut scored: Vec<(f64, usize)> = embeddings
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != query)
        .map(|(j, e)| (q.similarity(e), j))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored.into_iter().map(|(_, j)| j).collect()
}

/// Among each query's `k_candidates` most similar references, those within
/// both pose thresholds are positives and the others negatives.
pub fn mine_positives(
    records: &[DatasetRecord],
    embeddings: &[Embedding],
    k_candidates: usize,
    rot_thresh_deg: f64,
    trans_thresh_m: f64,
) -> Result<MinedPairs> {
    check_lengths(records, embeddings)?;
    let poses = records
        .iter()
        .map(|r| {
            r.pose
                .ok_or_else(|| Error::validation(format!("record {} has no pose", r.image_path)))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = par::try_map_range(records.len(), |i| -> Result<(Vec<usize>, Vec<usize>)> {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for j in top_k_candidates(i, embeddings, k_candidates) {
            let (rot, trans) = pose_distance(&poses[i], &poses[j])?;
            if rot <= rot_thresh_deg && trans <= trans_thresh_m {
                pos.push(j);
            } else {
                neg.push(j);
            }
        }
        Ok((pos, neg))
    })?;
    let (positives, negatives) = rows.into_iter().unzip();
    Ok(MinedPairs {
        positives,
        negatives,
    })
}

/// `n_neg` distinct indices from `0..n_records`, excluding the query and
/// `excluded`, uniformly without replacement.
pub fn sample_nce_negatives(
    query_idx: usize,
    n_records: usize,
    excluded: &[usize],
    n_neg: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..n_records)
        .filter(|&j| j != query_idx && !excluded.contains(&j))
        .collect();
    if pool.len() < n_neg {
        return Err(Error::validation(format!(
            "only {} eligible negatives for {n_neg} requested",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, pool.len(), n_neg)
        .into_iter()
        .map(|k| pool[k])
        .collect())
}

/// Pairs every record with its most similar record from another domain.
pub fn refresh_source_target(
    records: &[DatasetRecord],
    embeddings: &[Embedding],
) -> Result<Vec<PairAssignment>> {
    check_lengths(records, embeddings)?;
    if records.len() < 2 {
        return Err(Error::validation("pairing needs at least two records"));
    }
    par::try_map_range(records.len(), |i| {
        let mut best: Option<(usize, f64)> = None;
        for (j, r) in records.iter().enumerate() {
            if r.domain.name == records[i].domain.name {
                continue;
            }
            let s = embeddings[i].similarity(&embeddings[j]);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        let (target_idx, similarity) = best.ok_or_else(|| {
            Error::validation(format!(
                "record {} has no candidate from another domain",
                records[i].image_path
            ))
        })?;
        Ok(PairAssignment {
            source_idx: i,
            target_idx,
            similarity,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{DomainLabel, PoseAnnotation};

    fn rec(domain: &str, pose: Option<PoseAnnotation>) -> DatasetRecord {
        DatasetRecord {
            image_path: format!("{domain}.png"),
            domain: DomainLabel {
                name: domain.into(),
                id: 0,
            },
            pose,
            is_reference: pose.is_some(),
            scene: None,
        }
    }

    fn emb(v: &[f64]) -> Embedding {
        Embedding::normalized(v.to_vec()).unwrap()
    }

    #[test]
    fn identical_poses_are_mutual_positives() {
        let p = PoseAnnotation::planar(1.0, 2.0, 30.0);
        let recs = vec![rec("day", Some(p)), rec("day", Some(p))];
        let m = mine_positives(&recs, &[emb(&[1.0, 0.0]), emb(&[0.0, 1.0])], 20, 8.0, 7.0).unwrap();
        assert_eq!(m.positives, vec![vec![1], vec![0]]);
    }

    #[test]
    fn rotation_over_threshold_is_negative() {
        let recs = vec![
            rec("day", Some(PoseAnnotation::planar(0.0, 0.0, 0.0))),
            rec("day", Some(PoseAnnotation::planar(1.0, 0.0, 10.0))),
        ];
        let m = mine_positives(&recs, &[emb(&[1.0]), emb(&[1.0])], 20, 8.0, 7.0).unwrap();
        assert_eq!(m.negatives[0], vec![1]);
        assert!(m.positives[0].is_empty());
    }

    #[test]
    fn missing_pose_is_rejected() {
        let recs = vec![
            rec("day", None),
            rec("day", Some(PoseAnnotation::identity())),
        ];
        assert!(matches!(
            mine_positives(&recs, &[emb(&[1.0]), emb(&[1.0])], 5, 8.0, 7.0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn forced_negative_sample() {
        let s = sample_nce_negatives(0, 18, &[5], 16, 9).unwrap();
        let mut sorted = s.clone();
        sorted.sort();
        let want: Vec<usize> = (1..18).filter(|&j| j != 5).collect();
        assert_eq!(sorted, want);
        assert_eq!(s, sample_nce_negatives(0, 18, &[5], 16, 9).unwrap());
        assert!(sample_nce_negatives(0, 17, &[5], 16, 9).is_err());
    }

    #[test]
    fn two_domains_pair_with_each_other() {
        let recs = vec![rec("day", None), rec("night", None)];
        let a = refresh_source_target(&recs, &[emb(&[1.0, 0.0]), emb(&[0.0, 1.0])]).unwrap();
        assert_eq!((a[0].target_idx, a[1].target_idx), (1, 0));
    }

    #[test]
    fn ties_pick_lowest_index() {
        let recs = vec![rec("day", None), rec("night", None), rec("night", None)];
        let e = [emb(&[1.0]), emb(&[1.0]), emb(&[1.0])];
        assert_eq!(refresh_source_target(&recs, &e).unwrap()[0].target_idx, 1);
    }

    #[test]
    fn single_domain_has_no_cross_domain_candidate() {
        let recs = vec![rec("day", None), rec("day", None)];
        assert!(refresh_source_target(&recs, &[emb(&[1.0]), emb(&[1.0])]).is_err());
    }
}

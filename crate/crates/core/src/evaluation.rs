//! Ranking metrics: average precision at K and its mean over classes.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::dataset::SegmentLabel;
use crate::error::{Error, Result};

pub const DEFAULT_MAP_K: usize = 100_000;

/// One class's ranked predictions with binary relevance per item.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub class_id: u32,
    /// `(key, relevance)` in rank order.
    pub items: Vec<(String, u8)>,
    /// Number of positives for this class in the ground truth.
    pub n_positive: usize,
}

/// `AP@K = (1 / N) Σ_{k ≤ K} P(k) · rel(k)`, where `N` is the number of
/// ground-truth positives. A class without positives scores 0.
pub fn average_precision_at_k(relevance: &[u8], n_positive: usize, k: usize) -> Result<f64> {
    if let Some(bad) = relevance.iter().find(|&&r| r > 1) {
        return Err(Error::Domain(format!("relevance {bad} is not 0 or 1")));
    }
    if n_positive == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevance.iter().take(k).enumerate() {
        if r == 1 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / n_positive as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAp {
    pub class_id: u32,
    pub ap: f64,
    pub n_positive: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapReport {
    pub map: f64,
    pub k: usize,
    pub per_class: Vec<ClassAp>,
}

/// Mean of AP@K over `lists`, zero-positive classes included.
pub fn map_at_k(lists: &[RankedList], k: usize) -> Result<MapReport> {
    if lists.is_empty() {
        return Err(Error::Domain("no classes to evaluate".into()));
    }
    let per_class = lists
        .iter()
        .map(|l| {
            let rel: Vec<u8> = l.items.iter().map(|(_, r)| *r).collect();
            Ok(ClassAp {
                class_id: l.class_id,
                ap: average_precision_at_k(&rel, l.n_positive, k)?,
                n_positive: l.n_positive,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let map = per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64;
    Ok(MapReport { map, k, per_class })
}

/// A scored segment prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class_id: u32,
    pub video_id: String,
    pub start_frame: u32,
    pub score: f64,
}

/// Joins predictions with ground truth. Each class's items are ordered by
/// descending score (ties: video id, then start frame). Predicted segments
/// missing from the ground truth count as non-relevant. Every class in
/// `classes` gets a list, even with no predictions or positives.
pub fn rank_against_labels(
    predictions: &[Prediction],
    truth: &[SegmentLabel],
    classes: impl IntoIterator<Item = u32>,
) -> Vec<RankedList> {
    let mut positives: BTreeMap<u32, BTreeSet<(&str, u32)>> = BTreeMap::new();
    for t in truth.iter().filter(|t| t.positive) {
        positives
            .entry(t.class_id)
            .or_default()
            .insert((t.video_id.as_str(), t.start_frame));
    }
    let mut by_class: BTreeMap<u32, Vec<&Prediction>> = classes.into_iter().map(|c| (c, Vec::new())).collect();
    for p in predictions {
        by_class.entry(p.class_id).or_default().push(p);
    }
    by_class
        .into_iter()
        .map(|(class_id, mut preds)| {
            preds.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then_with(|| a.video_id.cmp(&b.video_id))
                    .then_with(|| a.start_frame.cmp(&b.start_frame))
            });
            let pos = positives.get(&class_id);
            let items = preds
                .iter()
                .map(|p| {
                    let rel = pos.is_some_and(|s| s.contains(&(p.video_id.as_str(), p.start_frame)));
                    (format!("{}:{}", p.video_id, p.start_frame), rel as u8)
                })
                .collect();
            RankedList {
                class_id,
                items,
                n_positive: pos.map_or(0, |s| s.len()),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let ap = average_precision_at_k(&[1, 0, 1], 2, 3).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((ap - 0.833333).abs() < 1e-6);
    }

    #[test]
    fn cutoff_and_missing_positives() {
        assert_eq!(average_precision_at_k(&[0, 1], 1, 1).unwrap(), 0.0);
        assert_eq!(average_precision_at_k(&[1, 1], 4, 10).unwrap(), 0.5);
        assert_eq!(average_precision_at_k(&[0, 0], 0, 10).unwrap(), 0.0);
        assert!(average_precision_at_k(&[2], 1, 1).is_err());
    }

    #[test]
    fn zero_positive_classes_pull_the_mean_down() {
        let lists = vec![
            RankedList {
                class_id: 0,
                items: vec![("a".into(), 1)],
                n_positive: 1,
            },
            RankedList {
                class_id: 1,
                items: vec![("a".into(), 0)],
                n_positive: 0,
            },
        ];
        let r = map_at_k(&lists, 10).unwrap();
        assert_eq!(r.map, 0.5);
        assert_eq!(r.per_class.len(), 2);
    }

    #[test]
    fn ranking_joins_truth() {
        let p = |c, v: &str, s, score| Prediction {
            class_id: c,
            video_id: v.into(),
            start_frame: s,
            score,
        };
        let preds = vec![p(0, "b", 0, 0.5), p(0, "a", 5, 0.9), p(0, "a", 0, 0.5)];
        let truth = vec![
            SegmentLabel {
                video_id: "a".into(),
                start_frame: 0,
                class_id: 0,
                positive: true,
            },
            SegmentLabel {
                video_id: "b".into(),
                start_frame: 0,
                class_id: 0,
                positive: false,
            },
        ];
        let lists = rank_against_labels(&preds, &truth, [0, 3]);
        assert_eq!(lists.len(), 2);
        let rel: Vec<u8> = lists[0].items.iter().map(|x| x.1).collect();
        assert_eq!(rel, vec![0, 1, 0]);
        assert_eq!(lists[0].n_positive, 1);
        assert_eq!(lists[1].n_positive, 0);
    }
}

//! Three-phase temporal localization: pick candidate classes per video from
//! a video-level model, score every candidate in every window with a
//! segment-level model, fuse the two probabilities, and keep the best
//! segments per class.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::Path;

use serde::Serialize;

use crate::dataset::{segment_windows, FrameFeatureRecord, SegmentLabel};
use crate::error::{Error, Result};
use crate::evaluation::Prediction;
use crate::model::Ensemble;
use crate::numerics::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizeConfig {
    /// Candidate classes kept per video.
    pub candidates: usize,
    /// Segments kept per class.
    pub top_k: usize,
    pub stride: usize,
    /// Exponent of the video probability in the fused score.
    pub alpha: f64,
    /// Exponent of the segment probability in the fused score.
    pub beta: f64,
    pub workers: usize,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            candidates: 20,
            top_k: 10_000,
            stride: 5,
            alpha: 0.05,
            beta: 0.95,
            workers: 1,
        }
    }
}

impl LocalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 || self.top_k == 0 || self.stride == 0 || self.workers == 0 {
            return Err(Error::Config(
                "candidates, top_k, stride and workers must be positive".into(),
            ));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} {v} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// The `n` highest-scoring class ids, ties broken by smaller id.
pub fn candidate_topics(logits: &[f64], n: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..logits.len() as u32).collect();
    ids.sort_by(|&a, &b| {
        logits[b as usize]
            .total_cmp(&logits[a as usize])
            .then(a.cmp(&b))
    });
    ids.truncate(n);
    ids
}

/// `p_vid^alpha · p_seg^beta`, with `0^0 = 1`.
pub fn value_model(p_vid: f64, p_seg: f64, cfg: &LocalizeConfig) -> Result<f64> {
    for (name, p) in [("video", p_vid), ("segment", p_seg)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("{name} probability {p} outside [0, 1]")));
        }
    }
    Ok(p_vid.powf(cfg.alpha) * p_seg.powf(cfg.beta))
}

/// Fraction of positive `(video, class)` pairs in `truth` whose class is
/// among that video's candidates. 1 when there are no positives.
pub fn candidate_recall(candidates: &BTreeMap<String, Vec<u32>>, truth: &[SegmentLabel]) -> f64 {
    let pairs: std::collections::BTreeSet<(&str, u32)> = truth
        .iter()
        .filter(|t| t.positive)
        .map(|t| (t.video_id.as_str(), t.class_id))
        .collect();
    if pairs.is_empty() {
        return 1.0;
    }
    let hit = pairs
        .iter()
        .filter(|(v, c)| candidates.get(*v).is_some_and(|cs| cs.contains(c)))
        .count();
    hit as f64 / pairs.len() as f64
}

/// Where segment probabilities come from.
#[derive(Clone, Copy, Debug)]
pub enum SegmentScorer<'a> {
    Model(&'a Ensemble),
    /// Every window inherits the video-level probabilities.
    Dummy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    /// Per class, best first.
    pub per_class: BTreeMap<u32, Vec<Prediction>>,
    /// Candidate classes of each video.
    pub candidates: BTreeMap<String, Vec<u32>>,
    pub windows_scored: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalizationSummary {
    pub videos: usize,
    pub windows_scored: usize,
    pub classes_with_predictions: usize,
    pub predictions: usize,
    pub candidates_per_video: usize,
    pub top_k: usize,
}

impl Localization {
    pub fn predictions(&self) -> impl Iterator<Item = &Prediction> {
        self.per_class.values().flatten()
    }

    pub fn summary(&self, cfg: &LocalizeConfig) -> LocalizationSummary {
        LocalizationSummary {
            videos: self.candidates.len(),
            windows_scored: self.windows_scored,
            classes_with_predictions: self.per_class.values().filter(|v| !v.is_empty()).count(),
            predictions: self.per_class.values().map(Vec::len).sum(),
            candidates_per_video: cfg.candidates,
            top_k: cfg.top_k,
        }
    }

    /// `class_id,rank,video_id,start_frame,score`, ranks from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,rank,video_id,start_frame,score\n");
        for (class, preds) in &self.per_class {
            for (rank, p) in preds.iter().enumerate() {
                out.push_str(&format!(
                    "{class},{},{},{},{}\n",
                    rank + 1,
                    p.video_id,
                    p.start_frame,
                    format_significant(p.score, 9)
                ));
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::wire::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Reads `class_id,rank,video_id,start_frame,score` rows.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("class_id,rank,video_id,start_frame,score") => {}
        other => {
            return Err(Error::Format {
                offset: 0,
                msg: format!("unexpected prediction header {other:?}"),
            })
        }
    }
    let mut offset = text.find('\n').map_or(text.len(), |i| i + 1) as u64;
    let mut out = Vec::new();
    for line in lines {
        let bad = |msg: &str| Error::Format {
            offset,
            msg: format!("{msg} in prediction row `{line}`"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        out.push(Prediction {
            class_id: f[0].parse().map_err(|_| bad("bad class id"))?,
            video_id: f[2].to_string(),
            start_frame: f[3].parse().map_err(|_| bad("bad start frame"))?,
            score: f[4].parse().map_err(|_| bad("bad score"))?,
        });
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

/// `%.{digits}g`-style formatting.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if exp < -5 || exp >= digits as i32 {
        let s = format!("{:.*e}", digits - 1, x);
        let (mant, e) = s.split_once('e').expect("scientific notation");
        format!("{}e{}", trim_zeros(mant), e)
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Heap entry whose `Ord` puts the worst segment on top.
#[derive(Debug)]
struct Ranked(Prediction);

impl Ranked {
    fn better(&self, other: &Self) -> Ordering {
        self.0
            .score
            .total_cmp(&other.0.score)
            .then_with(|| other.0.video_id.cmp(&self.0.video_id))
            .then_with(|| other.0.start_frame.cmp(&self.0.start_frame))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.better(other).reverse()
    }
}

type ClassHeaps = BTreeMap<u32, BinaryHeap<Ranked>>;

fn push_bounded(heaps: &mut ClassHeaps, p: Prediction, k: usize) {
    let heap = heaps.entry(p.class_id).or_default();
    heap.push(Ranked(p));
    if heap.len() > k {
        heap.pop();
    }
}

struct VideoResult {
    video_id: String,
    candidates: Vec<u32>,
    windows: usize,
}

fn score_video(
    record: &FrameFeatureRecord,
    video_model: &Ensemble,
    scorer: SegmentScorer<'_>,
    cfg: &LocalizeConfig,
    heaps: &mut ClassHeaps,
) -> Result<VideoResult> {
    let video_logits = video_model.predict(&record.visual, &record.audio)?;
    let candidates = candidate_topics(&video_logits, cfg.candidates);
    let p_vid = sigmoid(&video_logits);
    let windows = segment_windows(record, cfg.stride)?;
    for w in &windows {
        let p_seg = match scorer {
            SegmentScorer::Model(m) => sigmoid(&m.predict(&w.visual, &w.audio)?),
            SegmentScorer::Dummy => p_vid.clone(),
        };
        for &c in &candidates {
            let score = value_model(p_vid[c as usize], p_seg[c as usize], cfg)?;
            push_bounded(
                heaps,
                Prediction {
                    class_id: c,
                    video_id: record.video_id.clone(),
                    start_frame: w.start_frame as u32,
                    score,
                },
                cfg.top_k,
            );
        }
    }
    Ok(VideoResult {
        video_id: record.video_id.clone(),
        candidates,
        windows: windows.len(),
    })
}

/// Runs the pipeline over `records`, splitting videos across workers. The
/// result does not depend on the worker count.
pub fn run_pipeline(
    video_model: &Ensemble,
    scorer: SegmentScorer<'_>,
    records: &[FrameFeatureRecord],
    cfg: &LocalizeConfig,
) -> Result<Localization> {
    cfg.validate()?;
    let classes = video_model.topology.model.class_count;
    if let SegmentScorer::Model(m) = scorer {
        if m.topology.model.class_count != classes {
            return Err(Error::Shape(format!(
                "segment model has {} classes, video model {classes}",
                m.topology.model.class_count
            )));
        }
    }
    let per = records.len().div_ceil(cfg.workers).max(1);
    let run_chunk = |chunk: &[FrameFeatureRecord]| -> Result<(ClassHeaps, Vec<VideoResult>)> {
        let mut heaps = ClassHeaps::new();
        let results = chunk
            .iter()
            .map(|r| score_video(r, video_model, scorer, cfg, &mut heaps))
            .collect::<Result<Vec<_>>>()?;
        Ok((heaps, results))
    };
    let parts: Vec<(ClassHeaps, Vec<VideoResult>)> = if cfg.workers == 1 {
        vec![run_chunk(records)?]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = records
                .chunks(per)
                .map(|chunk| s.spawn(move || run_chunk(chunk)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("localization worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    };

    let mut merged = ClassHeaps::new();
    let mut candidates = BTreeMap::new();
    let mut windows_scored = 0;
    for (heaps, results) in parts {
        for (_, heap) in heaps {
            for Ranked(p) in heap {
                push_bounded(&mut merged, p, cfg.top_k);
            }
        }
        for r in results {
            windows_scored += r.windows;
            candidates.insert(r.video_id, r.candidates);
        }
    }
    let per_class = merged
        .into_iter()
        .map(|(c, heap)| (c, heap.into_sorted_vec().into_iter().map(|r| r.0).collect()))
        .collect();
    Ok(Localization {
        per_class,
        candidates,
        windows_scored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidates_break_ties_by_id() {
        assert_eq!(candidate_topics(&[0.1, 0.5, 0.5, -1.0], 2), vec![1, 2]);
        assert_eq!(candidate_topics(&[0.0; 3], 5), vec![0, 1, 2]);
    }

    #[test]
    fn value_model_examples() {
        let cfg = LocalizeConfig::default();
        let oracle = (0.05 * 0.9f64.ln() + 0.95 * 0.1f64.ln()).exp();
        assert!((value_model(0.9, 0.1, &cfg).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(value_model(1.0, 1.0, &cfg).unwrap(), 1.0);
        assert!((value_model(0.5, 0.5, &cfg).unwrap() - 0.5).abs() < 1e-15);
        let zero = LocalizeConfig {
            alpha: 0.0,
            beta: 0.0,
            ..cfg
        };
        assert_eq!(value_model(0.0, 0.0, &zero).unwrap(), 1.0);
        assert!(matches!(value_model(1.1, 0.5, &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn significant_digits() {
        assert_eq!(format_significant(0.111647291234, 9), "0.111647291");
        assert_eq!(format_significant(1.0, 9), "1");
        assert_eq!(format_significant(1.5e-7, 9), "1.5e-7");
        assert_eq!(format_significant(123.456, 9), "123.456");
    }

    #[test]
    fn heap_keeps_best_with_deterministic_ties() {
        let mut heaps = ClassHeaps::new();
        for (v, s, score) in [("b", 0, 0.5), ("a", 5, 0.5), ("a", 0, 0.5), ("c", 0, 0.9)] {
            push_bounded(
                &mut heaps,
                Prediction {
                    class_id: 1,
                    video_id: v.into(),
                    start_frame: s,
                    score,
                },
                3,
            );
        }
        let kept: Vec<(String, u32)> = heaps
            .remove(&1)
            .unwrap()
            .into_sorted_vec()
            .into_iter()
            .map(|r| (r.0.video_id, r.0.start_frame))
            .collect();
        assert_eq!(kept, vec![("c".into(), 0), ("a".into(), 0), ("a".into(), 5)]);
    }
}

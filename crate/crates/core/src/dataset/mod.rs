//! Frame-feature records, segment labels, the synthetic corpus generator
//! and the on-disk formats for both.

mod generate;
mod io;

pub use generate::{generate_corpus, CorpusSpec, GeneratedCorpus, Signatures};
pub use io::{
    read_corpus, read_corpus_bytes, read_segment_labels, write_corpus, write_corpus_bytes,
    write_segment_labels, CORPUS_MAGIC, CORPUS_VERSION,
};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Frames per scored segment.
pub const SEGMENT_FRAMES: usize = 5;

/// One video: per-frame visual and audio features plus (noisy) video labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatureRecord {
    pub video_id: String,
    /// M x N_v
    pub visual: Matrix,
    /// M x N_a
    pub audio: Matrix,
    /// Sorted, de-duplicated class ids.
    pub video_labels: Vec<u32>,
}

impl FrameFeatureRecord {
    pub fn frame_count(&self) -> usize {
        self.visual.rows()
    }

    /// Multi-hot label vector over `class_count` classes.
    pub fn label_vector(&self, class_count: usize) -> Vec<f64> {
        let mut y = vec![0.0; class_count];
        for &c in &self.video_labels {
            y[c as usize] = 1.0;
        }
        y
    }
}

/// Dimensions shared by every record of a corpus file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusHeader {
    pub class_count: u32,
    pub visual_dim: u32,
    pub audio_dim: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub records: Vec<FrameFeatureRecord>,
}

impl Corpus {
    /// Checks every record against the header invariants.
    pub fn validate(&self) -> Result<()> {
        let h = self.header;
        for r in &self.records {
            if r.visual.rows() == 0 || r.visual.rows() != r.audio.rows() {
                return Err(Error::Shape(format!(
                    "record {}: {} visual vs {} audio frames",
                    r.video_id,
                    r.visual.rows(),
                    r.audio.rows()
                )));
            }
            if r.visual.cols() != h.visual_dim as usize || r.audio.cols() != h.audio_dim as usize {
                return Err(Error::Shape(format!(
                    "record {}: feature dims {}/{} vs header {}/{}",
                    r.video_id,
                    r.visual.cols(),
                    r.audio.cols(),
                    h.visual_dim,
                    h.audio_dim
                )));
            }
            if let Some(bad) = r.video_labels.iter().find(|&&c| c >= h.class_count) {
                return Err(Error::Domain(format!(
                    "record {}: label {bad} >= class_count {}",
                    r.video_id, h.class_count
                )));
            }
        }
        Ok(())
    }
}

/// A human-verified (here: exact) label for one 5-frame segment.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SegmentLabel {
    pub video_id: String,
    pub start_frame: u32,
    pub class_id: u32,
    pub positive: bool,
}

/// One 5-frame window of a record.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentWindow {
    pub start_frame: usize,
    pub visual: Matrix,
    pub audio: Matrix,
}

/// Windows starting at `0, stride, 2·stride, …` while `start + 5 <= M`.
/// Records shorter than five frames yield no windows.
pub fn segment_windows(record: &FrameFeatureRecord, stride: usize) -> Result<Vec<SegmentWindow>> {
    if stride == 0 {
        return Err(Error::Domain("window stride must be at least 1".into()));
    }
    window_starts(record.frame_count(), stride)
        .into_iter()
        .map(|start| {
            Ok(SegmentWindow {
                start_frame: start,
                visual: record.visual.slice_rows(start, SEGMENT_FRAMES)?,
                audio: record.audio.slice_rows(start, SEGMENT_FRAMES)?,
            })
        })
        .collect()
}

pub fn window_starts(frames: usize, stride: usize) -> Vec<usize> {
    if frames < SEGMENT_FRAMES || stride == 0 {
        return Vec::new();
    }
    (0..=frames - SEGMENT_FRAMES).step_by(stride).collect()
}

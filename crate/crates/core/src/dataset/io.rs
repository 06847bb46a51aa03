//! Corpus files (little-endian):
//!
//! ```text
//! magic "MODC" | version u16 | class_count u32 | N_v u32 | N_a u32 | record_count u64
//! per record:
//!   id_len u32 | video_id utf-8 | M u32
//!   visual M*N_v f32 row-major | audio M*N_a f32 row-major
//!   label_count u16 | class ids u32 * label_count
//! ```
//!
//! Segment labels are CSV with header `video_id,start_frame,class_id,positive`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::wire::{ByteReader, ByteWriter};

use super::{Corpus, CorpusHeader, FrameFeatureRecord, SegmentLabel};

pub const CORPUS_MAGIC: &[u8; 4] = b"MODC";
pub const CORPUS_VERSION: u16 = 1;

const LABEL_HEADER: &str = "video_id,start_frame,class_id,positive";

pub fn write_corpus_bytes(corpus: &Corpus) -> Result<Vec<u8>> {
    corpus.validate()?;
    let h = corpus.header;
    let mut w = ByteWriter::new();
    w.bytes(CORPUS_MAGIC);
    w.u16(CORPUS_VERSION);
    w.u32(h.class_count);
    w.u32(h.visual_dim);
    w.u32(h.audio_dim);
    w.u64(corpus.records.len() as u64);
    for r in &corpus.records {
        w.u32(r.video_id.len() as u32);
        w.bytes(r.video_id.as_bytes());
        w.u32(r.frame_count() as u32);
        for &x in r.visual.data().iter().chain(r.audio.data()) {
            w.f32(x as f32);
        }
        if r.video_labels.len() > u16::MAX as usize {
            return Err(Error::Domain(format!("record {} has too many labels", r.video_id)));
        }
        w.u16(r.video_labels.len() as u16);
        for &c in &r.video_labels {
            w.u32(c);
        }
    }
    Ok(w.into_inner())
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    crate::wire::write_atomic(path, &write_corpus_bytes(corpus)?)?;
    Ok(())
}

pub fn read_corpus_bytes(bytes: &[u8]) -> Result<Corpus> {
    let mut r = ByteReader::new(bytes);
    r.magic(CORPUS_MAGIC)?;
    let at = r.offset();
    let version = r.u16()?;
    if version != CORPUS_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CORPUS_VERSION,
            offset: at,
        });
    }
    let header = CorpusHeader {
        class_count: r.u32()?,
        visual_dim: r.u32()?,
        audio_dim: r.u32()?,
    };
    let count = r.u64()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let id_len = r.u32()? as usize;
        let id_at = r.offset();
        let video_id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|_| Error::Format {
            offset: id_at,
            msg: "video id is not valid UTF-8".into(),
        })?;
        let m_at = r.offset();
        let m = r.u32()? as usize;
        if m == 0 {
            return Err(Error::Format {
                offset: m_at,
                msg: format!("record {video_id} has zero frames"),
            });
        }
        let visual = read_f32_matrix(&mut r, m, header.visual_dim as usize)?;
        let audio = read_f32_matrix(&mut r, m, header.audio_dim as usize)?;
        let n_labels = r.u16()? as usize;
        let mut labels = Vec::with_capacity(n_labels);
        for _ in 0..n_labels {
            let at = r.offset();
            let c = r.u32()?;
            if c >= header.class_count {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("label {c} >= class_count {}", header.class_count),
                });
            }
            labels.push(c);
        }
        records.push(FrameFeatureRecord {
            video_id,
            visual,
            audio,
            video_labels: labels,
        });
    }
    r.expect_end()?;
    Ok(Corpus { header, records })
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    read_corpus_bytes(&fs::read(path)?)
}

fn read_f32_matrix(r: &mut ByteReader<'_>, rows: usize, cols: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.f32()? as f64);
    }
    Matrix::new(rows, cols, data)
}

pub fn write_segment_labels(path: impl AsRef<Path>, labels: &[SegmentLabel]) -> Result<()> {
    let mut out = String::with_capacity(32 * labels.len() + 64);
    out.push_str(LABEL_HEADER);
    out.push('\n');
    for l in labels {
        if l.video_id.contains([',', '\n', '"']) {
            return Err(Error::Domain(format!("video id `{}` is not CSV-safe", l.video_id)));
        }
        out.push_str(&format!(
            "{},{},{},{}\n",
            l.video_id, l.start_frame, l.class_id, l.positive as u8
        ));
    }
    crate::wire::write_atomic(path, out.as_bytes())?;
    Ok(())
}

pub fn read_segment_labels(path: impl AsRef<Path>) -> Result<Vec<SegmentLabel>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == LABEL_HEADER => {}
        other => {
            return Err(Error::Format {
                offset: 0,
                msg: format!("expected header `{LABEL_HEADER}`, got {other:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Config(format!("label line {}: {what}: `{line}`", n + 2));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let positive = match fields[3] {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(bad("positive must be 0/1")),
        };
        out.push(SegmentLabel {
            video_id: fields[0].to_string(),
            start_frame: fields[1].parse().map_err(|_| bad("bad start_frame"))?,
            class_id: fields[2].parse().map_err(|_| bad("bad class_id"))?,
            positive,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_corpus, CorpusSpec};

    fn corpus() -> Corpus {
        let spec = CorpusSpec {
            num_videos: 6,
            ..CorpusSpec::tiny()
        };
        generate_corpus(&spec).unwrap().train
    }

    #[test]
    fn round_trip() {
        let c = corpus();
        let bytes = write_corpus_bytes(&c).unwrap();
        assert_eq!(read_corpus_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn truncated_names_offset() {
        let bytes = write_corpus_bytes(&corpus()).unwrap();
        let cut = bytes.len() - 3;
        match read_corpus_bytes(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn future_version_rejected() {
        let mut bytes = write_corpus_bytes(&corpus()).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            read_corpus_bytes(&bytes),
            Err(Error::Version { found: 2, offset: 4, .. })
        ));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = write_corpus_bytes(&corpus()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(read_corpus_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = write_corpus_bytes(&corpus()).unwrap();
        bytes.push(0);
        assert!(read_corpus_bytes(&bytes).is_err());
    }

    #[test]
    fn label_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        let labels = vec![
            SegmentLabel { video_id: "a".into(), start_frame: 0, class_id: 3, positive: true },
            SegmentLabel { video_id: "b".into(), start_frame: 5, class_id: 1, positive: false },
        ];
        write_segment_labels(&p, &labels).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("video_id,start_frame,class_id,positive\n"));
        assert_eq!(read_segment_labels(&p).unwrap(), labels);
    }
}

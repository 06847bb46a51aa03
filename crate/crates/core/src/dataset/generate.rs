use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{render_kv, KvConfig};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{
    window_starts, Corpus, CorpusHeader, FrameFeatureRecord, SegmentLabel, SEGMENT_FRAMES,
};

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub num_videos: usize,
    pub class_count: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    /// Probability of dropping each true video label, and of adding one wrong label.
    pub noise_rate: f64,
    /// Norm of each class signature.
    pub signature_strength: f64,
    /// Std of the per-frame Gaussian noise.
    pub feature_noise: f64,
    pub max_planted_classes: usize,
    pub max_planted_windows: usize,
    pub train_fraction: f64,
    pub finetune_fraction: f64,
    pub orthonormalize: bool,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn tiny() -> Self {
        Self {
            num_videos: 80,
            class_count: 10,
            frames_min: 10,
            frames_max: 20,
            visual_dim: 16,
            audio_dim: 4,
            noise_rate: 0.1,
            signature_strength: 1.5,
            feature_noise: 1.0,
            max_planted_classes: 2,
            max_planted_windows: 2,
            train_fraction: 0.7,
            finetune_fraction: 0.2,
            orthonormalize: true,
            seed: 7,
        }
    }

    pub fn desk() -> Self {
        Self {
            num_videos: 2000,
            class_count: 50,
            frames_min: 20,
            frames_max: 40,
            visual_dim: 64,
            audio_dim: 8,
            noise_rate: 0.15,
            signature_strength: 3.0,
            feature_noise: 1.0,
            max_planted_classes: 3,
            max_planted_windows: 2,
            train_fraction: 0.7,
            finetune_fraction: 0.2,
            orthonormalize: true,
            seed: 7,
        }
    }

    /// Full-size feature shapes; meant for shape checks, not training.
    pub fn full() -> Self {
        Self {
            num_videos: 10,
            class_count: 1000,
            frames_min: 60,
            frames_max: 120,
            visual_dim: 1024,
            audio_dim: 128,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown corpus preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.class_count < 2 {
            return bad(format!("class_count {} < 2", self.class_count));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 1)", self.noise_rate));
        }
        if self.frames_min < SEGMENT_FRAMES || self.frames_max < self.frames_min {
            return bad(format!(
                "frames_range ({}, {}) must satisfy 5 <= min <= max",
                self.frames_min, self.frames_max
            ));
        }
        if self.visual_dim == 0 || self.audio_dim == 0 {
            return bad("feature dims must be positive".into());
        }
        if self.max_planted_classes == 0 || self.max_planted_classes > self.class_count {
            return bad(format!(
                "max_planted_classes {} must be in 1..={}",
                self.max_planted_classes, self.class_count
            ));
        }
        if self.max_planted_windows == 0 {
            return bad("max_planted_windows must be positive".into());
        }
        if !(self.signature_strength >= 0.0 && self.feature_noise >= 0.0) {
            return bad("signature_strength and feature_noise must be >= 0".into());
        }
        if !(self.train_fraction >= 0.0
            && self.finetune_fraction >= 0.0
            && self.train_fraction + self.finetune_fraction <= 1.0)
        {
            return bad(format!(
                "split fractions {} + {} must lie in [0, 1]",
                self.train_fraction, self.finetune_fraction
            ));
        }
        Ok(())
    }

    /// Starts from `preset` (default `desk`) and applies remaining keys.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let mut s = match kv.take_str("preset") {
            Some(p) => Self::preset(&p)?,
            None => Self::desk(),
        };
        kv.take_into("num_videos", &mut s.num_videos)?;
        kv.take_into("class_count", &mut s.class_count)?;
        kv.take_into("frames_min", &mut s.frames_min)?;
        kv.take_into("frames_max", &mut s.frames_max)?;
        kv.take_into("visual_dim", &mut s.visual_dim)?;
        kv.take_into("audio_dim", &mut s.audio_dim)?;
        kv.take_into("noise_rate", &mut s.noise_rate)?;
        kv.take_into("signature_strength", &mut s.signature_strength)?;
        kv.take_into("feature_noise", &mut s.feature_noise)?;
        kv.take_into("max_planted_classes", &mut s.max_planted_classes)?;
        kv.take_into("max_planted_windows", &mut s.max_planted_windows)?;
        kv.take_into("train_fraction", &mut s.train_fraction)?;
        kv.take_into("finetune_fraction", &mut s.finetune_fraction)?;
        kv.take_into("orthonormalize", &mut s.orthonormalize)?;
        kv.take_into("seed", &mut s.seed)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_kv(&self) -> String {
        render_kv(&[
            ("num_videos", self.num_videos.to_string()),
            ("class_count", self.class_count.to_string()),
            ("frames_min", self.frames_min.to_string()),
            ("frames_max", self.frames_max.to_string()),
            ("visual_dim", self.visual_dim.to_string()),
            ("audio_dim", self.audio_dim.to_string()),
            ("noise_rate", self.noise_rate.to_string()),
            ("signature_strength", self.signature_strength.to_string()),
            ("feature_noise", self.feature_noise.to_string()),
            ("max_planted_classes", self.max_planted_classes.to_string()),
            ("max_planted_windows", self.max_planted_windows.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("finetune_fraction", self.finetune_fraction.to_string()),
            ("orthonormalize", self.orthonormalize.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }

    fn header(&self) -> CorpusHeader {
        CorpusHeader {
            class_count: self.class_count as u32,
            visual_dim: self.visual_dim as u32,
            audio_dim: self.audio_dim as u32,
        }
    }
}

/// Per-class feature signatures (rows), already scaled by the strength.
#[derive(Clone, Debug, PartialEq)]
pub struct Signatures {
    pub visual: Matrix,
    pub audio: Matrix,
}

/// The three splits plus exact segment labels for the two labeled ones.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCorpus {
    /// Whole videos with noisy video-level labels.
    pub train: Corpus,
    /// Videos whose segments are labeled for finetuning.
    pub finetune: Corpus,
    pub finetune_labels: Vec<SegmentLabel>,
    /// Held-out videos and their ground-truth segment labels.
    pub eval: Corpus,
    pub eval_labels: Vec<SegmentLabel>,
    pub signatures: Signatures,
}

struct Planted {
    classes: BTreeSet<u32>,
    /// (window start, class)
    windows: BTreeSet<(u32, u32)>,
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let signatures = Signatures {
        visual: signature_rows(spec.class_count, spec.visual_dim, spec, &mut rng),
        audio: signature_rows(spec.class_count, spec.audio_dim, spec, &mut rng),
    };

    let mut records = Vec::with_capacity(spec.num_videos);
    let mut planted = Vec::with_capacity(spec.num_videos);
    for idx in 0..spec.num_videos {
        let (rec, p) = generate_video(idx, spec, &signatures, &mut rng);
        records.push(rec);
        planted.push(p);
    }

    let n_train = (spec.num_videos as f64 * spec.train_fraction).round() as usize;
    let n_ft = ((spec.num_videos as f64 * spec.finetune_fraction).round() as usize)
        .min(spec.num_videos - n_train);
    let header = spec.header();
    let mut records = records.into_iter();
    let mut planted = planted.into_iter();
    let train = Corpus {
        header,
        records: records.by_ref().take(n_train).collect(),
    };
    planted.by_ref().take(n_train).for_each(drop);
    let finetune = Corpus {
        header,
        records: records.by_ref().take(n_ft).collect(),
    };
    let ft_planted: Vec<Planted> = planted.by_ref().take(n_ft).collect();
    let eval = Corpus {
        header,
        records: records.collect(),
    };
    let eval_planted: Vec<Planted> = planted.collect();

    Ok(GeneratedCorpus {
        finetune_labels: segment_labels(&finetune.records, &ft_planted),
        eval_labels: segment_labels(&eval.records, &eval_planted),
        train,
        finetune,
        eval,
        signatures,
    })
}

fn signature_rows(classes: usize, dim: usize, spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::from_fn(classes, dim, |_, _| rng.sample(StandardNormal));
    let orthogonal = spec.orthonormalize && classes <= dim;
    for r in 0..classes {
        if orthogonal {
            for prev in 0..r {
                let proj = crate::numerics::dot(m.row(r), m.row(prev));
                let p = m.row(prev).to_vec();
                crate::numerics::axpy(-proj, &p, m.row_mut(r));
            }
        }
        let n = crate::numerics::l2_norm(m.row(r)).max(1e-12);
        m.row_mut(r).iter_mut().for_each(|x| *x /= n);
    }
    m.scale(spec.signature_strength);
    m
}

fn generate_video(
    idx: usize,
    spec: &CorpusSpec,
    sig: &Signatures,
    rng: &mut ChaCha8Rng,
) -> (FrameFeatureRecord, Planted) {
    let frames = rng.random_range(spec.frames_min..=spec.frames_max);
    let starts = window_starts(frames, SEGMENT_FRAMES);
    let noise = spec.feature_noise;
    let mut visual = Matrix::from_fn(frames, spec.visual_dim, |_, _| {
        noise * rng.sample::<f64, _>(StandardNormal)
    });
    let mut audio = Matrix::from_fn(frames, spec.audio_dim, |_, _| {
        noise * rng.sample::<f64, _>(StandardNormal)
    });

    let n_classes = rng.random_range(1..=spec.max_planted_classes);
    let classes: BTreeSet<u32> = sample(rng, spec.class_count, n_classes)
        .into_iter()
        .map(|c| c as u32)
        .collect();
    let mut windows = BTreeSet::new();
    for &c in &classes {
        let n_win = rng.random_range(1..=spec.max_planted_windows.min(starts.len()));
        for w in sample(rng, starts.len(), n_win) {
            let start = starts[w];
            windows.insert((start as u32, c));
            for f in start..start + SEGMENT_FRAMES {
                crate::numerics::axpy(1.0, sig.visual.row(c as usize), visual.row_mut(f));
                crate::numerics::axpy(1.0, sig.audio.row(c as usize), audio.row_mut(f));
            }
        }
    }
    // stored as f32 on disk; round now so files round-trip exactly
    crate::numerics::Precision::F32.round_all(visual.data_mut());
    crate::numerics::Precision::F32.round_all(audio.data_mut());

    let mut labels = BTreeSet::new();
    for &c in &classes {
        if rng.random::<f64>() >= spec.noise_rate {
            labels.insert(c);
        }
    }
    if rng.random::<f64>() < spec.noise_rate && classes.len() < spec.class_count {
        loop {
            let c = rng.random_range(0..spec.class_count) as u32;
            if !classes.contains(&c) {
                labels.insert(c);
                break;
            }
        }
    }

    let rec = FrameFeatureRecord {
        video_id: format!("vid{idx:06}"),
        visual,
        audio,
        video_labels: labels.into_iter().collect(),
    };
    (rec, Planted { classes, windows })
}

/// Every window of a video is labeled for each planted or video-labeled
/// class; positive exactly where the class was planted.
fn segment_labels(records: &[FrameFeatureRecord], planted: &[Planted]) -> Vec<SegmentLabel> {
    let mut out = Vec::new();
    for (rec, p) in records.iter().zip(planted) {
        let classes: BTreeSet<u32> = p
            .classes
            .iter()
            .chain(rec.video_labels.iter())
            .copied()
            .collect();
        for start in window_starts(rec.frame_count(), SEGMENT_FRAMES) {
            for &c in &classes {
                out.push(SegmentLabel {
                    video_id: rec.video_id.clone(),
                    start_frame: start as u32,
                    class_id: c,
                    positive: p.windows.contains(&(start as u32, c)),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            num_videos: 30,
            ..CorpusSpec::tiny()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&CorpusSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn no_noise_means_exact_video_labels() {
        let spec = CorpusSpec {
            noise_rate: 0.0,
            ..small()
        };
        let g = generate_corpus(&spec).unwrap();
        for (corpus, labels) in [(&g.finetune, &g.finetune_labels), (&g.eval, &g.eval_labels)] {
            for rec in &corpus.records {
                let planted: BTreeSet<u32> = labels
                    .iter()
                    .filter(|l| l.video_id == rec.video_id && l.positive)
                    .map(|l| l.class_id)
                    .collect();
                assert_eq!(rec.video_labels, planted.into_iter().collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn splits_and_validity() {
        let g = generate_corpus(&small()).unwrap();
        assert_eq!(g.train.records.len(), 21);
        assert_eq!(g.finetune.records.len(), 6);
        assert_eq!(g.eval.records.len(), 3);
        for c in [&g.train, &g.finetune, &g.eval] {
            c.validate().unwrap();
        }
        for l in g.eval_labels.iter().chain(&g.finetune_labels) {
            assert_eq!(l.start_frame % 5, 0);
        }
    }

    #[test]
    fn orthonormal_signatures() {
        let g = generate_corpus(&small()).unwrap();
        let s = &g.signatures.visual;
        for i in 0..s.rows() {
            for j in 0..s.rows() {
                let d = crate::numerics::dot(s.row(i), s.row(j));
                let want = if i == j { 1.5 * 1.5 } else { 0.0 };
                assert!((d - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            CorpusSpec { class_count: 1, ..small() },
            CorpusSpec { noise_rate: 1.0, ..small() },
            CorpusSpec { frames_min: 4, ..small() },
            CorpusSpec { train_fraction: 0.9, finetune_fraction: 0.2, ..small() },
        ] {
            assert!(matches!(generate_corpus(&spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn kv_round_trip() {
        let spec = CorpusSpec { seed: 99, noise_rate: 0.3, ..CorpusSpec::tiny() };
        let mut kv = KvConfig::parse(&spec.to_kv()).unwrap();
        let back = CorpusSpec::from_kv(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, spec);
    }
}

//! Segment data model, JSON-lines ingestion, synthetic corpora and mini-batching.
//!
//! A corpus file holds one segment per line:
//!
//! ```text
//! {"segment_id":"s0","utterance_id":"u0","speaker_id":"spk0","unit_label":"cat","level":"word","features":[[...],[...]]}
//! ```
//!
//! Embedding files hold one `{"segment_id": ..., "vector": [...]}` object per line.
//! Floats are written in shortest round-trip form, so save/load is bit-exact.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};

/// Default acoustic feature dimension (39-dim MFCC with deltas).
pub const DEFAULT_FEATURE_DIM: usize = 39;

/// Segments per synthetic utterance.
pub const SEGMENTS_PER_UTTERANCE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    #[default]
    Word,
    Syllable,
    Phoneme,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Level::Word => "word",
            Level::Syllable => "syllable",
            Level::Phoneme => "phoneme",
        };
        f.write_str(s)
    }
}

/// A `T x F` matrix of acoustic frames, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Vec<f64>,
    frames: usize,
    dim: usize,
}

impl FeatureSequence {
    /// Build from a flat row-major buffer.
    pub fn new(data: Vec<f64>, frames: usize, dim: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Shape(
                "feature sequence needs at least one frame".into(),
            ));
        }
        if dim == 0 {
            return Err(Error::Shape("feature dimension must be positive".into()));
        }
        if data.len() != frames * dim {
            return Err(Error::Shape(format!(
                "buffer of {} values does not match {frames}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature sequence".into()));
        }
        Ok(Self { data, frames, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let frames = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Shape(format!(
                "frame {bad} has {} values, expected {dim}",
                rows[bad].len()
            )));
        }
        Self::new(rows.concat(), frames, dim)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }
}

/// One spoken linguistic unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub segment_id: String,
    pub utterance_id: String,
    pub speaker_id: Option<String>,
    /// Ground-truth unit, used only by evaluation.
    pub unit_label: Option<String>,
    pub level: Level,
    pub features: FeatureSequence,
}

impl Segment {
    /// Speaker identity used for training: the true speaker when known, else the
    /// utterance (segments of one utterance share a speaker).
    pub fn speaker_key(&self) -> &str {
        self.speaker_id.as_deref().unwrap_or(&self.utterance_id)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentRecord {
    segment_id: String,
    utterance_id: String,
    speaker_id: Option<String>,
    unit_label: Option<String>,
    level: Level,
    features: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingRecord {
    segment_id: String,
    vector: Vec<f64>,
}

/// An ordered, validated collection of segments.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    segments: Vec<Segment>,
    feature_dim: usize,
}

impl Corpus {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let first = segments.first().ok_or(Error::EmptyCorpus)?;
        let feature_dim = first.features.dim();
        let level = first.level;
        let mut seen = HashSet::with_capacity(segments.len());
        for seg in &segments {
            if seg.features.dim() != feature_dim {
                return Err(Error::Dimension(format!(
                    "segment `{}` has feature dimension {}, corpus uses {feature_dim}",
                    seg.segment_id,
                    seg.features.dim()
                )));
            }
            if seg.level != level {
                return Err(Error::InvalidSegment {
                    segment_id: seg.segment_id.clone(),
                    reason: format!("level `{}` differs from corpus level `{level}`", seg.level),
                });
            }
            if !seen.insert(seg.segment_id.as_str()) {
                return Err(Error::InvalidSegment {
                    segment_id: seg.segment_id.clone(),
                    reason: "duplicate segment_id".into(),
                });
            }
        }
        Ok(Self {
            segments,
            feature_dim,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn level(&self) -> Level {
        self.segments[0].level
    }

    /// Seeded random split into (train, test). `test_fraction` of the segments,
    /// rounded down but at least one, go to the test side; original order is kept
    /// within each side.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::Argument(format!(
                "test fraction {test_fraction} must lie in (0, 1)"
            )));
        }
        let m = self.len();
        let n_test = ((m as f64 * test_fraction) as usize).max(1);
        if n_test >= m {
            return Err(Error::Argument(format!(
                "corpus of {m} segments is too small to split"
            )));
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng_from(seed));
        let mut is_test = vec![false; m];
        for &i in &order[..n_test] {
            is_test[i] = true;
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (seg, t) in self.segments.iter().zip(is_test) {
            if t {
                test.push(seg.clone());
            } else {
                train.push(seg.clone());
            }
        }
        Ok((Corpus::new(train)?, Corpus::new(test)?))
    }
}

/// Load a JSON-lines corpus file. Blank lines are skipped.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut segments = Vec::new();
    let mut feature_dim: Option<usize> = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SegmentRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let features =
            FeatureSequence::from_rows(&rec.features).map_err(|e| Error::InvalidSegment {
                segment_id: rec.segment_id.clone(),
                reason: e.to_string(),
            })?;
        match feature_dim {
            None => feature_dim = Some(features.dim()),
            Some(f) if f != features.dim() => {
                return Err(Error::Dimension(format!(
                    "line {line_no} (segment `{}`) has feature dimension {}, expected {f}",
                    rec.segment_id,
                    features.dim()
                )));
            }
            Some(_) => {}
        }
        segments.push(Segment {
            segment_id: rec.segment_id,
            utterance_id: rec.utterance_id,
            speaker_id: rec.speaker_id,
            unit_label: rec.unit_label,
            level: rec.level,
            features,
        });
    }
    Corpus::new(segments)
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for seg in corpus.segments() {
        let rec = SegmentRecord {
            segment_id: seg.segment_id.clone(),
            utterance_id: seg.utterance_id.clone(),
            speaker_id: seg.speaker_id.clone(),
            unit_label: seg.unit_label.clone(),
            level: seg.level,
            features: seg.features.rows(),
        };
        let line = serde_json::to_string(&rec).expect("segment records always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write `(segment_id, vector)` records, one per line, preserving order.
pub fn save_embeddings(path: impl AsRef<Path>, entries: &[(String, Vec<f64>)]) -> Result<()> {
    let path = path.as_ref();
    if let Some((_, first)) = entries.first() {
        let d = first.len();
        if let Some((id, v)) = entries.iter().find(|(_, v)| v.len() != d) {
            return Err(Error::Dimension(format!(
                "embedding `{id}` has dimension {}, expected {d}",
                v.len()
            )));
        }
    }
    if let Some((id, _)) = entries
        .iter()
        .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::Numeric(format!("embedding `{id}`")));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (segment_id, vector) in entries {
        let line = serde_json::to_string(&EmbeddingRecord {
            segment_id: segment_id.clone(),
            vector: vector.clone(),
        })
        .expect("embedding records always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<f64>)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if let Some((_, first)) = out.first() {
            if first.len() != rec.vector.len() {
                return Err(Error::Dimension(format!(
                    "line {} has dimension {}, expected {}",
                    idx + 1,
                    rec.vector.len(),
                    first.len()
                )));
            }
        }
        out.push((rec.segment_id, rec.vector));
    }
    Ok(out)
}

/// Parameters of the synthetic corpus generator.
///
/// Each unit owns a random prototype of `length_range.1` frames. Each speaker owns
/// an affine channel `x -> G x + b` with `G = I + s R / sqrt(F)` and `b = s n`,
/// where `R` and `n` are standard normal and `s = speaker_shift_scale`. An instance
/// is the prototype resampled (nearest frame) to a random length, passed through
/// the speaker channel, plus Gaussian noise of scale `noise_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_units: usize,
    pub n_speakers: usize,
    pub instances_per_unit_speaker: usize,
    pub length_range: (usize, usize),
    pub feature_dim: usize,
    pub speaker_shift_scale: f64,
    pub noise_scale: f64,
    pub level: Level,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_units: 20,
            n_speakers: 8,
            instances_per_unit_speaker: 20,
            length_range: (6, 12),
            feature_dim: DEFAULT_FEATURE_DIM,
            speaker_shift_scale: 0.5,
            noise_scale: 0.3,
            level: Level::Word,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_units == 0 || self.n_speakers == 0 || self.instances_per_unit_speaker == 0 {
            return Err(Error::Config(
                "synthetic corpus counts must be at least 1".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be at least 1".into()));
        }
        let (lo, hi) = self.length_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid length range ({lo}, {hi})")));
        }
        if !(self.speaker_shift_scale >= 0.0 && self.noise_scale >= 0.0)
            || !self.speaker_shift_scale.is_finite()
            || !self.noise_scale.is_finite()
        {
            return Err(Error::Config(
                "generator scales must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Source frame for target frame `t` when stretching `src_len` frames to `dst_len`.
pub(crate) fn nearest_frame(t: usize, src_len: usize, dst_len: usize) -> usize {
    (((2 * t + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

fn normal(rng: &mut crate::seed::Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generate a labelled synthetic corpus; a pure function of `(cfg, seed)`.
///
/// Segments are ordered speaker-major, then instance, then unit, and every run of
/// [`SEGMENTS_PER_UTTERANCE`] consecutive segments of a speaker forms one utterance.
pub fn synth_corpus(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let f = cfg.feature_dim;
    let (t_min, t_max) = cfg.length_range;

    let mut rng = rng_from(derive_seed(seed, "synth/prototypes"));
    let prototypes: Vec<Vec<f64>> = (0..cfg.n_units)
        .map(|_| (0..t_max * f).map(|_| normal(&mut rng)).collect())
        .collect();

    let mut rng = rng_from(derive_seed(seed, "synth/speakers"));
    let scale = cfg.speaker_shift_scale;
    let channels: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.n_speakers)
        .map(|_| {
            let mut gain = vec![0.0; f * f];
            for r in 0..f {
                for c in 0..f {
                    let eye = if r == c { 1.0 } else { 0.0 };
                    gain[r * f + c] = eye + scale * normal(&mut rng) / (f as f64).sqrt();
                }
            }
            let bias = (0..f).map(|_| scale * normal(&mut rng)).collect();
            (gain, bias)
        })
        .collect();

    let mut rng = rng_from(derive_seed(seed, "synth/instances"));
    let mut segments =
        Vec::with_capacity(cfg.n_units * cfg.n_speakers * cfg.instances_per_unit_speaker);
    for (s, (gain, bias)) in channels.iter().enumerate() {
        let mut count = 0usize;
        for inst in 0..cfg.instances_per_unit_speaker {
            for (u, proto) in prototypes.iter().enumerate() {
                let len = rng.random_range(t_min..=t_max);
                let mut data = Vec::with_capacity(len * f);
                for t in 0..len {
                    let src = &proto[nearest_frame(t, t_max, len) * f..][..f];
                    for r in 0..f {
                        let row = &gain[r * f..(r + 1) * f];
                        let mixed: f64 = row.iter().zip(src).map(|(g, x)| g * x).sum();
                        let noise = if cfg.noise_scale > 0.0 {
                            cfg.noise_scale * normal(&mut rng)
                        } else {
                            0.0
                        };
                        data.push(mixed + bias[r] + noise);
                    }
                }
                segments.push(Segment {
                    segment_id: format!("spk{s:02}_u{u:03}_i{inst:03}"),
                    utterance_id: format!("spk{s:02}_utt{:04}", count / SEGMENTS_PER_UTTERANCE),
                    speaker_id: Some(format!("spk{s:02}")),
                    unit_label: Some(format!("unit{u:03}")),
                    level: cfg.level,
                    features: FeatureSequence::new(data, len, f)?,
                });
                count += 1;
            }
        }
    }
    Corpus::new(segments)
}

/// Corpus positions forming one mini-batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniBatch {
    pub indices: Vec<usize>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Shuffle `0..m` with `seed` and cut it into consecutive batches.
///
/// With `drop_last` a short trailing batch is discarded. A trailing batch of one
/// element is always dropped, since it holds no pair.
pub fn make_batches(
    m: usize,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<Vec<MiniBatch>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch_size must be at least 2, got {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng_from(seed));
    Ok(order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(|c| MiniBatch {
            indices: c.to_vec(),
        })
        .collect())
}

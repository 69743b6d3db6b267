//! Frame features, k-means pseudo-labels and multi-resolution handling.

mod features;
mod kmeans;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use features::{extract_features, MfccExtractor, FEATURE_DIM, NUM_CEPSTRA, WINDOW_SAMPLES};
pub use kmeans::{
    assign_labels, fit as fit_kmeans, nearest_centroid, train_kmeans, Codebook, KMeansConfig, KMeansFit,
    DEFAULT_K, MAX_LLOYD_ITERATIONS,
};

/// Temporal spacing of feature frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FrameShift {
    Ms20,
    Ms40,
    Ms80,
}

impl FrameShift {
    pub const ALL: [FrameShift; 3] = [FrameShift::Ms20, FrameShift::Ms40, FrameShift::Ms80];

    pub fn from_ms(ms: u32) -> Result<Self> {
        match ms {
            20 => Ok(FrameShift::Ms20),
            40 => Ok(FrameShift::Ms40),
            80 => Ok(FrameShift::Ms80),
            other => Err(Error::UnsupportedFrameShift(other)),
        }
    }

    pub fn ms(self) -> u32 {
        match self {
            FrameShift::Ms20 => 20,
            FrameShift::Ms40 => 40,
            FrameShift::Ms80 => 80,
        }
    }

    pub fn hop_samples(self, sample_rate: u32) -> usize {
        (self.ms() * sample_rate / 1000) as usize
    }
}

impl Serialize for FrameShift {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u32(self.ms())
    }
}

impl<'de> Deserialize<'de> for FrameShift {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let ms = u32::deserialize(d)?;
        FrameShift::from_ms(ms).map_err(serde::de::Error::custom)
    }
}

/// A `T x D` feature matrix for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureSequence {
    pub source_id: String,
    pub frame_shift: FrameShift,
    pub frames: Array2<f64>,
}

impl FrameFeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// Per-frame cluster ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLabelSequence {
    #[serde(rename = "id")]
    pub source_id: String,
    pub frame_shift: FrameShift,
    pub labels: Vec<u32>,
}

impl FrameLabelSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Reduces 20 ms labels to 40 ms (`factor = 2`) or 80 ms (`factor = 4`).
///
/// Each output label is the majority of its window; ties go to the label
/// whose first occurrence in the window is earliest. A trailing partial
/// window still produces a label.
pub fn downsample_labels(labels: &FrameLabelSequence, factor: usize) -> Result<FrameLabelSequence> {
    let frame_shift = match factor {
        2 => FrameShift::Ms40,
        4 => FrameShift::Ms80,
        other => return Err(Error::InvalidFactor(other)),
    };
    if labels.frame_shift != FrameShift::Ms20 {
        return Err(Error::UnsupportedFrameShift(labels.frame_shift.ms()));
    }
    let out = labels
        .labels
        .chunks(factor)
        .map(|window| {
            let mut best = (window[0], 0usize);
            for (i, &candidate) in window.iter().enumerate() {
                if window[..i].contains(&candidate) {
                    continue;
                }
                let count = window[i..].iter().filter(|&&l| l == candidate).count();
                if count > best.1 {
                    best = (candidate, count);
                }
            }
            best.0
        })
        .collect();
    Ok(FrameLabelSequence {
        source_id: labels.source_id.clone(),
        frame_shift,
        labels: out,
    })
}

/// Stacks features of several resolutions onto the finest time axis.
///
/// Sequences are concatenated finest first. Coarse frame `r` covers fine
/// frames `r * ratio .. (r + 1) * ratio`; the expansion is truncated to the
/// finest length, and if it falls short the last coarse frame is repeated.
/// A resolution with no frames at all contributes zeros.
pub fn fuse_multires(seqs: &[FrameFeatureSequence]) -> Result<FrameFeatureSequence> {
    let mut sorted: Vec<&FrameFeatureSequence> = seqs.iter().collect();
    sorted.sort_by_key(|s| s.frame_shift);
    let finest = *sorted.first().ok_or(Error::MissingFinestResolution)?;
    for pair in sorted.windows(2) {
        if pair[0].frame_shift == pair[1].frame_shift {
            return Err(Error::InvalidConfig(format!(
                "resolution {} ms appears twice",
                pair[0].frame_shift.ms()
            )));
        }
    }
    for s in &sorted {
        if s.source_id != finest.source_id {
            return Err(Error::MismatchedUtterance {
                expected: finest.source_id.clone(),
                found: s.source_id.clone(),
            });
        }
    }
    let t = finest.num_frames();
    let total_dim: usize = sorted.iter().map(|s| s.dim()).sum();
    let mut out = Array2::zeros((t, total_dim));
    let mut col = 0;
    for s in &sorted {
        let ratio = (s.frame_shift.ms() / finest.frame_shift.ms()) as usize;
        let d = s.dim();
        if s.num_frames() > 0 {
            for i in 0..t {
                let src = (i / ratio).min(s.num_frames() - 1);
                out.slice_mut(s![i, col..col + d]).assign(&s.frames.row(src));
            }
        }
        col += d;
    }
    Ok(FrameFeatureSequence {
        source_id: finest.source_id.clone(),
        frame_shift: finest.frame_shift,
        frames: out,
    })
}

/// Stacks the frames of every sequence, in order.
pub fn pool_frames(seqs: &[FrameFeatureSequence]) -> Result<Array2<f64>> {
    let first = seqs.first().ok_or(Error::TooFewFrames { frames: 0, k: 1 })?;
    if let Some(bad) = seqs.iter().find(|s| s.dim() != first.dim()) {
        return Err(Error::DimensionMismatch {
            expected: first.dim(),
            found: bad.dim(),
        });
    }
    let views: Vec<_> = seqs.iter().map(|s| s.frames.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("widths checked"))
}

pub fn write_labels_jsonl(path: impl AsRef<Path>, seqs: &[FrameLabelSequence]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for s in seqs {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_labels_jsonl(path: impl AsRef<Path>) -> Result<Vec<FrameLabelSequence>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let seq = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(seq);
    }
    Ok(out)
}

const FEATURE_MAGIC: &[u8; 4] = b"SFFT";
const FEATURE_VERSION: u32 = 1;

/// Binary feature file: magic, version, frame shift (ms), T, D, id length,
/// id bytes, then `T * D` little-endian `f64` values row-major.
pub fn write_features(path: impl AsRef<Path>, seq: &FrameFeatureSequence) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(32 + seq.frames.len() * 8);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&seq.frame_shift.ms().to_le_bytes());
    buf.extend_from_slice(&(seq.num_frames() as u64).to_le_bytes());
    buf.extend_from_slice(&(seq.dim() as u64).to_le_bytes());
    buf.extend_from_slice(&(seq.source_id.len() as u32).to_le_bytes());
    buf.extend_from_slice(seq.source_id.as_bytes());
    for v in seq.frames.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FrameFeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes);
    if r.take(4)? != FEATURE_MAGIC {
        return Err(Error::Format(format!("{}: bad feature magic", path.display())));
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature version {version}")));
    }
    let frame_shift = FrameShift::from_ms(r.u32()?)?;
    let t = r.u64()? as usize;
    let d = r.u64()? as usize;
    let id_len = r.u32()? as usize;
    let source_id = String::from_utf8(r.take(id_len)?.to_vec())
        .map_err(|_| Error::Format("feature id is not UTF-8".into()))?;
    let values = r.f64s(t * d)?;
    r.finish()?;
    let frames = Array2::from_shape_vec((t, d), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(FrameFeatureSequence {
        source_id,
        frame_shift,
        frames,
    })
}

/// Little-endian cursor over a byte slice.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn labels(v: &[u32]) -> FrameLabelSequence {
        FrameLabelSequence {
            source_id: "u".into(),
            frame_shift: FrameShift::Ms20,
            labels: v.to_vec(),
        }
    }

    #[test]
    fn downsample_examples() {
        assert_eq!(downsample_labels(&labels(&[5, 5, 7, 7]), 2).unwrap().labels, [5, 7]);
        assert_eq!(downsample_labels(&labels(&[5, 7]), 2).unwrap().labels, [5]);
        let out = downsample_labels(&labels(&[1, 1, 2, 2, 2]), 4).unwrap();
        assert_eq!(out.labels, [1, 2]);
        assert_eq!(out.frame_shift, FrameShift::Ms80);
        // majority beats first occurrence
        assert_eq!(downsample_labels(&labels(&[3, 9, 9, 1]), 4).unwrap().labels, [9]);
        assert!(downsample_labels(&labels(&[]), 2).unwrap().is_empty());
    }

    #[test]
    fn downsample_rejects_bad_input() {
        assert!(matches!(
            downsample_labels(&labels(&[1, 2]), 3),
            Err(Error::InvalidFactor(3))
        ));
        let coarse = downsample_labels(&labels(&[1, 2]), 2).unwrap();
        assert!(downsample_labels(&coarse, 2).is_err());
    }

    fn feats(shift: FrameShift, frames: Array2<f64>) -> FrameFeatureSequence {
        FrameFeatureSequence {
            source_id: "u".into(),
            frame_shift: shift,
            frames,
        }
    }

    #[test]
    fn fuse_identity_and_repeat() {
        let fine = feats(
            FrameShift::Ms20,
            array![[1., 2.], [3., 4.], [5., 6.], [7., 8.]],
        );
        assert_eq!(fuse_multires(std::slice::from_ref(&fine)).unwrap(), fine);

        let coarse = feats(FrameShift::Ms40, array![[10., 11.], [20., 21.]]);
        // input order does not matter
        let fused = fuse_multires(&[coarse, fine.clone()]).unwrap();
        assert_eq!(
            fused.frames,
            array![
                [1., 2., 10., 11.],
                [3., 4., 10., 11.],
                [5., 6., 20., 21.],
                [7., 8., 20., 21.]
            ]
        );
        assert_eq!(fused.frame_shift, FrameShift::Ms20);
    }

    #[test]
    fn fuse_truncates_and_pads() {
        let fine = feats(FrameShift::Ms20, Array2::zeros((5, 1)));
        let coarse = feats(FrameShift::Ms80, array![[1.], [2.]]);
        let fused = fuse_multires(&[fine.clone(), coarse]).unwrap();
        // 2 coarse rows x 4 = 8, truncated to 5
        assert_eq!(fused.frames.column(1).to_vec(), [1., 1., 1., 1., 2.]);

        let short = feats(FrameShift::Ms40, array![[9.]]);
        let fused = fuse_multires(&[fine, short]).unwrap();
        assert_eq!(fused.frames.column(1).to_vec(), [9.; 5]);
    }

    #[test]
    fn fuse_errors() {
        assert!(matches!(fuse_multires(&[]), Err(Error::MissingFinestResolution)));
        let a = feats(FrameShift::Ms20, Array2::zeros((2, 1)));
        let mut b = feats(FrameShift::Ms40, Array2::zeros((1, 1)));
        b.source_id = "other".into();
        assert!(matches!(
            fuse_multires(&[a.clone(), b]),
            Err(Error::MismatchedUtterance { .. })
        ));
        assert!(fuse_multires(&[a.clone(), a]).is_err());
    }

    #[test]
    fn label_and_feature_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seqs = vec![labels(&[1, 2, 3]), labels(&[])];
        let p = dir.path().join("l.jsonl");
        write_labels_jsonl(&p, &seqs).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(r#"{"id":"u","frame_shift":20,"labels":[1,2,3]}"#));
        assert_eq!(read_labels_jsonl(&p).unwrap(), seqs);

        let f = feats(FrameShift::Ms40, array![[1.5, -2.0], [0.25, 1e-300]]);
        let p = dir.path().join("f.feat");
        write_features(&p, &f).unwrap();
        assert_eq!(read_features(&p).unwrap(), f);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_features(&p), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn downsampled_length_is_ceiling(v in prop::collection::vec(0u32..5, 0..200)) {
            for factor in [2usize, 4] {
                let out = downsample_labels(&labels(&v), factor).unwrap();
                prop_assert_eq!(out.len(), v.len().div_ceil(factor));
            }
        }

        #[test]
        fn fused_length_matches_finest(t in 0usize..60, d in 1usize..4) {
            let fine = feats(FrameShift::Ms20, Array2::from_elem((t, d), 1.0));
            let mid = feats(FrameShift::Ms40, Array2::from_elem((t.div_ceil(2), d), 2.0));
            let coarse = feats(FrameShift::Ms80, Array2::from_elem((t / 4, d), 3.0));
            let fused = fuse_multires(&[fine, mid, coarse]).unwrap();
            prop_assert_eq!(fused.num_frames(), t);
            prop_assert_eq!(fused.dim(), 3 * d);
        }
    }
}

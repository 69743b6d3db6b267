//! Offline k-means codebooks and nearest-centroid assignment.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;

use super::{ByteReader, FrameFeatureSequence, FrameLabelSequence};
use crate::seed::rng_from;
use crate::{Error, Result};

pub const DEFAULT_K: usize = 100;
pub const MAX_LLOYD_ITERATIONS: usize = 300;

const CODEBOOK_MAGIC: &[u8; 4] = b"SFCB";
const CODEBOOK_VERSION: u32 = 1;

/// `K x D` centroid matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Array2<f64>,
    pub trained_on: String,
}

impl Codebook {
    pub fn new(centroids: Array2<f64>, trained_on: impl Into<String>) -> Result<Self> {
        if centroids.nrows() == 0 {
            return Err(Error::InvalidConfig("codebook needs at least one centroid".into()));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("codebook has non-finite centroids".into()));
        }
        Ok(Codebook {
            centroids,
            trained_on: trained_on.into(),
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Header (magic `SFCB`, version, K, D as little-endian u32/u64/u64)
    /// followed by row-major little-endian `f64` centroids.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(24 + self.centroids.len() * 8);
        buf.extend_from_slice(CODEBOOK_MAGIC);
        buf.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.k() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.feature_dim() as u64).to_le_bytes());
        for v in self.centroids.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], trained_on: impl Into<String>) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CODEBOOK_MAGIC {
            return Err(Error::Format("bad codebook magic".into()));
        }
        let version = r.u32()?;
        if version != CODEBOOK_VERSION {
            return Err(Error::Format(format!("unsupported codebook version {version}")));
        }
        let k = r.u64()? as usize;
        let d = r.u64()? as usize;
        let values = r.f64s(k.checked_mul(d).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        r.finish()?;
        let centroids =
            Array2::from_shape_vec((k, d), values).map_err(|e| Error::Format(e.to_string()))?;
        Codebook::new(centroids, trained_on)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Codebook::from_bytes(&bytes, path.display().to_string())
    }
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the closest centroid; ties go to the
/// lower index.
pub fn nearest_centroid(centroids: ArrayView2<f64>, x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.rows().into_iter().enumerate() {
        let d = squared_distance(c, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign_all(centroids: ArrayView2<f64>, data: ArrayView2<f64>) -> Vec<(usize, f64)> {
    // Each row is independent, so the parallel map is bitwise equal to a
    // sequential one.
    (0..data.nrows())
        .into_par_iter()
        .map(|i| nearest_centroid(centroids, data.row(i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            max_iterations: MAX_LLOYD_ITERATIONS,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub assignments: Vec<usize>,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub converged: bool,
}

impl KMeansFit {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

/// k-means++ seeding: the first centre uniformly, each next one with
/// probability proportional to squared distance from the chosen set.
fn kmeans_plus_plus<R: Rng>(data: ArrayView2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = data.nrows();
    let mut centroids = Array2::zeros((k, data.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = data
        .rows()
        .into_iter()
        .map(|r| squared_distance(r, data.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave `target` just above the final sum
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, row) in data.rows().into_iter().enumerate() {
            let d = squared_distance(row, data.row(pick));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Lloyd's algorithm from a k-means++ start. Stops when no assignment
/// changes or after `max_iterations`. Clusters that lose all members keep
/// their previous centre.
pub fn fit(data: ArrayView2<f64>, cfg: &KMeansConfig) -> Result<KMeansFit> {
    let n = data.nrows();
    if cfg.k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if n < cfg.k {
        return Err(Error::TooFewFrames {
            frames: n,
            k: cfg.k,
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("k-means input has non-finite values".into()));
    }
    let mut rng = rng_from(cfg.seed);
    let mut centroids = kmeans_plus_plus(data, cfg.k, &mut rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut inertia_history = Vec::new();
    let mut converged = false;

    for _ in 0..cfg.max_iterations.max(1) {
        let nearest = assign_all(centroids.view(), data);
        inertia_history.push(nearest.iter().map(|(_, d)| d).sum());
        let next: Vec<usize> = nearest.into_iter().map(|(k, _)| k).collect();
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;

        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; cfg.k];
        for (row, &k) in data.rows().into_iter().zip(&assignments) {
            let mut s = sums.row_mut(k);
            s += &row;
            counts[k] += 1;
        }
        for (k, &count) in counts.iter().enumerate() {
            if count > 0 {
                let mean = &sums.row(k) / count as f64;
                centroids.row_mut(k).assign(&mean);
            }
        }
    }
    Ok(KMeansFit {
        codebook: Codebook::new(centroids, format!("{n} frames, seed {}", cfg.seed))?,
        assignments,
        inertia_history,
        converged,
    })
}

/// Trains a `k`-entry codebook on pooled frames (rows of `frames`).
pub fn train_kmeans(frames: ArrayView2<f64>, k: usize, seed: u64) -> Result<Codebook> {
    Ok(fit(frames, &KMeansConfig::new(k, seed))?.codebook)
}

pub fn assign_labels(features: &FrameFeatureSequence, cb: &Codebook) -> Result<FrameLabelSequence> {
    if features.dim() != cb.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: cb.feature_dim(),
            found: features.dim(),
        });
    }
    let labels = assign_all(cb.centroids.view(), features.frames.view())
        .into_iter()
        .map(|(k, _)| k as u32)
        .collect();
    Ok(FrameLabelSequence {
        source_id: features.source_id.clone(),
        frame_shift: features.frame_shift,
        labels,
    })
}

//! Mel-cepstral features with first and second order deltas.
//!
//! Each frame takes a 25 ms window starting at `i * hop`, zero-padded past
//! the end of the signal, with 0.97 pre-emphasis and a Hamming taper. The
//! 512-point power spectrum goes through 26 triangular mel filters; 13
//! DCT-II coefficients of the log filter energies are kept, then deltas and
//! delta-deltas (regression over +-2 frames, edges clamped) are appended.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use ndarray::{s, Array2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FrameFeatureSequence, FrameShift};
use crate::audio::SAMPLE_RATE;
use crate::{Error, Result};

pub const WINDOW_SAMPLES: usize = 400;
pub const NUM_CEPSTRA: usize = 13;
pub const FEATURE_DIM: usize = 3 * NUM_CEPSTRA;

const FFT_SIZE: usize = 512;
const NUM_MEL: usize = 26;
const PRE_EMPHASIS: f64 = 0.97;
const LOG_FLOOR: f64 = 1e-10;
const DELTA_WIDTH: usize = 2;

pub struct MfccExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// `NUM_MEL x (FFT_SIZE/2 + 1)`
    mel_bank: Array2<f64>,
    /// `NUM_CEPSTRA x NUM_MEL`
    dct: Array2<f64>,
}

impl std::fmt::Debug for MfccExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccExtractor").finish_non_exhaustive()
    }
}

impl Default for MfccExtractor {
    fn default() -> Self {
        Self::new()
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl MfccExtractor {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        let window = (0..WINDOW_SAMPLES)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (WINDOW_SAMPLES - 1) as f64).cos())
            .collect();

        let bins = FFT_SIZE / 2 + 1;
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
        let edges: Vec<f64> = (0..NUM_MEL + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (NUM_MEL + 1) as f64))
            .collect();
        let mut mel_bank = Array2::zeros((NUM_MEL, bins));
        for m in 0..NUM_MEL {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
                let w = if f > left && f <= centre {
                    (f - left) / (centre - left)
                } else if f > centre && f < right {
                    (right - f) / (right - centre)
                } else {
                    0.0
                };
                mel_bank[[m, k]] = w;
            }
        }

        let mut dct = Array2::zeros((NUM_CEPSTRA, NUM_MEL));
        for k in 0..NUM_CEPSTRA {
            let norm = if k == 0 {
                (1.0 / NUM_MEL as f64).sqrt()
            } else {
                (2.0 / NUM_MEL as f64).sqrt()
            };
            for n in 0..NUM_MEL {
                dct[[k, n]] = norm * (PI * k as f64 * (n as f64 + 0.5) / NUM_MEL as f64).cos();
            }
        }
        MfccExtractor {
            fft,
            window,
            mel_bank,
            dct,
        }
    }

    /// Number of frames for a signal of `len` samples.
    pub fn num_frames(len: usize, shift: FrameShift) -> usize {
        len / shift.hop_samples(SAMPLE_RATE)
    }

    pub fn extract(
        &self,
        source_id: &str,
        x: &[f64],
        sample_rate: u32,
        shift: FrameShift,
    ) -> Result<FrameFeatureSequence> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedSampleRate(sample_rate));
        }
        let hop = shift.hop_samples(sample_rate);
        let t = x.len() / hop;
        let mut cepstra = Array2::zeros((t, NUM_CEPSTRA));
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut log_mel = ndarray::Array1::zeros(NUM_MEL);
        for i in 0..t {
            let start = i * hop;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for n in 0..WINDOW_SAMPLES {
                let idx = start + n;
                let cur = x.get(idx).copied().unwrap_or(0.0);
                let prev = if idx == 0 {
                    0.0
                } else {
                    x.get(idx - 1).copied().unwrap_or(0.0)
                };
                buf[n].re = (cur - PRE_EMPHASIS * prev) * self.window[n];
            }
            self.fft.process(&mut buf);
            let power: ndarray::Array1<f64> = buf[..FFT_SIZE / 2 + 1]
                .iter()
                .map(|c| c.norm_sqr() / FFT_SIZE as f64)
                .collect();
            for m in 0..NUM_MEL {
                log_mel[m] = self.mel_bank.row(m).dot(&power).max(LOG_FLOOR).ln();
            }
            cepstra.row_mut(i).assign(&self.dct.dot(&log_mel));
        }
        let delta = deltas(&cepstra);
        let delta2 = deltas(&delta);
        let mut frames = Array2::zeros((t, FEATURE_DIM));
        frames.slice_mut(s![.., ..NUM_CEPSTRA]).assign(&cepstra);
        frames
            .slice_mut(s![.., NUM_CEPSTRA..2 * NUM_CEPSTRA])
            .assign(&delta);
        frames.slice_mut(s![.., 2 * NUM_CEPSTRA..]).assign(&delta2);
        Ok(FrameFeatureSequence {
            source_id: source_id.to_string(),
            frame_shift: shift,
            frames,
        })
    }
}

fn deltas(c: &Array2<f64>) -> Array2<f64> {
    let t = c.nrows();
    let mut out = Array2::zeros(c.raw_dim());
    if t == 0 {
        return out;
    }
    let denom: f64 = 2.0 * (1..=DELTA_WIDTH).map(|n| (n * n) as f64).sum::<f64>();
    for i in 0..t {
        let mut row = out.row_mut(i);
        for n in 1..=DELTA_WIDTH {
            let next = c.row((i + n).min(t - 1));
            let prev = c.row(i.saturating_sub(n));
            row.scaled_add(n as f64 / denom, &(&next - &prev));
        }
    }
    out
}

/// [`MfccExtractor::extract`] on a shared default extractor.
pub fn extract_features(
    source_id: &str,
    x: &[f64],
    sample_rate: u32,
    shift: FrameShift,
) -> Result<FrameFeatureSequence> {
    static EXTRACTOR: OnceLock<MfccExtractor> = OnceLock::new();
    EXTRACTOR
        .get_or_init(MfccExtractor::new)
        .extract(source_id, x, sample_rate, shift)
}

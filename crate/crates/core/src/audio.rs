//! Mono 16-bit PCM WAV I/O and synthetic test signals.
//!
//! Samples are held as `f64` in `[-1, 1]`.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;

use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl Waveform {
    pub fn new(sample_rate: u32, samples: Vec<f64>) -> Self {
        Waveform {
            sample_rate,
            samples,
        }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a mono 16-bit WAV. Multi-channel files are rejected.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PCM",
            path.display()
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Waveform::new(spec.sample_rate, samples))
}

/// Writes a mono 16-bit WAV. Values outside `[-1, 1)` saturate.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    for &s in &wave.samples {
        writer.write_sample(to_i16(s))?;
    }
    writer.finalize()?;
    Ok(())
}

fn to_i16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// A sum of sinusoids with a short fade at both ends.
pub fn tone(freqs_hz: &[f64], amplitude: f64, len: usize, sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let fade = (sr * 0.01) as usize;
    let n = freqs_hz.len().max(1) as f64;
    (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let v: f64 = freqs_hz.iter().map(|f| (2.0 * PI * f * t).sin()).sum();
            let edge = i.min(len - 1 - i);
            let gain = if edge < fade {
                edge as f64 / fade as f64
            } else {
                1.0
            };
            amplitude * gain * v / n
        })
        .collect()
}

/// Uniform white noise in `[-amplitude, amplitude]`.
pub fn white_noise<R: Rng + ?Sized>(rng: &mut R, amplitude: f64, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| rng.random_range(-amplitude..=amplitude))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    #[test]
    fn wav_round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let wave = Waveform::new(SAMPLE_RATE, tone(&[440.0], 0.5, 1600, SAMPLE_RATE));
        write_wav(&path, &wave).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, SAMPLE_RATE);
        assert_eq!(back.samples.len(), 1600);
        for (a, b) in wave.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12);
        }
        // quantised values survive a second trip bit-exactly
        write_wav(&path, &back).unwrap();
        assert_eq!(read_wav(&path).unwrap(), back);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            read_wav("/definitely/not/here.wav"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn noise_stays_in_range() {
        let mut rng = rng_from(3);
        let n = white_noise(&mut rng, 0.1, 1000);
        assert!(n.iter().all(|v| v.abs() <= 0.1));
    }
}

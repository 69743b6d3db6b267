//! Span masks for masked prediction.
//!
//! Every frame independently starts a span with probability `p_start`; the
//! mask is the union of `[start, min(start + span, T))` over all starts.
//! Overlapping spans merge and spans never wrap past the end.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_SPAN: usize = 10;
pub const DEFAULT_P_START: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub span: usize,
    pub p_start: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            span: DEFAULT_SPAN,
            p_start: DEFAULT_P_START,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.span == 0 {
            return Err(Error::InvalidConfig("mask span must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_start) {
            return Err(Error::InvalidConfig(format!(
                "p_start must lie in [0, 1], got {}",
                self.p_start
            )));
        }
        Ok(())
    }

    /// Expected masked fraction far from the sequence end: `1 - (1 - p)^span`.
    pub fn expected_fraction(&self) -> f64 {
        1.0 - (1.0 - self.p_start).powi(self.span as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub num_frames: usize,
    pub span: usize,
    pub p_start: f64,
    masked: Vec<usize>,
}

impl MaskSpec {
    /// Builds the mask for explicit span starts.
    pub fn from_starts(num_frames: usize, span: usize, p_start: f64, starts: &[usize]) -> Self {
        let mut flags = vec![false; num_frames];
        for &s in starts {
            for f in flags.iter_mut().take((s + span).min(num_frames)).skip(s) {
                *f = true;
            }
        }
        Self::from_flags(flags, span, p_start)
    }

    fn from_flags(flags: Vec<bool>, span: usize, p_start: f64) -> Self {
        MaskSpec {
            num_frames: flags.len(),
            span,
            p_start,
            masked: flags
                .iter()
                .enumerate()
                .filter_map(|(i, &m)| m.then_some(i))
                .collect(),
        }
    }

    /// A mask covering every frame.
    pub fn full(num_frames: usize) -> Self {
        Self::from_flags(vec![true; num_frames], 1, 1.0)
    }

    /// Sorted masked frame indices.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn num_masked(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn fraction(&self) -> f64 {
        if self.num_frames == 0 {
            0.0
        } else {
            self.masked.len() as f64 / self.num_frames as f64
        }
    }

    pub fn is_masked(&self, frame: usize) -> bool {
        self.masked.binary_search(&frame).is_ok()
    }

    pub fn to_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.num_frames];
        for &i in &self.masked {
            flags[i] = true;
        }
        flags
    }
}

pub fn sample_mask<R: Rng + ?Sized>(
    num_frames: usize,
    span: usize,
    p_start: f64,
    rng: &mut R,
) -> Result<MaskSpec> {
    MaskConfig { span, p_start }.validate()?;
    let mut flags = vec![false; num_frames];
    // frames still covered by the most recent span
    let mut covered_until = 0usize;
    for i in 0..num_frames {
        if rng.random::<f64>() < p_start {
            covered_until = covered_until.max(i + span);
        }
        if i < covered_until {
            flags[i] = true;
        }
    }
    Ok(MaskSpec::from_flags(flags, span, p_start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn degenerate_probabilities() {
        let mut rng = rng_from(0);
        assert!(sample_mask(100, 10, 0.0, &mut rng).unwrap().is_empty());
        let all = sample_mask(100, 1, 1.0, &mut rng).unwrap();
        assert_eq!(all.num_masked(), 100);
        assert!(sample_mask(0, 10, 0.5, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn explicit_starts_clamp_at_end() {
        let m = MaskSpec::from_starts(10, 3, 0.08, &[2, 8]);
        assert_eq!(m.masked(), &[2, 3, 4, 8, 9]);
        assert!(m.is_masked(3) && !m.is_masked(5));
    }

    #[test]
    fn invalid_parameters() {
        let mut rng = rng_from(0);
        assert!(sample_mask(10, 0, 0.1, &mut rng).is_err());
        assert!(sample_mask(10, 3, 1.1, &mut rng).is_err());
    }

    #[test]
    fn default_expected_fraction() {
        let f = MaskConfig::default().expected_fraction();
        assert!((f - (1.0 - 0.92f64.powi(10))).abs() < 1e-15);
        assert!((f - 0.5656).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn sampled_mask_is_union_of_spans(
            seed in any::<u64>(), t in 0usize..300, span in 1usize..15, p in 0.0f64..0.3
        ) {
            let m = sample_mask(t, span, p, &mut rng_from(seed)).unwrap();
            prop_assert!(m.masked().iter().all(|&i| i < t));
            prop_assert!(m.masked().windows(2).all(|w| w[0] < w[1]));
            // replay the start draws to rebuild the mask from its definition
            let mut rng = rng_from(seed);
            let starts: Vec<usize> = (0..t).filter(|_| rng.random::<f64>() < p).collect();
            prop_assert_eq!(&m, &MaskSpec::from_starts(t, span, p, &starts));
            prop_assert_eq!(m, sample_mask(t, span, p, &mut rng_from(seed)).unwrap());
        }
    }
}

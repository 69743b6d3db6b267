//! Dynamic mixing augmentation.
//!
//! For each utterance `u` a draw `v ~ U(0,1)` decides whether to augment
//! (`v < p_n`). An augmented utterance picks its interference source with a
//! second draw `w ~ U(0,1)`: another utterance of the same batch when
//! `w < p_u`, otherwise a noise recording. An energy ratio `e` (dB) is drawn
//! from the source-specific interval, then a window
//!
//! ```text
//! l   ~ DiscreteU(0, floor(len(u) / 2))
//! t   ~ DiscreteU(0, len(u) - l)
//! t_n ~ DiscreteU(0, len(u_n) - l)
//! ```
//!
//! and `u[t..t+l] += s * u_n[t_n..t_n+l]` with
//! `s = sqrt(E_u / (10^(e/10) * E_n))`, so the clean-to-interference energy
//! ratio inside the window equals `e` dB. Sources shorter than `l` are
//! repeated cyclically. Nothing is clipped or renormalised after mixing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_P_N: f64 = 0.2;
pub const DEFAULT_P_U: f64 = 0.1;
/// Extra source draws after a silent window before giving up on the mix.
pub const SILENT_SOURCE_RETRIES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyRange {
    pub low: f64,
    pub high: f64,
}

impl EnergyRange {
    pub const fn new(low: f64, high: f64) -> Self {
        EnergyRange { low, high }
    }

    pub fn contains(&self, e: f64) -> bool {
        self.low <= e && e <= self.high
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.low == self.high {
            self.low
        } else {
            rng.random_range(self.low..=self.high)
        }
    }
}

/// How the energy ratio turns into a mixing scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleFormula {
    /// `e` is in dB: `s = sqrt(E_u / (10^(e/10) E_n))`.
    #[default]
    Decibel,
    /// `e` is a raw ratio: `s = sqrt(E_u / (e E_n))`. Rejects `e <= 0`.
    Literal,
}

/// Which samples the energies `E_u`, `E_n` are measured over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyScope {
    /// Only the mixed windows `u[t..t+l]` and `u_n[t_n..t_n+l]`.
    #[default]
    Window,
    /// The full utterance and the full source.
    Utterance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub p_n: f64,
    pub p_u: f64,
    pub e_range_utterance: EnergyRange,
    pub e_range_noise: EnergyRange,
    pub seed: u64,
    pub formula: ScaleFormula,
    pub energy_scope: EnergyScope,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_n: DEFAULT_P_N,
            p_u: DEFAULT_P_U,
            e_range_utterance: EnergyRange::new(-5.0, 20.0),
            e_range_noise: EnergyRange::new(-5.0, 5.0),
            seed: 0,
            formula: ScaleFormula::Decibel,
            energy_scope: EnergyScope::Window,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {p}")))
            }
        };
        prob("p_n", self.p_n)?;
        prob("p_u", self.p_u)?;
        for (name, r) in [
            ("e_range_utterance", self.e_range_utterance),
            ("e_range_noise", self.e_range_noise),
        ] {
            if !(r.low.is_finite() && r.high.is_finite() && r.low <= r.high) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a finite interval with low <= high, got [{}, {}]",
                    r.low, r.high
                )));
            }
        }
        Ok(())
    }

    pub fn energy_range(&self, kind: SourceKind) -> EnergyRange {
        match kind {
            SourceKind::UtteranceInBatch => self.e_range_utterance,
            SourceKind::DnsNoise => self.e_range_noise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceKind {
    UtteranceInBatch,
    DnsNoise,
}

/// The sampled decisions of one augmented utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Mix {
    pub source_kind: SourceKind,
    pub source_id: String,
    /// Energy ratio in dB (or the raw ratio under [`ScaleFormula::Literal`]).
    pub e: f64,
    /// Window length in samples.
    pub len: usize,
    /// Window start in the clean utterance.
    pub start: usize,
    /// Window start in the (cyclically extended) source.
    pub source_start: usize,
    pub scale: f64,
}

/// `None` when the utterance is left clean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PlanRecord", into = "PlanRecord")]
pub struct MixPlan {
    pub mix: Option<Mix>,
}

impl MixPlan {
    pub const CLEAN: MixPlan = MixPlan { mix: None };

    pub fn is_augmented(&self) -> bool {
        self.mix.is_some()
    }

    pub fn source_kind(&self) -> Option<SourceKind> {
        self.mix.as_ref().map(|m| m.source_kind)
    }
}

/// Flat wire form: `{"augmented": false}` or every field present.
#[derive(Serialize, Deserialize)]
struct PlanRecord {
    augmented: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    source_kind: Option<SourceKind>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    source_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    e: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    l: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    t: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    t_n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    s: Option<f64>,
}

impl From<MixPlan> for PlanRecord {
    fn from(plan: MixPlan) -> Self {
        match plan.mix {
            None => PlanRecord {
                augmented: false,
                source_kind: None,
                source_id: None,
                e: None,
                l: None,
                t: None,
                t_n: None,
                s: None,
            },
            Some(m) => PlanRecord {
                augmented: true,
                source_kind: Some(m.source_kind),
                source_id: Some(m.source_id),
                e: Some(m.e),
                l: Some(m.len),
                t: Some(m.start),
                t_n: Some(m.source_start),
                s: Some(m.scale),
            },
        }
    }
}

impl From<PlanRecord> for MixPlan {
    fn from(r: PlanRecord) -> Self {
        if !r.augmented {
            return MixPlan::CLEAN;
        }
        // Missing fields in a hand-edited sidecar degrade to a no-op mix.
        MixPlan {
            mix: Some(Mix {
                source_kind: r.source_kind.unwrap_or(SourceKind::DnsNoise),
                source_id: r.source_id.unwrap_or_default(),
                e: r.e.unwrap_or(0.0),
                len: r.l.unwrap_or(0),
                start: r.t.unwrap_or(0),
                source_start: r.t_n.unwrap_or(0),
                scale: r.s.unwrap_or(0.0),
            }),
        }
    }
}

/// A candidate interference signal.
#[derive(Debug, Clone, Copy)]
pub struct MixSource<'a> {
    pub id: &'a str,
    pub samples: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedUtterance<'a> {
    pub samples: Vec<f64>,
    pub plan: MixPlan,
    pub clean: &'a [f64],
}

/// Mean squared amplitude.
pub fn utterance_energy(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    Ok(x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64)
}

/// `sqrt(E_u / (10^(e_db/10) * E_n))`.
pub fn mixing_scale(e_u: f64, e_n: f64, e_db: f64) -> Result<f64> {
    scale_with(ScaleFormula::Decibel, e_u, e_n, e_db)
}

/// `sqrt(E_u / (e * E_n))` with `e` taken as a plain ratio.
pub fn mixing_scale_literal(e_u: f64, e_n: f64, e: f64) -> Result<f64> {
    scale_with(ScaleFormula::Literal, e_u, e_n, e)
}

fn scale_with(formula: ScaleFormula, e_u: f64, e_n: f64, e: f64) -> Result<f64> {
    if !(e_n > 0.0) {
        return Err(Error::NonPositiveNoiseEnergy(e_n));
    }
    if !(e_u >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "utterance energy must be >= 0, got {e_u}"
        )));
    }
    let ratio = match formula {
        ScaleFormula::Decibel => 10f64.powf(e / 10.0),
        ScaleFormula::Literal => {
            if !(e > 0.0) {
                return Err(Error::NonPositiveEnergyRatio(e));
            }
            e
        }
    };
    let s = (e_u / (ratio * e_n)).sqrt();
    if s.is_finite() {
        Ok(s)
    } else {
        Err(Error::InvalidConfig(format!(
            "mixing scale overflowed for E_u={e_u}, E_n={e_n}, e={e}"
        )))
    }
}

/// Source length after cyclic extension to at least `l` samples.
pub fn effective_len(source_len: usize, l: usize) -> usize {
    source_len.max(l)
}

/// Energy of `source[start..start+len]` read cyclically.
fn cyclic_window_energy(source: &[f64], start: usize, len: usize) -> f64 {
    let n = source.len();
    (0..len)
        .map(|i| {
            let v = source[(start + i) % n];
            v * v
        })
        .sum::<f64>()
        / len as f64
}

/// Samples the augmentation decisions for one utterance.
///
/// The `w` draw only happens when `peers` is non-empty; with no peers every
/// augmented utterance mixes with noise. Callers pass the other members of
/// the batch as `peers` (never the utterance itself).
pub fn sample_plan<R: Rng + ?Sized>(
    u: &[f64],
    peers: &[MixSource<'_>],
    noises: &[MixSource<'_>],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<MixPlan> {
    let v: f64 = rng.random();
    if v >= cfg.p_n {
        return Ok(MixPlan::CLEAN);
    }
    let kind = if !peers.is_empty() && rng.random::<f64>() < cfg.p_u {
        SourceKind::UtteranceInBatch
    } else {
        SourceKind::DnsNoise
    };
    let pool = match kind {
        SourceKind::UtteranceInBatch => peers,
        SourceKind::DnsNoise => noises,
    };
    if pool.is_empty() {
        return Err(Error::EmptyNoisePool);
    }
    let range = cfg.energy_range(kind);

    for _ in 0..=SILENT_SOURCE_RETRIES {
        let source = pool[rng.random_range(0..pool.len())];
        let e = range.sample(rng);
        let l = rng.random_range(0..=u.len() / 2);
        let t = rng.random_range(0..=u.len() - l);
        let t_n = rng.random_range(0..=effective_len(source.samples.len(), l) - l);
        if l == 0 {
            // Empty window: a valid no-op mix.
            return Ok(MixPlan {
                mix: Some(Mix {
                    source_kind: kind,
                    source_id: source.id.to_string(),
                    e,
                    len: 0,
                    start: t,
                    source_start: t_n,
                    scale: 0.0,
                }),
            });
        }
        if source.samples.is_empty() {
            continue;
        }
        let (e_u, e_n) = match cfg.energy_scope {
            EnergyScope::Window => (
                utterance_energy(&u[t..t + l])?,
                cyclic_window_energy(source.samples, t_n, l),
            ),
            EnergyScope::Utterance => (
                utterance_energy(u)?,
                utterance_energy(source.samples)?,
            ),
        };
        if e_n <= 0.0 {
            continue;
        }
        let scale = scale_with(cfg.formula, e_u, e_n, e)?;
        return Ok(MixPlan {
            mix: Some(Mix {
                source_kind: kind,
                source_id: source.id.to_string(),
                e,
                len: l,
                start: t,
                source_start: t_n,
                scale,
            }),
        });
    }
    Ok(MixPlan::CLEAN)
}

/// Adds the scaled source window onto `u` per `plan`.
pub fn apply_plan<'a>(u: &'a [f64], source: &[f64], plan: &MixPlan) -> Result<AugmentedUtterance<'a>> {
    let mut samples = u.to_vec();
    if let Some(mix) = &plan.mix {
        if mix.start + mix.len > u.len() {
            return Err(Error::WindowOutOfRange {
                what: "utterance",
                start: mix.start,
                len: mix.len,
                available: u.len(),
            });
        }
        if mix.len > 0 {
            if source.is_empty()
                || mix.source_start + mix.len > effective_len(source.len(), mix.len)
            {
                return Err(Error::WindowOutOfRange {
                    what: "source",
                    start: mix.source_start,
                    len: mix.len,
                    available: source.len(),
                });
            }
            let n = source.len();
            for (i, out) in samples[mix.start..mix.start + mix.len].iter_mut().enumerate() {
                *out += mix.scale * source[(mix.source_start + i) % n];
            }
        }
    }
    Ok(AugmentedUtterance {
        samples,
        plan: plan.clone(),
        clean: u,
    })
}

//! Run configuration: command-line flags over a JSON config file over
//! built-in defaults.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use sslforge::augment::AugmentConfig;
use sslforge::masking::MaskConfig;
use sslforge::pipeline::ModelSettings;

/// Module overrides, accepted by every subcommand and by the config file.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    /// Seed for every stochastic step.
    #[arg(long, global = true, env = "SSLFORGE_SEED")]
    pub seed: Option<u64>,
    /// Probability of augmenting an utterance.
    #[arg(long, global = true)]
    pub p_n: Option<f64>,
    /// Probability of mixing with a batch peer once augmenting.
    #[arg(long, global = true)]
    pub p_u: Option<f64>,
    /// Codebook size.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Mask span length in frames.
    #[arg(long, global = true)]
    pub span: Option<usize>,
    /// Per-frame probability of starting a mask span.
    #[arg(long, global = true)]
    pub p_start: Option<f64>,
    /// Audio seconds per batch.
    #[arg(long, global = true)]
    pub cap_seconds: Option<f64>,
    /// Longest clip kept by the duration filter.
    #[arg(long, global = true)]
    pub max_seconds: Option<f64>,
    /// Training steps (per stage for `pretrain`).
    #[arg(long, global = true, value_delimiter = ',')]
    pub steps: Option<Vec<usize>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub hidden_dims: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub warmup_steps: Option<u64>,
}

macro_rules! prefer {
    ($a:ident, $b:ident, $($field:ident),*) => {
        Overrides { $($field: $a.$field.clone().or_else(|| $b.$field.clone())),* }
    };
}

impl Overrides {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Values of `self`, falling back to `other`.
    pub fn or(&self, other: &Overrides) -> Overrides {
        prefer!(
            self, other, seed, p_n, p_u, k, span, p_start, cap_seconds, max_seconds, steps,
            hidden_dims, learning_rate, warmup_steps
        )
    }
}

/// Everything a subcommand may consult, after precedence is applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Effective {
    pub seed: u64,
    pub augment: AugmentConfig,
    pub mask: MaskConfig,
    pub model: ModelSettings,
    pub k: Option<usize>,
    pub cap_seconds: Option<f64>,
    pub max_seconds: Option<f64>,
    pub steps: Option<Vec<usize>>,
    pub threads: Option<usize>,
}

impl Effective {
    pub fn resolve(o: &Overrides, threads: Option<usize>) -> Result<Self> {
        let seed = o.seed.unwrap_or(0);
        let mut augment = AugmentConfig {
            seed,
            ..AugmentConfig::default()
        };
        let mut mask = MaskConfig::default();
        let mut model = ModelSettings::default();
        o.apply_augment(&mut augment);
        o.apply_mask(&mut mask);
        o.apply_model(&mut model);
        augment.validate()?;
        mask.validate()?;
        if let Some(k) = o.k {
            if k == 0 {
                bail!("k must be positive");
            }
        }
        if let Some(c) = o.cap_seconds {
            if !(c > 0.0 && c.is_finite()) {
                bail!("cap_seconds must be positive, got {c}");
            }
        }
        if let Some(m) = o.max_seconds {
            if !(m >= 0.0 && m.is_finite()) {
                bail!("max_seconds must be non-negative, got {m}");
            }
        }
        if let Some(steps) = &o.steps {
            if steps.is_empty() || steps.contains(&0) {
                bail!("steps must be positive");
            }
        }
        if threads == Some(0) {
            bail!("--threads must be at least 1");
        }
        model.config(1, 1, 0).validate()?;
        Ok(Effective {
            seed,
            augment,
            mask,
            model,
            k: o.k,
            cap_seconds: o.cap_seconds,
            max_seconds: o.max_seconds,
            steps: o.steps.clone(),
            threads,
        })
    }

    /// Writes `effective_config.json` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("effective_config.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

impl Overrides {
    pub fn apply_augment(&self, a: &mut AugmentConfig) {
        if let Some(p) = self.p_n {
            a.p_n = p;
        }
        if let Some(p) = self.p_u {
            a.p_u = p;
        }
    }

    pub fn apply_mask(&self, m: &mut MaskConfig) {
        if let Some(s) = self.span {
            m.span = s;
        }
        if let Some(p) = self.p_start {
            m.p_start = p;
        }
    }

    pub fn apply_model(&self, m: &mut ModelSettings) {
        if let Some(h) = &self.hidden_dims {
            m.hidden_dims = h.clone();
        }
        if let Some(lr) = self.learning_rate {
            m.learning_rate = lr;
        }
        if let Some(w) = self.warmup_steps {
            m.warmup_steps = w;
        }
    }
}

//! Duration-capped batching, the resident noise cache, batch augmentation and
//! multi-stage plan execution.
//!
//! Packing is first-fit over a seeded shuffle of the manifest; epoch `e` uses
//! the shuffle derived from `(seed, e)` so a run can resume from
//! `(seed, epoch, index)`. Single-item batches never mix with another
//! utterance: their augmentation draws noise only.

use std::collections::{HashMap, VecDeque};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_plan, sample_plan, AugmentConfig, MixPlan, MixSource, SourceKind};
use crate::corpus::{Manifest, UtteranceRecord};
use crate::labels::FrameLabelSequence;
use crate::masking::{sample_mask, MaskConfig, MaskSpec};
use crate::seed::{derive_seed, derived_rng};
use crate::{Error, Result};

/// Per-device audio budget per batch.
pub const DEFAULT_CAP_SECONDS: f64 = 30.0;
/// Continued pre-training length on the balanced subset at full scale.
pub const REFERENCE_STAGE2_STEPS: usize = 10_000;

const CAP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSkeleton {
    pub items: Vec<UtteranceRecord>,
    pub total_seconds: f64,
}

impl BatchSkeleton {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Packs one epoch of `m` into batches of at most `cap_seconds` audio.
pub fn pack_batches(
    m: &Manifest,
    cap_seconds: f64,
    seed: u64,
    epoch: usize,
) -> Result<Vec<BatchSkeleton>> {
    if !(cap_seconds > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "batch cap must be positive, got {cap_seconds}"
        )));
    }
    if let Some(r) = m.records().iter().find(|r| r.duration > cap_seconds) {
        return Err(Error::OversizedClip {
            id: r.id.clone(),
            duration: r.duration,
            cap: cap_seconds,
        });
    }
    let mut order: Vec<&UtteranceRecord> = m.records().iter().collect();
    order.shuffle(&mut derived_rng(seed, &[&"pack", &epoch]));

    let mut batches: Vec<BatchSkeleton> = Vec::new();
    for r in order {
        match batches
            .iter_mut()
            .find(|b| b.total_seconds + r.duration <= cap_seconds + CAP_TOLERANCE)
        {
            Some(b) => {
                b.total_seconds += r.duration;
                b.items.push(r.clone());
            }
            None => batches.push(BatchSkeleton {
                items: vec![r.clone()],
                total_seconds: r.duration,
            }),
        }
    }
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPosition {
    pub epoch: usize,
    pub index: usize,
}

/// Endless stream of batches, reshuffled every epoch.
#[derive(Debug)]
pub struct BatchStream<'a> {
    manifest: &'a Manifest,
    cap_seconds: f64,
    seed: u64,
    epoch: usize,
    index: usize,
    pending: VecDeque<BatchSkeleton>,
}

impl<'a> BatchStream<'a> {
    pub fn new(manifest: &'a Manifest, cap_seconds: f64, seed: u64) -> Result<Self> {
        Self::resume(manifest, cap_seconds, seed, BatchPosition { epoch: 0, index: 0 })
    }

    /// Starts at batch `index` of `epoch`.
    pub fn resume(
        manifest: &'a Manifest,
        cap_seconds: f64,
        seed: u64,
        at: BatchPosition,
    ) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::InvalidConfig("cannot stream an empty manifest".into()));
        }
        let mut pending: VecDeque<_> = pack_batches(manifest, cap_seconds, seed, at.epoch)?.into();
        if at.index > pending.len() {
            return Err(Error::InvalidConfig(format!(
                "epoch {} has {} batches, cannot resume at {}",
                at.epoch,
                pending.len(),
                at.index
            )));
        }
        pending.drain(..at.index);
        Ok(BatchStream {
            manifest,
            cap_seconds,
            seed,
            epoch: at.epoch,
            index: at.index,
            pending,
        })
    }

    pub fn cursor(&self) -> BatchPosition {
        BatchPosition {
            epoch: self.epoch,
            index: self.index,
        }
    }
}

impl Iterator for BatchStream<'_> {
    type Item = (BatchPosition, BatchSkeleton);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pending.is_empty() {
            self.epoch += 1;
            self.index = 0;
            // The cap was validated against this manifest in `resume`.
            self.pending = pack_batches(self.manifest, self.cap_seconds, self.seed, self.epoch)
                .expect("manifest already validated")
                .into();
        }
        let batch = self.pending.pop_front()?;
        let pos = self.cursor();
        self.index += 1;
        Some((pos, batch))
    }
}

/// Noise recordings held in memory for the whole run.
#[derive(Debug, Default)]
pub struct NoiseCache {
    ids: Vec<String>,
    noises: Vec<Vec<f64>>,
    by_id: HashMap<String, usize>,
    total_bytes: usize,
    decodes: usize,
}

impl NoiseCache {
    /// Decodes every distinct file of `m` exactly once. Records sharing a
    /// path share one entry, filed under the first record's id.
    pub fn load<F>(m: &Manifest, mut decode: F) -> Result<Self>
    where
        F: FnMut(&UtteranceRecord) -> Result<Vec<f64>>,
    {
        let mut cache = NoiseCache::default();
        let mut by_path: HashMap<&str, usize> = HashMap::new();
        for r in m.records() {
            let idx = match by_path.get(r.path.as_str()) {
                Some(&idx) => idx,
                None => {
                    let samples = decode(r)?;
                    cache.decodes += 1;
                    let idx = cache.push(r.id.clone(), samples);
                    by_path.insert(&r.path, idx);
                    idx
                }
            };
            cache.by_id.entry(r.id.clone()).or_insert(idx);
        }
        Ok(cache)
    }

    pub fn from_waveforms(noises: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        let mut cache = NoiseCache::default();
        for (id, samples) in noises {
            cache.decodes += 1;
            let idx = cache.push(id.clone(), samples);
            cache.by_id.entry(id).or_insert(idx);
        }
        cache
    }

    fn push(&mut self, id: String, samples: Vec<f64>) -> usize {
        self.total_bytes += samples.len() * std::mem::size_of::<f64>();
        self.ids.push(id);
        self.noises.push(samples);
        self.noises.len() - 1
    }

    pub fn len(&self) -> usize {
        self.noises.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noises.is_empty()
    }

    pub fn total_bytes(&self) -> usize {
        self.total_bytes
    }

    /// Number of decoder calls made while filling the cache.
    pub fn decode_count(&self) -> usize {
        self.decodes
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.by_id.get(id).map(|&i| self.noises[i].as_slice())
    }

    pub fn sources(&self) -> Vec<MixSource<'_>> {
        self.ids
            .iter()
            .zip(&self.noises)
            .map(|(id, s)| MixSource { id, samples: s })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedItem {
    pub id: String,
    pub clean: Vec<f64>,
    pub samples: Vec<f64>,
    pub plan: MixPlan,
}

/// Augments every item of a batch. `waveforms[i]` is the clean audio of
/// `batch.items[i]`. Item `i` draws from `derive_seed(batch_seed, id)`, so
/// items may be processed in any order or in parallel.
pub fn augment_batch(
    batch: &BatchSkeleton,
    waveforms: &[Vec<f64>],
    cfg: &AugmentConfig,
    cache: &NoiseCache,
    batch_seed: u64,
) -> Result<Vec<AugmentedItem>> {
    cfg.validate()?;
    if waveforms.len() != batch.len() {
        return Err(Error::LengthMismatch {
            what: "batch waveforms",
            expected: batch.len(),
            found: waveforms.len(),
        });
    }
    if cache.is_empty() && cfg.p_n > 0.0 {
        return Err(Error::EmptyNoisePool);
    }
    let noises = cache.sources();
    let single = batch.len() == 1;
    (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let id = batch.items[i].id.as_str();
            let u = waveforms[i].as_slice();
            let peers: Vec<MixSource<'_>> = if single {
                Vec::new()
            } else {
                (0..batch.len())
                    .filter(|&j| j != i)
                    .map(|j| MixSource {
                        id: &batch.items[j].id,
                        samples: &waveforms[j],
                    })
                    .collect()
            };
            let mut rng = derived_rng(batch_seed, &[&"augment", &id]);
            let plan = sample_plan(u, &peers, &noises, cfg, &mut rng)?;
            let source: &[f64] = match &plan.mix {
                None => &[],
                Some(mix) => match mix.source_kind {
                    SourceKind::DnsNoise => cache.get(&mix.source_id).unwrap_or_default(),
                    SourceKind::UtteranceInBatch => peers
                        .iter()
                        .find(|p| p.id == mix.source_id)
                        .map(|p| p.samples)
                        .unwrap_or_default(),
                },
            };
            let out = apply_plan(u, source, &plan)?;
            Ok(AugmentedItem {
                id: id.to_string(),
                clean: u.to_vec(),
                samples: out.samples,
                plan,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub id: String,
    pub waveform: Vec<f64>,
    pub plan: MixPlan,
    pub labels: FrameLabelSequence,
    pub mask: MaskSpec,
}

/// A fully materialised mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    pub total_seconds: f64,
}

/// Attaches pseudo-labels and span masks to augmented items. Masks cover
/// the label sequence of each item.
pub fn materialize_batch<L>(
    skeleton: &BatchSkeleton,
    augmented: Vec<AugmentedItem>,
    mut labels_for: L,
    mask_cfg: &MaskConfig,
    batch_seed: u64,
) -> Result<Batch>
where
    L: FnMut(&str) -> Result<FrameLabelSequence>,
{
    if augmented.is_empty() {
        return Err(Error::InvalidConfig("a batch needs at least one item".into()));
    }
    let items = augmented
        .into_iter()
        .map(|a| {
            let labels = labels_for(&a.id)?;
            let mut rng = derived_rng(batch_seed, &[&"mask", &a.id]);
            let mask = sample_mask(labels.len(), mask_cfg.span, mask_cfg.p_start, &mut rng)?;
            Ok(BatchItem {
                id: a.id,
                waveform: a.samples,
                plan: a.plan,
                labels,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        items,
        total_seconds: skeleton.total_seconds,
    })
}

/// How a stage obtains its initial model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageInit {
    Scratch,
    FromPreviousStage,
    /// A model file written by an earlier run.
    FromExternal(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub name: String,
    pub manifest: Manifest,
    pub steps: usize,
    pub init: StageInit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPlan {
    pub stages: Vec<Stage>,
}

impl TrainingPlan {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        let plan = TrainingPlan { stages };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidPlan("plan has no stages".into()));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.steps == 0 {
                return Err(Error::InvalidPlan(format!("stage {i} has zero steps")));
            }
            if stage.manifest.is_empty() {
                return Err(Error::EmptyStage(i));
            }
            let ok = match (i, &stage.init) {
                (0, StageInit::FromPreviousStage) => false,
                (0, _) => true,
                (_, StageInit::FromPreviousStage) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::InvalidPlan(format!(
                    "stage {i} cannot start from {:?}",
                    stage.init
                )));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    pub stage: usize,
    /// Step within the stage, from 0.
    pub step: usize,
    pub position: BatchPosition,
    /// Seed for everything stochastic inside this step.
    pub batch_seed: u64,
}

/// Receives the batch stream of a plan.
pub trait Trainer {
    type State;

    /// Builds the model a stage starts from. `previous` carries the final
    /// state of the preceding stage.
    fn start_stage(
        &mut self,
        stage: usize,
        init: &StageInit,
        previous: Option<Self::State>,
    ) -> Result<Self::State>;

    /// One optimisation step; returns the loss.
    fn train_step(
        &mut self,
        state: &mut Self::State,
        batch: &BatchSkeleton,
        ctx: &StepContext,
    ) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: usize,
    pub name: String,
    pub init: StageInit,
    pub records: usize,
    pub hours: f64,
    pub steps_run: usize,
    pub mean_loss: f64,
    pub final_position: BatchPosition,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

#[derive(Debug)]
pub struct PlanOutcome<S> {
    pub state: S,
    pub summaries: Vec<StageSummary>,
}

/// Runs the stages in order, feeding exactly `steps` batches per stage.
pub fn run_plan<T: Trainer>(
    plan: &TrainingPlan,
    cap_seconds: f64,
    seed: u64,
    trainer: &mut T,
) -> Result<PlanOutcome<T::State>> {
    plan.validate()?;
    let mut state: Option<T::State> = None;
    let mut summaries = Vec::with_capacity(plan.stages.len());
    for (idx, stage) in plan.stages.iter().enumerate() {
        let started = Instant::now();
        let stage_seed = derive_seed(seed, &[&"stage", &idx]);
        let mut stream = BatchStream::new(&stage.manifest, cap_seconds, stage_seed)?;
        let previous = match stage.init {
            StageInit::FromPreviousStage => state.take(),
            _ => None,
        };
        let mut current = trainer
            .start_stage(idx, &stage.init, previous)
            .map_err(|e| Error::Trainer {
                stage: idx,
                step: 0,
                source: Box::new(e),
            })?;
        let mut loss_sum = 0.0;
        for step in 0..stage.steps {
            let (position, batch) = stream.next().expect("batch stream is endless");
            let ctx = StepContext {
                stage: idx,
                step,
                position,
                batch_seed: derive_seed(stage_seed, &[&position.epoch, &position.index]),
            };
            loss_sum += trainer
                .train_step(&mut current, &batch, &ctx)
                .map_err(|e| Error::Trainer {
                    stage: idx,
                    step,
                    source: Box::new(e),
                })?;
        }
        summaries.push(StageSummary {
            stage: idx,
            name: stage.name.clone(),
            init: stage.init.clone(),
            records: stage.manifest.len(),
            hours: stage.manifest.total_hours(),
            steps_run: stage.steps,
            mean_loss: loss_sum / stage.steps as f64,
            final_position: stream.cursor(),
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
        state = Some(current);
    }
    Ok(PlanOutcome {
        state: state.expect("plan has at least one stage"),
        summaries,
    })
}

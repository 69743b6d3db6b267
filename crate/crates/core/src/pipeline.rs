//! End-to-end orchestration: synthetic corpora, offline labelling, multi-stage
//! toy pre-training and the reproducibility demo.
//!
//! Paths inside manifests and plan files are resolved against the directory
//! of the file that names them, so a run directory can be moved or compared
//! byte for byte with another run.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{read_wav, tone, white_noise, write_wav, Waveform, SAMPLE_RATE};
use crate::augment::{AugmentConfig, MixPlan, SourceKind};
use crate::batching::{
    augment_batch, materialize_batch, run_plan, BatchSkeleton, NoiseCache, Stage, StageInit,
    StageSummary, StepContext, Trainer, TrainingPlan, DEFAULT_CAP_SECONDS,
};
use crate::corpus::{
    build_stage2_subset, compute_stats, filter_by_duration, load_manifest, CorpusTag,
    LanguageStats, Manifest, UtteranceRecord, DEFAULT_MAX_SECONDS,
};
use crate::labels::{
    assign_labels, extract_features, fit_kmeans, fuse_multires, write_labels_jsonl, Codebook,
    FrameLabelSequence, FrameShift, KMeansConfig, DEFAULT_K,
};
use crate::masking::{sample_mask, MaskConfig};
use crate::seed::{derive_seed, derived_rng};
use crate::toymodel::{self, Adam, Sample, StepReport};
use crate::{Error, FrameFeatureSequence, Result, ToyModelConfig, ToyModelState};

/// Files excluded from determinism hashes.
pub const TIMING_FILE: &str = "timing.json";

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `path` if absolute, otherwise `base/path`.
pub fn resolve(base: &Path, path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Decodes one record, checking the rate the manifest claims.
pub fn decode_record(base: &Path, r: &UtteranceRecord) -> Result<Vec<f64>> {
    let wave = read_wav(resolve(base, &r.path))?;
    if wave.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedSampleRate(wave.sample_rate));
    }
    Ok(wave.samples)
}

/// Decodes every record of `m` in parallel.
pub fn load_audio(m: &Manifest, base: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    m.records()
        .par_iter()
        .map(|r| Ok((r.id.clone(), decode_record(base, r)?)))
        .collect()
}

/// Shape of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub utterances: usize,
    pub languages: usize,
    pub noises: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
    /// Extra clips longer than the duration filter.
    pub long_clips: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            utterances: 48,
            languages: 8,
            noises: 4,
            min_seconds: 1.0,
            max_seconds: 3.0,
            long_clips: 2,
        }
    }
}

const SPEECH_CORPORA: [CorpusTag; 6] = [
    CorpusTag::Mls,
    CorpusTag::CommonVoice,
    CorpusTag::Googlei18n,
    CorpusTag::VoxPopuli,
    CorpusTag::Babel,
    CorpusTag::Fleurs,
];

/// `qaa`, `qab`, ...: codes from the range reserved for local use.
fn language_code(i: usize) -> String {
    let second = (b'a' + (i / 26 % 26) as u8) as char;
    let third = (b'a' + (i % 26) as u8) as char;
    format!("q{second}{third}")
}

/// Tone segments drawn from a per-language frequency palette.
fn synthetic_speech<R: Rng>(rng: &mut R, language: usize, len: usize) -> Vec<f64> {
    let base = 140.0 + 35.0 * language as f64;
    let palette = [base, base * 1.6, base * 2.4, base * 3.7, base * 5.1];
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let seg = rng.random_range(1_280..3_840).min(len - out.len());
        let f = palette[rng.random_range(0..palette.len())];
        let amp = rng.random_range(0.15..0.45);
        out.extend(tone(&[f, 2.0 * f], amp, seg, SAMPLE_RATE));
    }
    for (x, n) in out.iter_mut().zip(white_noise(rng, 0.01, len)) {
        *x += n;
    }
    out
}

/// The speech manifest and the noise manifest of a generated corpus.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub speech: Manifest,
    pub noise: Manifest,
}

/// Writes `audio/*.wav`, `noise/*.wav`, `corpus.tsv` and `noise.tsv` under
/// `dir`. Durations are whole samples, so the manifest is exact.
pub fn generate_corpus(dir: &Path, spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    if spec.languages == 0 || spec.utterances == 0 {
        return Err(Error::InvalidConfig("synthetic corpus needs utterances and languages".into()));
    }
    if !(spec.min_seconds > 0.0 && spec.min_seconds <= spec.max_seconds) {
        return Err(Error::InvalidConfig("synthetic durations must satisfy 0 < min <= max".into()));
    }
    create_dir(&dir.join("audio"))?;
    create_dir(&dir.join("noise"))?;
    let sr = SAMPLE_RATE as f64;
    let total = spec.utterances + spec.long_clips;
    let speech: Vec<UtteranceRecord> = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(seed, &[&"utterance", &i]);
            let language = i % spec.languages;
            let seconds = if i < spec.utterances {
                rng.random_range(spec.min_seconds..=spec.max_seconds)
            } else {
                DEFAULT_MAX_SECONDS + 1.0
            };
            let len = (seconds * sr).round() as usize;
            let id = format!("utt{i:04}");
            let rel = format!("audio/{id}.wav");
            write_wav(
                dir.join(&rel),
                &Waveform::new(SAMPLE_RATE, synthetic_speech(&mut rng, language, len)),
            )?;
            Ok(UtteranceRecord {
                id,
                path: rel,
                corpus: SPEECH_CORPORA[language % SPEECH_CORPORA.len()],
                language: language_code(language),
                duration: len as f64 / sr,
                sample_rate: SAMPLE_RATE,
            })
        })
        .collect::<Result<_>>()?;
    let noise: Vec<UtteranceRecord> = (0..spec.noises)
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(seed, &[&"noise", &i]);
            let len = SAMPLE_RATE as usize * 2;
            let amp = rng.random_range(0.05..0.3);
            let id = format!("noise{i:02}");
            let rel = format!("noise/{id}.wav");
            write_wav(
                dir.join(&rel),
                &Waveform::new(SAMPLE_RATE, white_noise(&mut rng, amp, len)),
            )?;
            Ok(UtteranceRecord {
                id,
                path: rel,
                corpus: CorpusTag::Dns,
                language: "und".into(),
                duration: len as f64 / sr,
                sample_rate: SAMPLE_RATE,
            })
        })
        .collect::<Result<_>>()?;
    let corpus = SyntheticCorpus {
        speech: Manifest::new("corpus", speech)?,
        noise: Manifest::new("noise", noise)?,
    };
    corpus.speech.save(dir.join("corpus.tsv"))?;
    corpus.noise.save(dir.join("noise.tsv"))?;
    Ok(corpus)
}

/// One stage of a plan file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub manifest: PathBuf,
    pub steps: usize,
    /// Defaults to scratch for the first stage, the previous stage otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<StageInit>,
    /// Keep only these corpora.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpora: Option<Vec<CorpusTag>>,
    #[serde(default = "default_max_seconds")]
    pub max_seconds: f64,
}

fn default_max_seconds() -> f64 {
    DEFAULT_MAX_SECONDS
}

/// Labelling settings for a pre-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    pub k: usize,
    /// Existing codebook; when absent one is trained on the clean audio of
    /// every stage.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub codebook: Option<PathBuf>,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            k: DEFAULT_K,
            codebook: None,
        }
    }
}

/// Model settings; input and output sizes follow from the features and the
/// codebook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub hidden_dims: Vec<usize>,
    pub context: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let d = ToyModelConfig::default();
        ModelSettings {
            hidden_dims: d.hidden_dims,
            context: d.context,
            learning_rate: d.learning_rate,
            warmup_steps: d.warmup_steps,
        }
    }
}

impl ModelSettings {
    pub fn config(&self, input_dim: usize, num_classes: usize, seed: u64) -> ToyModelConfig {
        ToyModelConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            num_classes,
            context: self.context,
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            seed,
        }
    }
}

/// The plan file consumed by `pretrain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub noise_manifest: PathBuf,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cap")]
    pub cap_seconds: f64,
    /// Input resolutions in ms; labels use the finest.
    #[serde(default = "default_shifts")]
    pub input_shifts: Vec<u32>,
    #[serde(default)]
    pub labels: LabelConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub model: ModelSettings,
}

fn default_cap() -> f64 {
    DEFAULT_CAP_SECONDS
}

fn default_shifts() -> Vec<u32> {
    vec![20]
}

impl PretrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.mask.validate()?;
        if self.stages.is_empty() {
            return Err(Error::InvalidPlan("plan has no stages".into()));
        }
        if !(self.cap_seconds > 0.0) {
            return Err(Error::InvalidConfig("cap_seconds must be positive".into()));
        }
        if self.labels.k == 0 {
            return Err(Error::InvalidConfig("k must be positive".into()));
        }
        self.shifts()?;
        self.model.config(1, 1, 0).validate()
    }

    /// Input resolutions, finest first.
    pub fn shifts(&self) -> Result<Vec<FrameShift>> {
        let mut shifts = self
            .input_shifts
            .iter()
            .map(|&ms| FrameShift::from_ms(ms))
            .collect::<Result<Vec<_>>>()?;
        shifts.sort();
        shifts.dedup();
        if shifts.is_empty() {
            return Err(Error::MissingFinestResolution);
        }
        Ok(shifts)
    }
}

/// Features of `x` at every resolution, fused onto the finest.
pub fn input_features(id: &str, x: &[f64], shifts: &[FrameShift]) -> Result<Array2<f64>> {
    let seqs = shifts
        .iter()
        .map(|&s| extract_features(id, x, SAMPLE_RATE, s))
        .collect::<Result<Vec<_>>>()?;
    if seqs.len() == 1 {
        return Ok(seqs.into_iter().next().expect("one sequence").frames);
    }
    Ok(fuse_multires(&seqs)?.frames)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub stage: usize,
    pub step: usize,
    pub epoch: usize,
    pub batch: usize,
    pub items: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub masked_frames: usize,
    pub frames: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanLogEntry {
    pub stage: usize,
    pub step: usize,
    pub id: String,
    pub plan: MixPlan,
}

/// [`Trainer`] that augments real audio, masks it and trains the toy model.
pub struct ToyTrainer<'a> {
    pub audio: &'a BTreeMap<String, Vec<f64>>,
    pub labels: &'a BTreeMap<String, FrameLabelSequence>,
    pub noise: &'a NoiseCache,
    pub augment: AugmentConfig,
    pub mask: MaskConfig,
    /// Finest first.
    pub shifts: Vec<FrameShift>,
    pub model: ToyModelConfig,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    optimizer: Option<Adam>,
    pub step_log: Vec<StepLog>,
    pub plan_log: Vec<PlanLogEntry>,
    /// Final state of every finished stage except the last.
    pub stage_models: Vec<ToyModelState>,
}

impl<'a> ToyTrainer<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        audio: &'a BTreeMap<String, Vec<f64>>,
        labels: &'a BTreeMap<String, FrameLabelSequence>,
        noise: &'a NoiseCache,
        augment: AugmentConfig,
        mask: MaskConfig,
        shifts: Vec<FrameShift>,
        model: ToyModelConfig,
        normalization: (Vec<f64>, Vec<f64>),
    ) -> Self {
        ToyTrainer {
            audio,
            labels,
            noise,
            augment,
            mask,
            shifts,
            model,
            input_mean: normalization.0,
            input_std: normalization.1,
            optimizer: None,
            step_log: Vec::new(),
            plan_log: Vec::new(),
            stage_models: Vec::new(),
        }
    }
}

impl Trainer for ToyTrainer<'_> {
    type State = ToyModelState;

    fn start_stage(
        &mut self,
        _stage: usize,
        init: &StageInit,
        previous: Option<ToyModelState>,
    ) -> Result<ToyModelState> {
        let state = match init {
            StageInit::Scratch => {
                let mut s = ToyModelState::init(self.model.clone())?;
                s.input_mean = self.input_mean.clone();
                s.input_std = self.input_std.clone();
                s
            }
            StageInit::FromPreviousStage => {
                let s = previous
                    .ok_or_else(|| Error::InvalidPlan("no previous stage to continue".into()))?;
                self.stage_models.push(s.clone());
                s
            }
            StageInit::FromExternal(path) => {
                let s = ToyModelState::load(path)?;
                if s.config.input_dim != self.model.input_dim
                    || s.config.num_classes != self.model.num_classes
                {
                    return Err(Error::InvalidConfig(format!(
                        "{} has {}x{} input/output, run needs {}x{}",
                        path.display(),
                        s.config.input_dim,
                        s.config.num_classes,
                        self.model.input_dim,
                        self.model.num_classes
                    )));
                }
                s
            }
        };
        self.optimizer = Some(Adam::for_state(&state));
        Ok(state)
    }

    fn train_step(
        &mut self,
        state: &mut ToyModelState,
        batch: &BatchSkeleton,
        ctx: &StepContext,
    ) -> Result<f64> {
        let waveforms = batch
            .items
            .iter()
            .map(|r| {
                self.audio
                    .get(&r.id)
                    .cloned()
                    .ok_or_else(|| Error::InvalidConfig(format!("no audio loaded for {}", r.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let augmented = augment_batch(batch, &waveforms, &self.augment, self.noise, ctx.batch_seed)?;
        self.plan_log.extend(augmented.iter().map(|a| PlanLogEntry {
            stage: ctx.stage,
            step: ctx.step,
            id: a.id.clone(),
            plan: a.plan.clone(),
        }));
        let labels = self.labels;
        let materialized = materialize_batch(
            batch,
            augmented,
            |id| {
                labels
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::InvalidConfig(format!("no labels for {id}")))
            },
            &self.mask,
            ctx.batch_seed,
        )?;
        let features = materialized
            .items
            .par_iter()
            .map(|item| {
                let f = input_features(&item.id, &item.waveform, &self.shifts)?;
                if f.nrows() != item.labels.len() {
                    return Err(Error::LengthMismatch {
                        what: "labels",
                        expected: f.nrows(),
                        found: item.labels.len(),
                    });
                }
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        let samples: Vec<Sample<'_>> = materialized
            .items
            .iter()
            .zip(&features)
            .map(|(item, f)| Sample {
                features: f.view(),
                labels: &item.labels.labels,
                mask: &item.mask,
            })
            .collect();
        let opt = self
            .optimizer
            .as_mut()
            .ok_or_else(|| Error::InvalidPlan("train_step before start_stage".into()))?;
        let report = toymodel::train_step(state, opt, &samples)?;
        self.step_log.push(StepLog {
            stage: ctx.stage,
            step: ctx.step,
            epoch: ctx.position.epoch,
            batch: ctx.position.index,
            items: samples.len(),
            loss: report.loss,
            accuracy: report.accuracy,
            masked_frames: report.masked_frames,
            frames: features.iter().map(|f| f.nrows()).sum(),
            learning_rate: report.learning_rate,
        });
        Ok(report.loss)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentationStats {
    pub items: usize,
    pub augmented: usize,
    pub utterance_mixed: usize,
    pub noise_mixed: usize,
}

impl AugmentationStats {
    pub fn from_plans<'p>(plans: impl IntoIterator<Item = &'p MixPlan>) -> Self {
        let mut s = AugmentationStats::default();
        for p in plans {
            s.items += 1;
            match p.source_kind() {
                None => {}
                Some(SourceKind::UtteranceInBatch) => {
                    s.augmented += 1;
                    s.utterance_mixed += 1;
                }
                Some(SourceKind::DnsNoise) => {
                    s.augmented += 1;
                    s.noise_mixed += 1;
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelSummary {
    pub k: usize,
    pub shift_ms: u32,
    pub utterances: usize,
    pub frames: usize,
    pub clusters_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSummary {
    pub files: usize,
    pub decodes: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub seed: u64,
    pub stage_count: usize,
    pub total_steps: usize,
    pub stages: Vec<StageSummary>,
    pub labels: LabelSummary,
    pub noise: NoiseSummary,
    pub augmentation: AugmentationStats,
    pub masked_frames: usize,
    pub frames: usize,
    pub first_loss: f64,
    pub last_loss: f64,
}

fn stage_manifest(base: &Path, sc: &StageConfig, index: usize) -> Result<Manifest> {
    let m = load_manifest(resolve(base, &sc.manifest))?;
    // relative to `base`, like the manifest path itself
    let audio_base = sc.manifest.parent().unwrap_or(Path::new(""));
    let mut m = filter_by_duration(&m, sc.max_seconds)?;
    if let Some(corpora) = &sc.corpora {
        let set: BTreeSet<CorpusTag> = corpora.iter().copied().collect();
        m = build_stage2_subset(&m, &set)?;
    }
    // Rebase audio paths onto `base` so later stages need not know the
    // manifest location.
    let records = m
        .into_records()
        .into_iter()
        .map(|mut r| {
            r.path = resolve(audio_base, &r.path).to_string_lossy().into_owned();
            r
        })
        .collect();
    Manifest::new(
        sc.name.clone().unwrap_or_else(|| format!("stage{index}")),
        records,
    )
}

/// Runs a plan file end to end and writes its artifacts to `out_dir`:
/// `codebook.bin`, `labels.jsonl`, `mixplans.jsonl`, `train_log.jsonl`,
/// `stage{i}.model`, `summary.json` and `timing.json`.
pub fn run_pretrain(cfg: &PretrainConfig, base: &Path, out_dir: &Path) -> Result<PretrainReport> {
    let started = Instant::now();
    cfg.validate()?;
    let shifts = cfg.shifts()?;
    let finest = shifts[0];
    create_dir(out_dir)?;

    let noise_path = resolve(base, &cfg.noise_manifest);
    let noise_manifest = load_manifest(&noise_path).map_err(Error::in_step("loading noise"))?;
    let noise_base = parent_dir(&noise_path);
    let noise = NoiseCache::load(&noise_manifest, |r| decode_record(&noise_base, r))
        .map_err(Error::in_step("loading noise"))?;

    let manifests = cfg
        .stages
        .iter()
        .enumerate()
        .map(|(i, sc)| stage_manifest(base, sc, i))
        .collect::<Result<Vec<_>>>()
        .map_err(Error::in_step("loading manifests"))?;
    let mut union: BTreeMap<String, UtteranceRecord> = BTreeMap::new();
    for m in &manifests {
        for r in m.records() {
            union.entry(r.id.clone()).or_insert_with(|| r.clone());
        }
    }
    let all = Manifest::new("all", union.into_values().collect())?;
    let audio = load_audio(&all, base).map_err(Error::in_step("loading audio"))?;

    let clean: Vec<(FrameFeatureSequence, Array2<f64>)> = audio
        .par_iter()
        .map(|(id, x)| {
            let label_feats = extract_features(id, x, SAMPLE_RATE, finest)?;
            let inputs = input_features(id, x, &shifts)?;
            Ok((label_feats, inputs))
        })
        .collect::<Result<_>>()
        .map_err(Error::in_step("feature extraction"))?;
    let codebook = match &cfg.labels.codebook {
        Some(p) => Codebook::load(resolve(base, p))?,
        None => {
            let views: Vec<_> = clean.iter().map(|(f, _)| f.frames.view()).collect();
            let pooled = concatenate(Axis(0), &views).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let kcfg = KMeansConfig::new(cfg.labels.k, derive_seed(cfg.seed, &[&"kmeans"]));
            fit_kmeans(pooled.view(), &kcfg)
                .map_err(Error::in_step("k-means"))?
                .codebook
        }
    };
    codebook.save(out_dir.join("codebook.bin"))?;
    let label_seqs = clean
        .par_iter()
        .map(|(f, _)| assign_labels(f, &codebook))
        .collect::<Result<Vec<_>>>()
        .map_err(Error::in_step("label assignment"))?;
    write_labels_jsonl(out_dir.join("labels.jsonl"), &label_seqs)?;
    let used: BTreeSet<u32> = label_seqs.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let label_summary = LabelSummary {
        k: codebook.k(),
        shift_ms: finest.ms(),
        utterances: label_seqs.len(),
        frames: label_seqs.iter().map(|s| s.len()).sum(),
        clusters_used: used.len(),
    };
    let labels: BTreeMap<String, FrameLabelSequence> =
        label_seqs.into_iter().map(|s| (s.source_id.clone(), s)).collect();

    let input_views: Vec<_> = clean.iter().map(|(_, x)| x.view()).collect();
    let pooled_inputs =
        concatenate(Axis(0), &input_views).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let input_dim = pooled_inputs.ncols();
    let model_cfg = cfg
        .model
        .config(input_dim, codebook.k(), derive_seed(cfg.seed, &[&"model"]));
    let mut norm_state = ToyModelState::init(ToyModelConfig {
        hidden_dims: vec![1],
        ..model_cfg.clone()
    })?;
    norm_state.fit_input_normalization(pooled_inputs.view())?;

    let stages = cfg
        .stages
        .iter()
        .zip(manifests)
        .enumerate()
        .map(|(i, (sc, manifest))| Stage {
            name: manifest.name.clone(),
            manifest,
            steps: sc.steps,
            init: match &sc.init {
                Some(StageInit::FromExternal(p)) => StageInit::FromExternal(resolve(base, p)),
                Some(init) => init.clone(),
                None if i == 0 => StageInit::Scratch,
                None => StageInit::FromPreviousStage,
            },
        })
        .collect();
    let plan = TrainingPlan::new(stages)?;
    for (i, stage) in plan.stages.iter().enumerate() {
        stage.manifest.save(out_dir.join(format!("stage{i}.tsv")))?;
    }

    let mut trainer = ToyTrainer::new(
        &audio,
        &labels,
        &noise,
        cfg.augment.clone(),
        cfg.mask,
        shifts,
        model_cfg,
        (norm_state.input_mean, norm_state.input_std),
    );
    let outcome = run_plan(&plan, cfg.cap_seconds, derive_seed(cfg.seed, &[&"plan"]), &mut trainer)?;
    for (i, s) in trainer
        .stage_models
        .iter()
        .chain(std::iter::once(&outcome.state))
        .enumerate()
    {
        s.save(out_dir.join(format!("stage{i}.model")))?;
    }
    write_jsonl(&out_dir.join("mixplans.jsonl"), &trainer.plan_log)?;
    write_jsonl(&out_dir.join("train_log.jsonl"), &trainer.step_log)?;

    let report = PretrainReport {
        seed: cfg.seed,
        stage_count: plan.stages.len(),
        total_steps: plan.total_steps(),
        stages: outcome.summaries.clone(),
        labels: label_summary,
        noise: NoiseSummary {
            files: noise.len(),
            decodes: noise.decode_count(),
            bytes: noise.total_bytes(),
        },
        augmentation: AugmentationStats::from_plans(trainer.plan_log.iter().map(|p| &p.plan)),
        masked_frames: trainer.step_log.iter().map(|s| s.masked_frames).sum(),
        frames: trainer.step_log.iter().map(|s| s.frames).sum(),
        first_loss: trainer.step_log.first().map_or(0.0, |s| s.loss),
        last_loss: trainer.step_log.last().map_or(0.0, |s| s.loss),
    };
    write_json(&out_dir.join("summary.json"), &report)?;
    let timing: Vec<_> = outcome
        .summaries
        .iter()
        .map(|s| serde_json::json!({"stage": s.stage, "wall_time_secs": s.wall_time_secs}))
        .collect();
    write_json(
        &out_dir.join(TIMING_FILE),
        &serde_json::json!({"stages": timing, "total_secs": started.elapsed().as_secs_f64()}),
    )?;
    Ok(report)
}

/// Settings for feature-level training without audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTrainConfig {
    pub model: ModelSettings,
    pub mask: MaskConfig,
    pub steps: usize,
    pub batch_utterances: usize,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            model: ModelSettings::default(),
            mask: MaskConfig::default(),
            steps: 200,
            batch_utterances: 8,
            seed: 0,
        }
    }
}

/// Trains on precomputed features and labels matched by id. Epoch `e`
/// visits the utterances in the order shuffled by `(seed, e)`.
pub fn toy_train(
    features: &[FrameFeatureSequence],
    labels: &[FrameLabelSequence],
    num_classes: usize,
    cfg: &ToyTrainConfig,
) -> Result<(ToyModelState, Vec<StepReport>)> {
    cfg.mask.validate()?;
    if cfg.batch_utterances == 0 || cfg.steps == 0 {
        return Err(Error::InvalidConfig("steps and batch_utterances must be positive".into()));
    }
    let by_id: BTreeMap<&str, &FrameLabelSequence> =
        labels.iter().map(|l| (l.source_id.as_str(), l)).collect();
    let pairs = features
        .iter()
        .map(|f| {
            let l = by_id.get(f.source_id.as_str()).ok_or_else(|| Error::MismatchedUtterance {
                expected: f.source_id.clone(),
                found: "<missing labels>".into(),
            })?;
            if l.len() != f.num_frames() {
                return Err(Error::LengthMismatch {
                    what: "labels",
                    expected: f.num_frames(),
                    found: l.len(),
                });
            }
            Ok((f, *l))
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = pairs
        .first()
        .map(|(f, _)| f.dim())
        .ok_or_else(|| Error::InvalidConfig("no features to train on".into()))?;
    let mut state = ToyModelState::init(
        cfg.model
            .config(dim, num_classes, derive_seed(cfg.seed, &[&"model"])),
    )?;
    let views: Vec<_> = pairs.iter().map(|(f, _)| f.frames.view()).collect();
    let pooled = concatenate(Axis(0), &views).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    state.fit_input_normalization(pooled.view())?;

    let mut opt = Adam::for_state(&state);
    let mut reports = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_utterances);
        while batch.len() < cfg.batch_utterances.min(pairs.len()) {
            if cursor == order.len() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut derived_rng(cfg.seed, &[&"order", &epoch]));
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let masks = batch
            .iter()
            .map(|&i| {
                let (f, _) = pairs[i];
                let mut rng = derived_rng(cfg.seed, &[&"mask", &step, &f.source_id]);
                sample_mask(f.num_frames(), cfg.mask.span, cfg.mask.p_start, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let samples: Vec<Sample<'_>> = batch
            .iter()
            .zip(&masks)
            .map(|(&i, mask)| Sample {
                features: pairs[i].0.frames.view(),
                labels: &pairs[i].1.labels,
                mask,
            })
            .collect();
        reports.push(toymodel::train_step(&mut state, &mut opt, &samples)?);
    }
    Ok((state, reports))
}

/// SHA-256 of every file under `dir` except [`TIMING_FILE`], keyed by
/// relative path with `/` separators.
pub fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if entry.file_name() != TIMING_FILE {
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let rel = path
                    .strip_prefix(root)
                    .expect("walk stays under root")
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                out.insert(rel, format!("{:x}", Sha256::digest(&bytes)));
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

/// One hash over a [`hash_tree`] listing.
pub fn combined_hash(tree: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (path, digest) in tree {
        h.update(path.as_bytes());
        h.update([0]);
        h.update(digest.as_bytes());
        h.update([b'\n']);
    }
    format!("{:x}", h.finalize())
}

/// Settings for [`run_demo`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub corpus: SyntheticSpec,
    pub k: usize,
    pub stage_steps: Vec<usize>,
    pub model: ModelSettings,
    pub augment: AugmentConfig,
    pub mask: MaskConfig,
    pub cap_seconds: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            corpus: SyntheticSpec::default(),
            k: 32,
            stage_steps: vec![80, 40],
            model: ModelSettings::default(),
            augment: AugmentConfig::default(),
            mask: MaskConfig::default(),
            cap_seconds: DEFAULT_CAP_SECONDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoRun {
    pub dir: String,
    pub artifacts: usize,
    pub hash: String,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoReport {
    pub seed: u64,
    pub stage_count: usize,
    pub identical: bool,
    pub runs: Vec<DemoRun>,
    pub corpus: LanguageStats,
    pub filtered_records: usize,
    pub stage2_records: usize,
    pub pretrain: PretrainReport,
    pub artifacts: BTreeMap<String, String>,
}

fn demo_once(dir: &Path, seed: u64, cfg: &DemoConfig) -> Result<(LanguageStats, usize, usize, PretrainReport)> {
    let data = dir.join("data");
    let corpus = generate_corpus(&data, &cfg.corpus, derive_seed(seed, &[&"corpus"]))
        .map_err(Error::in_step("corpus generation"))?;
    let stats = compute_stats(&corpus.speech);
    write_json(&dir.join("stats.json"), &stats)?;
    let filtered = filter_by_duration(&corpus.speech, DEFAULT_MAX_SECONDS)?;
    filtered.save(data.join("filtered.tsv"))?;
    let stage2 = build_stage2_subset(&filtered, &BTreeSet::from([CorpusTag::Fleurs, CorpusTag::Babel]))?;
    stage2.save(data.join("stage2.tsv"))?;

    let manifests = ["data/filtered.tsv", "data/stage2.tsv"];
    let stages = cfg
        .stage_steps
        .iter()
        .enumerate()
        .map(|(i, &steps)| StageConfig {
            name: Some(format!("stage{i}")),
            manifest: PathBuf::from(manifests[i.min(1)]),
            steps,
            init: None,
            corpora: None,
            max_seconds: DEFAULT_MAX_SECONDS,
        })
        .collect();
    let plan = PretrainConfig {
        noise_manifest: PathBuf::from("data/noise.tsv"),
        stages,
        seed,
        cap_seconds: cfg.cap_seconds,
        input_shifts: default_shifts(),
        labels: LabelConfig {
            k: cfg.k,
            codebook: None,
        },
        augment: cfg.augment.clone(),
        mask: cfg.mask,
        model: cfg.model.clone(),
    };
    write_json(&dir.join("plan.json"), &plan)?;
    let report = run_pretrain(&plan, dir, &dir.join("pretrain")).map_err(Error::in_step("pretrain"))?;
    Ok((stats, filtered.len(), stage2.len(), report))
}

/// Runs the whole pipeline twice under `out_dir/run1` and `out_dir/run2`,
/// compares every artifact and writes `out_dir/report.json`. Differing
/// artifacts are an error.
pub fn run_demo(out_dir: &Path, seed: u64, cfg: &DemoConfig) -> Result<DemoReport> {
    if cfg.stage_steps.is_empty() {
        return Err(Error::InvalidPlan("demo needs at least one stage".into()));
    }
    create_dir(out_dir)?;
    let mut runs = Vec::new();
    let mut trees = Vec::new();
    let mut first = None;
    for name in ["run1", "run2"] {
        let dir = out_dir.join(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let started = Instant::now();
        let outcome = demo_once(&dir, seed, cfg)?;
        let wall = started.elapsed().as_secs_f64();
        write_json(&dir.join(TIMING_FILE), &serde_json::json!({ "total_secs": wall }))?;
        let tree = hash_tree(&dir)?;
        runs.push(DemoRun {
            dir: name.into(),
            artifacts: tree.len(),
            hash: combined_hash(&tree),
            wall_time_secs: wall,
        });
        trees.push(tree);
        first.get_or_insert(outcome);
    }
    let mut differing: Vec<String> = trees[0]
        .iter()
        .filter(|(k, v)| trees[1].get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect();
    differing.extend(trees[1].keys().filter(|k| !trees[0].contains_key(*k)).cloned());
    let (corpus, filtered_records, stage2_records, pretrain) = first.expect("two runs");
    let report = DemoReport {
        seed,
        stage_count: pretrain.stage_count,
        identical: differing.is_empty(),
        runs,
        corpus,
        filtered_records,
        stage2_records,
        pretrain,
        artifacts: trees.swap_remove(0),
    };
    write_json(&out_dir.join("report.json"), &report)?;
    if !differing.is_empty() {
        return Err(Error::NonDeterministic(differing));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_demo() -> DemoConfig {
        DemoConfig {
            corpus: SyntheticSpec {
                utterances: 12,
                languages: 6,
                noises: 2,
                min_seconds: 0.5,
                max_seconds: 1.0,
                long_clips: 1,
            },
            k: 8,
            stage_steps: vec![3, 2],
            model: ModelSettings {
                hidden_dims: vec![16],
                ..Default::default()
            },
            cap_seconds: 3.0,
            ..Default::default()
        }
    }

    #[test]
    fn language_codes() {
        assert_eq!(language_code(0), "qaa");
        assert_eq!(language_code(27), "qbb");
    }

    #[test]
    fn generated_corpus_is_exact_and_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = tiny_demo().corpus;
        let ca = generate_corpus(a.path(), &spec, 5).unwrap();
        generate_corpus(b.path(), &spec, 5).unwrap();
        assert_eq!(hash_tree(a.path()).unwrap(), hash_tree(b.path()).unwrap());
        assert_eq!(ca.speech.len(), 13);
        let long = ca.speech.get("utt0012").unwrap();
        assert!(long.duration > DEFAULT_MAX_SECONDS);
        let first = ca.speech.get("utt0000").unwrap();
        let x = decode_record(a.path(), first).unwrap();
        assert_eq!(x.len() as f64 / SAMPLE_RATE as f64, first.duration);
        assert_eq!(load_manifest(a.path().join("corpus.tsv")).unwrap(), ca.speech);
    }

    #[test]
    fn tiny_demo_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_demo(dir.path(), 3, &tiny_demo()).unwrap();
        assert!(report.identical);
        assert_eq!(report.stage_count, 2);
        assert_eq!(report.runs[0].hash, report.runs[1].hash);
        assert_eq!(report.pretrain.total_steps, 5);
        assert_eq!(report.pretrain.noise.decodes, 2);
        assert!(dir.path().join("run1/pretrain/stage1.model").exists());
        let stage2 = load_manifest(dir.path().join("run1/pretrain/stage1.tsv")).unwrap();
        assert!(stage2
            .records()
            .iter()
            .all(|r| matches!(r.corpus, CorpusTag::Fleurs | CorpusTag::Babel)));
    }

    #[test]
    fn toy_train_matches_by_id() {
        let mut rng = derived_rng(1, &[]);
        let features: Vec<FrameFeatureSequence> = (0..4)
            .map(|i| FrameFeatureSequence {
                source_id: format!("u{i}"),
                frame_shift: FrameShift::Ms20,
                frames: Array2::from_shape_fn((20, 3), |_| rng.random_range(-1.0..1.0)),
            })
            .collect();
        let labels: Vec<FrameLabelSequence> = features
            .iter()
            .rev()
            .map(|f| FrameLabelSequence {
                source_id: f.source_id.clone(),
                frame_shift: FrameShift::Ms20,
                labels: (0..20).map(|t| (t % 4) as u32).collect(),
            })
            .collect();
        let cfg = ToyTrainConfig {
            model: ModelSettings {
                hidden_dims: vec![8],
                ..Default::default()
            },
            steps: 5,
            batch_utterances: 3,
            ..Default::default()
        };
        let (a, reports) = toy_train(&features, &labels, 4, &cfg).unwrap();
        let (b, _) = toy_train(&features, &labels, 4, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(reports.len(), 5);
        assert!(toy_train(&features, &labels[1..], 4, &cfg).is_err());
    }
}

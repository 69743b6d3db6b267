//! Acceptance suite: one test per criterion, each printing a single
//! `ACnn PASS|FAIL` line with the measured values.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng;
use serde_json::Value;
use sslforge::augment::{apply_plan, sample_plan, AugmentConfig, MixSource};
use sslforge::batching::{
    augment_batch, run_plan, BatchSkeleton, BatchStream, NoiseCache, Stage, StageInit,
    StepContext, Trainer, TrainingPlan,
};
use sslforge::corpus::build_stage2_subset;
use sslforge::labels::{
    assign_labels, downsample_labels, extract_features, fit_kmeans, fuse_multires, KMeansConfig,
};
use sslforge::masking::{sample_mask, MaskSpec};
use sslforge::scoring::{superb_score, Metric, ScoreTable, TaskResult};
use sslforge::seed::{derive_seed, rng_from};
use sslforge::toymodel::{grad_check, grad_check_indices, train_step, Adam, Sample};
use sslforge::{
    CorpusTag, FrameFeatureSequence, FrameLabelSequence, FrameShift, Manifest, SourceKind,
    ToyModelConfig, ToyModelState, UtteranceRecord,
};

fn verdict(id: &str, what: &str, ok: bool, detail: String) {
    println!("{id} {}: {what} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{id} failed: {what} ({detail})");
}

fn sslforge(args: &[&str]) -> Value {
    let out = Command::new(env!("CARGO_BIN_EXE_sslforge"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "sslforge {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn record(id: String, corpus: CorpusTag, language: &str, duration: f64) -> UtteranceRecord {
    UtteranceRecord {
        path: format!("/corpus/{id}.wav"),
        id,
        corpus,
        language: language.into(),
        duration,
        sample_rate: 16_000,
    }
}

const CORPUS_HOURS: [(CorpusTag, &str, u32); 6] = [
    (CorpusTag::Mls, "MLS", 22_185),
    (CorpusTag::CommonVoice, "CommonVoice", 13_600),
    (CorpusTag::Googlei18n, "Googlei18n", 1_328),
    (CorpusTag::VoxPopuli, "VoxPopuli", 1_024),
    (CorpusTag::Babel, "BABEL", 1_000),
    (CorpusTag::Fleurs, "FLEURS", 950),
];

/// One hour-long record per hour of each row.
fn corpus_hours_manifest(dir: &Path) -> std::path::PathBuf {
    let mut records = Vec::new();
    for (tag, name, hours) in CORPUS_HOURS {
        for i in 0..hours {
            records.push(record(format!("{name}-{i}"), tag, "und", 3600.0));
        }
    }
    let path = dir.join("corpus_hours.tsv");
    Manifest::new("corpus_hours", records).unwrap().save(&path).unwrap();
    path
}

fn sources(seed: u64, n: usize, len: usize) -> Vec<Vec<f64>> {
    let mut rng = rng_from(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(-0.5..0.5)).collect())
        .collect()
}

#[test]
fn ac01_augmentation_rates() {
    let started = Instant::now();
    let cfg = AugmentConfig::default();
    assert_eq!((cfg.p_n, cfg.p_u), (0.2, 0.1));
    let pool = sources(1, 3, 1_600);
    let u = &pool[0];
    let peers = [MixSource { id: "peer", samples: &pool[1] }];
    let noises = [MixSource { id: "noise", samples: &pool[2] }];
    let mut rng = rng_from(2024);
    let draws = 200_000;
    let (mut augmented, mut mixed) = (0usize, 0usize);
    for _ in 0..draws {
        let plan = sample_plan(u, &peers, &noises, &cfg, &mut rng).unwrap();
        if plan.is_augmented() {
            augmented += 1;
            if plan.source_kind() == Some(SourceKind::UtteranceInBatch) {
                mixed += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    let frac_aug = augmented as f64 / draws as f64;
    let frac_mix = mixed as f64 / augmented as f64;
    verdict(
        "AC01",
        "augmented in [0.19, 0.21], utterance-mixed | augmented in [0.09, 0.11], < 30 s",
        (0.19..=0.21).contains(&frac_aug)
            && (0.09..=0.11).contains(&frac_mix)
            && elapsed < Duration::from_secs(30),
        format!("draws {draws}, augmented {frac_aug:.4}, mixed {frac_mix:.4}, {elapsed:.2?}"),
    );
}

#[test]
fn ac02_energy_ratio_ranges() {
    let cfg = AugmentConfig {
        p_n: 1.0,
        p_u: 0.5,
        ..Default::default()
    };
    let pool = sources(3, 3, 800);
    let peers = [MixSource { id: "peer", samples: &pool[1] }];
    let noises = [MixSource { id: "noise", samples: &pool[2] }];
    let mut rng = rng_from(7);
    let (mut n_u, mut n_n, mut bad) = (0, 0, 0);
    let (mut lo_u, mut hi_u, mut lo_n, mut hi_n) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for _ in 0..100_000 {
        let plan = sample_plan(&pool[0], &peers, &noises, &cfg, &mut rng).unwrap();
        let mix = plan.mix.expect("p_n = 1 always augments");
        match mix.source_kind {
            SourceKind::UtteranceInBatch => {
                n_u += 1;
                lo_u = lo_u.min(mix.e);
                hi_u = hi_u.max(mix.e);
                bad += usize::from(!(-5.0..=20.0).contains(&mix.e));
            }
            SourceKind::DnsNoise => {
                n_n += 1;
                lo_n = lo_n.min(mix.e);
                hi_n = hi_n.max(mix.e);
                bad += usize::from(!(-5.0..=5.0).contains(&mix.e));
            }
        }
    }
    verdict(
        "AC02",
        "all e in [-5, 20] for utterances and [-5, 5] for noise",
        bad == 0 && n_u > 0 && n_n > 0,
        format!(
            "{n_u} utterance draws in [{lo_u:.3}, {hi_u:.3}], {n_n} noise draws in [{lo_n:.3}, {hi_n:.3}], {bad} outside"
        ),
    );
}

#[test]
fn ac03_achieved_mixing_ratio() {
    let u = vec![0.3; 4_000];
    let peer = vec![-0.7; 2_500];
    let noise = vec![0.05; 3_000];
    let peers = [MixSource { id: "peer", samples: &peer }];
    let noises = [MixSource { id: "noise", samples: &noise }];
    let cfg = AugmentConfig {
        p_n: 1.0,
        p_u: 0.5,
        ..Default::default()
    };
    let mut rng = rng_from(11);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 1_000 {
        let plan = sample_plan(&u, &peers, &noises, &cfg, &mut rng).unwrap();
        let mix = plan.mix.clone().unwrap();
        if mix.len == 0 {
            continue;
        }
        let src: &[f64] = match mix.source_kind {
            SourceKind::UtteranceInBatch => &peer,
            SourceKind::DnsNoise => &noise,
        };
        let out = apply_plan(&u, src, &plan).unwrap();
        let window = mix.start..mix.start + mix.len;
        let e_u: f64 = u[window.clone()].iter().map(|x| x * x).sum();
        let e_n: f64 = window
            .map(|i| {
                let added = out.samples[i] - u[i];
                added * added
            })
            .sum();
        worst = worst.max((10.0 * (e_u / e_n).log10() - mix.e).abs());
        checked += 1;
    }
    verdict(
        "AC03",
        "measured window energy ratio matches sampled e within 1e-6 dB",
        worst < 1e-6,
        format!("{checked} plans, max deviation {worst:.3e} dB"),
    );
}

#[test]
fn ac04a_corpus_hours() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus_hours_manifest(dir.path());
    let stats = sslforge(&["manifest", "stats", "--manifest", manifest.to_str().unwrap()]);
    let mut mismatches = Vec::new();
    for (_, name, hours) in CORPUS_HOURS {
        let got = stats["per_corpus"][name].as_f64().unwrap_or(f64::NAN);
        if got != hours as f64 {
            mismatches.push(format!("{name}: {got} != {hours}"));
        }
    }
    let total = stats["total_hours"].as_f64().unwrap();
    verdict(
        "AC04a",
        "per-corpus hours equal the reference rows and total is the row sum 40,087 h",
        mismatches.is_empty() && total == 40_087.0,
        format!(
            "total {total} h (stated total 39,087 h differs from the row sum), mismatches {mismatches:?}"
        ),
    );
}

/// Reference per-language hours, sixteen rows as published.
const LANGUAGE_HOURS: [(&str, u32); 16] = [
    ("eng", 23_663),
    ("kin", 1_984),
    ("epo", 1_360),
    ("deu", 1_256),
    ("cat", 1_184),
    ("bel", 965),
    ("fra", 934),
    ("spa", 523),
    ("kab", 518),
    ("lug", 362),
    ("sun", 330),
    ("ita", 314),
    ("jav", 294),
    ("ben", 239),
    ("sin", 218),
    ("bak", 216),
];

#[test]
fn ac04b_top15_language_hours() {
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for (lang, hours) in LANGUAGE_HOURS {
        for i in 0..hours {
            records.push(record(format!("{lang}-{i}"), CorpusTag::CommonVoice, lang, 3600.0));
        }
    }
    let path = dir.path().join("language_hours.tsv");
    Manifest::new("language_hours", records).unwrap().save(&path).unwrap();
    let stats = sslforge(&[
        "manifest",
        "stats",
        "--manifest",
        path.to_str().unwrap(),
        "--top",
        "15",
    ]);
    let top15 = stats["top_k"]["hours"].as_f64().unwrap();
    let all_rows = stats["total_hours"].as_f64().unwrap();
    verdict(
        "AC04b",
        "top-15 extraction on the per-language manifest totals 34,362 h",
        top15 == 34_362.0,
        format!(
            "top-15 {top15} h, all {} rows {all_rows} h; the listed rows cannot produce 34,362",
            LANGUAGE_HOURS.len()
        ),
    );
}

#[test]
fn ac05_stage2_subset_hours() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus_hours_manifest(dir.path());
    let out = dir.path().join("stage2.tsv");
    let res = sslforge(&[
        "manifest",
        "subset",
        "--manifest",
        manifest.to_str().unwrap(),
        "--corpora",
        "fleurs,babel",
        "--out",
        out.to_str().unwrap(),
    ]);
    let saved = sslforge::corpus::load_manifest(&out).unwrap();
    let only = saved
        .records()
        .iter()
        .all(|r| matches!(r.corpus, CorpusTag::Fleurs | CorpusTag::Babel));
    let hours = res["hours"].as_f64().unwrap();
    verdict(
        "AC05",
        "FLEURS + BABEL subset of the corpus-hours manifest is 1,950 h",
        hours == 1_950.0 && saved.total_hours() == 1_950.0 && only,
        format!("{hours} h, {} records", saved.len()),
    );
}

#[test]
fn ac06_duration_filter_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let records = vec![
        record("a".into(), CorpusTag::Mls, "eng", 14.99),
        record("b".into(), CorpusTag::Mls, "eng", 15.0),
        record("c".into(), CorpusTag::Mls, "eng", 15.01),
        record("d".into(), CorpusTag::Mls, "eng", 30.0),
    ];
    let input = dir.path().join("in.tsv");
    Manifest::new("fixture", records).unwrap().save(&input).unwrap();
    let out = dir.path().join("out.tsv");
    sslforge(&[
        "manifest",
        "filter",
        "--manifest",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let kept: Vec<String> = sslforge::corpus::load_manifest(&out)
        .unwrap()
        .records()
        .iter()
        .map(|r| r.id.clone())
        .collect();
    verdict(
        "AC06",
        "15.0 s retained, 15.01 s removed",
        kept == ["a", "b"],
        format!("kept {kept:?}"),
    );
}

fn oracle_nearest(centroids: &Array2<f64>, x: ndarray::ArrayView1<f64>) -> u32 {
    let mut best = (0usize, f64::INFINITY);
    for (k, c) in centroids.rows().into_iter().enumerate() {
        let d: f64 = c.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0 as u32
}

#[test]
fn ac07_kmeans_oracle_equivalence() {
    let mut rng = rng_from(77);
    let mut label_mismatches = 0;
    let mut inertia_increases = 0;
    for instance in 0..20 {
        let n = rng.random_range(10..=200);
        let d = rng.random_range(1..=5);
        let k = rng.random_range(1..=8).min(n);
        // a coarse grid makes exact ties likely
        let data = Array2::from_shape_fn((n, d), |_| rng.random_range(-4..=4) as f64 * 0.5);
        let fit = fit_kmeans(data.view(), &KMeansConfig::new(k, instance)).unwrap();
        inertia_increases += fit
            .inertia_history
            .windows(2)
            .filter(|w| w[1] > w[0])
            .count();
        let seq = FrameFeatureSequence {
            source_id: format!("i{instance}"),
            frame_shift: FrameShift::Ms20,
            frames: data.clone(),
        };
        let got = assign_labels(&seq, &fit.codebook).unwrap();
        let expected: Vec<u32> = data
            .rows()
            .into_iter()
            .map(|row| oracle_nearest(&fit.codebook.centroids, row))
            .collect();
        label_mismatches += got.labels.iter().zip(&expected).filter(|(a, b)| a != b).count();
    }
    verdict(
        "AC07",
        "assign_labels equals exhaustive oracle; Lloyd inertia never increases",
        label_mismatches == 0 && inertia_increases == 0,
        format!("20 instances, {label_mismatches} label mismatches, {inertia_increases} inertia increases"),
    );
}

#[test]
fn ac08_multires_contracts() {
    let mut rng = rng_from(8);
    let mut failures = Vec::new();
    for u in 0..100 {
        let len = rng.random_range(0..24_000);
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-0.3..0.3)).collect();
        let id = format!("u{u}");
        let f20 = extract_features(&id, &x, 16_000, FrameShift::Ms20).unwrap();
        let f40 = extract_features(&id, &x, 16_000, FrameShift::Ms40).unwrap();
        let f80 = extract_features(&id, &x, 16_000, FrameShift::Ms80).unwrap();
        let t20 = f20.num_frames();
        let labels = FrameLabelSequence {
            source_id: id.clone(),
            frame_shift: FrameShift::Ms20,
            labels: (0..t20).map(|_| rng.random_range(0..10)).collect(),
        };
        let l40 = downsample_labels(&labels, 2).unwrap();
        let l80 = downsample_labels(&labels, 4).unwrap();
        if l40.len() != t20.div_ceil(2) || l80.len() != t20.div_ceil(4) {
            failures.push(format!("{id}: label lengths {} {} for T20 {t20}", l40.len(), l80.len()));
        }
        // coarse sequences in arbitrary order; fusion sorts finest first
        let fused = fuse_multires(&[f80.clone(), f20.clone(), f40.clone()]).unwrap();
        if fused.num_frames() != t20 || fused.dim() != 3 * f20.dim() {
            failures.push(format!("{id}: fused shape {:?}", fused.frames.dim()));
            continue;
        }
        let d = f20.dim();
        for i in 0..t20 {
            let row = fused.frames.row(i);
            let expands = |coarse: &FrameFeatureSequence, ratio: usize, cols: ndarray::ArrayView1<f64>| {
                match coarse.num_frames() {
                    0 => cols.iter().all(|&v| v == 0.0),
                    n => cols == coarse.frames.row((i / ratio).min(n - 1)),
                }
            };
            let ok20 = row.slice(ndarray::s![..d]) == f20.frames.row(i);
            let ok40 = expands(&f40, 2, row.slice(ndarray::s![d..2 * d]));
            let ok80 = expands(&f80, 4, row.slice(ndarray::s![2 * d..]));
            if !(ok20 && ok40 && ok80) {
                failures.push(format!("{id}: frame {i} does not follow repeat-to-match"));
                break;
            }
        }
    }
    verdict(
        "AC08",
        "40/80 ms label lengths are ceil(T20/2), ceil(T20/4); fused rows repeat coarse frames",
        failures.is_empty(),
        format!("100 utterances, failures {failures:?}"),
    );
}

#[test]
fn ac09_mask_statistics() {
    let mut rng = rng_from(9);
    let draws = 100_000;
    let mut masked = 0usize;
    for _ in 0..draws {
        masked += sample_mask(1_000, 10, 0.08, &mut rng).unwrap().num_masked();
    }
    let fraction = masked as f64 / (draws * 1_000) as f64;
    let expected = 1.0 - 0.92f64.powi(10);
    verdict(
        "AC09",
        "masked fraction within 0.02 of 1 - 0.92^10",
        (fraction - expected).abs() <= 0.02,
        format!("{fraction:.4} vs {expected:.4} over {draws} masks"),
    );
}

#[test]
fn ac10_single_sample_fallback() {
    let records: Vec<UtteranceRecord> = (0..100)
        .map(|i| record(format!("u{i}"), CorpusTag::Fleurs, "und", 20.0))
        .collect();
    let manifest = Manifest::new("singles", records).unwrap();
    let noise_records: Vec<UtteranceRecord> = (0..9)
        .map(|i| {
            let mut r = record(format!("n{i}"), CorpusTag::Dns, "und", 2.0);
            r.path = format!("/noise/file{}.wav", i % 3);
            r
        })
        .collect();
    let noise_manifest = Manifest::new("noise", noise_records).unwrap();
    let decoder_calls = Cell::new(0usize);
    let noise_pool = sources(10, 3, 4_000);
    let cache = NoiseCache::load(&noise_manifest, |r| {
        decoder_calls.set(decoder_calls.get() + 1);
        let idx: usize = r.path["/noise/file".len()..r.path.len() - 4].parse().unwrap();
        Ok(noise_pool[idx].clone())
    })
    .unwrap();
    let distinct: BTreeSet<&str> = noise_manifest.records().iter().map(|r| r.path.as_str()).collect();
    let waves = sources(11, 100, 1_000);
    let index: BTreeMap<&str, usize> = manifest
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let cfg = AugmentConfig {
        p_n: 1.0,
        p_u: 1.0,
        ..Default::default()
    };
    let (mut batches, mut in_batch, mut noise_mixed) = (0, 0, 0);
    for (pos, batch) in BatchStream::new(&manifest, 30.0, 5).unwrap().take(10_000) {
        assert_eq!(batch.len(), 1);
        let w = vec![waves[index[batch.items[0].id.as_str()]].clone()];
        let seed = derive_seed(5, &[&pos.epoch, &pos.index]);
        for item in augment_batch(&batch, &w, &cfg, &cache, seed).unwrap() {
            match item.plan.source_kind() {
                Some(SourceKind::UtteranceInBatch) => in_batch += 1,
                Some(SourceKind::DnsNoise) => noise_mixed += 1,
                None => {}
            }
        }
        batches += 1;
    }
    verdict(
        "AC10",
        "no in-batch mixing for single-item batches; noise decoded once per file",
        batches == 10_000
            && in_batch == 0
            && cache.decode_count() == distinct.len()
            && decoder_calls.get() == distinct.len(),
        format!(
            "{batches} batches, {in_batch} in-batch, {noise_mixed} noise, {} decodes for {} files",
            cache.decode_count(),
            distinct.len()
        ),
    );
}

#[test]
fn ac11_gradient_check_and_progress() {
    let cfg = ToyModelConfig::default();
    let state = ToyModelState::init(cfg.clone()).unwrap();
    let mut rng = rng_from(12);
    let t = 12;
    let x = Array2::from_shape_fn((t, cfg.input_dim), |_| rng.random_range(-1.0..1.0));
    let labels: Vec<u32> = (0..t).map(|_| rng.random_range(0..cfg.num_classes as u32)).collect();
    let mask = MaskSpec::from_starts(t, 3, 0.08, &[1, 7]);
    let sample = Sample {
        features: x.view(),
        labels: &labels,
        mask: &mask,
    };
    let err = grad_check(&state, &[sample]).unwrap();
    let coords = grad_check_indices(&cfg).len();

    // prototype-per-utterance task
    let (k, d) = (8, 6);
    let protos = Array2::from_shape_fn((k, d), |_| rng.random_range(-3.0..3.0));
    let data: Vec<(Array2<f64>, Vec<u32>, MaskSpec)> = (0..6)
        .map(|_| {
            let c = rng.random_range(0..k);
            let f = Array2::from_shape_fn((20, d), |(_, j)| protos[[c, j]] + rng.random_range(-0.5..0.5));
            (f, vec![c as u32; 20], MaskSpec::from_starts(20, 5, 0.08, &[3, 12]))
        })
        .collect();
    let samples: Vec<Sample> = data
        .iter()
        .map(|(f, l, m)| Sample {
            features: f.view(),
            labels: l,
            mask: m,
        })
        .collect();
    let mut toy = ToyModelState::init(ToyModelConfig {
        input_dim: d,
        hidden_dims: vec![32, 32],
        num_classes: k,
        ..Default::default()
    })
    .unwrap();
    let mut opt = Adam::for_state(&toy);
    let first = train_step(&mut toy, &mut opt, &samples).unwrap().loss;
    let mut last = first;
    for _ in 1..200 {
        last = train_step(&mut toy, &mut opt, &samples).unwrap().loss;
    }
    verdict(
        "AC11",
        "default config gradient error < 1e-4; loss decreases over 200 steps",
        err < 1e-4 && last < first,
        format!(
            "{} params, {coords} coordinates checked, max relative error {err:.3e}; loss {first:.4} -> {last:.4}",
            cfg.num_params()
        ),
    );
}

struct Counting {
    calls: usize,
    carried: Option<usize>,
    stage2_ids: BTreeSet<String>,
    stage2_foreign: usize,
}

impl Trainer for Counting {
    type State = usize;

    fn start_stage(
        &mut self,
        stage: usize,
        _init: &StageInit,
        previous: Option<usize>,
    ) -> sslforge::Result<usize> {
        if stage == 1 {
            self.carried = previous;
        }
        Ok(previous.unwrap_or(0))
    }

    fn train_step(
        &mut self,
        state: &mut usize,
        batch: &BatchSkeleton,
        ctx: &StepContext,
    ) -> sslforge::Result<f64> {
        self.calls += 1;
        *state += 1;
        if ctx.stage == 1 {
            self.stage2_foreign += batch
                .items
                .iter()
                .filter(|r| !self.stage2_ids.contains(&r.id))
                .count();
        }
        Ok(0.0)
    }
}

#[test]
fn ac12_multi_stage_contract() {
    let tags = [
        CorpusTag::Mls,
        CorpusTag::CommonVoice,
        CorpusTag::Babel,
        CorpusTag::Fleurs,
        CorpusTag::VoxPopuli,
    ];
    let records: Vec<UtteranceRecord> = (0..50)
        .map(|i| record(format!("u{i}"), tags[i % tags.len()], "und", 2.0 + (i % 7) as f64))
        .collect();
    let full = Manifest::new("full", records).unwrap();
    let subset = build_stage2_subset(&full, &BTreeSet::from([CorpusTag::Fleurs, CorpusTag::Babel])).unwrap();
    let only_balanced = subset
        .records()
        .iter()
        .all(|r| matches!(r.corpus, CorpusTag::Fleurs | CorpusTag::Babel));
    let (s1, s2) = (37, 23);
    let plan = TrainingPlan::new(vec![
        Stage {
            name: "full".into(),
            manifest: full,
            steps: s1,
            init: StageInit::Scratch,
        },
        Stage {
            name: "balanced".into(),
            manifest: subset.clone(),
            steps: s2,
            init: StageInit::FromPreviousStage,
        },
    ])
    .unwrap();
    let mut trainer = Counting {
        calls: 0,
        carried: None,
        stage2_ids: subset.records().iter().map(|r| r.id.clone()).collect(),
        stage2_foreign: 0,
    };
    let outcome = run_plan(&plan, 30.0, 1, &mut trainer).unwrap();
    verdict(
        "AC12",
        "steps1 + steps2 invocations, state carried, stage 2 only FLEURS/BABEL",
        trainer.calls == s1 + s2
            && trainer.carried == Some(s1)
            && outcome.state == s1 + s2
            && only_balanced
            && trainer.stage2_foreign == 0,
        format!(
            "{} calls, carried {:?}, {} stage-2 records, {} foreign items",
            trainer.calls,
            trainer.carried,
            subset.len(),
            trainer.stage2_foreign
        ),
    );
}

fn result(model: &str, task: &str, metric: Metric, value: f64) -> TaskResult {
    TaskResult {
        model: model.into(),
        task: task.into(),
        metric,
        value,
    }
}

#[test]
fn ac13_superb_properties() {
    let dominant = ScoreTable::from_results(&[
        result("A", "lid", Metric::Acc, 90.0),
        result("A", "asr", Metric::Cer, 12.0),
        result("A", "asr2", Metric::Cer, 30.0),
        result("B", "lid", Metric::Acc, 70.0),
        result("B", "asr", Metric::Cer, 18.0),
        result("B", "asr2", Metric::Cer, 45.0),
    ])
    .unwrap();
    let best = superb_score(&dominant, None).unwrap()[0].1;
    let twins = ScoreTable::from_results(&[
        result("A", "lid", Metric::Acc, 61.5),
        result("B", "lid", Metric::Acc, 61.5),
        result("A", "asr", Metric::Cer, 22.0),
        result("B", "asr", Metric::Cer, 22.0),
    ])
    .unwrap();
    let twin_scores: Vec<f64> = superb_score(&twins, None).unwrap().into_iter().map(|x| x.1).collect();
    let example = ScoreTable::from_results(&[
        result("A", "lid", Metric::Acc, 80.0),
        result("A", "asr", Metric::Cer, 20.0),
        result("B", "lid", Metric::Acc, 75.0),
        result("B", "asr", Metric::Cer, 10.0),
    ])
    .unwrap();
    let a = superb_score(&example, None).unwrap()[0].1;
    verdict(
        "AC13",
        "dominant model 1000, identical models 1000, hand example 750",
        best == 1000.0 && twin_scores == [1000.0, 1000.0] && a == 750.0,
        format!("dominant {best}, twins {twin_scores:?}, example {a}"),
    );
}

#[test]
fn ac14_end_to_end_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    let mut identical = true;
    let started = Instant::now();
    for name in ["first", "second"] {
        let out = dir.path().join(name);
        let res = sslforge(&["--seed", "42", "demo", "--out", out.to_str().unwrap()]);
        identical &= res["identical"].as_bool().unwrap();
        assert_eq!(res["stage_count"].as_u64(), Some(2));
        hashes.push(res["hash"].as_str().unwrap().to_string());
    }
    let per_invocation = started.elapsed() / 2;
    let other = sslforge(&["--seed", "43", "demo", "--out", dir.path().join("other").to_str().unwrap()]);
    let plans = |p: &Path| fs::read_to_string(p.join("run1/pretrain/mixplans.jsonl")).unwrap();
    let differs = plans(&dir.path().join("first")) != plans(&dir.path().join("other"));
    verdict(
        "AC14",
        "demo --seed 42 artifacts bit-identical across runs, demo < 5 min",
        identical
            && hashes[0] == hashes[1]
            && per_invocation < Duration::from_secs(300)
            && differs,
        format!(
            "hash {}, {:.1?} per demo, seed 43 hash {}",
            &hashes[0][..16],
            per_invocation,
            &other["hash"].as_str().unwrap()[..16]
        ),
    );
}

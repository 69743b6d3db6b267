mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sslforge::audio::{write_wav, Waveform, SAMPLE_RATE};
use sslforge::batching::{augment_batch, pack_batches, NoiseCache, DEFAULT_CAP_SECONDS};
use sslforge::corpus::{
    build_stage2_subset, compute_stats, filter_by_duration, load_manifest, DEFAULT_MAX_SECONDS,
};
use sslforge::labels::{
    downsample_labels, extract_features, read_features, read_labels_jsonl, write_features,
    write_labels_jsonl, KMeansConfig, DEFAULT_K,
};
use sslforge::pipeline::{
    decode_record, load_audio, run_demo, run_pretrain, toy_train, AugmentationStats, DemoConfig,
    PretrainConfig, ToyTrainConfig,
};
use sslforge::scoring::{corpus_cer_files, load_results, superb_score, ScoreTable};
use sslforge::seed::derive_seed;
use sslforge::{labels, CorpusTag, FrameShift};

use config::{Effective, Overrides};

#[derive(Parser)]
#[command(name = "sslforge", version, about = "Speech SSL data pipeline tools")]
struct Cli {
    /// JSON file with default overrides; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Manifest statistics and selection.
    #[command(subcommand)]
    Manifest(ManifestCmd),
    /// Augment one epoch of batches and write the mixed audio.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        noise: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Features, codebooks and pseudo-labels.
    #[command(subcommand)]
    Labels(LabelsCmd),
    /// Run a multi-stage plan file.
    Pretrain {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy model on precomputed features.
    ToyTrain {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error rates and aggregate scores.
    #[command(subcommand)]
    Score(ScoreCmd),
    /// Synthetic end-to-end run, executed twice and compared.
    Demo {
        #[arg(long, default_value = "demo_out")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ManifestCmd {
    /// Hours per corpus and language.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        /// Also report the share of the K largest languages.
        #[arg(long)]
        top: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Drop clips longer than --max-seconds.
    Filter {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep only the given corpora.
    Subset {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        corpora: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum LabelsCmd {
    /// Extract cepstral features for every record.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 20)]
        shift_ms: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a k-means codebook on a feature directory.
    TrainKm {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label every feature file with its nearest centroid.
    Assign {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coarsen label sequences by majority vote.
    Downsample {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        factor: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ScoreCmd {
    /// Corpus CER of `id<TAB>text` files.
    Cer {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// SUPERB score per model from a results file.
    Superb {
        #[arg(long)]
        results: PathBuf,
        /// JSON object of per-task baseline values.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(value)?).context("writing to stdout")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parent_of(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn feature_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "feat"));
    files.sort();
    if files.is_empty() {
        bail!("no .feat files in {}", dir.display());
    }
    Ok(files)
}

fn read_feature_dir(dir: &Path) -> Result<Vec<sslforge::FrameFeatureSequence>> {
    feature_files(dir)?
        .par_iter()
        .map(|p| read_features(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => Overrides::load(p)?,
        None => Overrides::default(),
    };
    let merged = cli.overrides.or(&file);
    let eff = Effective::resolve(&merged, cli.threads)?;
    if let Some(n) = eff.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let seed = eff.seed;

    match cli.command {
        Command::Manifest(cmd) => match cmd {
            ManifestCmd::Stats { manifest, top, out } => {
                let m = load_manifest(&manifest)?;
                let stats = compute_stats(&m);
                let mut value = serde_json::to_value(&stats)?;
                value["records"] = json!(m.len());
                if let Some(k) = top {
                    value["top_k"] = json!({
                        "k": k,
                        "languages": stats.top_k(k),
                        "hours": stats.top_k_hours(k),
                        "share": stats.top_k_share(k),
                    });
                }
                match out {
                    Some(p) => write_json(&p, &value)?,
                    None => print_json(&value)?,
                }
            }
            ManifestCmd::Filter { manifest, out } => {
                let m = load_manifest(&manifest)?;
                let max = eff.max_seconds.unwrap_or(DEFAULT_MAX_SECONDS);
                let kept = filter_by_duration(&m, max)?;
                kept.save(&out)?;
                print_json(&json!({
                    "max_seconds": max,
                    "input_records": m.len(),
                    "kept_records": kept.len(),
                    "kept_hours": kept.total_hours(),
                }))?;
            }
            ManifestCmd::Subset {
                manifest,
                corpora,
                out,
            } => {
                let m = load_manifest(&manifest)?;
                let set = corpora
                    .iter()
                    .map(|c| c.parse::<CorpusTag>().map_err(|e| anyhow!(e)))
                    .collect::<Result<BTreeSet<_>>>()?;
                let subset = build_stage2_subset(&m, &set)?;
                subset.save(&out)?;
                print_json(&json!({
                    "corpora": set.iter().map(|c| c.as_str()).collect::<Vec<_>>(),
                    "records": subset.len(),
                    "hours": subset.total_hours(),
                }))?;
            }
        },
        Command::Augment {
            manifest,
            noise,
            out,
        } => {
            eff.echo(&out)?;
            let m = load_manifest(&manifest)?;
            let base = parent_of(&manifest);
            let noise_base = parent_of(&noise);
            let cache = NoiseCache::load(&load_manifest(&noise)?, |r| decode_record(&noise_base, r))?;
            let audio = load_audio(&m, &base)?;
            let cap = eff.cap_seconds.unwrap_or(DEFAULT_CAP_SECONDS);
            fs::create_dir_all(out.join("audio"))?;
            let mut plans = String::new();
            let mut all = Vec::new();
            for (index, batch) in pack_batches(&m, cap, seed, 0)?.iter().enumerate() {
                let waves: Vec<Vec<f64>> = batch.items.iter().map(|r| audio[&r.id].clone()).collect();
                let batch_seed = derive_seed(seed, &[&"augment", &0usize, &index]);
                for item in augment_batch(batch, &waves, &eff.augment, &cache, batch_seed)? {
                    write_wav(
                        out.join("audio").join(format!("{}.wav", item.id)),
                        &Waveform::new(SAMPLE_RATE, item.samples),
                    )?;
                    plans.push_str(&serde_json::to_string(
                        &json!({"id": item.id, "batch": index, "plan": item.plan}),
                    )?);
                    plans.push('\n');
                    all.push(item.plan);
                }
            }
            fs::write(out.join("mixplans.jsonl"), plans)?;
            let stats = AugmentationStats::from_plans(&all);
            write_json(&out.join("stats.json"), &stats)?;
            print_json(&stats)?;
        }
        Command::Labels(cmd) => match cmd {
            LabelsCmd::Features {
                manifest,
                shift_ms,
                out,
            } => {
                eff.echo(&out)?;
                let shift = FrameShift::from_ms(shift_ms)?;
                let m = load_manifest(&manifest)?;
                let base = parent_of(&manifest);
                let frames: usize = m
                    .records()
                    .par_iter()
                    .map(|r| {
                        let x = decode_record(&base, r)?;
                        let f = extract_features(&r.id, &x, SAMPLE_RATE, shift)?;
                        write_features(out.join(format!("{}.feat", r.id)), &f)?;
                        Ok(f.num_frames())
                    })
                    .collect::<sslforge::Result<Vec<_>>>()?
                    .into_iter()
                    .sum();
                print_json(&json!({"utterances": m.len(), "frames": frames, "shift_ms": shift_ms}))?;
            }
            LabelsCmd::TrainKm { features, out } => {
                let seqs = read_feature_dir(&features)?;
                let pooled = labels::pool_frames(&seqs)?;
                let k = eff.k.unwrap_or(DEFAULT_K);
                let fit = labels::fit_kmeans(pooled.view(), &KMeansConfig::new(k, seed))?;
                fit.codebook.save(&out)?;
                let report = json!({
                    "k": k,
                    "frames": pooled.nrows(),
                    "iterations": fit.inertia_history.len(),
                    "converged": fit.converged,
                    "inertia": fit.inertia_history.last(),
                });
                write_json(&parent_of(&out).join("kmeans_report.json"), &report)?;
                print_json(&report)?;
            }
            LabelsCmd::Assign {
                features,
                codebook,
                out,
            } => {
                let cb = sslforge::Codebook::load(&codebook)?;
                let seqs = read_feature_dir(&features)?;
                let labelled = seqs
                    .par_iter()
                    .map(|s| labels::assign_labels(s, &cb))
                    .collect::<sslforge::Result<Vec<_>>>()?;
                write_labels_jsonl(&out, &labelled)?;
                print_json(&json!({"utterances": labelled.len(), "k": cb.k()}))?;
            }
            LabelsCmd::Downsample {
                labels: input,
                factor,
                out,
            } => {
                let seqs = read_labels_jsonl(&input)?;
                let down = seqs
                    .iter()
                    .map(|s| downsample_labels(s, factor))
                    .collect::<sslforge::Result<Vec<_>>>()?;
                write_labels_jsonl(&out, &down)?;
                print_json(&json!({"utterances": down.len(), "factor": factor}))?;
            }
        },
        Command::Pretrain { plan, out } => {
            let mut cfg = PretrainConfig::load(&plan)?;
            // the plan's own seed ranks just above the built-in default
            if merged.seed.is_some() {
                cfg.seed = seed;
            }
            cfg.augment.seed = cfg.seed;
            let mut eff = eff.clone();
            eff.seed = cfg.seed;
            eff.augment.seed = cfg.seed;
            merged.apply_augment(&mut cfg.augment);
            merged.apply_mask(&mut cfg.mask);
            merged.apply_model(&mut cfg.model);
            if let Some(k) = eff.k {
                cfg.labels.k = k;
            }
            if let Some(c) = eff.cap_seconds {
                cfg.cap_seconds = c;
            }
            if let Some(m) = eff.max_seconds {
                cfg.stages.iter_mut().for_each(|s| s.max_seconds = m);
            }
            if let Some(steps) = &eff.steps {
                if steps.len() != cfg.stages.len() {
                    bail!(
                        "--steps lists {} values for {} stages",
                        steps.len(),
                        cfg.stages.len()
                    );
                }
                for (s, &n) in cfg.stages.iter_mut().zip(steps) {
                    s.steps = n;
                }
            }
            cfg.validate()?;
            eff.echo(&out)?;
            write_json(&out.join("plan_effective.json"), &cfg)?;
            let report = run_pretrain(&cfg, &parent_of(&plan), &out)?;
            print_json(&report)?;
        }
        Command::ToyTrain {
            features,
            labels: label_path,
            out,
        } => {
            let seqs = read_feature_dir(&features)?;
            let label_seqs = read_labels_jsonl(&label_path)?;
            let k = eff.k.unwrap_or(DEFAULT_K);
            let mut cfg = ToyTrainConfig {
                model: eff.model.clone(),
                mask: eff.mask,
                seed,
                ..Default::default()
            };
            if let Some(steps) = &eff.steps {
                cfg.steps = steps.iter().sum();
            }
            fs::create_dir_all(&out)?;
            eff.echo(&out)?;
            let (state, reports) = toy_train(&seqs, &label_seqs, k, &cfg)?;
            state.save(out.join("model.bin"))?;
            let mut log = String::new();
            for (step, r) in reports.iter().enumerate() {
                log.push_str(&serde_json::to_string(&json!({
                    "step": step,
                    "loss": r.loss,
                    "accuracy": r.accuracy,
                    "masked_frames": r.masked_frames,
                    "learning_rate": r.learning_rate,
                }))?);
                log.push('\n');
            }
            fs::write(out.join("train_log.jsonl"), log)?;
            print_json(&json!({
                "steps": reports.len(),
                "params": state.params.len(),
                "first_loss": reports.first().map(|r| r.loss),
                "last_loss": reports.last().map(|r| r.loss),
            }))?;
        }
        Command::Score(cmd) => match cmd {
            ScoreCmd::Cer { hyp, reference } => print_json(&corpus_cer_files(&hyp, &reference)?)?,
            ScoreCmd::Superb { results, baseline } => {
                let table = ScoreTable::from_results(&load_results(&results)?)?;
                let base: Option<BTreeMap<String, f64>> = match baseline {
                    Some(p) => Some(serde_json::from_str(
                        &fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                    )?),
                    None => None,
                };
                let scores = superb_score(&table, base.as_ref())?;
                let rows: Vec<_> = scores
                    .iter()
                    .map(|(m, s)| json!({"model": m, "superb_s": s}))
                    .collect();
                print_json(&rows)?;
            }
        },
        Command::Demo { out } => {
            let mut cfg = DemoConfig {
                augment: eff.augment.clone(),
                mask: eff.mask,
                model: eff.model.clone(),
                ..Default::default()
            };
            if let Some(k) = eff.k {
                cfg.k = k;
            }
            if let Some(c) = eff.cap_seconds {
                cfg.cap_seconds = c;
            }
            if let Some(steps) = &eff.steps {
                cfg.stage_steps = steps.clone();
            }
            eff.echo(&out)?;
            let report = run_demo(&out, seed, &cfg)?;
            print_json(&json!({
                "seed": report.seed,
                "stage_count": report.stage_count,
                "identical": report.identical,
                "hash": report.runs[0].hash,
                "artifacts": report.runs[0].artifacts,
                "first_loss": report.pretrain.first_loss,
                "last_loss": report.pretrain.last_loss,
                "report": out.join("report.json"),
            }))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let diag = json!({
                "error": e.to_string(),
                "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{diag}");
            ExitCode::FAILURE
        }
    }
}

//! Corpus manifests: loading, filtering, statistics and subset construction.
//!
//! A manifest is a UTF-8 text file with one tab-separated record per line:
//!
//! ```text
//! id <TAB> path <TAB> corpus <TAB> language <TAB> duration_seconds <TAB> sample_rate
//! ```
//!
//! Lines starting with `#` and blank lines are ignored.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Clips longer than this are dropped before pre-training.
pub const DEFAULT_MAX_SECONDS: f64 = 15.0;

const SECONDS_PER_HOUR: f64 = 3600.0;

/// Source corpus of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CorpusTag {
    #[serde(rename = "MLS")]
    Mls,
    CommonVoice,
    Googlei18n,
    VoxPopuli,
    #[serde(rename = "BABEL")]
    Babel,
    #[serde(rename = "FLEURS")]
    Fleurs,
    #[serde(rename = "DNS")]
    Dns,
    Other,
}

impl CorpusTag {
    pub const ALL: [CorpusTag; 8] = [
        CorpusTag::Mls,
        CorpusTag::CommonVoice,
        CorpusTag::Googlei18n,
        CorpusTag::VoxPopuli,
        CorpusTag::Babel,
        CorpusTag::Fleurs,
        CorpusTag::Dns,
        CorpusTag::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorpusTag::Mls => "MLS",
            CorpusTag::CommonVoice => "CommonVoice",
            CorpusTag::Googlei18n => "Googlei18n",
            CorpusTag::VoxPopuli => "VoxPopuli",
            CorpusTag::Babel => "BABEL",
            CorpusTag::Fleurs => "FLEURS",
            CorpusTag::Dns => "DNS",
            CorpusTag::Other => "Other",
        }
    }
}

impl fmt::Display for CorpusTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorpusTag {
    type Err = String;

    /// Case-insensitive; `-`, `_` and spaces are ignored (`common_voice`,
    /// `Common Voice` and `commonvoice` all parse).
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        let tag = match key.as_str() {
            "mls" => CorpusTag::Mls,
            "commonvoice" | "cv" => CorpusTag::CommonVoice,
            "googlei18n" => CorpusTag::Googlei18n,
            "voxpopuli" => CorpusTag::VoxPopuli,
            "babel" => CorpusTag::Babel,
            "fleurs" => CorpusTag::Fleurs,
            "dns" => CorpusTag::Dns,
            "other" => CorpusTag::Other,
            _ => return Err(format!("unknown corpus tag `{s}`")),
        };
        Ok(tag)
    }
}

/// One audio clip in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub path: String,
    pub corpus: CorpusTag,
    /// ISO-639-3 code, kept verbatim (`und` allowed).
    pub language: String,
    pub duration: f64,
    pub sample_rate: u32,
}

impl UtteranceRecord {
    fn parse_line(line_no: usize, line: &str) -> Result<Self> {
        const FIELDS: [&str; 6] = [
            "id",
            "path",
            "corpus",
            "language",
            "duration_seconds",
            "sample_rate",
        ];
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() < FIELDS.len() {
            return Err(Error::MissingField {
                line: line_no,
                field: FIELDS[parts.len()],
            });
        }
        if parts.len() > FIELDS.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 6 fields, found {}", parts.len()),
            });
        }
        for (value, name) in parts.iter().zip(FIELDS) {
            if value.trim().is_empty() {
                return Err(Error::MissingField {
                    line: line_no,
                    field: name,
                });
            }
        }
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let corpus = parts[2].trim().parse::<CorpusTag>().map_err(parse_err)?;
        let duration: f64 = parts[4]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad duration `{}`: {e}", parts[4])))?;
        if !duration.is_finite() || duration < 0.0 {
            return Err(parse_err(format!("duration must be >= 0, got {duration}")));
        }
        let sample_rate: u32 = parts[5]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad sample rate `{}`: {e}", parts[5])))?;
        if sample_rate == 0 {
            return Err(parse_err("sample rate must be positive".into()));
        }
        Ok(UtteranceRecord {
            id: parts[0].trim().to_string(),
            path: parts[1].trim().to_string(),
            corpus,
            language: parts[3].trim().to_string(),
            duration,
            sample_rate,
        })
    }

    fn write_line(&self, out: &mut String) {
        use fmt::Write;
        // `{}` on f64 prints the shortest string that round-trips exactly.
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.id, self.path, self.corpus, self.language, self.duration, self.sample_rate
        );
    }
}

/// An ordered catalog of clips with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub name: String,
    records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn new(name: impl Into<String>, records: Vec<UtteranceRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Manifest {
            name: name.into(),
            records,
        })
    }

    /// Subsets of a valid manifest stay valid, so no re-check is needed.
    fn from_subset(name: String, records: Vec<UtteranceRecord>) -> Self {
        Manifest { name, records }
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<UtteranceRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn total_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.duration).sum()
    }

    pub fn total_hours(&self) -> f64 {
        self.total_seconds() / SECONDS_PER_HOUR
    }

    pub fn max_duration(&self) -> Option<&UtteranceRecord> {
        self.records
            .iter()
            .max_by(|a, b| a.duration.total_cmp(&b.duration))
    }

    /// Parses manifest text. `name` is attached to the result.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            records.push(UtteranceRecord::parse_line(idx + 1, line)?);
        }
        Manifest::new(name, records)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 64);
        out.push_str("# id\tpath\tcorpus\tlanguage\tduration_seconds\tsample_rate\n");
        for r in &self.records {
            r.write_line(&mut out);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a manifest file; records keep file order.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Manifest::parse(name, &text)
}

/// Keeps clips with `duration <= max_seconds`; the bound is inclusive.
pub fn filter_by_duration(m: &Manifest, max_seconds: f64) -> Result<Manifest> {
    if !(max_seconds > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "max_seconds must be positive, got {max_seconds}"
        )));
    }
    let records = m
        .records
        .iter()
        .filter(|r| r.duration <= max_seconds)
        .cloned()
        .collect();
    Ok(Manifest::from_subset(m.name.clone(), records))
}

/// Keeps clips whose corpus tag is in `corpora`, preserving order.
pub fn build_stage2_subset(m: &Manifest, corpora: &BTreeSet<CorpusTag>) -> Result<Manifest> {
    if corpora.is_empty() {
        return Err(Error::InvalidConfig("corpus set is empty".into()));
    }
    let records = m
        .records
        .iter()
        .filter(|r| corpora.contains(&r.corpus))
        .cloned()
        .collect();
    let tags: Vec<&str> = corpora.iter().map(|c| c.as_str()).collect();
    Ok(Manifest::from_subset(
        format!("{}[{}]", m.name, tags.join("+")),
        records,
    ))
}

/// Hours per language and per corpus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LanguageStats {
    pub total_hours: f64,
    pub per_language: BTreeMap<String, f64>,
    pub per_corpus: BTreeMap<CorpusTag, f64>,
    /// Languages sorted by hours descending, ties by code ascending.
    pub ranked: Vec<(String, f64)>,
}

impl LanguageStats {
    /// The first `k` entries of [`Self::ranked`].
    pub fn top_k(&self, k: usize) -> &[(String, f64)] {
        &self.ranked[..k.min(self.ranked.len())]
    }

    pub fn top_k_hours(&self, k: usize) -> f64 {
        self.top_k(k).iter().map(|(_, h)| h).sum()
    }

    /// Fraction of all hours covered by the top `k` languages.
    pub fn top_k_share(&self, k: usize) -> f64 {
        if self.total_hours == 0.0 {
            0.0
        } else {
            self.top_k_hours(k) / self.total_hours
        }
    }
}

pub fn compute_stats(m: &Manifest) -> LanguageStats {
    let mut lang_secs: BTreeMap<String, f64> = BTreeMap::new();
    let mut corpus_secs: BTreeMap<CorpusTag, f64> = BTreeMap::new();
    for r in &m.records {
        *lang_secs.entry(r.language.clone()).or_default() += r.duration;
        *corpus_secs.entry(r.corpus).or_default() += r.duration;
    }
    let per_language: BTreeMap<String, f64> = lang_secs
        .into_iter()
        .map(|(k, s)| (k, s / SECONDS_PER_HOUR))
        .collect();
    let per_corpus = corpus_secs
        .into_iter()
        .map(|(k, s)| (k, s / SECONDS_PER_HOUR))
        .collect();
    let mut ranked: Vec<(String, f64)> = per_language
        .iter()
        .map(|(k, h)| (k.clone(), *h))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    LanguageStats {
        total_hours: m.total_hours(),
        per_language,
        per_corpus,
        ranked,
    }
}

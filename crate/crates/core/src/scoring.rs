//! Character error rate and SUPERB-style score aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    /// Character error rate in percent, lower is better.
    #[serde(rename = "CER", alias = "cer")]
    Cer,
    /// Accuracy in percent, higher is better.
    #[serde(rename = "ACC", alias = "acc")]
    Acc,
}

impl Metric {
    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Acc)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Cer => "CER",
            Metric::Acc => "ACC",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One row of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub model: String,
    pub task: String,
    pub metric: Metric,
    pub value: f64,
}

impl TaskResult {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.metric {
            Metric::Acc => (0.0..=100.0).contains(&self.value),
            Metric::Cer => self.value >= 0.0 && self.value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "{} {} for {}/{} out of range",
                self.metric, self.value, self.model, self.task
            )))
        }
    }
}

fn normalize(text: &str) -> Vec<char> {
    text.trim().nfc().collect()
}

/// Unit-cost edit distance between two character sequences.
pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate of `hyp` against `reference`, in percent.
pub fn cer(hyp: &str, reference: &str) -> Result<f64> {
    let r = normalize(reference);
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    let h = normalize(hyp);
    Ok(100.0 * levenshtein(&h, &r) as f64 / r.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CerReport {
    pub utterances: usize,
    pub edits: usize,
    pub reference_chars: usize,
    /// Total edits over total reference characters, in percent.
    pub cer: f64,
}

fn parse_transcripts(name: &str, text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("{name}: expected id<TAB>text"),
        })?;
        out.push((id.to_string(), body.to_string()));
    }
    Ok(out)
}

/// Corpus-level CER over `id<TAB>text` files matched by id.
pub fn corpus_cer(hyp_text: &str, ref_text: &str) -> Result<CerReport> {
    let hyps: BTreeMap<String, String> = parse_transcripts("hyp", hyp_text)?.into_iter().collect();
    let refs = parse_transcripts("ref", ref_text)?;
    let mut edits = 0;
    let mut chars = 0;
    for (id, reference) in &refs {
        let hyp = hyps.get(id).ok_or_else(|| Error::MismatchedUtterance {
            expected: id.clone(),
            found: "<missing hypothesis>".into(),
        })?;
        let r = normalize(reference);
        if r.is_empty() {
            return Err(Error::EmptyReference);
        }
        edits += levenshtein(&normalize(hyp), &r);
        chars += r.len();
    }
    if chars == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(CerReport {
        utterances: refs.len(),
        edits,
        reference_chars: chars,
        cer: 100.0 * edits as f64 / chars as f64,
    })
}

pub fn corpus_cer_files(hyp: impl AsRef<Path>, reference: impl AsRef<Path>) -> Result<CerReport> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
    corpus_cer(&read(hyp.as_ref())?, &read(reference.as_ref())?)
}

/// Models x tasks matrix of results.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    models: Vec<String>,
    tasks: Vec<(String, Metric)>,
    values: BTreeMap<(String, String), f64>,
}

impl ScoreTable {
    pub fn from_results(results: &[TaskResult]) -> Result<Self> {
        let mut table = ScoreTable::default();
        for r in results {
            r.validate()?;
            match table.tasks.iter().find(|(t, _)| *t == r.task) {
                Some((_, m)) if *m != r.metric => {
                    return Err(Error::InvalidConfig(format!(
                        "task {} reported with both {} and {}",
                        r.task, m, r.metric
                    )))
                }
                Some(_) => {}
                None => table.tasks.push((r.task.clone(), r.metric)),
            }
            if !table.models.contains(&r.model) {
                table.models.push(r.model.clone());
            }
            if table
                .values
                .insert((r.model.clone(), r.task.clone()), r.value)
                .is_some()
            {
                return Err(Error::InvalidConfig(format!(
                    "duplicate result for {}/{}",
                    r.model, r.task
                )));
            }
        }
        Ok(table)
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn tasks(&self) -> &[(String, Metric)] {
        &self.tasks
    }

    pub fn get(&self, model: &str, task: &str) -> Option<f64> {
        self.values.get(&(model.to_string(), task.to_string())).copied()
    }

    pub fn validate_complete(&self) -> Result<()> {
        for m in &self.models {
            for (t, _) in &self.tasks {
                if self.get(m, t).is_none() {
                    return Err(Error::IncompleteTable {
                        model: m.clone(),
                        task: t.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Best value per task: max for ACC, min for CER.
    pub fn best(&self, task: &str) -> Option<f64> {
        let (_, metric) = self.tasks.iter().find(|(t, _)| t == task)?;
        let vals = self.models.iter().filter_map(|m| self.get(m, task));
        if metric.higher_is_better() {
            vals.reduce(f64::max)
        } else {
            vals.reduce(f64::min)
        }
    }
}

/// Normalised term for one value: `value / best` for ACC, `best / value`
/// for CER. A zero best with a non-zero competitor gives 0.
pub fn normalized_term(metric: Metric, value: f64, best: f64) -> f64 {
    let (num, den) = if metric.higher_is_better() {
        (value, best)
    } else {
        (best, value)
    };
    if value == best {
        1.0
    } else if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// SUPERB score per model, in table order.
///
/// Without `baseline` each task term is [`normalized_term`]. With a baseline
/// value for a task, the term becomes `(value - baseline) / (best - baseline)`.
pub fn superb_score(
    table: &ScoreTable,
    baseline: Option<&BTreeMap<String, f64>>,
) -> Result<Vec<(String, f64)>> {
    table.validate_complete()?;
    if table.tasks.is_empty() {
        return Err(Error::InvalidConfig("score table has no tasks".into()));
    }
    let bests: Vec<f64> = table
        .tasks
        .iter()
        .map(|(t, _)| table.best(t).expect("complete table"))
        .collect();
    let mut out = Vec::with_capacity(table.models.len());
    for model in &table.models {
        let mut sum = 0.0;
        for ((task, metric), &best) in table.tasks.iter().zip(&bests) {
            let value = table.get(model, task).expect("complete table");
            let term = match baseline.and_then(|b| b.get(task)) {
                Some(&b) => {
                    if best == b {
                        return Err(Error::InvalidConfig(format!(
                            "baseline for {task} equals the best value"
                        )));
                    }
                    (value - b) / (best - b)
                }
                None => normalized_term(*metric, value, best),
            };
            sum += term;
        }
        out.push((model.clone(), 1000.0 * sum / table.tasks.len() as f64));
    }
    Ok(out)
}

/// Reads a JSON array or JSON lines of [`TaskResult`].
pub fn parse_results(text: &str) -> Result<Vec<TaskResult>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return Ok(serde_json::from_str(trimmed)?);
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<TaskResult>> {
    let path = path.as_ref();
    parse_results(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

//! Labeled responses, corpus splits and their on-disk formats.
//!
//! The canonical format is JSONL, one record per line:
//!
//! ```text
//! {"id":"human-1","text":"...","label":1,"source":"human","phase":"predict","split":"train"}
//! {"id":"synthetic-t0.50-000001","text":"...","label":0,"source":"synthetic","temperature":0.5}
//! ```
//!
//! Human records are routed to the training or validation split by the
//! optional `split` field (default `train`); synthetic records are routed to
//! the pool keyed by their `temperature`. CSV import expects a header row
//! `id,text,label,source` with optional trailing `phase` and `split` columns.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::ConsistencyRecord;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("row {row}: {reason}")]
    MalformedRecord { row: usize, reason: String },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("insufficient pool: requested {requested}, available {available}")]
    InsufficientPool { requested: usize, available: usize },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Binary class label. `Positive` (1) is the desired, rubric-conforming class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Negative = 0,
    Positive = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Negative => Label::Positive,
            Label::Positive => Label::Negative,
        }
    }

    pub const BOTH: [Label; 2] = [Label::Negative, Label::Positive];
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Synthetic,
}

impl Source {
    fn as_str(self) -> &'static str {
        match self {
            Source::Human => "human",
            Source::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Predict,
    Explain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledResponse {
    pub id: String,
    pub text: String,
    pub label: Label,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<ConsistencyRecord>,
}

impl LabeledResponse {
    pub fn human(id: impl Into<String>, text: impl Into<String>, label: Label) -> Self {
        LabeledResponse {
            id: id.into(),
            text: text.into(),
            label,
            source: Source::Human,
            phase: None,
            split: None,
            temperature: None,
            consistency: None,
        }
    }

    pub fn synthetic(
        id: impl Into<String>,
        text: impl Into<String>,
        label: Label,
        temperature: f64,
    ) -> Self {
        LabeledResponse {
            id: id.into(),
            text: text.into(),
            label,
            source: Source::Synthetic,
            phase: None,
            split: None,
            temperature: Some(temperature),
            consistency: None,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    pub fn with_phase(mut self, phase: Phase) -> Self {
        self.phase = Some(phase);
        self
    }

    /// Checks the per-record invariants.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id is empty".into());
        }
        if self.text.trim().is_empty() {
            return Err("text is empty".into());
        }
        match self.source {
            Source::Synthetic => match self.temperature {
                None => return Err("synthetic record without temperature".into()),
                Some(t) if !(0.0..=2.0).contains(&t) => {
                    return Err(format!("temperature {t} outside [0, 2]"))
                }
                Some(_) => {}
            },
            Source::Human => {
                if self.temperature.is_some() {
                    return Err("human record carries a temperature".into());
                }
                if self.consistency.is_some() {
                    return Err("human record carries a consistency record".into());
                }
            }
        }
        if self.source == Source::Synthetic && self.split == Some(Split::Validation) {
            return Err("synthetic record assigned to the validation split".into());
        }
        Ok(())
    }
}

/// Temperature used as a map key. Ordered by the numeric value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Temperature(pub f64);

impl Eq for Temperature {}

impl PartialOrd for Temperature {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Temperature {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub human_train: Vec<LabeledResponse>,
    pub validation: Vec<LabeledResponse>,
    pub synthetic_pools: BTreeMap<Temperature, Vec<LabeledResponse>>,
}

impl Corpus {
    /// Builds a corpus from validated records, enforcing the cross-record
    /// invariants (unique ids, human-only validation).
    pub fn from_records(records: Vec<LabeledResponse>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        let mut corpus = Corpus::default();
        for (i, rec) in records.into_iter().enumerate() {
            rec.validate()
                .map_err(|reason| CorpusError::MalformedRecord { row: i + 1, reason })?;
            if !seen.insert(rec.id.clone()) {
                return Err(CorpusError::DuplicateId(rec.id));
            }
            match (rec.source, rec.split) {
                (Source::Human, Some(Split::Validation)) => corpus.validation.push(rec),
                (Source::Human, _) => corpus.human_train.push(rec),
                (Source::Synthetic, _) => {
                    let t = Temperature(rec.temperature.expect("validated"));
                    corpus.synthetic_pools.entry(t).or_default().push(rec);
                }
            }
        }
        Ok(corpus)
    }

    pub fn is_empty(&self) -> bool {
        self.human_train.is_empty()
            && self.validation.is_empty()
            && self.synthetic_pools.values().all(Vec::is_empty)
    }

    pub fn records(&self) -> impl Iterator<Item = &LabeledResponse> {
        self.human_train
            .iter()
            .chain(self.validation.iter())
            .chain(self.synthetic_pools.values().flatten())
    }

    /// Texts of every human record, used to keep generated samples from
    /// leaking into either human split.
    pub fn human_texts(&self) -> HashSet<String> {
        self.human_train
            .iter()
            .chain(self.validation.iter())
            .map(|r| r.text.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

/// On-disk record shape before ids are assigned.
#[derive(Debug, Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<String>,
    text: String,
    label: Label,
    source: Source,
    #[serde(default)]
    phase: Option<Phase>,
    #[serde(default)]
    split: Option<Split>,
    #[serde(default)]
    temperature: Option<f64>,
    #[serde(default)]
    consistency: Option<ConsistencyRecord>,
}

#[derive(Debug, Deserialize)]
struct CsvRecord {
    #[serde(default)]
    id: Option<String>,
    text: String,
    label: String,
    source: String,
    #[serde(default)]
    phase: Option<String>,
    #[serde(default)]
    split: Option<String>,
}

fn open(path: &Path) -> Result<File, CorpusError> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CorpusError::FileNotFound(path.display().to_string()),
        _ => CorpusError::Io(e),
    })
}

/// Assigns `<source>-<counter>` ids to records that arrived without one.
fn assign_ids(raw: Vec<(usize, RawRecord)>) -> Result<Vec<LabeledResponse>, CorpusError> {
    let mut counters: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(raw.len());
    for (row, r) in raw {
        let id = match r.id.filter(|s| !s.trim().is_empty()) {
            Some(id) => id,
            None => {
                let c = counters.entry(r.source.as_str()).or_insert(0);
                *c += 1;
                format!("{}-{}", r.source.as_str(), c)
            }
        };
        let rec = LabeledResponse {
            id,
            text: r.text,
            label: r.label,
            source: r.source,
            phase: r.phase,
            split: r.split,
            temperature: r.temperature,
            consistency: r.consistency,
        };
        rec.validate()
            .map_err(|reason| CorpusError::MalformedRecord { row, reason })?;
        out.push(rec);
    }
    Ok(out)
}

fn read_jsonl_raw(path: &Path) -> Result<Vec<(usize, RawRecord)>, CorpusError> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = i + 1;
        let rec: RawRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                row,
                reason: e.to_string(),
            })?;
        out.push((row, rec));
    }
    Ok(out)
}

fn parse_enum<T: for<'de> Deserialize<'de>>(value: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(value.trim().to_lowercase()))
        .map_err(|_| format!("unrecognized value `{value}`"))
}

fn read_csv_raw(path: &Path) -> Result<Vec<(usize, RawRecord)>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(open(path)?);
    let mut out = Vec::new();
    for (i, rec) in reader.deserialize::<CsvRecord>().enumerate() {
        // row 1 is the header
        let row = i + 2;
        let malformed = |reason: String| CorpusError::MalformedRecord { row, reason };
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        let label = rec
            .label
            .trim()
            .parse::<u8>()
            .map_err(|_| format!("label `{}` is not an integer", rec.label))
            .and_then(Label::try_from)
            .map_err(malformed)?;
        let source: Source = parse_enum(&rec.source).map_err(malformed)?;
        let phase = match rec.phase.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(p) => Some(parse_enum::<Phase>(p).map_err(malformed)?),
        };
        let split = match rec.split.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(s) => Some(parse_enum::<Split>(s).map_err(malformed)?),
        };
        out.push((
            row,
            RawRecord {
                id: rec.id,
                text: rec.text,
                label,
                source,
                phase,
                split,
                temperature: None,
                consistency: None,
            },
        ));
    }
    Ok(out)
}

/// Loads and validates a corpus file.
pub fn load_corpus(path: &Path, format: Format) -> Result<Corpus, CorpusError> {
    let raw = match format {
        Format::Jsonl => read_jsonl_raw(path)?,
        Format::Csv => read_csv_raw(path)?,
    };
    Corpus::from_records(assign_ids(raw)?)
}

/// Loads a flat list of records (a synthetic pool, a filtered pool, ...).
pub fn load_pool(path: &Path) -> Result<Vec<LabeledResponse>, CorpusError> {
    let records = assign_ids(read_jsonl_raw(path)?)?;
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(CorpusError::DuplicateId(r.id.clone()));
        }
    }
    Ok(records)
}

/// Writes records as JSONL, one per line. An empty pool produces an empty file.
pub fn save_pool(pool: &[LabeledResponse], path: &Path) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, pool)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn write_jsonl<W: Write, T: Serialize>(w: &mut W, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                row: i + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Seeded Fisher-Yates permutation of `0..len`.
pub fn seeded_permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx
}

/// Draws `n` distinct records, deterministically for a fixed seed.
pub fn sample_without_replacement(
    pool: &[LabeledResponse],
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledResponse>, CorpusError> {
    if n > pool.len() {
        return Err(CorpusError::InsufficientPool {
            requested: n,
            available: pool.len(),
        });
    }
    Ok(seeded_permutation(pool.len(), seed)
        .into_iter()
        .take(n)
        .map(|i| pool[i].clone())
        .collect())
}

/// Draws `per_class` records from each class. Classes are sampled with
/// seeds derived from `seed` so the draw for one class does not depend on the
/// size of the other.
pub fn stratified_sample(
    pool: &[LabeledResponse],
    per_class: usize,
    seed: u64,
) -> Result<Vec<LabeledResponse>, (Label, CorpusError)> {
    let mut out = Vec::with_capacity(2 * per_class);
    for label in Label::BOTH {
        let members: Vec<LabeledResponse> =
            pool.iter().filter(|r| r.label == label).cloned().collect();
        let class_seed = seed
            .wrapping_add(label.as_u8() as u64)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let drawn =
            sample_without_replacement(&members, per_class, class_seed).map_err(|e| (label, e))?;
        out.extend(drawn);
    }
    Ok(out)
}

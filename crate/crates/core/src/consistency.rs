//! Self-grading of synthetic samples against the generation rubric, and
//! filtering of samples whose grade contradicts their intended label.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{stratified_sample, CorpusError, Label, LabeledResponse};
use crate::evaluation::{AgreementReport, Confusion};
use crate::gateway::{Call, ChatRequest, Gateway, GatewayError, DEFAULT_MAX_TOKENS, DEFAULT_MODEL};
use crate::generator::{fill_placeholders, TemplateError};

/// Grading always samples at the provider minimum.
pub const GRADING_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error("no JSON object with an integer Score of 0 or 1 in: {0}")]
    ParseFailure(String),
    #[error("pool is empty")]
    EmptyPool,
    #[error("no grading could be parsed")]
    NoParsedRecords,
    #[error("no consistency record for sample `{0}`")]
    MissingRecord(String),
    #[error("grading sample `{sample_id}`: {source}")]
    Gateway {
        sample_id: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("validation sample size must be even, got {0}")]
    OddSampleSize(usize),
    #[error("insufficient pool for class {label}: {source}")]
    InsufficientPool {
        label: Label,
        #[source]
        source: CorpusError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRecord {
    pub sample_id: String,
    pub intended_label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graded_score: Option<Label>,
    pub parse_ok: bool,
    pub raw_grading: String,
}

impl ConsistencyRecord {
    pub fn consistent(&self) -> bool {
        self.parse_ok && self.graded_score == Some(self.intended_label)
    }
}

/// Grading prompt. `user_text` must reference `{rubric}` and `{response}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradingTemplate {
    pub system_text: String,
    pub user_text: String,
    pub rubric_text: String,
    #[serde(default = "default_model")]
    pub model_name: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_model() -> String {
    DEFAULT_MODEL.to_string()
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

impl GradingTemplate {
    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let load_err = |reason: String| TemplateError::Load {
            path: path.display().to_string(),
            reason,
        };
        let body = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        serde_json::from_str(&body).map_err(|e| load_err(e.to_string()))
    }

    pub fn default_rubric() -> Self {
        serde_json::from_str(include_str!("../templates/grading.json")).expect("bundled template")
    }

    pub fn render(&self, response_text: &str) -> Result<ChatRequest, TemplateError> {
        let values = [
            ("rubric", self.rubric_text.as_str()),
            ("response", response_text),
        ];
        Ok(ChatRequest {
            system_prompt: fill_placeholders(&self.system_text, &values, &[])?,
            user_prompt: fill_placeholders(&self.user_text, &values, &["rubric", "response"])?,
            temperature: GRADING_TEMPERATURE,
            max_tokens: self.max_tokens,
            model_name: self.model_name.clone(),
        })
    }
}

fn score_of(obj: &serde_json::Map<String, Value>) -> Option<Label> {
    let v = obj.get("Score").or_else(|| {
        obj.iter()
            .find(|(k, _)| k.eq_ignore_ascii_case("score"))
            .map(|(_, v)| v)
    })?;
    let n = v.as_u64()?;
    u8::try_from(n).ok().and_then(|b| Label::try_from(b).ok())
}

/// Extracts the binary `Score` from the first JSON object in `raw` that
/// carries one, ignoring surrounding prose or markdown fences.
pub fn parse_score(raw: &str) -> Result<Label, ConsistencyError> {
    for (i, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(obj))) = stream.next() {
            if let Some(label) = score_of(&obj) {
                return Ok(label);
            }
        }
    }
    let excerpt: String = raw.chars().take(120).collect();
    Err(ConsistencyError::ParseFailure(excerpt))
}

fn record_for(sample: &LabeledResponse, raw: String) -> ConsistencyRecord {
    let score = parse_score(&raw).ok();
    ConsistencyRecord {
        sample_id: sample.id.clone(),
        intended_label: sample.label,
        graded_score: score,
        parse_ok: score.is_some(),
        raw_grading: raw,
    }
}

/// Grades every sample with the rubric. Unparseable gradings are kept as
/// records with `parse_ok = false`.
pub fn grade_pool(
    pool: &[LabeledResponse],
    tpl: &GradingTemplate,
    gw: &Gateway,
) -> Result<Vec<ConsistencyRecord>, ConsistencyError> {
    if pool.is_empty() {
        return Err(ConsistencyError::EmptyPool);
    }
    let requests = pool
        .iter()
        .map(|s| tpl.render(&s.text))
        .collect::<Result<Vec<_>, _>>()?;
    let calls = Call::numbered(requests);
    let responses = gw.complete_all(&calls);
    pool.iter()
        .zip(responses)
        .map(|(sample, resp)| {
            let resp = resp.map_err(|e| ConsistencyError::Gateway {
                sample_id: sample.id.clone(),
                source: e,
            })?;
            Ok(record_for(sample, resp.raw_text))
        })
        .collect()
}

/// Agreement between self-graded scores and intended labels over records
/// whose grading parsed.
pub fn agreement_metrics(
    records: &[ConsistencyRecord],
) -> Result<AgreementReport, ConsistencyError> {
    let mut c = Confusion::default();
    for r in records.iter().filter(|r| r.parse_ok) {
        let graded = r.graded_score.expect("parse_ok implies a score");
        c.record(graded, r.intended_label);
    }
    if c.n() == 0 {
        return Err(ConsistencyError::NoParsedRecords);
    }
    Ok(AgreementReport::from_confusion(c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    Mismatch,
    ParseFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub id: String,
    pub reason: RemovalReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub retained: Vec<LabeledResponse>,
    pub removed: Vec<Removal>,
}

impl FilterOutcome {
    pub fn retention(&self) -> f64 {
        let total = self.retained.len() + self.removed.len();
        if total == 0 {
            1.0
        } else {
            self.retained.len() as f64 / total as f64
        }
    }
}

/// Keeps samples whose grading parsed and matches the intended label.
pub fn filter_inconsistent(
    pool: &[LabeledResponse],
    records: &[ConsistencyRecord],
) -> Result<FilterOutcome, ConsistencyError> {
    let by_id: HashMap<&str, &ConsistencyRecord> =
        records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let mut retained = Vec::new();
    let mut removed = Vec::new();
    for sample in pool {
        let rec = by_id
            .get(sample.id.as_str())
            .ok_or_else(|| ConsistencyError::MissingRecord(sample.id.clone()))?;
        if !rec.parse_ok {
            removed.push(Removal {
                id: sample.id.clone(),
                reason: RemovalReason::ParseFailure,
            });
        } else if rec.graded_score != Some(sample.label) {
            removed.push(Removal {
                id: sample.id.clone(),
                reason: RemovalReason::Mismatch,
            });
        } else {
            retained.push(sample.clone());
        }
    }
    Ok(FilterOutcome { retained, removed })
}

/// Stratified draw of `n / 2` samples per class for agreement checks.
pub fn sample_for_validation(
    pool: &[LabeledResponse],
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledResponse>, ConsistencyError> {
    if !n.is_multiple_of(2) {
        return Err(ConsistencyError::OddSampleSize(n));
    }
    stratified_sample(pool, n / 2, seed)
        .map_err(|(label, source)| ConsistencyError::InsufficientPool { label, source })
}

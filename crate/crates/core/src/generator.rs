//! Few-shot prompt assembly and parsing of newline-delimited generations
//! into labeled synthetic samples.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, LabeledResponse};
use crate::gateway::{Call, ChatRequest, Gateway, GatewayError, DEFAULT_MAX_TOKENS, DEFAULT_MODEL};

pub const DEFAULT_BATCH_SIZE: usize = 10;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template is missing placeholder {{{0}}}")]
    MissingPlaceholder(String),
    #[error("template has unresolved placeholder {{{0}}}")]
    UnresolvedPlaceholder(String),
    #[error("unbalanced brace at byte {0}")]
    UnbalancedBrace(usize),
    #[error("few-shot example {index} has label {found}, template targets {expected}")]
    MixedExamples {
        index: usize,
        found: Label,
        expected: Label,
    },
    #[error("cannot read template {path}: {reason}")]
    Load { path: String, reason: String },
}

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("batch {batch} of label {label}: {source}")]
    Gateway {
        label: Label,
        batch: usize,
        #[source]
        source: GatewayError,
    },
}

/// Substitutes `{name}` placeholders. `{{` and `}}` are literal braces.
/// Every placeholder in `text` must be known, and every name in `required`
/// must occur at least once.
pub(crate) fn fill_placeholders(
    text: &str,
    values: &[(&str, &str)],
    required: &[&str],
) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(text.len());
    let mut used: HashSet<&str> = HashSet::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < text.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                out.push('{');
                i += 2;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                out.push('}');
                i += 2;
            }
            b'{' => {
                let close = text[i + 1..]
                    .find('}')
                    .ok_or(TemplateError::UnbalancedBrace(i))?;
                let name = &text[i + 1..i + 1 + close];
                let (key, value) = values
                    .iter()
                    .find(|(k, _)| *k == name)
                    .ok_or_else(|| TemplateError::UnresolvedPlaceholder(name.to_string()))?;
                used.insert(key);
                out.push_str(value);
                i += close + 2;
            }
            b'}' => return Err(TemplateError::UnbalancedBrace(i)),
            _ => {
                let ch = text[i..].chars().next().expect("in bounds");
                out.push(ch);
                i += ch.len_utf8();
            }
        }
    }
    if let Some(missing) = required.iter().find(|r| !used.contains(**r)) {
        return Err(TemplateError::MissingPlaceholder(missing.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub text: String,
    pub label: Label,
}

/// A generation prompt for one class. `user_text` must reference
/// `{rubric}`, `{examples}` and `{batch_size}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system_text: String,
    pub user_text: String,
    pub rubric_text: String,
    pub few_shot_examples: Vec<FewShotExample>,
    pub target_label: Label,
}

impl PromptTemplate {
    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let load_err = |reason: String| TemplateError::Load {
            path: path.display().to_string(),
            reason,
        };
        let body = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let tpl: PromptTemplate =
            serde_json::from_str(&body).map_err(|e| load_err(e.to_string()))?;
        tpl.validate()?;
        Ok(tpl)
    }

    pub fn default_positive() -> Self {
        serde_json::from_str(include_str!("../templates/positive.json")).expect("bundled template")
    }

    pub fn default_negative() -> Self {
        serde_json::from_str(include_str!("../templates/negative.json")).expect("bundled template")
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        for (index, ex) in self.few_shot_examples.iter().enumerate() {
            if ex.label != self.target_label {
                return Err(TemplateError::MixedExamples {
                    index,
                    found: ex.label,
                    expected: self.target_label,
                });
            }
        }
        Ok(())
    }

    fn examples_block(&self) -> String {
        self.few_shot_examples
            .iter()
            .map(|e| e.text.trim())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub n_total_per_label: usize,
    /// Bookkeeping only; it does not make the LLM deterministic.
    pub seed: u64,
    pub model_name: String,
    pub max_tokens: u32,
    /// Re-request short classes up to two extra rounds.
    pub strict: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            temperature: 0.3,
            batch_size: DEFAULT_BATCH_SIZE,
            n_total_per_label: 0,
            seed: 0,
            model_name: DEFAULT_MODEL.to_string(),
            max_tokens: DEFAULT_MAX_TOKENS,
            strict: false,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        if self.batch_size == 0 {
            return Err(GeneratorError::Config(
                "batch_size must be at least 1".into(),
            ));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GeneratorError::Config(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn batches_per_label(&self) -> usize {
        self.n_total_per_label.div_ceil(self.batch_size)
    }
}

pub fn render_prompt(
    tpl: &PromptTemplate,
    cfg: &GenerationConfig,
) -> Result<ChatRequest, TemplateError> {
    tpl.validate()?;
    let batch = cfg.batch_size.to_string();
    let examples = tpl.examples_block();
    let values = [
        ("rubric", tpl.rubric_text.as_str()),
        ("examples", examples.as_str()),
        ("batch_size", batch.as_str()),
    ];
    let user = fill_placeholders(
        &tpl.user_text,
        &values,
        &["rubric", "examples", "batch_size"],
    )?;
    let system = fill_placeholders(&tpl.system_text, &values, &[])?;
    Ok(ChatRequest {
        system_prompt: system,
        user_prompt: user,
        temperature: cfg.temperature,
        max_tokens: cfg.max_tokens,
        model_name: cfg.model_name.clone(),
    })
}

/// Length of a leading list marker (`1.`, `2)`, `-`, `*`, `•`) followed by
/// whitespace or end of line, or `None`.
fn marker_len(s: &str) -> Option<usize> {
    let digits = s.bytes().take_while(u8::is_ascii_digit).count();
    let len = if digits > 0 {
        match s.as_bytes().get(digits) {
            Some(b'.') | Some(b')') => digits + 1,
            _ => return None,
        }
    } else {
        let c = s.chars().next()?;
        if matches!(c, '-' | '*' | '•' | '–') {
            c.len_utf8()
        } else {
            return None;
        }
    };
    match s[len..].chars().next() {
        None => Some(len),
        Some(c) if c.is_whitespace() => Some(len),
        Some(_) => None,
    }
}

fn strip_markers(mut s: &str) -> &str {
    s = s.trim();
    while let Some(n) = marker_len(s) {
        s = s[n..].trim();
    }
    s
}

/// Splits a generation into candidate responses: one per non-empty line,
/// trimmed, with enumeration markers removed.
pub fn parse_generation(raw_text: &str) -> Vec<String> {
    raw_text
        .lines()
        .map(strip_markers)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShortBatch {
    pub label: Label,
    pub batch: usize,
    pub parsed: usize,
    pub expected: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GenerationReport {
    pub requests: usize,
    pub short_batches: Vec<ShortBatch>,
    pub duplicates_dropped: usize,
    pub leaks_dropped: usize,
    /// Per class (index 0 and 1): how many samples short of the target.
    pub shortfall: [usize; 2],
}

#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub pool: Vec<LabeledResponse>,
    pub report: GenerationReport,
}

pub fn synthetic_id(temperature: f64, counter: usize) -> String {
    format!("synthetic-t{temperature}-{counter:06}")
}

/// Generates up to `n_total_per_label` samples for each template.
///
/// `exclude` holds texts that must never enter the pool (the human splits).
/// Exact duplicates within the pool are dropped.
pub fn generate_pool(
    tpl_pos: &PromptTemplate,
    tpl_neg: &PromptTemplate,
    cfg: &GenerationConfig,
    gw: &Gateway,
    exclude: &HashSet<String>,
) -> Result<GenerationOutcome, GeneratorError> {
    cfg.validate()?;
    if tpl_pos.target_label != Label::Positive || tpl_neg.target_label != Label::Negative {
        return Err(GeneratorError::Config(
            "positive template must target label 1 and negative template label 0".into(),
        ));
    }
    let templates = [
        (tpl_pos, render_prompt(tpl_pos, cfg)?),
        (tpl_neg, render_prompt(tpl_neg, cfg)?),
    ];

    let mut report = GenerationReport::default();
    let mut seen: HashSet<String> = HashSet::new();
    // accepted texts per template, in (batch, line) order
    let mut accepted: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    let mut next_variant = [0usize; 2];
    let rounds = if cfg.strict { 3 } else { 1 };

    for round in 0..rounds {
        let mut calls = Vec::new();
        let mut owners = Vec::new();
        for (slot, (tpl, req)) in templates.iter().enumerate() {
            let missing = cfg.n_total_per_label.saturating_sub(accepted[slot].len());
            if missing == 0 {
                continue;
            }
            let n_batches = if round == 0 {
                cfg.batches_per_label()
            } else {
                missing.div_ceil(cfg.batch_size)
            };
            for _ in 0..n_batches {
                owners.push((slot, tpl.target_label, next_variant[slot]));
                calls.push(Call {
                    request: req.clone(),
                    variant: next_variant[slot],
                });
                next_variant[slot] += 1;
            }
        }
        if calls.is_empty() {
            break;
        }
        report.requests += calls.len();
        let results = gw.complete_all(&calls);
        for ((slot, label, batch), result) in owners.into_iter().zip(results) {
            let resp = result.map_err(|e| GeneratorError::Gateway {
                label,
                batch,
                source: e,
            })?;
            let lines = parse_generation(&resp.raw_text);
            if lines.len() < cfg.batch_size {
                log::warn!(
                    "short batch: label {label} batch {batch} parsed {} of {}",
                    lines.len(),
                    cfg.batch_size
                );
                report.short_batches.push(ShortBatch {
                    label,
                    batch,
                    parsed: lines.len(),
                    expected: cfg.batch_size,
                });
            }
            for line in lines {
                if accepted[slot].len() >= cfg.n_total_per_label {
                    break;
                }
                if exclude.contains(&line) {
                    report.leaks_dropped += 1;
                    log::info!("dropped generated text that matches a human sample");
                    continue;
                }
                if !seen.insert(line.clone()) {
                    report.duplicates_dropped += 1;
                    continue;
                }
                accepted[slot].push(line);
            }
        }
    }

    let mut pool = Vec::with_capacity(accepted[0].len() + accepted[1].len());
    for (slot, texts) in accepted.iter().enumerate() {
        let label = templates[slot].0.target_label;
        report.shortfall[label.as_u8() as usize] = cfg.n_total_per_label - texts.len();
        for text in texts {
            let id = synthetic_id(cfg.temperature, pool.len() + 1);
            pool.push(LabeledResponse::synthetic(
                id,
                text.clone(),
                label,
                cfg.temperature,
            ));
        }
    }
    Ok(GenerationOutcome { pool, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FixtureStore, RetryPolicy, Transport, TransportFailure};
    use proptest::prelude::*;

    #[test]
    fn parse_examples() {
        assert_eq!(parse_generation("A\nB\nC"), vec!["A", "B", "C"]);
        assert_eq!(parse_generation("1. A\n\n 2. B \n"), vec!["A", "B"]);
        assert_eq!(
            parse_generation("- x\n• y\n3) z\n*  w"),
            vec!["x", "y", "z", "w"]
        );
        assert_eq!(
            parse_generation("1.5 hours is enough"),
            vec!["1.5 hours is enough"]
        );
        assert_eq!(parse_generation("1.\n-\n"), Vec::<String>::new());
        assert_eq!(parse_generation("1. 2. nested"), vec!["nested"]);
        assert!(parse_generation("").is_empty());
    }

    proptest! {
        #[test]
        fn parse_is_idempotent(raw in "([0-9]{0,2}[.)]? ?[-*• ]{0,2}[a-z .]{0,8}\n?){0,8}") {
            let once = parse_generation(&raw);
            let twice = parse_generation(&once.join("\n"));
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn render_copies_temperature_and_blocks() {
        let cfg = GenerationConfig {
            temperature: 0.3,
            ..Default::default()
        };
        let tpl = PromptTemplate::default_positive();
        let req = render_prompt(&tpl, &cfg).unwrap();
        assert_eq!(req.temperature, 0.3);
        assert!(req.user_prompt.contains(&tpl.rubric_text));
        for ex in &tpl.few_shot_examples {
            assert!(req.user_prompt.contains(&ex.text));
        }
        assert!(req.user_prompt.contains("MEET the rubric"));
        assert!(req.user_prompt.contains("exactly 10 new replies"));
        assert!(!req.user_prompt.contains('{'));
    }

    #[test]
    fn template_errors() {
        let cfg = GenerationConfig::default();
        let mut tpl = PromptTemplate::default_negative();
        tpl.user_text = "Rubric {rubric} examples {examples} n={batch_size} {tone}".into();
        assert!(matches!(
            render_prompt(&tpl, &cfg),
            Err(TemplateError::UnresolvedPlaceholder(p)) if p == "tone"
        ));
        tpl.user_text = "Rubric {rubric} n={batch_size}".into();
        assert!(matches!(
            render_prompt(&tpl, &cfg),
            Err(TemplateError::MissingPlaceholder(p)) if p == "examples"
        ));
        tpl.user_text = "{rubric} {examples} {batch_size} {{literal}}".into();
        assert!(render_prompt(&tpl, &cfg)
            .unwrap()
            .user_prompt
            .ends_with("{literal}"));
        tpl.few_shot_examples[1].label = Label::Positive;
        assert!(matches!(
            render_prompt(&tpl, &cfg),
            Err(TemplateError::MixedExamples { index: 1, .. })
        ));
    }

    /// Returns `per_batch` numbered lines tagged with the label. With
    /// `vary`, every call yields fresh text.
    struct Lines {
        per_batch: usize,
        vary: bool,
        calls: std::sync::atomic::AtomicUsize,
    }
    impl Transport for Lines {
        fn send(&self, req: &ChatRequest) -> Result<String, TransportFailure> {
            let tag = if req.user_prompt.contains("MEET") {
                "pos"
            } else {
                "neg"
            };
            let call = if self.vary {
                self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst)
            } else {
                0
            };
            Ok((0..self.per_batch)
                .map(|i| format!("{}. {tag} line {i} call {call}", i + 1))
                .collect::<Vec<_>>()
                .join("\n"))
        }
    }

    fn record_pool(
        per_batch: usize,
        vary: bool,
        per_label: usize,
    ) -> (tempfile::TempDir, GenerationConfig) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenerationConfig {
            temperature: 0.5,
            n_total_per_label: per_label,
            ..Default::default()
        };
        let store = FixtureStore::create(dir.path()).unwrap();
        let lines = Lines {
            per_batch,
            vary,
            calls: Default::default(),
        };
        let gw = Gateway::live(Box::new(lines), RetryPolicy::default()).recording_into(store);
        generate_pool(
            &PromptTemplate::default_positive(),
            &PromptTemplate::default_negative(),
            &cfg,
            &gw,
            &HashSet::new(),
        )
        .unwrap();
        (dir, cfg)
    }

    fn replay_pool(
        dir: &tempfile::TempDir,
        cfg: &GenerationConfig,
        exclude: &HashSet<String>,
    ) -> GenerationOutcome {
        let gw = Gateway::replay(FixtureStore::open(dir.path()));
        generate_pool(
            &PromptTemplate::default_positive(),
            &PromptTemplate::default_negative(),
            cfg,
            &gw,
            exclude,
        )
        .unwrap()
    }

    #[test]
    fn two_batches_per_class_from_fixtures() {
        let (dir, cfg) = record_pool(10, true, 20);
        assert_eq!(FixtureStore::open(dir.path()).len().unwrap(), 4);
        let out = replay_pool(&dir, &cfg, &HashSet::new());
        assert_eq!(out.pool.len(), 40);
        assert_eq!(
            out.pool
                .iter()
                .filter(|r| r.label == Label::Positive)
                .count(),
            20
        );
        assert_eq!(out.report.shortfall, [0, 0]);
        for r in &out.pool {
            let want = if r.text.starts_with("pos") {
                Label::Positive
            } else {
                Label::Negative
            };
            assert_eq!(r.label, want);
            assert_eq!(r.temperature, Some(0.5));
        }
        // replay is deterministic
        let again = replay_pool(&dir, &cfg, &HashSet::new());
        assert_eq!(again.pool, out.pool);
    }

    #[test]
    fn empty_target_issues_no_requests() {
        let gw = Gateway::replay(FixtureStore::open("/nonexistent"));
        let cfg = GenerationConfig::default();
        let out = generate_pool(
            &PromptTemplate::default_positive(),
            &PromptTemplate::default_negative(),
            &cfg,
            &gw,
            &HashSet::new(),
        )
        .unwrap();
        assert!(out.pool.is_empty());
        assert_eq!(out.report.requests, 0);
    }

    #[test]
    fn duplicates_within_batches_collapse() {
        // Every batch of a template returns the same ten lines, so only the
        // first batch contributes.
        let (dir, cfg) = record_pool(10, false, 20);
        let out = replay_pool(&dir, &cfg, &HashSet::new());
        assert_eq!(out.report.requests, 4);
        assert_eq!(out.pool.len(), 20);
        assert_eq!(out.report.duplicates_dropped, 20);
        assert_eq!(out.report.shortfall, [10, 10]);
    }

    #[test]
    fn short_batches_reported_and_leaks_dropped() {
        let (dir, cfg) = record_pool(7, false, 10);
        let mut exclude = HashSet::new();
        exclude.insert("pos line 0 call 0".to_string());
        let out = replay_pool(&dir, &cfg, &exclude);
        assert_eq!(out.report.short_batches.len(), 2);
        assert_eq!(out.report.leaks_dropped, 1);
        assert_eq!(out.pool.len(), 13);
        assert_eq!(out.report.shortfall, [3, 4]);
    }

    #[test]
    fn gateway_errors_carry_batch_index() {
        let gw = Gateway::replay(FixtureStore::open("/nonexistent"));
        let cfg = GenerationConfig {
            n_total_per_label: 5,
            ..Default::default()
        };
        let err = generate_pool(
            &PromptTemplate::default_positive(),
            &PromptTemplate::default_negative(),
            &cfg,
            &gw,
            &HashSet::new(),
        )
        .unwrap_err();
        assert!(matches!(err, GeneratorError::Gateway { batch: 0, .. }));
    }
}

//! Baseline saturation, incremental augmentation, temperature sweeps and
//! report emission.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{
    self, AdapterConfig, AdapterError, ClassifierError, ExternalTrainer, LinearModel,
    TrainingConfig,
};
use crate::corpus::{seeded_permutation, Corpus, Label, LabeledResponse, Phase, Temperature};
use crate::evaluation::{bootstrap_auc, roc_auc, BootstrapConfig, EvalError};

pub const DEFAULT_INCREMENT: usize = 25;
pub const DEFAULT_MAX_SYNTHETIC: usize = 250;
pub const DEFAULT_TEMPERATURES: [f64; 4] = [0.3, 0.5, 0.7, 1.0];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("human training split is empty")]
    EmptyHumanTrain,
    #[error("validation split must contain both classes")]
    InvalidValidation,
    #[error("insufficient pool: requested {requested}, available {available}")]
    InsufficientPool { requested: usize, available: usize },
    #[error("no synthetic pool for temperature {0}")]
    MissingPool(f64),
    #[error("validation sample `{0}` reached a training batch")]
    ValidationLeak(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("nothing to report")]
    EmptyReport,
    #[error("training failed at increment {increment}: {source}")]
    Training {
        increment: usize,
        #[source]
        source: ClassifierError,
    },
    #[error("external trainer failed at increment {increment}: {source}")]
    Adapter {
        increment: usize,
        #[source]
        source: AdapterError,
    },
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    /// True when the failure came from outside the process.
    pub fn is_external(&self) -> bool {
        matches!(self, ExperimentError::Adapter { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub increment: usize,
    pub max_synthetic: usize,
    pub temperatures: Vec<f64>,
    pub use_filtered_pool: bool,
    pub seed: u64,
    /// Train a fixed number of epochs per increment instead of running to
    /// saturation.
    pub epochs_per_increment: Option<usize>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            increment: DEFAULT_INCREMENT,
            max_synthetic: DEFAULT_MAX_SYNTHETIC,
            temperatures: DEFAULT_TEMPERATURES.to_vec(),
            use_filtered_pool: false,
            seed: 0,
            epochs_per_increment: None,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.increment == 0 {
            return Err(ExperimentError::Schedule(
                "increment must be at least 1".into(),
            ));
        }
        if self.max_synthetic == 0 {
            return Err(ExperimentError::Schedule(
                "max_synthetic must be at least 1".into(),
            ));
        }
        if self.epochs_per_increment == Some(0) {
            return Err(ExperimentError::Schedule(
                "epochs_per_increment must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Cumulative synthetic counts for a pool of `available` samples.
    pub fn counts(&self, available: usize) -> Vec<usize> {
        let cap = self.max_synthetic.min(available);
        let mut out: Vec<usize> = (1..)
            .map(|i| i * self.increment)
            .take_while(|&k| k < cap)
            .collect();
        if cap > 0 {
            out.push(cap);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// `None` on the baseline row.
    pub temperature: Option<f64>,
    pub synthetic_count: usize,
    pub synthetic_ratio: f64,
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub stop_epoch: usize,
}

pub fn synthetic_ratio(synthetic: usize, human: usize) -> f64 {
    if synthetic + human == 0 {
        0.0
    } else {
        synthetic as f64 / (synthetic + human) as f64
    }
}

/// Probabilities on the validation split plus the epoch count of the fit.
#[derive(Debug, Clone)]
pub struct Fit {
    pub valid_probs: Vec<f64>,
    pub stop_epoch: usize,
}

/// Something that can be trained on a labeled set and scored on validation.
pub trait Learner {
    fn fit(
        &mut self,
        train: &[LabeledResponse],
        valid: &[LabeledResponse],
    ) -> Result<Fit, ExperimentError>;

    /// Fit for an augmentation increment; defaults to `fit`.
    fn fit_increment(
        &mut self,
        train: &[LabeledResponse],
        valid: &[LabeledResponse],
        _increment: usize,
    ) -> Result<Fit, ExperimentError> {
        self.fit(train, valid)
    }
}

/// In-process hashed-feature logistic model that keeps its weights between
/// fits.
#[derive(Debug, Clone)]
pub struct NativeLearner {
    pub model: LinearModel,
    pub cfg: TrainingConfig,
    pub epochs_per_increment: Option<usize>,
    increment: usize,
}

impl NativeLearner {
    pub fn new(cfg: TrainingConfig) -> Self {
        NativeLearner {
            model: LinearModel::zeros(cfg.hash_bits),
            cfg,
            epochs_per_increment: None,
            increment: 0,
        }
    }

    pub fn with_epochs_per_increment(mut self, epochs: Option<usize>) -> Self {
        self.epochs_per_increment = epochs;
        self
    }

    fn train(
        &mut self,
        train: &[LabeledResponse],
        valid: &[LabeledResponse],
        fixed: Option<usize>,
    ) -> Result<Fit, ExperimentError> {
        let bits = self.cfg.hash_bits;
        let tr = classifier::to_examples(train, bits);
        let va = classifier::to_examples(valid, bits);
        let wrap = |source| ExperimentError::Training {
            increment: self.increment,
            source,
        };
        let out = match fixed {
            Some(n) => classifier::train_fixed_epochs(&self.model, &tr, &va, n, &self.cfg),
            None => classifier::train_until_saturation(&self.model, &tr, &va, &self.cfg),
        }
        .map_err(wrap)?;
        self.model = out.model;
        Ok(Fit {
            valid_probs: va
                .par_iter()
                .map(|e| self.model.predict_proba(&e.features))
                .collect(),
            stop_epoch: out.stop_epoch,
        })
    }
}

impl Learner for NativeLearner {
    fn fit(
        &mut self,
        train: &[LabeledResponse],
        valid: &[LabeledResponse],
    ) -> Result<Fit, ExperimentError> {
        self.increment = 0;
        self.train(train, valid, None)
    }

    fn fit_increment(
        &mut self,
        train: &[LabeledResponse],
        valid: &[LabeledResponse],
        increment: usize,
    ) -> Result<Fit, ExperimentError> {
        self.increment = increment;
        self.train(train, valid, self.epochs_per_increment)
    }
}

/// Delegates every fit to one external trainer process. Warm starting is
/// the adapter's business; the reported stop epoch is always 0.
pub struct AdapterLearner {
    trainer: ExternalTrainer,
}

impl AdapterLearner {
    pub fn spawn(cfg: &AdapterConfig) -> Result<Self, ExperimentError> {
        let trainer = ExternalTrainer::spawn(cfg).map_err(|source| ExperimentError::Adapter {
            increment: 0,
            source,
        })?;
        Ok(AdapterLearner { trainer })
    }

    pub fn shutdown(self) -> Result<(), ExperimentError> {
        self.trainer
            .shutdown()
            .map_err(|source| ExperimentError::Adapter {
                increment: 0,
                source,
            })
    }
}

impl Learner for AdapterLearner {
    fn fit(
        &mut self,
        train: &[LabeledResponse],
        valid: &[LabeledResponse],
    ) -> Result<Fit, ExperimentError> {
        self.fit_increment(train, valid, 0)
    }

    fn fit_increment(
        &mut self,
        train: &[LabeledResponse],
        valid: &[LabeledResponse],
        increment: usize,
    ) -> Result<Fit, ExperimentError> {
        let valid_probs = self
            .trainer
            .train(train, valid)
            .map_err(|source| ExperimentError::Adapter { increment, source })?;
        Ok(Fit {
            valid_probs,
            stop_epoch: 0,
        })
    }
}

fn check_corpus(corpus: &Corpus) -> Result<(), ExperimentError> {
    if corpus.human_train.is_empty() {
        return Err(ExperimentError::EmptyHumanTrain);
    }
    let has = |l| corpus.validation.iter().any(|r| r.label == l);
    if !(has(Label::Positive) && has(Label::Negative)) {
        return Err(ExperimentError::InvalidValidation);
    }
    Ok(())
}

fn evaluate(
    fit: &Fit,
    corpus: &Corpus,
    temperature: Option<f64>,
    synthetic_count: usize,
    boot: &BootstrapConfig,
) -> Result<CurvePoint, ExperimentError> {
    let labels: Vec<Label> = corpus.validation.iter().map(|r| r.label).collect();
    let ev = bootstrap_auc(&fit.valid_probs, &labels, boot)?;
    Ok(CurvePoint {
        temperature,
        synthetic_count,
        synthetic_ratio: synthetic_ratio(synthetic_count, corpus.human_train.len()),
        auc: ev.auc,
        ci_low: ev.ci_low,
        ci_high: ev.ci_high,
        stop_epoch: fit.stop_epoch,
    })
}

/// Trains on the human split until saturation and scores validation.
pub fn run_baseline<L: Learner>(
    learner: &mut L,
    corpus: &Corpus,
    boot: &BootstrapConfig,
) -> Result<CurvePoint, ExperimentError> {
    run_baseline_by_phase(learner, corpus, boot).map(|(point, _)| point)
}

/// Like `run_baseline`, also returning validation AUC per response phase.
pub fn run_baseline_by_phase<L: Learner>(
    learner: &mut L,
    corpus: &Corpus,
    boot: &BootstrapConfig,
) -> Result<(CurvePoint, BTreeMap<Phase, f64>), ExperimentError> {
    check_corpus(corpus)?;
    let fit = learner.fit(&corpus.human_train, &corpus.validation)?;
    let point = evaluate(&fit, corpus, None, 0, boot)?;
    Ok((point, phase_auc(&corpus.validation, &fit.valid_probs)))
}

/// AUC within each phase of `validation`. Phases without both classes are
/// left out.
pub fn phase_auc(validation: &[LabeledResponse], probs: &[f64]) -> BTreeMap<Phase, f64> {
    let mut groups: BTreeMap<Phase, (Vec<f64>, Vec<Label>)> = BTreeMap::new();
    for (r, &p) in validation.iter().zip(probs) {
        if let Some(phase) = r.phase {
            let g = groups.entry(phase).or_default();
            g.0.push(p);
            g.1.push(r.label);
        }
    }
    groups
        .into_iter()
        .filter_map(|(phase, (s, l))| roc_auc(&s, &l).ok().map(|auc| (phase, auc)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub temperature: f64,
    pub points: Vec<CurvePoint>,
    /// Set when the pool or schedule could not fill the last block.
    pub truncated: bool,
    pub pool_size: usize,
    pub pool_hash: String,
}

/// Adds synthetic samples in cumulative blocks drawn from one seeded shuffle
/// of `pool`, continuing training after each block.
///
/// A pool smaller than `max_synthetic` is an error unless `allow_short_pool`
/// is set, in which case the schedule stops at the pool size.
pub fn run_augmentation<L: Learner>(
    learner: &mut L,
    corpus: &Corpus,
    pool: &[LabeledResponse],
    temperature: f64,
    schedule: &ScheduleConfig,
    boot: &BootstrapConfig,
    allow_short_pool: bool,
) -> Result<Curve, ExperimentError> {
    schedule.validate()?;
    check_corpus(corpus)?;
    if pool.len() < schedule.max_synthetic {
        if !allow_short_pool || pool.is_empty() {
            return Err(ExperimentError::InsufficientPool {
                requested: schedule.max_synthetic,
                available: pool.len(),
            });
        }
        log::warn!(
            "pool at temperature {temperature} holds {} samples; schedule truncated below {}",
            pool.len(),
            schedule.max_synthetic
        );
    }
    let counts = schedule.counts(pool.len());
    let truncated = pool.len() < schedule.max_synthetic
        || !schedule.max_synthetic.is_multiple_of(schedule.increment);
    let order = seeded_permutation(pool.len(), schedule.seed);
    let valid_ids: HashSet<&str> = corpus.validation.iter().map(|r| r.id.as_str()).collect();
    let valid_texts: HashSet<&str> = corpus.validation.iter().map(|r| r.text.as_str()).collect();

    let mut train: Vec<LabeledResponse> = corpus.human_train.clone();
    let mut drawn = 0;
    let mut points = Vec::with_capacity(counts.len());
    for (step, &k) in counts.iter().enumerate() {
        for &i in &order[drawn..k] {
            let rec = &pool[i];
            if valid_ids.contains(rec.id.as_str()) || valid_texts.contains(rec.text.as_str()) {
                return Err(ExperimentError::ValidationLeak(rec.id.clone()));
            }
            train.push(rec.clone());
        }
        drawn = k;
        let fit = learner.fit_increment(&train, &corpus.validation, step + 1)?;
        let point = evaluate(&fit, corpus, Some(temperature), k, boot)?;
        log::info!(
            "t={temperature} n={k} auc={:.4} [{:.4}, {:.4}] epochs={}",
            point.auc,
            point.ci_low,
            point.ci_high,
            point.stop_epoch
        );
        points.push(point);
    }
    Ok(Curve {
        temperature,
        points,
        truncated,
        pool_size: pool.len(),
        pool_hash: pool_hash(pool),
    })
}

/// One baseline plus one curve per temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveTable {
    pub baseline: CurvePoint,
    pub curves: Vec<Curve>,
    /// Fraction of the generated pool kept by consistency filtering, when a
    /// filtered pool was used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retention: Option<f64>,
}

impl CurveTable {
    pub fn rows(&self) -> Vec<CurvePoint> {
        std::iter::once(self.baseline)
            .chain(self.curves.iter().flat_map(|c| c.points.iter().copied()))
            .collect()
    }
}

/// Trains one baseline, then runs an independent augmentation branch per
/// temperature from that snapshot. Branches run in parallel.
pub fn run_experiment_2(
    corpus: &Corpus,
    pools: &BTreeMap<Temperature, Vec<LabeledResponse>>,
    schedule: &ScheduleConfig,
    cfg: &TrainingConfig,
    boot: &BootstrapConfig,
) -> Result<CurveTable, ExperimentError> {
    sweep(corpus, pools, schedule, cfg, boot, false)
}

/// The same protocol on consistency-filtered pools; short pools truncate
/// the schedule instead of failing.
pub fn run_experiment_3(
    corpus: &Corpus,
    filtered: &BTreeMap<Temperature, Vec<LabeledResponse>>,
    retention: f64,
    schedule: &ScheduleConfig,
    cfg: &TrainingConfig,
    boot: &BootstrapConfig,
) -> Result<CurveTable, ExperimentError> {
    let mut table = sweep(corpus, filtered, schedule, cfg, boot, true)?;
    table.retention = Some(retention);
    Ok(table)
}

fn sweep(
    corpus: &Corpus,
    pools: &BTreeMap<Temperature, Vec<LabeledResponse>>,
    schedule: &ScheduleConfig,
    cfg: &TrainingConfig,
    boot: &BootstrapConfig,
    allow_short_pool: bool,
) -> Result<CurveTable, ExperimentError> {
    schedule.validate()?;
    if schedule.temperatures.is_empty() {
        return Err(ExperimentError::Schedule("no temperatures given".into()));
    }
    let branches: Vec<(f64, &[LabeledResponse])> = schedule
        .temperatures
        .iter()
        .map(|&t| {
            pools
                .get(&Temperature(t))
                .map(|p| (t, p.as_slice()))
                .ok_or(ExperimentError::MissingPool(t))
        })
        .collect::<Result<_, _>>()?;
    let mut base =
        NativeLearner::new(cfg.clone()).with_epochs_per_increment(schedule.epochs_per_increment);
    let baseline = run_baseline(&mut base, corpus, boot)?;
    let curves = branches
        .par_iter()
        .map(|&(t, pool)| {
            let mut learner = base.clone();
            run_augmentation(
                &mut learner,
                corpus,
                pool,
                t,
                schedule,
                boot,
                allow_short_pool,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CurveTable {
        baseline,
        curves,
        retention: None,
    })
}

/// SHA-256 over the pool's JSON lines in order.
pub fn pool_hash(pool: &[LabeledResponse]) -> String {
    let mut h = Sha256::new();
    for rec in pool {
        h.update(serde_json::to_vec(rec).expect("records serialize"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> ReportFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        }
    }
}

pub const CSV_HEADER: [&str; 7] = [
    "temperature",
    "synthetic_count",
    "synthetic_ratio",
    "auc",
    "ci_low",
    "ci_high",
    "stop_epoch",
];

/// Provenance block written next to every report. `config` is the resolved
/// run configuration, serialized verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub training: TrainingConfig,
    pub bootstrap: BootstrapConfig,
    pub human_train: usize,
    pub validation: usize,
    pub pool_hashes: BTreeMap<String, String>,
    pub truncated: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retention: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub notes: Vec<String>,
}

impl RunMetadata {
    pub fn new(
        table: &CurveTable,
        corpus: &Corpus,
        schedule: &ScheduleConfig,
        training: &TrainingConfig,
        bootstrap: &BootstrapConfig,
    ) -> Self {
        RunMetadata {
            seed: schedule.seed,
            schedule: schedule.clone(),
            training: training.clone(),
            bootstrap: *bootstrap,
            human_train: corpus.human_train.len(),
            validation: corpus.validation.len(),
            pool_hashes: table
                .curves
                .iter()
                .map(|c| (c.temperature.to_string(), c.pool_hash.clone()))
                .collect(),
            truncated: table.curves.iter().filter(|c| c.truncated).map(|c| c.temperature).collect(),
            retention: table.retention,
            config: None,
            notes: vec!["synthetic_ratio is exact: synthetic_count / (synthetic_count + human_train), unrounded".into()],
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonReport {
    rows: Vec<CurvePoint>,
    metadata: RunMetadata,
}

/// Sidecar path holding the metadata of a CSV report.
pub fn metadata_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".meta.json");
    out.with_file_name(name)
}

fn csv_field(x: f64) -> String {
    format!("{x}")
}

/// Writes the curve rows (baseline first) and the metadata. CSV reports put
/// the metadata in a `.meta.json` sidecar; JSON reports embed it. Returns
/// every path written.
pub fn emit_report(
    table: &CurveTable,
    meta: &RunMetadata,
    format: ReportFormat,
    out: &Path,
) -> Result<Vec<PathBuf>, ExperimentError> {
    let rows = table.rows();
    if rows.is_empty() {
        return Err(ExperimentError::EmptyReport);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(out)?;
            w.write_record(CSV_HEADER)?;
            for r in &rows {
                w.write_record([
                    r.temperature.map(csv_field).unwrap_or_default(),
                    r.synthetic_count.to_string(),
                    csv_field(r.synthetic_ratio),
                    csv_field(r.auc),
                    csv_field(r.ci_low),
                    csv_field(r.ci_high),
                    r.stop_epoch.to_string(),
                ])?;
            }
            w.flush()?;
            let side = metadata_path(out);
            write_json(&side, meta)?;
            Ok(vec![out.to_path_buf(), side])
        }
        ReportFormat::Json => {
            write_json(
                out,
                &JsonReport {
                    rows,
                    metadata: meta.clone(),
                },
            )?;
            Ok(vec![out.to_path_buf()])
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Reads the rows of a CSV report back.
pub fn read_report_rows(path: &Path) -> Result<Vec<CurvePoint>, ExperimentError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, ExperimentError> {
            rec[i].parse().map_err(|_| {
                ExperimentError::Schedule(format!("bad number `{}` in report", &rec[i]))
            })
        };
        rows.push(CurvePoint {
            temperature: if rec[0].is_empty() {
                None
            } else {
                Some(num(0)?)
            },
            synthetic_count: num(1)? as usize,
            synthetic_ratio: num(2)?,
            auc: num(3)?,
            ci_low: num(4)?,
            ci_high: num(5)?,
            stop_epoch: num(6)? as usize,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const POS: [&str; 6] = [
        "heritage",
        "family",
        "traditions",
        "language",
        "festival",
        "hometown",
    ];
    const NEG: [&str; 6] = [
        "worksheet",
        "deadline",
        "notebook",
        "quiz",
        "homework",
        "schedule",
    ];

    fn sample(rng: &mut ChaCha8Rng, label: Label) -> String {
        let fam = if label == Label::Positive { &POS } else { &NEG };
        let a = fam[rng.gen_range(0..fam.len())];
        let b = fam[rng.gen_range(0..fam.len())];
        format!("{a} then {b} #{}", rng.gen::<u32>())
    }

    fn corpus(n_train: usize, n_valid: usize, seed: u64) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut recs = Vec::new();
        for i in 0..n_train + n_valid {
            let label = if i % 2 == 0 {
                Label::Positive
            } else {
                Label::Negative
            };
            let mut r = LabeledResponse::human(format!("h{i}"), sample(&mut rng, label), label);
            if i >= n_train {
                r = r.with_split(Split::Validation);
            }
            recs.push(r);
        }
        Corpus::from_records(recs).unwrap()
    }

    fn pool(n: usize, t: f64, seed: u64) -> Vec<LabeledResponse> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 {
                    Label::Positive
                } else {
                    Label::Negative
                };
                LabeledResponse::synthetic(format!("s{t}-{i}"), sample(&mut rng, label), label, t)
            })
            .collect()
    }

    fn small_cfg() -> (TrainingConfig, BootstrapConfig) {
        (
            TrainingConfig {
                hash_bits: 12,
                max_epochs: 10,
                ..Default::default()
            },
            BootstrapConfig {
                n_resamples: 50,
                ..Default::default()
            },
        )
    }

    #[test]
    fn schedule_counts() {
        let s = ScheduleConfig::default();
        assert_eq!(s.counts(1000), (1..=10).map(|i| i * 25).collect::<Vec<_>>());
        assert_eq!(s.counts(60), vec![25, 50, 60]);
        let odd = ScheduleConfig {
            max_synthetic: 60,
            ..Default::default()
        };
        assert_eq!(odd.counts(1000), vec![25, 50, 60]);
    }

    #[test]
    fn ratio_identity() {
        assert!((synthetic_ratio(200, 51) - 200.0 / 251.0).abs() <= 1e-12);
        assert!((synthetic_ratio(250, 51) - 250.0 / 301.0).abs() <= 1e-12);
        assert_eq!(synthetic_ratio(0, 51), 0.0);
    }

    #[test]
    fn baseline_preconditions() {
        let (cfg, boot) = small_cfg();
        let mut c = corpus(10, 10, 1);
        c.human_train.clear();
        let mut l = NativeLearner::new(cfg.clone());
        assert!(matches!(
            run_baseline(&mut l, &c, &boot),
            Err(ExperimentError::EmptyHumanTrain)
        ));
        let mut c = corpus(10, 10, 1);
        c.validation.retain(|r| r.label == Label::Positive);
        assert!(matches!(
            run_baseline(&mut l, &c, &boot),
            Err(ExperimentError::InvalidValidation)
        ));
    }

    #[test]
    fn separable_baseline_is_strong() {
        let (cfg, boot) = small_cfg();
        let c = corpus(60, 100, 2);
        let p = run_baseline(&mut NativeLearner::new(cfg), &c, &boot).unwrap();
        assert!(p.auc >= 0.95, "{p:?}");
        assert!(p.ci_low <= p.auc && p.auc <= p.ci_high);
    }

    #[test]
    fn augmentation_curve_shape_and_invariants() {
        let (cfg, boot) = small_cfg();
        let c = corpus(51, 40, 3);
        let mut l = NativeLearner::new(cfg);
        run_baseline(&mut l, &c, &boot).unwrap();
        let curve = run_augmentation(
            &mut l,
            &c,
            &pool(300, 0.5, 4),
            0.5,
            &ScheduleConfig::default(),
            &boot,
            false,
        )
        .unwrap();
        assert_eq!(curve.points.len(), 10);
        assert!(!curve.truncated);
        for p in &curve.points {
            assert!(p.ci_low <= p.auc && p.auc <= p.ci_high);
            assert!(
                (p.synthetic_ratio - p.synthetic_count as f64 / (p.synthetic_count + 51) as f64)
                    .abs()
                    <= 1e-12
            );
        }
    }

    /// Records what each fit saw.
    struct Spy {
        seen: Vec<Vec<String>>,
    }

    impl Learner for Spy {
        fn fit(
            &mut self,
            train: &[LabeledResponse],
            valid: &[LabeledResponse],
        ) -> Result<Fit, ExperimentError> {
            self.seen.push(train.iter().map(|r| r.id.clone()).collect());
            Ok(Fit {
                valid_probs: valid.iter().map(|r| r.label.as_f64()).collect(),
                stop_epoch: 1,
            })
        }
    }

    #[test]
    fn increments_are_cumulative_and_isolated() {
        let (_, boot) = small_cfg();
        let c = corpus(5, 10, 5);
        let mut spy = Spy { seen: vec![] };
        let sched = ScheduleConfig {
            increment: 10,
            max_synthetic: 50,
            ..Default::default()
        };
        run_augmentation(&mut spy, &c, &pool(80, 1.0, 6), 1.0, &sched, &boot, false).unwrap();
        assert_eq!(spy.seen.len(), 5);
        for w in spy.seen.windows(2) {
            let prev: HashSet<_> = w[0].iter().collect();
            assert!(prev.iter().all(|id| w[1].contains(id)));
            assert_eq!(w[1].len(), w[0].len() + 10);
        }
        let valid: HashSet<_> = c.validation.iter().map(|r| r.id.clone()).collect();
        assert!(spy.seen.iter().flatten().all(|id| !valid.contains(id)));

        let mut leaky = pool(80, 1.0, 6);
        leaky[0].text = c.validation[0].text.clone();
        let mut spy = Spy { seen: vec![] };
        let sched = ScheduleConfig {
            increment: 80,
            max_synthetic: 80,
            ..Default::default()
        };
        assert!(matches!(
            run_augmentation(&mut spy, &c, &leaky, 1.0, &sched, &boot, false),
            Err(ExperimentError::ValidationLeak(_))
        ));
    }

    #[test]
    fn short_pool_errors_or_truncates() {
        let (_, boot) = small_cfg();
        let c = corpus(5, 10, 7);
        let short = pool(60, 0.3, 8);
        let mut spy = Spy { seen: vec![] };
        let sched = ScheduleConfig::default();
        assert!(matches!(
            run_augmentation(&mut spy, &c, &short, 0.3, &sched, &boot, false),
            Err(ExperimentError::InsufficientPool {
                requested: 250,
                available: 60
            })
        ));
        let curve = run_augmentation(&mut spy, &c, &short, 0.3, &sched, &boot, true).unwrap();
        assert!(curve.truncated);
        assert_eq!(
            curve
                .points
                .iter()
                .map(|p| p.synthetic_count)
                .collect::<Vec<_>>(),
            vec![25, 50, 60]
        );
    }

    fn pools(temps: &[f64]) -> BTreeMap<Temperature, Vec<LabeledResponse>> {
        temps
            .iter()
            .enumerate()
            .map(|(i, &t)| (Temperature(t), pool(260, t, 100 + i as u64)))
            .collect()
    }

    #[test]
    fn sweep_emits_41_rows_deterministically() {
        let (cfg, boot) = small_cfg();
        let c = corpus(51, 30, 9);
        let sched = ScheduleConfig {
            seed: 7,
            ..Default::default()
        };
        let p = pools(&DEFAULT_TEMPERATURES);
        let table = run_experiment_2(&c, &p, &sched, &cfg, &boot).unwrap();
        assert_eq!(table.rows().len(), 41);
        let at200 = table
            .rows()
            .into_iter()
            .find(|r| r.synthetic_count == 200)
            .unwrap();
        assert!((at200.synthetic_ratio - 200.0 / 251.0).abs() <= 1e-12);

        let dir = tempfile::tempdir().unwrap();
        let meta = RunMetadata::new(&table, &c, &sched, &cfg, &boot);
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        emit_report(&table, &meta, ReportFormat::Csv, &a).unwrap();
        let again = run_experiment_2(&c, &p, &sched, &cfg, &boot).unwrap();
        emit_report(
            &again,
            &RunMetadata::new(&again, &c, &sched, &cfg, &boot),
            ReportFormat::Csv,
            &b,
        )
        .unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(
            fs::read(metadata_path(&a)).unwrap(),
            fs::read(metadata_path(&b)).unwrap()
        );

        let text = fs::read_to_string(&a).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(text.lines().count(), 42);
        assert!(text.lines().nth(1).unwrap().starts_with(",0,0,"));
        assert_eq!(read_report_rows(&a).unwrap(), table.rows());
    }

    #[test]
    fn single_temperature_sweep_matches_direct_run() {
        let (cfg, boot) = small_cfg();
        let c = corpus(51, 30, 10);
        let sched = ScheduleConfig {
            temperatures: vec![0.3],
            ..Default::default()
        };
        let p = pools(&[0.3]);
        let table = run_experiment_2(&c, &p, &sched, &cfg, &boot).unwrap();
        let mut l = NativeLearner::new(cfg);
        let base = run_baseline(&mut l, &c, &boot).unwrap();
        let curve =
            run_augmentation(&mut l, &c, &p[&Temperature(0.3)], 0.3, &sched, &boot, false).unwrap();
        assert_eq!(table.baseline, base);
        assert_eq!(table.curves, vec![curve]);
    }

    #[test]
    fn identity_filter_reproduces_unfiltered_curve() {
        let (cfg, boot) = small_cfg();
        let c = corpus(20, 20, 11);
        let sched = ScheduleConfig {
            temperatures: vec![0.5],
            max_synthetic: 50,
            ..Default::default()
        };
        let p = pools(&[0.5]);
        let a = run_experiment_2(&c, &p, &sched, &cfg, &boot).unwrap();
        let b = run_experiment_3(&c, &p, 1.0, &sched, &cfg, &boot).unwrap();
        assert_eq!(a.rows(), b.rows());
        assert_eq!(b.retention, Some(1.0));
    }

    #[test]
    fn missing_pool_is_reported() {
        let (cfg, boot) = small_cfg();
        let c = corpus(10, 10, 12);
        let err = run_experiment_2(&c, &pools(&[0.3]), &ScheduleConfig::default(), &cfg, &boot)
            .unwrap_err();
        assert!(matches!(err, ExperimentError::MissingPool(t) if t == 0.5));
    }

    #[test]
    fn fixed_epoch_mode_reports_that_many_epochs() {
        let (cfg, boot) = small_cfg();
        let c = corpus(20, 20, 13);
        let sched = ScheduleConfig {
            temperatures: vec![1.0],
            max_synthetic: 50,
            epochs_per_increment: Some(2),
            ..Default::default()
        };
        let t = run_experiment_2(&c, &pools(&[1.0]), &sched, &cfg, &boot).unwrap();
        assert!(t.curves[0].points.iter().all(|p| p.stop_epoch == 2));
    }

    #[test]
    fn phase_auc_skips_single_class_phases() {
        let mk = |i: usize, label, phase| {
            LabeledResponse::human(format!("v{i}"), format!("t{i}"), label).with_phase(phase)
        };
        let valid = vec![
            mk(0, Label::Positive, Phase::Predict),
            mk(1, Label::Negative, Phase::Predict),
            mk(2, Label::Positive, Phase::Explain),
            mk(3, Label::Positive, Phase::Explain),
            LabeledResponse::human("v4", "t4", Label::Negative),
        ];
        let by_phase = phase_auc(&valid, &[0.9, 0.1, 0.5, 0.6, 0.2]);
        assert_eq!(by_phase.len(), 1);
        assert_eq!(by_phase[&Phase::Predict], 1.0);
    }
}

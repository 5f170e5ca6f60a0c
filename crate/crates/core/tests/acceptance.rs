//! Acceptance suite. One test per criterion; each prints a PASS line on
//! success and panics (reported as FAILED by the harness) otherwise.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use augmentor::classifier::{
    run_with_patience, AdapterConfig, AdapterError, Example, ExternalTrainer, FeatureVector,
    LinearModel,
};
use augmentor::corpus::{load_corpus, Format, Label};
use augmentor::evaluation::{bootstrap_auc, roc_auc, AgreementReport, BootstrapConfig, Confusion};
use augmentor::experiments::{read_report_rows, synthetic_ratio};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const TEMPS: [&str; 4] = ["0.3", "0.5", "0.7", "1.0"];
const PER_LABEL: [&str; 4] = ["130", "500", "130", "130"];

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixtures() -> PathBuf {
    root().join("fixtures")
}

fn corpus_path() -> PathBuf {
    fixtures().join("corpus.jsonl")
}

fn augmentor<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_augmentor"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn augmentor")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn pass(id: u32, what: &str, elapsed: Duration) {
    println!(
        "PASS criterion {id:>2}: {what} ({:.2}s)",
        elapsed.as_secs_f64()
    );
}

fn generate_pool(dir: &Path, temp: &str, per_label: &str, seed: &str) -> PathBuf {
    let out = dir.join(format!("t{temp}.jsonl"));
    let f = fixtures();
    ok(&augmentor([
        "generate".as_ref(),
        "--pos".as_ref(),
        f.join("templates/positive.json").as_os_str(),
        "--neg".as_ref(),
        f.join("templates/negative.json").as_os_str(),
        "--temperature".as_ref(),
        temp.as_ref(),
        "--per-label".as_ref(),
        per_label.as_ref(),
        "--corpus".as_ref(),
        corpus_path().as_os_str(),
        "--seed".as_ref(),
        seed.as_ref(),
        "--fixtures".as_ref(),
        f.join("llm").as_os_str(),
        "--out".as_ref(),
        out.as_os_str(),
    ]));
    out
}

/// Pools for all four temperatures, replayed once from the shipped fixtures.
fn pools_dir() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        for (t, n) in TEMPS.iter().zip(PER_LABEL) {
            generate_pool(dir.path(), t, n, "7");
        }
        // keep generation sidecars out of the sweep's pool directory
        for t in TEMPS {
            let side = dir.path().join(format!("t{t}.jsonl.generation.json"));
            fs::remove_file(side).unwrap();
        }
        dir
    })
    .path()
}

fn brute_force_auc(scores: &[f64], labels: &[Label]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, li) in labels.iter().enumerate() {
        for (j, lj) in labels.iter().enumerate() {
            if *li == Label::Positive && *lj == Label::Negative {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

#[test]
fn c01_auc_matches_pairwise_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut done = 0;
    while done < 200 {
        let n = rng.gen_range(2..=12);
        let labels: Vec<Label> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    Label::Positive
                } else {
                    Label::Negative
                }
            })
            .collect();
        if labels.iter().all(|l| *l == labels[0]) {
            continue;
        }
        // few distinct values so ties are common
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
        let fast = roc_auc(&scores, &labels).unwrap();
        let slow = brute_force_auc(&scores, &labels);
        assert!(
            (fast - slow).abs() <= 1e-12,
            "{scores:?} {labels:?}: {fast} vs {slow}"
        );
        done += 1;
    }
    let el = t0.elapsed();
    assert!(el < Duration::from_secs(1), "took {el:?}");
    pass(1, "rank AUC equals pairwise fraction on 200 instances", el);
}

#[test]
fn c02_agreement_metrics_on_reference_matrices() {
    let t0 = Instant::now();
    let perfect = AgreementReport::from_confusion(Confusion::from_rows([[50, 0], [0, 50]]));
    assert_eq!(perfect.kappa, Some(1.0));
    assert_eq!(perfect.accuracy, 1.0);
    assert_eq!(
        (perfect.precision, perfect.recall, perfect.f1),
        (1.0, 1.0, 1.0)
    );

    let chance = AgreementReport::from_confusion(Confusion::from_rows([[25, 25], [25, 25]]));
    assert_eq!(chance.kappa, Some(0.0));
    assert_eq!(chance.accuracy, 0.5);
    assert_eq!(
        (chance.precision, chance.recall, chance.f1),
        (0.5, 0.5, 0.5)
    );

    let skew = AgreementReport::from_confusion(Confusion::from_rows([[45, 5], [0, 50]]));
    assert_eq!(skew.n, 100);
    assert_eq!(skew.precision, 1.0);
    assert_eq!(skew.recall, 0.9);
    assert_eq!(skew.accuracy, 0.95);
    assert_eq!(skew.f1, 90.0 / 95.0);
    assert_eq!(skew.kappa, Some(0.9));
    for r in [perfect, chance, skew] {
        assert!(r.is_self_consistent());
    }
    pass(
        2,
        "kappa, accuracy, precision, recall and F1 on three matrices",
        t0.elapsed(),
    );
}

#[test]
fn c03_early_stopping_trace() {
    let t0 = Instant::now();
    let trace = [0.6, 0.7, 0.7, 0.7];
    let sat = run_with_patience(50, 2, |e| Ok::<_, ()>((trace[e - 1], e))).unwrap();
    assert_eq!(sat.stop_epoch, 4);
    assert_eq!(sat.best_epoch, 2);
    assert_eq!(sat.snapshot, 2);

    let sat = run_with_patience(20, 2, |e| Ok::<_, ()>((e as f64 / 100.0, e))).unwrap();
    assert_eq!(sat.stop_epoch, 20);
    assert_eq!(sat.snapshot, 20);
    pass(
        3,
        "patience 2 stops at epoch 4 with the epoch-2 snapshot",
        t0.elapsed(),
    );
}

#[test]
fn c04_grade_and_filter_retain_956() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let pool = generate_pool(dir.path(), "0.5", "500", "7");
    let records = dir.path().join("records.jsonl");
    let kept = dir.path().join("kept.jsonl");
    let manifest = dir.path().join("removed.jsonl");
    let llm = fixtures().join("llm");
    ok(&augmentor([
        "grade".as_ref(),
        "--pool".as_ref(),
        pool.as_os_str(),
        "--fixtures".as_ref(),
        llm.as_os_str(),
        "--out".as_ref(),
        records.as_os_str(),
    ]));
    ok(&augmentor([
        "filter".as_ref(),
        "--pool".as_ref(),
        pool.as_os_str(),
        "--records".as_ref(),
        records.as_os_str(),
        "--out".as_ref(),
        kept.as_os_str(),
        "--manifest".as_ref(),
        manifest.as_os_str(),
    ]));
    let el = t0.elapsed();
    let lines = |p: &Path| {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .filter(|l| !l.trim().is_empty())
            .count()
    };
    assert_eq!(lines(&pool), 1000);
    assert_eq!(lines(&kept), 956);
    assert_eq!(lines(&manifest), 44);
    assert!(el < Duration::from_secs(10), "took {el:?}");
    pass(4, "grade + filter keep 956 of 1000 offline", el);
}

fn numeric_grad(m: &LinearModel, ex: &Example, idx: Option<u32>, h: f64) -> f64 {
    let shifted = |d: f64| {
        let mut c = m.clone();
        match idx {
            None => c.set_bias(c.bias() + d),
            Some(i) => c.weights_mut()[i as usize] += d,
        }
        c.loss(ex)
    };
    (shifted(h) - shifted(-h)) / (2.0 * h)
}

#[test]
fn c05_gradient_matches_finite_differences() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bits = 8;
    let mut pairs_checked = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..150 {
        let mut m = LinearModel::zeros(bits);
        for w in m.weights_mut() {
            *w = rng.gen_range(-2.0..2.0);
        }
        m.set_bias(rng.gen_range(-2.0..2.0));
        let k = rng.gen_range(1..8);
        let feats: Vec<(u32, u32)> = (0..k)
            .map(|_| (rng.gen_range(0..1u32 << bits), rng.gen_range(1..4)))
            .collect();
        let ex = Example {
            features: FeatureVector::from_pairs(bits, feats),
            label: if rng.gen_bool(0.5) {
                Label::Positive
            } else {
                Label::Negative
            },
        };
        let (_, g) = m.loss_and_gradient(&ex);
        let mut coords = vec![(None, g.bias)];
        coords.extend(g.weights.iter().map(|&(i, v)| (Some(i), v)));
        for (idx, analytic) in coords {
            let approx = numeric_grad(&m, &ex, idx, 1e-5);
            let rel = (analytic - approx).abs() / analytic.abs().max(approx.abs()).max(1e-8);
            worst = worst.max(rel);
            assert!(rel <= 1e-4, "{idx:?}: {analytic} vs {approx}");
        }
        pairs_checked += 1;
    }
    let el = t0.elapsed();
    assert!(pairs_checked >= 100);
    assert!(el < Duration::from_secs(5), "took {el:?}");
    pass(
        5,
        &format!("BCE gradients on {pairs_checked} pairs, worst rel err {worst:.1e}"),
        el,
    );
}

#[test]
fn c06_augmentation_lifts_auc() {
    let pools = pools_dir();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("curve.csv");
    let t0 = Instant::now();
    ok(&augmentor([
        "augment".as_ref(),
        "--corpus".as_ref(),
        corpus_path().as_os_str(),
        "--pool".as_ref(),
        pools.join("t0.5.jsonl").as_os_str(),
        "--increment".as_ref(),
        "25".as_ref(),
        "--max-synthetic".as_ref(),
        "250".as_ref(),
        "--seed".as_ref(),
        "7".as_ref(),
        "--out".as_ref(),
        out.as_os_str(),
    ]));
    let el = t0.elapsed();
    let rows = read_report_rows(&out).unwrap();
    assert_eq!(rows.len(), 11, "10 points plus baseline");
    let baseline = rows[0];
    assert_eq!(baseline.synthetic_count, 0);
    for r in &rows {
        assert!(r.ci_low <= r.auc && r.auc <= r.ci_high, "{r:?}");
    }
    let at200 = rows
        .iter()
        .find(|r| r.synthetic_count == 200)
        .expect("row at 200");
    let gain = at200.auc - baseline.auc;
    assert!(
        gain >= 0.05,
        "baseline {} -> {} at 200",
        baseline.auc,
        at200.auc
    );
    assert!(el < Duration::from_secs(60), "took {el:?}");
    pass(
        6,
        &format!(
            "AUC {:.3} -> {:.3} at 200 synthetic (+{gain:.3})",
            baseline.auc, at200.auc
        ),
        el,
    );
}

#[test]
fn c07_sweep_emits_41_rows() {
    let pools = pools_dir();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let t0 = Instant::now();
    ok(&augmentor([
        "sweep".as_ref(),
        "--corpus".as_ref(),
        corpus_path().as_os_str(),
        "--pools-dir".as_ref(),
        pools.as_os_str(),
        "--temps".as_ref(),
        "0.3,0.5,0.7,1.0".as_ref(),
        "--seed".as_ref(),
        "7".as_ref(),
        "--out".as_ref(),
        out.as_os_str(),
    ]));
    let rows = read_report_rows(&out).unwrap();
    assert_eq!(rows.len(), 41);
    assert_eq!(rows.iter().filter(|r| r.temperature.is_none()).count(), 1);
    let at200: Vec<_> = rows.iter().filter(|r| r.synthetic_count == 200).collect();
    assert_eq!(at200.len(), 4);
    let want = 200.0 / 251.0;
    for r in at200 {
        assert!(
            (r.synthetic_ratio - want).abs() <= 1e-12,
            "{}",
            r.synthetic_ratio
        );
    }
    assert!((synthetic_ratio(200, 51) - want).abs() <= 1e-12);
    pass(
        7,
        "4-temperature sweep gives 41 rows, ratio 200/251 at 200",
        t0.elapsed(),
    );
}

fn offline_pipeline(dir: &Path) -> Vec<PathBuf> {
    let llm = fixtures().join("llm");
    let pool = generate_pool(dir, "0.7", "130", "11");
    let records = dir.join("records.jsonl");
    let kept = dir.join("kept.jsonl");
    let manifest = dir.join("removed.jsonl");
    let baseline = dir.join("baseline.json");
    let model = dir.join("model.json");
    let curve = dir.join("curve.json");
    let table = dir.join("table.csv");
    let steps: Vec<Vec<&std::ffi::OsStr>> = vec![
        vec![
            "grade".as_ref(),
            "--pool".as_ref(),
            pool.as_os_str(),
            "--fixtures".as_ref(),
            llm.as_os_str(),
            "--out".as_ref(),
            records.as_os_str(),
        ],
        vec![
            "filter".as_ref(),
            "--pool".as_ref(),
            pool.as_os_str(),
            "--records".as_ref(),
            records.as_os_str(),
            "--out".as_ref(),
            kept.as_os_str(),
            "--manifest".as_ref(),
            manifest.as_os_str(),
        ],
        vec![
            "train-baseline".as_ref(),
            "--corpus".as_ref(),
            corpus_path().into_os_string().leak(),
            "--seed".as_ref(),
            "11".as_ref(),
            "--out".as_ref(),
            baseline.as_os_str(),
            "--model-out".as_ref(),
            model.as_os_str(),
        ],
        vec![
            "augment".as_ref(),
            "--corpus".as_ref(),
            corpus_path().into_os_string().leak(),
            "--pool".as_ref(),
            pool.as_os_str(),
            "--increment".as_ref(),
            "50".as_ref(),
            "--max-synthetic".as_ref(),
            "100".as_ref(),
            "--seed".as_ref(),
            "11".as_ref(),
            "--out".as_ref(),
            curve.as_os_str(),
        ],
        vec![
            "report".as_ref(),
            "--input".as_ref(),
            curve.as_os_str(),
            "--out".as_ref(),
            table.as_os_str(),
        ],
    ];
    for s in steps {
        ok(&augmentor(s));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
}

#[test]
fn c08_offline_runs_are_byte_identical() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let snapshot = |files: &[PathBuf]| {
        files
            .iter()
            .map(|p| (p.clone(), fs::read(p).unwrap()))
            .collect::<Vec<_>>()
    };
    let first = snapshot(&offline_pipeline(dir.path()));
    let second = snapshot(&offline_pipeline(dir.path()));
    assert!(
        first.len() >= 9,
        "{:?}",
        first.iter().map(|f| &f.0).collect::<Vec<_>>()
    );
    assert_eq!(first.len(), second.len());
    for ((pa, a), (pb, b)) in first.iter().zip(&second) {
        assert_eq!(pa, pb);
        assert!(a == b, "{} differs between runs", pa.display());
    }
    pass(
        8,
        &format!("{} output files identical across two runs", first.len()),
        t0.elapsed(),
    );
}

#[test]
fn c09_bootstrap_degenerates_on_constant_scores() {
    let t0 = Instant::now();
    let scores = vec![0.42; 40];
    let labels: Vec<Label> = (0..40)
        .map(|i| {
            if i % 2 == 0 {
                Label::Positive
            } else {
                Label::Negative
            }
        })
        .collect();
    let cfg = BootstrapConfig {
        n_resamples: 1000,
        ci_level: 0.95,
        seed: 9,
    };
    let r = bootstrap_auc(&scores, &labels, &cfg).unwrap();
    assert_eq!((r.auc, r.ci_low, r.ci_high), (0.5, 0.5, 0.5));
    assert_eq!(r.n_resamples, 1000);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noisy: Vec<f64> = (0..40).map(|_| rng.gen()).collect();
    let x = bootstrap_auc(&noisy, &labels, &cfg).unwrap();
    let y = bootstrap_auc(&noisy, &labels, &cfg).unwrap();
    assert_eq!(x.ci_low.to_bits(), y.ci_low.to_bits());
    assert_eq!(x.ci_high.to_bits(), y.ci_high.to_bits());
    pass(
        9,
        "constant scores give CI [0.5, 0.5]; same seed, same bounds",
        t0.elapsed(),
    );
}

#[test]
fn c10_adapter_protocol() {
    let t0 = Instant::now();
    let stub = env!("CARGO_BIN_EXE_augmentor-stub-adapter");
    let corpus = load_corpus(&corpus_path(), Format::Jsonl).unwrap();

    let truth = AdapterConfig::with_command(vec![stub.into(), "--mode".into(), "truth".into()]);
    let mut trainer = ExternalTrainer::spawn(&truth).unwrap();
    let probs = trainer
        .train(&corpus.human_train, &corpus.validation)
        .unwrap();
    trainer.shutdown().unwrap();
    let labels: Vec<Label> = corpus.validation.iter().map(|r| r.label).collect();
    assert_eq!(roc_auc(&probs, &labels).unwrap(), 1.0);

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("baseline.json");
    let run = |mode: &str| {
        augmentor([
            "train-baseline".as_ref(),
            "--corpus".as_ref(),
            corpus_path().as_os_str(),
            "--adapter".as_ref(),
            format!("{stub} --mode {mode}").as_ref(),
            "--out".as_ref(),
            out.as_os_str(),
        ])
    };
    let good = run("truth");
    ok(&good);
    let report: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["baseline"]["auc"].as_f64(), Some(1.0));

    let malformed =
        AdapterConfig::with_command(vec![stub.into(), "--mode".into(), "malformed".into()]);
    let mut trainer = ExternalTrainer::spawn(&malformed).unwrap();
    let err = trainer
        .train(&corpus.human_train, &corpus.validation)
        .unwrap_err();
    assert!(matches!(err, AdapterError::ProtocolError(_)), "{err:?}");
    drop(trainer);

    let bad = run("malformed");
    assert_eq!(
        bad.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&bad.stderr)
    );
    pass(
        10,
        "truth stub gives AUC 1.0; malformed stub gives ProtocolError, exit 3",
        t0.elapsed(),
    );
}

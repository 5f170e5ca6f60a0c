//! Regenerates the offline fixture set: a mock human corpus, prompt
//! templates, and replayable LLM responses for generation and grading.
//!
//!     cargo run -p augmentor --example make_fixtures -- fixtures
//!
//! The mock task has two disjoint families of cue sentences. Replies that
//! invite the student's background use the cultural family (label 1);
//! replies about tasks and rules use the task family (label 0). Human
//! labels carry noise; synthetic labels do not, except where noted per
//! temperature.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use augmentor::consistency::GradingTemplate;
use augmentor::corpus::{save_pool, Label, LabeledResponse, Phase, Split};
use augmentor::gateway::{FixtureStore, Gateway};
use augmentor::generator::{generate_pool, render_prompt, GenerationConfig, PromptTemplate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CULTURAL: [&str; 40] = [
    "what holidays does your family celebrate",
    "which language do you speak at home",
    "what food from back home do you miss",
    "what games did kids play where you grew up",
    "how was math taught at your old school",
    "do your grandparents tell stories about their village",
    "what music does your family listen to on weekends",
    "what does your hometown look like in winter",
    "could you teach me a greeting in your language",
    "what festival were you looking forward to this year",
    "what dishes does your mom cook for birthdays",
    "which traditions from your country matter most to you",
    "do you have cousins who still live abroad",
    "how do people count money in your country",
    "what was your favorite place in your old neighborhood",
    "does your family share proverbs I could learn",
    "what songs did you sing at your previous school",
    "how do families there celebrate the new year",
    "what sports are popular where you come from",
    "which customs here feel strange compared to home",
    "what market did your family shop at back home",
    "could we use recipes from your culture for fractions",
    "how do you say numbers in your first language",
    "what do you miss about your relatives overseas",
    "what clothes do people wear for special ceremonies there",
    "does your community here have a cultural center",
    "what stories did your parents share about their childhood",
    "which dances are traditional in your region",
    "what street foods do people buy after school there",
    "is there a family heirloom that means a lot to you",
    "how are weddings celebrated in your culture",
    "what was the weather like in your home city",
    "which historical heroes do students learn about there",
    "do you watch shows in your native language",
    "what board games does your family play together",
    "how did you spend summer vacations before moving",
    "what crafts are made by hand in your hometown",
    "which religious or seasonal days does your family observe",
    "how do you stay in touch with friends from home",
    "what surprised you most when you arrived in this country",
];

const TASK: [&str; 40] = [
    "please finish the worksheet before the bell rings",
    "remember to bring your notebook next session",
    "the homework is due on friday without exceptions",
    "show every step when you solve problem four",
    "try to arrive on time so we can cover more problems",
    "let us review the rules for dividing fractions",
    "copy the formula from the board into your notes",
    "the quiz covers chapters two and three",
    "put your phone away during practice time",
    "check your answers with a calculator afterwards",
    "we need to complete twelve exercises today",
    "your grade depends on turning in assignments",
    "underline the key numbers in each word problem",
    "write neatly so the teacher can read your work",
    "start with the easy questions and skip the hard ones",
    "the test schedule is posted on the classroom door",
    "sharpen your pencil before we begin the drill",
    "follow the example on page thirty two",
    "raise your hand if you get stuck on a step",
    "we will time this set for ten minutes",
    "use graph paper to line up the decimals",
    "memorize the multiplication table up to twelve",
    "label the units on every answer",
    "hand me the completed packet when you are done",
    "the late policy takes off points each day",
    "keep your backpack organized with one folder per subject",
    "read the directions twice before answering",
    "practice long division for twenty minutes tonight",
    "circle the operation each problem asks for",
    "sign the attendance sheet at the front desk",
    "erase stray marks on the answer grid",
    "bring a ruler for the geometry unit",
    "redo the problems you missed on the last quiz",
    "the textbook must stay in the library",
    "stay seated until the session officially ends",
    "estimate first and then compute the exact value",
    "list the factors of each number in the table",
    "turn the worksheet over when you finish side one",
    "we follow the same routine at every session",
    "make flashcards for the vocabulary terms",
];

const GENERIC: [&str; 12] = [
    "let us get started whenever you are ready",
    "we have a lot to cover today",
    "how are you doing this afternoon",
    "it is nice to see you again",
    "we can take it one problem at a time",
    "I am here to help with whatever you need",
    "take a deep breath and we will begin",
    "today should be a productive session",
    "tell me when you want to take a short break",
    "we will see how far we get this time",
    "good job settling in so quickly",
    "everyone learns at a different pace",
];

const OPENERS: [&str; 12] = [
    "Hi there!",
    "Good to see you.",
    "Before we start,",
    "Quick question:",
    "Okay,",
    "Welcome back.",
    "Hey,",
    "So,",
    "Alright,",
    "Thanks for coming.",
    "Let me ask,",
    "Just so you know,",
];

const CLOSERS: [&str; 12] = [
    "",
    "Take your time.",
    "Sound good?",
    "I am glad you are here.",
    "No pressure at all.",
    "We can go slowly.",
    "Thanks!",
    "Let me know.",
    "That would help me a lot.",
    "Ready when you are.",
    "We have plenty of time.",
    "I appreciate it.",
];

/// Words sprinkled into high-temperature generations.
const DRIFT: [&str; 10] = [
    "honestly",
    "basically",
    "truly",
    "really",
    "kind of",
    "actually",
    "literally",
    "maybe",
    "definitely",
    "somehow",
];

struct Writer {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

fn sentence(cue: &str) -> String {
    let mut s = cue.to_string();
    let question = ["what", "which", "how", "do", "does", "could", "is"]
        .iter()
        .any(|w| s.starts_with(&format!("{w} ")));
    s.push(if question { '?' } else { '.' });
    s
}

impl Writer {
    fn new(seed: u64) -> Self {
        Writer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used: HashSet::new(),
        }
    }

    /// A fresh text built around `cue`, never repeated across the fixture set.
    fn text(&mut self, cue: &str, drift: bool) -> String {
        loop {
            let opener = OPENERS[self.rng.gen_range(0..OPENERS.len())];
            let closer = CLOSERS[self.rng.gen_range(0..CLOSERS.len())];
            let mut body = sentence(cue);
            if drift {
                let w = DRIFT[self.rng.gen_range(0..DRIFT.len())];
                body = format!("{w}, {body}");
            }
            if self.rng.gen_bool(0.5) {
                let g = GENERIC[self.rng.gen_range(0..GENERIC.len())];
                body = format!("{body} {}", sentence(g));
            }
            let mut text = format!("{opener} {body}");
            if !closer.is_empty() {
                text = format!("{text} {closer}");
            }
            if self.used.insert(text.clone()) {
                return text;
            }
        }
    }

    fn cue(&mut self, label: Label, width: usize) -> &'static str {
        let fam: &[&str] = if label == Label::Positive {
            &CULTURAL
        } else {
            &TASK
        };
        fam[self.rng.gen_range(0..width.min(fam.len()))]
    }

    fn generic(&mut self) -> String {
        loop {
            let opener = OPENERS[self.rng.gen_range(0..OPENERS.len())];
            let g = GENERIC[self.rng.gen_range(0..GENERIC.len())];
            let closer = CLOSERS[self.rng.gen_range(1..CLOSERS.len())];
            let text = format!("{opener} {} {closer}", sentence(g));
            if self.used.insert(text.clone()) {
                return text;
            }
        }
    }
}

fn corpus(w: &mut Writer) -> Vec<LabeledResponse> {
    let mut out = Vec::new();
    let human = |w: &mut Writer, id: String, label: Label, noise: f64| {
        let cue = w.cue(label, CULTURAL.len());
        let text = w.text(cue, false);
        let observed = if w.rng.gen_bool(noise) {
            label.flipped()
        } else {
            label
        };
        LabeledResponse::human(id, text, observed)
    };
    for i in 0..51 {
        let label = if i % 2 == 0 {
            Label::Positive
        } else {
            Label::Negative
        };
        out.push(
            human(w, format!("human-train-{:03}", i + 1), label, 0.12).with_phase(Phase::Predict),
        );
    }
    for i in 0..256 {
        let label = if w.rng.gen_bool(0.5) {
            Label::Positive
        } else {
            Label::Negative
        };
        let phase = if i < 102 {
            Phase::Predict
        } else {
            Phase::Explain
        };
        out.push(
            human(w, format!("human-valid-{:03}", i + 1), label, 0.06)
                .with_split(Split::Validation)
                .with_phase(phase),
        );
    }
    out
}

/// How one temperature's generations look.
struct Flavor {
    temperature: f64,
    batches: usize,
    /// Only the first `width` cues of each family are used.
    width: usize,
    /// Share of lines that use the other family's cue.
    off_family: f64,
    drift: bool,
    /// Positive lines with no cultural cue at all.
    weak_positives: usize,
}

const FLAVORS: [Flavor; 4] = [
    Flavor {
        temperature: 0.3,
        batches: 13,
        width: 20,
        off_family: 0.0,
        drift: false,
        weak_positives: 0,
    },
    Flavor {
        temperature: 0.5,
        batches: 50,
        width: 40,
        off_family: 0.0,
        drift: false,
        weak_positives: 44,
    },
    Flavor {
        temperature: 0.7,
        batches: 13,
        width: 40,
        off_family: 0.04,
        drift: false,
        weak_positives: 0,
    },
    Flavor {
        temperature: 1.0,
        batches: 13,
        width: 40,
        off_family: 0.12,
        drift: true,
        weak_positives: 0,
    },
];

const BATCH: usize = 10;

/// Renders one batch in one of several list styles the parser accepts.
fn format_batch(lines: &[String], style: usize) -> String {
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        match style % 4 {
            0 => out.push_str(l),
            1 => out.push_str(&format!("{}. {l}", i + 1)),
            2 => out.push_str(&format!("- {l}")),
            _ => out.push_str(&format!("{}) {l}\n", i + 1)),
        }
        out.push('\n');
    }
    out
}

fn grading_reply(score: u8, style: usize, rng: &mut ChaCha8Rng) -> String {
    let reason = if score == 1 {
        "The tutor invites the student to share their background."
    } else {
        "The reply stays on the task and makes no cultural connection."
    };
    match style % 5 {
        0 => format!("{{\"Score\": {score}, \"Reason\": \"{reason}\"}}"),
        1 => format!("```json\n{{\n  \"Score\": {score},\n  \"Reason\": \"{reason}\"\n}}\n```"),
        2 => format!("Here is my assessment of the response.\n{{\"Score\": {score}, \"Reason\": \"{reason}\"}}"),
        3 => format!("{{\"score\": {score}, \"reason\": \"{reason}\"}}"),
        _ => {
            let conf: f64 = rng.gen_range(0.6..0.99);
            format!("{{\"Reason\": \"{reason}\", \"Score\": {score}, \"Confidence\": {conf:.2}}}\nLet me know if you need more detail.")
        }
    }
}

/// Texts generated for one flavor, grouped by template: positive then
/// negative. Each entry records the score a faithful grader would give.
fn pool_lines(w: &mut Writer, f: &Flavor) -> [Vec<(String, u8)>; 2] {
    let per_label = f.batches * BATCH;
    let mut out: [Vec<(String, u8)>; 2] = [Vec::new(), Vec::new()];
    for (slot, label) in [Label::Positive, Label::Negative].into_iter().enumerate() {
        let mut weak: Vec<bool> = (0..per_label)
            .map(|i| label == Label::Positive && i < f.weak_positives)
            .collect();
        weak.shuffle(&mut w.rng);
        for is_weak in weak {
            let (text, score) = if is_weak {
                (w.generic(), 0)
            } else if w.rng.gen_bool(f.off_family) {
                let other = label.flipped();
                let cue = w.cue(other, f.width);
                (w.text(cue, f.drift), other.as_u8())
            } else {
                let cue = w.cue(label, f.width);
                (w.text(cue, f.drift), label.as_u8())
            };
            out[slot].push((text, score));
        }
    }
    out
}

fn main() {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    let llm = root.join("llm");
    if llm.exists() {
        fs::remove_dir_all(&llm).expect("clear old fixtures");
    }
    fs::create_dir_all(root.join("templates")).unwrap();
    let store = FixtureStore::create(&llm).unwrap();

    let mut w = Writer::new(20240917);
    let human = corpus(&mut w);
    save_pool(&human, &root.join("corpus.jsonl")).unwrap();
    let human_texts: HashSet<String> = human.iter().map(|r| r.text.clone()).collect();

    let pos = PromptTemplate::default_positive();
    let neg = PromptTemplate::default_negative();
    let grading = GradingTemplate::default_rubric();
    write_json(&root.join("templates/positive.json"), &pos);
    write_json(&root.join("templates/negative.json"), &neg);
    write_json(&root.join("templates/grading.json"), &grading);

    let mut style = 0;
    for f in &FLAVORS {
        let cfg = GenerationConfig {
            temperature: f.temperature,
            batch_size: BATCH,
            n_total_per_label: f.batches * BATCH,
            ..Default::default()
        };
        let lines = pool_lines(&mut w, f);
        for (tpl, texts) in [(&pos, &lines[0]), (&neg, &lines[1])] {
            let req = render_prompt(tpl, &cfg).unwrap();
            for (b, chunk) in texts.chunks(BATCH).enumerate() {
                let batch: Vec<String> = chunk.iter().map(|(t, _)| t.clone()).collect();
                store
                    .write(&req, b, &format_batch(&batch, b + style))
                    .unwrap();
            }
            style += 1;
        }

        // replay what was just written to confirm the pool comes back whole
        let gw = Gateway::replay(FixtureStore::open(&llm));
        let outcome = generate_pool(&pos, &neg, &cfg, &gw, &human_texts).unwrap();
        assert_eq!(
            outcome.pool.len(),
            2 * cfg.n_total_per_label,
            "t={}",
            f.temperature
        );
        assert_eq!(
            outcome.report.duplicates_dropped + outcome.report.leaks_dropped,
            0
        );

        let scores: std::collections::HashMap<&str, u8> = lines
            .iter()
            .flatten()
            .map(|(t, s)| (t.as_str(), *s))
            .collect();
        let mut mismatches = 0;
        for (i, rec) in outcome.pool.iter().enumerate() {
            let score = scores[rec.text.as_str()];
            if score != rec.label.as_u8() {
                mismatches += 1;
            }
            let req = grading.render(&rec.text).unwrap();
            store
                .write(&req, 0, &grading_reply(score, i, &mut w.rng))
                .unwrap();
        }
        eprintln!(
            "t={}: {} samples, {} self-grading mismatches",
            f.temperature,
            outcome.pool.len(),
            mismatches
        );
    }
    eprintln!(
        "{} fixture files in {}",
        store.len().unwrap(),
        llm.display()
    );
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) {
    let mut body = serde_json::to_string_pretty(value).unwrap();
    body.push('\n');
    fs::write(path, body).unwrap();
}

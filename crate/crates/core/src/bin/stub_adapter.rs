//! Minimal external trainer for exercising the adapter protocol.
//!
//! Modes: `uniform` answers 0.5 everywhere, `truth` echoes the labels it
//! was given, `malformed` replies with a non-JSON line, `crash` exits with
//! status 70 on the first request.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use clap::{Parser, ValueEnum};
use serde_json::{json, Value};

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Uniform,
    Truth,
    Malformed,
    Crash,
}

#[derive(Parser)]
struct Opts {
    #[arg(long, value_enum, default_value = "uniform")]
    mode: Mode,
}

fn labels(items: &Value, known: &mut HashMap<String, f64>) -> Vec<f64> {
    items
        .as_array()
        .map(|a| {
            a.iter()
                .map(|s| {
                    let p = s["label"].as_f64().unwrap_or(0.5);
                    if let Some(t) = s["text"].as_str() {
                        known.insert(t.to_string(), p);
                    }
                    p
                })
                .collect()
        })
        .unwrap_or_default()
}

fn main() {
    let opts = Opts::parse();
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    let mut known = HashMap::new();
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let reply = match opts.mode {
            Mode::Crash => std::process::exit(70),
            Mode::Malformed => "probabilities: soon".to_string(),
            _ => {
                let req: Value = match serde_json::from_str(&line) {
                    Ok(v) => v,
                    Err(e) => {
                        writeln!(
                            out,
                            "{}",
                            json!({"status": "error", "message": e.to_string()})
                        )
                        .ok();
                        out.flush().ok();
                        continue;
                    }
                };
                match req["cmd"].as_str() {
                    Some("train") => {
                        labels(&req["train"], &mut known);
                        let truth = labels(&req["valid"], &mut known);
                        let probs: Vec<f64> = match opts.mode {
                            Mode::Truth => truth,
                            _ => vec![0.5; truth.len()],
                        };
                        json!({"status": "ok", "valid_probs": probs}).to_string()
                    }
                    Some("predict") => {
                        let texts = req["texts"].as_array().cloned().unwrap_or_default();
                        let probs: Vec<f64> = texts
                            .iter()
                            .map(|t| match opts.mode {
                                Mode::Truth => t
                                    .as_str()
                                    .and_then(|t| known.get(t))
                                    .copied()
                                    .unwrap_or(0.5),
                                _ => 0.5,
                            })
                            .collect();
                        json!({"status": "ok", "probs": probs}).to_string()
                    }
                    _ => json!({"status": "error", "message": "unknown cmd"}).to_string(),
                }
            }
        };
        if writeln!(out, "{reply}").and_then(|_| out.flush()).is_err() {
            break;
        }
    }
}

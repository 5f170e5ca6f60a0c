//! Line-delimited JSON protocol for external trainers.
//!
//! The adapter is a child process reading one request per line on stdin and
//! answering one reply per line on stdout:
//!
//! ```text
//! > {"cmd":"train","train":[{"id":..,"text":..,"label":0|1}],"valid":[...],"config":{...}}
//! < {"status":"ok","valid_probs":[p0, p1, ...]}
//! > {"cmd":"predict","texts":["..."]}
//! < {"status":"ok","probs":[...]}
//! ```
//!
//! A reply with `"status":"error"` carries a `"message"`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{Label, LabeledResponse};

pub const DEFAULT_TIMEOUT_SECS: u64 = 3600;
pub const DEFAULT_ADAPTER_LEARNING_RATE: f64 = 2e-5;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("adapter command is empty")]
    EmptyCommand,
    #[error("failed to spawn adapter: {0}")]
    Spawn(#[source] std::io::Error),
    #[error("adapter exited with code {0:?}")]
    AdapterCrashed(Option<i32>),
    #[error("adapter protocol error: {0}")]
    ProtocolError(String),
    #[error("adapter reported failure: {0}")]
    AdapterFailed(String),
    #[error("adapter did not reply within {0:?}")]
    Timeout(Duration),
    #[error("adapter I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub command: Vec<String>,
    pub timeout_secs: u64,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            command: Vec::new(),
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            learning_rate: DEFAULT_ADAPTER_LEARNING_RATE,
            patience: 2,
            max_epochs: 50,
            seed: 0,
        }
    }
}

impl AdapterConfig {
    pub fn with_command(command: Vec<String>) -> Self {
        AdapterConfig {
            command,
            ..Default::default()
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

#[derive(Serialize)]
struct WireSample<'a> {
    id: &'a str,
    text: &'a str,
    label: Label,
}

#[derive(Serialize)]
struct WireConfig {
    learning_rate: f64,
    patience: usize,
    max_epochs: usize,
    seed: u64,
}

#[derive(Serialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
enum Request<'a> {
    Train {
        train: Vec<WireSample<'a>>,
        valid: Vec<WireSample<'a>>,
        config: WireConfig,
    },
    Predict {
        texts: Vec<&'a str>,
    },
}

fn wire(records: &[LabeledResponse]) -> Vec<WireSample<'_>> {
    records
        .iter()
        .map(|r| WireSample {
            id: &r.id,
            text: &r.text,
            label: r.label,
        })
        .collect()
}

enum Line {
    Text(String),
    Eof,
    Failed(std::io::Error),
}

pub struct ExternalTrainer {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<Line>,
    cfg: AdapterConfig,
}

impl ExternalTrainer {
    pub fn spawn(cfg: &AdapterConfig) -> Result<Self, AdapterError> {
        let (program, args) = cfg
            .command
            .split_first()
            .ok_or(AdapterError::EmptyCommand)?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(AdapterError::Spawn)?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout was piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut buf = String::new();
                let msg = match reader.read_line(&mut buf) {
                    Ok(0) => Line::Eof,
                    Ok(_) => Line::Text(buf),
                    Err(e) => Line::Failed(e),
                };
                let done = !matches!(msg, Line::Text(_));
                if tx.send(msg).is_err() || done {
                    break;
                }
            }
        });
        Ok(ExternalTrainer {
            child,
            stdin,
            lines: rx,
            cfg: cfg.clone(),
        })
    }

    fn exit_code(&mut self) -> Option<i32> {
        // give a dying child a moment to be reaped
        for _ in 0..50 {
            if let Ok(Some(status)) = self.child.try_wait() {
                return status.code();
            }
            thread::sleep(Duration::from_millis(10));
        }
        None
    }

    fn roundtrip(&mut self, request: &Request<'_>) -> Result<Value, AdapterError> {
        let mut line = serde_json::to_string(request)
            .map_err(|e| AdapterError::ProtocolError(e.to_string()))?;
        line.push('\n');
        let stdin = self
            .stdin
            .as_mut()
            .ok_or(AdapterError::AdapterCrashed(None))?;
        if let Err(e) = stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush()) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                let code = self.exit_code();
                return Err(AdapterError::AdapterCrashed(code));
            }
            return Err(e.into());
        }
        let reply = match self.lines.recv_timeout(self.cfg.timeout()) {
            Ok(Line::Text(t)) => t,
            Ok(Line::Failed(e)) => return Err(e.into()),
            Ok(Line::Eof) | Err(RecvTimeoutError::Disconnected) => {
                let code = self.exit_code();
                return Err(AdapterError::AdapterCrashed(code));
            }
            Err(RecvTimeoutError::Timeout) => {
                let _ = self.child.kill();
                return Err(AdapterError::Timeout(self.cfg.timeout()));
            }
        };
        let reply = reply.trim_end();
        let value: Value = serde_json::from_str(reply)
            .map_err(|_| AdapterError::ProtocolError(reply.to_string()))?;
        match value.get("status").and_then(Value::as_str) {
            Some("ok") => Ok(value),
            Some("error") => Err(AdapterError::AdapterFailed(
                value
                    .get("message")
                    .and_then(Value::as_str)
                    .unwrap_or("unspecified")
                    .to_string(),
            )),
            _ => Err(AdapterError::ProtocolError(reply.to_string())),
        }
    }

    fn probs(value: &Value, key: &str, expected: usize) -> Result<Vec<f64>, AdapterError> {
        let bad = || AdapterError::ProtocolError(value.to_string());
        let arr = value.get(key).and_then(Value::as_array).ok_or_else(bad)?;
        if arr.len() != expected {
            return Err(AdapterError::ProtocolError(format!(
                "expected {expected} probabilities in `{key}`, got {}",
                arr.len()
            )));
        }
        arr.iter()
            .map(|v| {
                v.as_f64()
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(bad)
            })
            .collect()
    }

    /// Trains on `train` and returns probabilities aligned with `valid`.
    pub fn train(
        &mut self,
        train: &[LabeledResponse],
        valid: &[LabeledResponse],
    ) -> Result<Vec<f64>, AdapterError> {
        let req = Request::Train {
            train: wire(train),
            valid: wire(valid),
            config: WireConfig {
                learning_rate: self.cfg.learning_rate,
                patience: self.cfg.patience,
                max_epochs: self.cfg.max_epochs,
                seed: self.cfg.seed,
            },
        };
        let reply = self.roundtrip(&req)?;
        Self::probs(&reply, "valid_probs", valid.len())
    }

    pub fn predict(&mut self, texts: &[&str]) -> Result<Vec<f64>, AdapterError> {
        let reply = self.roundtrip(&Request::Predict {
            texts: texts.to_vec(),
        })?;
        Self::probs(&reply, "probs", texts.len())
    }

    /// Closes stdin and waits for the child to exit.
    pub fn shutdown(mut self) -> Result<(), AdapterError> {
        self.stdin.take();
        let status = self.child.wait()?;
        if status.success() {
            Ok(())
        } else {
            Err(AdapterError::AdapterCrashed(status.code()))
        }
    }
}

impl Drop for ExternalTrainer {
    fn drop(&mut self) {
        self.stdin.take();
        if let Ok(None) = self.child.try_wait() {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}

/// Spawns the adapter, runs one train command and returns the validation
/// probabilities.
pub fn external_trainer_roundtrip(
    cfg: &AdapterConfig,
    train: &[LabeledResponse],
    valid: &[LabeledResponse],
) -> Result<Vec<f64>, AdapterError> {
    let mut trainer = ExternalTrainer::spawn(cfg)?;
    let probs = trainer.train(train, valid)?;
    trainer.shutdown()?;
    Ok(probs)
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;

    fn sh(script: &str) -> AdapterConfig {
        AdapterConfig::with_command(vec!["sh".into(), "-c".into(), script.into()])
    }

    fn data() -> Vec<LabeledResponse> {
        vec![
            LabeledResponse::human("a", "one", Label::Positive),
            LabeledResponse::human("b", "two", Label::Negative),
        ]
    }

    #[test]
    fn ok_reply_is_aligned() {
        let cfg = sh(r#"read line; echo '{"status":"ok","valid_probs":[0.9,0.1]}'"#);
        let probs = external_trainer_roundtrip(&cfg, &data(), &data()).unwrap();
        assert_eq!(probs, vec![0.9, 0.1]);
    }

    #[test]
    fn request_line_has_exact_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("req.json");
        let cfg = sh(&format!(
            r#"read line; printf '%s' "$line" > {}; echo '{{"status":"ok","valid_probs":[0.5,0.5]}}'"#,
            path.display()
        ));
        external_trainer_roundtrip(&cfg, &data(), &data()).unwrap();
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["cmd"], "train");
        assert_eq!(v["train"][0]["label"], 1);
        assert_eq!(v["valid"][1]["id"], "b");
        assert_eq!(v["config"]["learning_rate"], 2e-5);
    }

    #[test]
    fn malformed_reply_is_protocol_error() {
        let cfg = sh("read line; echo 'this is not json'");
        let err = external_trainer_roundtrip(&cfg, &data(), &data()).unwrap_err();
        assert!(matches!(err, AdapterError::ProtocolError(_)), "{err:?}");
        let cfg = sh(r#"read line; echo '{"status":"ok","valid_probs":[0.5]}'"#);
        assert!(matches!(
            external_trainer_roundtrip(&cfg, &data(), &data()),
            Err(AdapterError::ProtocolError(_))
        ));
    }

    #[test]
    fn crash_reports_exit_code() {
        let cfg = sh("read line; exit 7");
        match external_trainer_roundtrip(&cfg, &data(), &data()) {
            Err(AdapterError::AdapterCrashed(code)) => assert_eq!(code, Some(7)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn silent_adapter_times_out() {
        let mut cfg = sh("read line; sleep 5");
        cfg.timeout_secs = 0;
        let err = external_trainer_roundtrip(&cfg, &data(), &data()).unwrap_err();
        assert!(matches!(err, AdapterError::Timeout(_)));
    }

    #[test]
    fn error_status_surfaces_message() {
        let cfg = sh(r#"read line; echo '{"status":"error","message":"out of memory"}'"#);
        match external_trainer_roundtrip(&cfg, &data(), &data()) {
            Err(AdapterError::AdapterFailed(m)) => assert_eq!(m, "out of memory"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_binary_fails_to_spawn() {
        let cfg = AdapterConfig::with_command(vec!["/nonexistent/adapter".into()]);
        assert!(matches!(
            ExternalTrainer::spawn(&cfg),
            Err(AdapterError::Spawn(_))
        ));
    }
}

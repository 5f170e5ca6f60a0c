//! Patience-based early stopping with best-snapshot retention.
//!
//! Improvement is strict: a metric equal to the best so far counts as a
//! stale epoch.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Stale,
    Stop,
}

#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1, "patience must be at least 1");
        EarlyStopping {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records the metric of `epoch` (1-based).
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn observe(&mut self, epoch: usize, metric: f64) -> Verdict {
        match self.best {
            Some(best) if !(metric > best) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    Verdict::Stop
                } else {
                    Verdict::Stale
                }
            }
            _ => {
                self.best = Some(metric);
                self.best_epoch = epoch;
                self.stale = 0;
                Verdict::Improved
            }
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone)]
pub struct Saturation<S> {
    pub snapshot: S,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stop_epoch: usize,
    pub history: Vec<f64>,
}

/// Drives `step` (called with the 1-based epoch, returning the epoch's
/// metric and a snapshot) until patience runs out or `max_epochs` is hit.
pub fn run_with_patience<S, E, F>(
    max_epochs: usize,
    patience: usize,
    mut step: F,
) -> Result<Saturation<S>, E>
where
    F: FnMut(usize) -> Result<(f64, S), E>,
{
    assert!(max_epochs >= 1, "max_epochs must be at least 1");
    let mut stopper = EarlyStopping::new(patience);
    let mut best: Option<S> = None;
    let mut history = Vec::new();
    for epoch in 1..=max_epochs {
        let (metric, snapshot) = step(epoch)?;
        history.push(metric);
        match stopper.observe(epoch, metric) {
            Verdict::Improved => best = Some(snapshot),
            Verdict::Stale => {}
            Verdict::Stop => break,
        }
    }
    Ok(Saturation {
        snapshot: best.expect("first epoch always improves"),
        best_epoch: stopper.best_epoch(),
        best_metric: stopper.best().expect("at least one epoch"),
        stop_epoch: history.len(),
        history,
    })
}

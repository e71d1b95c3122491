//! Learning-rate drop and early stopping driven by the validation loss.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    /// Stopped by an epoch observer.
    Requested,
}

/// What the loop should do after an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Verdict {
    Continue { improved: bool },
    Stop,
}

/// Patience and early-stop counters.
///
/// The loss before the first epoch is the initial best. After each epoch a
/// loss at least `threshold` below the best resets both counters. Otherwise
/// training stops once `early_stop` epochs have passed without improvement,
/// and the learning rate is multiplied by `drop_factor` every `patience`
/// such epochs.
#[derive(Clone, Debug)]
pub struct Callbacks {
    pub lr: f64,
    pub drop_factor: f64,
    pub patience: usize,
    pub early_stop: usize,
    pub threshold: f64,
    pub best: f64,
    wait: usize,
    since_best: usize,
}

impl Callbacks {
    pub fn new(lr: f64, drop_factor: f64, patience: usize, early_stop: usize, threshold: f64, baseline: f64) -> Self {
        Self {
            lr,
            drop_factor,
            patience,
            early_stop,
            threshold,
            best: baseline,
            wait: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> Verdict {
        if val_loss < self.best - self.threshold {
            self.best = val_loss;
            self.wait = 0;
            self.since_best = 0;
            return Verdict::Continue { improved: true };
        }
        self.wait += 1;
        self.since_best += 1;
        if self.since_best >= self.early_stop {
            return Verdict::Stop;
        }
        if self.wait >= self.patience {
            self.lr *= self.drop_factor;
            self.wait = 0;
        }
        Verdict::Continue { improved: false }
    }
}

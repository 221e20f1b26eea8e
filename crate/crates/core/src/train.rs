//! Shared minibatch and early-stopping plumbing for the training stages.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::AdamConfig;

/// Epoch budget, batch size and optimizer settings of one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub adam: AdamConfig,
}

impl StageSchedule {
    pub fn new(epochs: usize, batch_size: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            epochs,
            batch_size,
            patience: 10,
            adam: AdamConfig::with_lr(lr, weight_decay),
        }
    }

    pub fn validate(&self, n_train: usize, stage: &str) -> Result<()> {
        if n_train == 0 {
            return Err(Error::Config(format!("{stage}: empty training set")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{stage}: batch size must be positive")));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("{stage}: invalid learning rate {}", self.adam.lr)));
        }
        Ok(())
    }
}

/// Shuffled index chunks covering `0..n`.
pub(crate) fn minibatches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Tracks the best validation score; ties keep the earlier epoch.
pub(crate) struct EarlyStopping {
    pub best: f64,
    pub best_epoch: usize,
    since: usize,
    patience: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            since: 0,
            patience,
        }
    }

    /// Records a score; returns true if it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if score > self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.since = 0;
            true
        } else {
            self.since += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.since >= self.patience
    }
}

pub(crate) fn check_finite(value: f64, what: &str, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} became {value} in epoch {epoch}")))
    }
}

//! Validation-driven learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::config::LrDecay;

/// Multiplies the learning rate by `factor` once the validation score has
/// failed to improve for `patience` consecutive epochs at or after
/// `start_epoch`. Epochs are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub decay: LrDecay,
    pub best: Option<f64>,
    pub stagnant: usize,
    pub decays: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, decay: LrDecay) -> Self {
        PlateauSchedule {
            lr,
            decay,
            best: None,
            stagnant: 0,
            decays: 0,
        }
    }

    /// Records the validation score of `epoch` and returns the learning rate
    /// to use from the next epoch on.
    pub fn observe(&mut self, epoch: usize, score: f64) -> f64 {
        let improved = match self.best {
            None => score.is_finite(),
            Some(best) => score > best,
        };
        if improved {
            self.best = Some(score);
            self.stagnant = 0;
        } else if epoch >= self.decay.start_epoch {
            self.stagnant += 1;
            if self.stagnant >= self.decay.patience {
                self.lr *= self.decay.factor;
                self.decays += 1;
                self.stagnant = 0;
            }
        }
        self.lr
    }
}

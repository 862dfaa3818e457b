/// Learning-rate halving on validation-loss increases, with early stopping.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    lr: f64,
    pub factor: f64,
    pub patience: usize,
    prev: Option<f64>,
    best: Option<f64>,
    stale: usize,
}

/// What one validation result changed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verdict {
    /// New best validation loss.
    pub improved: bool,
    /// Loss went up against the previous epoch, so the rate was halved.
    pub decayed: bool,
    /// `patience` epochs in a row without a new best.
    pub stop: bool,
    /// Rate for the next epoch.
    pub lr: f64,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize) -> Self {
        Self {
            lr,
            factor: 0.5,
            patience,
            prev: None,
            best: None,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> Verdict {
        let decayed = matches!(self.prev, Some(p) if val_loss > p);
        if decayed {
            self.lr *= self.factor;
        }
        self.prev = Some(val_loss);
        // NaN never counts as a new best.
        let improved = match self.best {
            None => val_loss.is_finite(),
            Some(b) => val_loss < b,
        };
        if improved {
            self.best = Some(val_loss);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Verdict {
            improved,
            decayed,
            stop: self.stale >= self.patience,
            lr: self.lr,
        }
    }
}

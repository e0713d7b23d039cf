use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    /// Epochs without improvement before the rate is cut.
    pub patience: usize,
    pub min_lr: f64,
    /// An epoch counts as an improvement only if it beats the best by more than this.
    pub tolerance: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.3,
            patience: 5,
            min_lr: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// Reduce-on-plateau schedule driven by validation accuracy (higher is better).
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    config: PlateauConfig,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig, lr: f64) -> Self {
        Self {
            config,
            lr,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's validation accuracy and returns the rate for the next epoch.
    pub fn step(&mut self, accuracy: f64) -> f64 {
        match self.best {
            Some(best) if accuracy <= best + self.config.tolerance => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.config.patience {
                    self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(accuracy);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

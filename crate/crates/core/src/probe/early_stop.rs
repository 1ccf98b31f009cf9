//! Patience-based early stopping over an abstract epoch runner.

/// One epoch of training followed by a validation pass.
pub trait EpochRunner {
    type Checkpoint;

    /// Runs epoch `epoch` (1-based) and returns the validation loss.
    fn run_epoch(&mut self, epoch: usize) -> f64;

    fn snapshot(&self) -> Self::Checkpoint;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StopOutcome<C> {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Last epoch that ran.
    pub stop_epoch: usize,
    pub checkpoint: C,
    pub val_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StopError {
    #[error("validation loss is not finite at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("max_epochs must be at least 1")]
    NoEpochs,
}

/// Runs until `max_epochs` or until `patience` epochs pass without a
/// strictly lower validation loss. The checkpoint is taken at the best epoch.
pub fn early_stop<R: EpochRunner>(
    runner: &mut R,
    max_epochs: usize,
    patience: usize,
) -> Result<StopOutcome<R::Checkpoint>, StopError> {
    if max_epochs == 0 {
        return Err(StopError::NoEpochs);
    }
    let mut best: Option<(usize, f64, R::Checkpoint)> = None;
    let mut val_losses = Vec::new();
    for epoch in 1..=max_epochs {
        let loss = runner.run_epoch(epoch);
        if !loss.is_finite() {
            return Err(StopError::NonFinite { epoch });
        }
        val_losses.push(loss);
        if best.as_ref().is_none_or(|(_, b, _)| loss < *b) {
            best = Some((epoch, loss, runner.snapshot()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if epoch - best_epoch >= patience {
            break;
        }
    }
    let stop_epoch = val_losses.len();
    let (best_epoch, best_val_loss, checkpoint) = best.expect("at least one epoch ran");
    Ok(StopOutcome { best_epoch, best_val_loss, stop_epoch, checkpoint, val_losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Schedule {
        losses: Vec<f64>,
        epoch: usize,
    }

    impl EpochRunner for Schedule {
        type Checkpoint = usize;

        fn run_epoch(&mut self, epoch: usize) -> f64 {
            self.epoch = epoch;
            self.losses[epoch - 1]
        }

        fn snapshot(&self) -> usize {
            self.epoch
        }
    }

    fn run(losses: Vec<f64>, max_epochs: usize, patience: usize) -> StopOutcome<usize> {
        early_stop(&mut Schedule { losses, epoch: 0 }, max_epochs, patience).unwrap()
    }

    #[test]
    fn increasing_loss_stops_after_patience() {
        let out = run((1..=100).map(f64::from).collect(), 800, 30);
        assert_eq!((out.best_epoch, out.stop_epoch, out.checkpoint), (1, 31, 1));
    }

    #[test]
    fn cap_dominates() {
        let out = run((0..100).map(|i| 1.0 / f64::from(i + 1)).collect(), 5, 30);
        assert_eq!((out.best_epoch, out.stop_epoch), (5, 5));
        assert_eq!(out.val_losses.len(), 5);
    }

    #[test]
    fn equal_loss_is_not_an_improvement() {
        let out = run(vec![1.0; 10], 10, 3);
        assert_eq!((out.best_epoch, out.stop_epoch), (1, 4));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let err = early_stop(&mut Schedule { losses: vec![1.0, f64::NAN], epoch: 0 }, 5, 3).unwrap_err();
        assert_eq!(err, StopError::NonFinite { epoch: 2 });
    }
}

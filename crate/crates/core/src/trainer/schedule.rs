/// Which loss terms are active at a given point of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveLosses {
    pub nfc: bool,
    pub ret: bool,
}

/// Progressive schedule: next-frame loss alone for the first
/// `warmup_steps` global steps of epoch 1, both losses for the rest of
/// epoch 1, retrieval alone afterwards. Regularizer and auxiliary terms
/// ride along with retrieval.
pub fn loss_schedule(step: usize, epoch: usize, warmup_steps: usize) -> ActiveLosses {
    if epoch <= 1 {
        ActiveLosses {
            nfc: true,
            ret: step >= warmup_steps,
        }
    } else {
        ActiveLosses { nfc: false, ret: true }
    }
}

/// Step decay: `base * decay^floor((epoch - 1) / every)` for 1-based epochs.
pub fn step_lr(base: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    base * decay.powi((epoch.saturating_sub(1) / every.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_cases() {
        assert_eq!(loss_schedule(50, 1, 100), ActiveLosses { nfc: true, ret: false });
        assert_eq!(loss_schedule(99, 1, 100), ActiveLosses { nfc: true, ret: false });
        assert_eq!(loss_schedule(100, 1, 100), ActiveLosses { nfc: true, ret: true });
        assert_eq!(loss_schedule(200, 1, 100), ActiveLosses { nfc: true, ret: true });
        assert_eq!(loss_schedule(3, 2, 100), ActiveLosses { nfc: false, ret: true });
    }

    #[test]
    fn decay_every_three_epochs() {
        assert_eq!(step_lr(2e-5, 0.95, 3, 1), 2e-5);
        assert_eq!(step_lr(2e-5, 0.95, 3, 3), 2e-5);
        assert!((step_lr(2e-5, 0.95, 3, 5) - 1.9e-5).abs() < 1e-20);
        assert!((step_lr(2e-5, 0.95, 3, 7) - 2e-5 * 0.9025).abs() < 1e-20);
    }
}

use crate::error::{Error, Result};

/// Cosine annealing from `base` down towards `floor` over `total` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f32,
    pub total: usize,
    pub floor: f32,
}

impl LrSchedule {
    pub fn cosine(base: f32, total: usize) -> Self {
        LrSchedule {
            base,
            total,
            floor: 0.0,
        }
    }

    pub fn rate(&self, epoch: usize) -> Result<f32> {
        cosine_lr(self, epoch)
    }
}

/// `floor + ½(base − floor)(1 + cos(π·epoch/total))`.
pub fn cosine_lr(schedule: &LrSchedule, epoch: usize) -> Result<f32> {
    if epoch >= schedule.total {
        return Err(Error::EpochOutOfRange {
            epoch,
            total: schedule.total,
        });
    }
    let frac = epoch as f64 / schedule.total as f64;
    let span = (schedule.base - schedule.floor) as f64;
    Ok((schedule.floor as f64 + 0.5 * span * (1.0 + (std::f64::consts::PI * frac).cos())) as f32)
}

//! The gate g and its schedule: g = min(t/τ, 1), annealed over epochs.
//!
//! Every GradNet layer consumes the same gate. It moves at epoch boundaries
//! by default (g is frozen within an epoch); an optional fractional mode
//! advances it per batch for smoother ramps.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// An interpolation weight in [0,1], frozen for the duration of a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateValue(f64);

impl GateValue {
    pub fn new(g: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&g) {
            return Err(Error::Contract(format!("gate {g} outside [0,1]")));
        }
        Ok(GateValue(g))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// g = min(t/tau, 1) for one epoch t. Fails on tau <= 0; the schedule type
/// below additionally admits tau = 0 as "late component from the start".
pub fn gate(t: u32, tau: f64) -> Result<GateValue> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    Ok(GateValue((f64::from(t) / tau).min(1.0)))
}

/// How the gate moves over a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// g updates at epoch boundaries only (the default).
    #[default]
    Epoch,
    /// g also advances within the epoch: t = epoch + batch/batches_per_epoch.
    Fractional,
}

/// Linear annealing schedule with an epoch counter.
///
/// tau = 0 is accepted and pins g = 1 from the first epoch, so one config
/// family can express both the static late architecture and the gradual one.
#[derive(Clone, Debug)]
pub struct LinearSchedule {
    tau: f64,
    mode: ScheduleMode,
    t: u32,
}

impl LinearSchedule {
    pub fn new(tau: f64, mode: ScheduleMode) -> Result<Self> {
        if !tau.is_finite() || tau < 0.0 {
            return Err(Error::Config(format!(
                "tau must be a finite non-negative number of epochs, got {tau}"
            )));
        }
        Ok(LinearSchedule { tau, mode, t: 0 })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    /// Gate at a given epoch, ignoring the internal counter. The first
    /// epoch is t = 0, so training starts on the pure early component.
    pub fn gate_at(&self, epoch: u32) -> GateValue {
        if self.tau == 0.0 {
            return GateValue(1.0);
        }
        GateValue((f64::from(epoch) / self.tau).min(1.0))
    }

    /// Gate for a specific batch. In `Epoch` mode this is just
    /// `gate_at(epoch)`; in `Fractional` mode t advances inside the epoch.
    pub fn gate_for_batch(&self, epoch: u32, batch: usize, batches_per_epoch: usize) -> GateValue {
        match self.mode {
            ScheduleMode::Epoch => self.gate_at(epoch),
            ScheduleMode::Fractional => {
                if self.tau == 0.0 {
                    return GateValue(1.0);
                }
                let t = f64::from(epoch) + batch as f64 / batches_per_epoch.max(1) as f64;
                GateValue((t / self.tau).min(1.0))
            }
        }
    }

    /// Advance the epoch counter and return the new gate.
    pub fn advance_epoch(&mut self) -> GateValue {
        self.t += 1;
        self.gate_at(self.t)
    }

    pub fn current(&self) -> GateValue {
        self.gate_at(self.t)
    }
}

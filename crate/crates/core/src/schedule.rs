//! Sparsity schedules: the pruning rate emitted at step `t` of a
//! K-step pruning phase.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Exponential,
    Cubic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsitySchedule {
    pub kind: ScheduleKind,
    pub sparsity: f64,
    pub steps: usize,
    /// First iteration of the pruning window (cubic only; the window is
    /// `start < t <= start + steps`).
    pub start: usize,
}

impl SparsitySchedule {
    pub fn exponential(sparsity: f64, steps: usize) -> Result<Self> {
        validate(sparsity, steps)?;
        Ok(SparsitySchedule {
            kind: ScheduleKind::Exponential,
            sparsity,
            steps,
            start: 0,
        })
    }

    pub fn cubic(sparsity: f64, steps: usize, start: usize) -> Result<Self> {
        validate(sparsity, steps)?;
        Ok(SparsitySchedule {
            kind: ScheduleKind::Cubic,
            sparsity,
            steps,
            start,
        })
    }

    /// Pruning rate at global iteration `t` (1-based).
    pub fn rate_at(&self, t: usize) -> Result<f64> {
        match self.kind {
            ScheduleKind::Exponential => rate_exponential(self.sparsity, t, self.steps),
            ScheduleKind::Cubic => rate_cubic(self.sparsity, t, self.start, self.steps),
        }
    }

    pub fn in_window(&self, t: usize) -> bool {
        match self.kind {
            ScheduleKind::Exponential => t >= 1 && t <= self.steps,
            ScheduleKind::Cubic => t > self.start && t <= self.start + self.steps,
        }
    }
}

fn validate(sparsity: f64, steps: usize) -> Result<()> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidConfig(format!(
            "sparsity must lie in [0,1), got {sparsity}"
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidConfig("schedule needs at least one step".into()));
    }
    Ok(())
}

/// Exponential ramp `1 - (1-s)^(t/K)` for `1 <= t <= K`; reaches `s`
/// exactly at `t = K`.
pub fn rate_exponential(sparsity: f64, t: usize, steps: usize) -> Result<f64> {
    validate(sparsity, steps)?;
    if t < 1 || t > steps {
        return Err(Error::InvalidArgument(format!(
            "step {t} outside exponential window [1, {steps}]"
        )));
    }
    if t == steps {
        // powf(1.0) wobble would miss the endpoint-exactness contract.
        return Ok(sparsity);
    }
    Ok(1.0 - (1.0 - sparsity).powf(t as f64 / steps as f64))
}

/// Cubic ramp `s * ((t - t_start)/K)^3` for `t_start < t <= t_start + K`.
/// Algebraically this is `s - s*(1 - x^3)` in its commonly written form;
/// the factored version avoids the cancellation.
pub fn rate_cubic(sparsity: f64, t: usize, start: usize, steps: usize) -> Result<f64> {
    validate(sparsity, steps)?;
    if t <= start || t > start + steps {
        return Err(Error::InvalidArgument(format!(
            "step {t} outside cubic window ({start}, {}]",
            start + steps
        )));
    }
    let x = (t - start) as f64 / steps as f64;
    Ok(sparsity * x * x * x)
}

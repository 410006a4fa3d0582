//! EMA teachers with independent momentum schedules.
//!
//! The reconstruction teacher is an encoder-only copy of the student and
//! produces token targets; the pseudo-labelling teacher also carries a copy
//! of the projection head. Each follows its own cosine momentum schedule at
//! its own update frequency.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaFrequency {
    PerIteration,
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaSchedule {
    pub start: f64,
    pub end: f64,
    pub frequency: EmaFrequency,
}

impl EmaSchedule {
    /// Reconstruction teacher: 0.96 -> 0.99, once per epoch.
    pub fn reconstruction() -> Self {
        Self {
            start: 0.96,
            end: 0.99,
            frequency: EmaFrequency::PerEpoch,
        }
    }

    /// Pseudo-labelling teacher: 0.996 -> 1, every iteration.
    pub fn pseudo_labeling() -> Self {
        Self {
            start: 0.996,
            end: 1.0,
            frequency: EmaFrequency::PerIteration,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.start && self.start <= self.end && self.end <= 1.0) {
            return Err(Error::config(format!(
                "EMA schedule needs 0 <= start <= end <= 1, got {} -> {}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    /// Cosine ramp from `start` at `t = 0` to `end` at `t = total`.
    pub fn momentum_at(&self, t: u64, total: u64) -> Result<f64> {
        if total == 0 || t > total {
            return Err(Error::contract(format!(
                "momentum step {t} outside schedule of {total} updates"
            )));
        }
        let c = ((PI * t as f64 / total as f64).cos() + 1.0) / 2.0;
        Ok(self.end - (self.end - self.start) * c)
    }
}

/// Elementwise `teacher <- m * teacher + (1 - m) * student` over every
/// parameter the teacher holds. `m = 1` leaves the teacher untouched and
/// `m = 0` copies the student, both bit-exactly.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::contract(format!("EMA momentum {m} outside [0, 1]")));
    }
    teacher.check_isomorphic(student)?;
    if m == 1.0 {
        return Ok(());
    }
    let (mt, ms) = (m as f32, (1.0 - m) as f32);
    let sources: Vec<_> = student.iter().map(|(_, _, t)| t.data().to_vec()).collect();
    for (t, src) in teacher.tensors_mut().zip(sources) {
        let dst = t.data_mut();
        if m == 0.0 {
            dst.copy_from_slice(&src);
        } else {
            dst.iter_mut().zip(&src).for_each(|(a, &b)| *a = mt * *a + ms * b);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherRole {
    Reconstruction,
    PseudoLabeling,
    /// Single-teacher ablation: one teacher serves both target streams.
    Both,
}

/// Position in training when a teacher update is considered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Clock {
    /// 0-based index of the iteration that just finished.
    pub iteration: u64,
    /// 0-based index of the current epoch.
    pub epoch: u64,
    /// Whether this iteration closes the epoch.
    pub end_of_epoch: bool,
}

#[derive(Debug, Clone)]
pub struct TeacherState {
    pub role: TeacherRole,
    pub encoder: ParamStore,
    pub head: Option<ParamStore>,
    pub schedule: EmaSchedule,
    /// Length of the schedule in updates of its own frequency.
    pub total_updates: u64,
    pub updates: u64,
    pub last_momentum: f64,
}

impl TeacherState {
    /// Exact frozen copy of the student's encoder (and head, if given).
    pub fn from_student(
        role: TeacherRole,
        encoder: &ParamStore,
        head: Option<&ParamStore>,
        schedule: EmaSchedule,
        total_updates: u64,
    ) -> Self {
        let freeze = |s: &ParamStore| {
            let mut c = s.clone();
            c.set_requires_grad(false);
            c.zero_grad();
            c
        };
        Self {
            role,
            encoder: freeze(encoder),
            head: head.map(freeze),
            last_momentum: schedule.start,
            schedule,
            total_updates: total_updates.max(1),
            updates: 0,
        }
    }

    pub fn ema_from(&mut self, encoder: &ParamStore, head: Option<&ParamStore>, m: f64) -> Result<()> {
        ema_update(&mut self.encoder, encoder, m)?;
        match (&mut self.head, head) {
            (Some(t), Some(s)) => ema_update(t, s, m)?,
            (None, _) => {}
            (Some(_), None) => {
                return Err(Error::contract("teacher has a head but the student head is missing"))
            }
        }
        self.last_momentum = m;
        self.updates += 1;
        Ok(())
    }

    /// Momentum the next update would use at `clock`.
    pub fn momentum_for(&self, clock: Clock) -> Result<f64> {
        let t = match self.schedule.frequency {
            EmaFrequency::PerIteration => clock.iteration,
            EmaFrequency::PerEpoch => clock.epoch,
        };
        self.schedule.momentum_at(t.min(self.total_updates), self.total_updates)
    }

    /// Applies the update if this teacher's frequency fires at `clock`.
    pub fn maybe_update(&mut self, encoder: &ParamStore, head: Option<&ParamStore>, clock: Clock) -> Result<bool> {
        let fire = match self.schedule.frequency {
            EmaFrequency::PerIteration => true,
            EmaFrequency::PerEpoch => clock.end_of_epoch,
        };
        if !fire {
            return Ok(false);
        }
        let m = self.momentum_for(clock)?;
        self.ema_from(encoder, head, m)?;
        Ok(true)
    }

    pub fn all_frozen(&self) -> bool {
        let frozen = |s: &ParamStore| s.iter().all(|(_, _, t)| !t.requires_grad && t.grad.is_none());
        frozen(&self.encoder) && self.head.as_ref().is_none_or(frozen)
    }
}

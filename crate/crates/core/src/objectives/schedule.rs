//! Contrastive weight, confidence threshold and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `lambda_c(t) = w_c * exp(sign * a * (1 - t / t_max)^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaC {
    pub w_c: f64,
    pub a: f64,
    /// `+1` decays from `w_c * e^a` to `w_c`; `-1` ramps up from `w_c * e^-a` to `w_c`.
    pub sign: f64,
}

impl Default for LambdaC {
    fn default() -> Self {
        Self {
            w_c: 0.1,
            a: 4.0,
            sign: 1.0,
        }
    }
}

impl LambdaC {
    pub fn ramp_up() -> Self {
        Self {
            sign: -1.0,
            a: 5.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_c >= 0.0 && self.w_c.is_finite()) {
            return Err(Error::invalid(format!("w_c must be finite and >= 0, got {}", self.w_c)));
        }
        if self.sign != 1.0 && self.sign != -1.0 {
            return Err(Error::invalid(format!("sign must be +1 or -1, got {}", self.sign)));
        }
        if !self.a.is_finite() {
            return Err(Error::invalid("a must be finite"));
        }
        Ok(())
    }

    pub fn at(&self, t: usize, t_max: usize) -> Result<f64> {
        lambda_c_schedule(t, t_max, self.w_c, self.a, self.sign)
    }
}

pub fn lambda_c_schedule(t: usize, t_max: usize, w_c: f64, a: f64, sign: f64) -> Result<f64> {
    if t_max == 0 || t > t_max {
        return Err(Error::invalid(format!("need 0 <= t <= t_max with t_max >= 1, got t = {t}, t_max = {t_max}")));
    }
    let r = 1.0 - t as f64 / t_max as f64;
    Ok(w_c * (sign * a * r * r).exp())
}

/// Linear confidence threshold from `t0` at `t = 0` to `t1` at `t = t_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSchedule {
    pub t0: f64,
    pub t1: f64,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        Self { t0: 0.75, t1: 0.95 }
    }
}

impl ThresholdSchedule {
    pub fn validate(&self, classes: usize) -> Result<()> {
        let lo = 1.0 / classes as f64;
        for (name, v) in [("t0", self.t0), ("t1", self.t1)] {
            if !(v > lo && v < 1.0) {
                return Err(Error::invalid(format!("{name} = {v} must lie in (1/K, 1) = ({lo}, 1)")));
            }
        }
        Ok(())
    }

    pub fn at(&self, t: usize, t_max: usize, classes: usize) -> Result<f64> {
        threshold_schedule(t, t_max, self.t0, self.t1, classes)
    }
}

pub fn threshold_schedule(t: usize, t_max: usize, t0: f64, t1: f64, classes: usize) -> Result<f64> {
    ThresholdSchedule { t0, t1 }.validate(classes)?;
    if t_max == 0 || t > t_max {
        return Err(Error::invalid(format!("need 0 <= t <= t_max with t_max >= 1, got t = {t}, t_max = {t_max}")));
    }
    let s = t as f64 / t_max as f64;
    Ok((1.0 - s) * t0 + s * t1)
}

/// Step decay: `base / factor^floor(iter / step)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub step: usize,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.01,
            step: 2500,
            factor: 10.0,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) || self.step == 0 || !(self.factor >= 1.0) {
            return Err(Error::invalid(format!(
                "lr schedule needs base > 0, step >= 1, factor >= 1; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Dividing by the exact integer power keeps the decade values exact
    /// (0.01 / 10 == 0.001 in binary64).
    pub fn at(&self, iter: usize) -> f64 {
        self.base / self.factor.powi((iter / self.step) as i32)
    }
}

pub fn lr_schedule(iter: usize) -> f64 {
    LrSchedule::default().at(iter)
}

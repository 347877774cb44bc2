//! Thresholded sigmoid rewards over accuracy, latency and size.
//!
//! Each component maps a student/teacher ratio through a logistic curve
//! centred on its threshold, so it equals 0.5 exactly at the threshold. The
//! combined reward is the product of the three components.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("{what} must be finite and non-negative, got {value}")]
    BadInput { what: &'static str, value: f64 },
    #[error("teacher reference {what} must be strictly positive, got {value}")]
    BadReference { what: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub a_th: f64,
    pub t_th: f64,
    pub c_th: f64,
    pub steepness: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            a_th: 0.9,
            t_th: 0.3,
            c_th: 0.6,
            steepness: 15.0,
        }
    }
}

impl Thresholds {
    pub fn check(&self) -> Result<(), String> {
        for (name, v) in [
            ("reward.a_th", self.a_th),
            ("reward.t_th", self.t_th),
            ("reward.c_th", self.c_th),
            ("reward.steepness", self.steepness),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be > 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Accuracy, latency and parameter count of the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherReference {
    pub accuracy: f64,
    pub latency: f64,
    pub parameters: u64,
}

impl TeacherReference {
    fn check(&self) -> Result<(), RewardError> {
        for (what, value) in [
            ("accuracy", self.accuracy),
            ("latency", self.latency),
            ("parameters", self.parameters as f64),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(RewardError::BadReference { what, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub accuracy: f64,
    pub latency: f64,
    pub size: f64,
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_input(what: &'static str, value: f64) -> Result<(), RewardError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(RewardError::BadInput { what, value })
    }
}

/// `1 − 1/(1 + exp(s·(A/A_teacher − A_th)))`.
pub fn accuracy_reward(
    accuracy: f64,
    teacher: &TeacherReference,
    th: &Thresholds,
) -> Result<f64, RewardError> {
    check_input("accuracy", accuracy)?;
    teacher.check()?;
    Ok(logistic(th.steepness * (accuracy / teacher.accuracy - th.a_th)))
}

/// `1/(1 + exp(s·(T/T_teacher − T_th)))`.
pub fn latency_reward(
    latency: f64,
    teacher: &TeacherReference,
    th: &Thresholds,
) -> Result<f64, RewardError> {
    check_input("latency", latency)?;
    teacher.check()?;
    Ok(logistic(-th.steepness * (latency / teacher.latency - th.t_th)))
}

/// `1/(1 + exp(s·(C/C_teacher − C_th)))`.
pub fn size_reward(
    parameters: f64,
    teacher: &TeacherReference,
    th: &Thresholds,
) -> Result<f64, RewardError> {
    check_input("parameters", parameters)?;
    teacher.check()?;
    Ok(logistic(
        -th.steepness * (parameters / teacher.parameters as f64 - th.c_th),
    ))
}

/// Product of the three components, returned alongside them.
pub fn combined_reward(
    accuracy: f64,
    latency: f64,
    parameters: f64,
    teacher: &TeacherReference,
    th: &Thresholds,
) -> Result<(f64, RewardComponents), RewardError> {
    let c = RewardComponents {
        accuracy: accuracy_reward(accuracy, teacher, th)?,
        latency: latency_reward(latency, teacher, th)?,
        size: size_reward(parameters, teacher, th)?,
    };
    Ok((c.accuracy * c.latency * c.size, c))
}

/// Reward assigned to a student that could not be built or trained: zero
/// accuracy at teacher latency and teacher size.
pub fn failure_reward(
    teacher: &TeacherReference,
    th: &Thresholds,
) -> Result<(f64, RewardComponents), RewardError> {
    combined_reward(
        0.0,
        teacher.latency,
        teacher.parameters as f64,
        teacher,
        th,
    )
}

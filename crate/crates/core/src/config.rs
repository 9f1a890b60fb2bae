//! Experiment configuration: one TOML file with `[controller]`, `[plant]`,
//! `[trajectory]` and `[monitor]` sections. Every key has a default (the
//! experimental values), so an empty file is a valid configuration.

use crate::controller::ControllerConfig;
use crate::monitor::MonitorConfig;
use crate::plant::PlantConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Emit(#[from] toml::ser::Error),
}

/// Command-schedule parameters for the tracking experiments and the
/// identification protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    /// Seconds each random step command is held.
    pub hold_duration: f64,
    /// Number of step commands (12 x 10 s = the 120 s experiment).
    pub step_count: usize,
    /// Uniform step amplitude bound per DOF, rad (commands in +/- this).
    pub step_amplitude: f64,
    /// Measured joint-velocity noise, rad/s (1-sigma), applied to the
    /// controller's velocity input.
    pub velocity_noise_sigma: f64,
    /// Free-response identification: initial displacement and record length.
    pub free_response_displacement: f64,
    pub free_response_duration: f64,
    /// Peak-prominence override for the damping estimator (fraction of the
    /// first peak). Heavily damped plants need a lower cutoff than the 2%
    /// default to keep five usable peaks.
    pub log_dec_prominence: Option<f64>,
    /// Hysteresis ramp: peak differential, period, cycles.
    pub ramp_dp_max: f64,
    pub ramp_period: f64,
    pub ramp_cycles: usize,
    /// Payload used by the weight-drop experiment.
    pub payload_mass: f64,
    pub payload_link: usize,
    /// Time at which the payload is released.
    pub drop_time: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            hold_duration: 10.0,
            step_count: 12,
            step_amplitude: 0.5,
            velocity_noise_sigma: 0.005,
            free_response_displacement: 0.1,
            free_response_duration: 5.0,
            log_dec_prominence: None,
            ramp_dp_max: 60.0,
            ramp_period: 40.0,
            ramp_cycles: 2,
            payload_mass: 4.5,
            payload_link: 2,
            drop_time: 55.0,
        }
    }
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub controller: ControllerConfig,
    pub plant: PlantConfig,
    pub trajectory: TrajectoryConfig,
    pub monitor: MonitorConfig,
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Duration of the step experiment implied by the schedule.
    pub fn experiment_duration(&self) -> f64 {
        self.trajectory.hold_duration * self.trajectory.step_count as f64
    }
}

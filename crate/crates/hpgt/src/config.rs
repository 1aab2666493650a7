//! Plain-text `key = value` configuration covering the simulator, the
//! estimator knot spacings, the noise model and the solver schedule.
//!
//! One assignment per line, `#` starts a comment, keys are dotted by
//! section (`simulate.*`, `noise.*`, `estimate.*`, `solver.*`). Unknown keys
//! and malformed values are errors carrying the line number, so a typo in a
//! recorded run config cannot silently fall back to a default.

use std::path::Path;

use thiserror::Error;

use crate::init::KnotSpacing;
use crate::sim::SimConfig;
use crate::solver::SolverConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Bad { line: usize, msg: String },
}

/// Estimation-pipeline knobs that are not part of the solver itself.
#[derive(Debug, Clone)]
pub struct EstimateConfig {
    pub knots: KnotSpacing,
    /// Output trajectory rate (Hz).
    pub output_rate_hz: f64,
    /// Resample rate of the angular-rate signals used for clock
    /// cross-correlation (Hz).
    pub sync_rate_hz: f64,
    /// Base sigma of a DUT relative pose (rad, m) before congruence weights.
    pub dut_sigma_r: f64,
    pub dut_sigma_p: f64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        EstimateConfig {
            knots: KnotSpacing::default(),
            output_rate_hz: 90.0,
            sync_rate_hz: 100.0,
            dut_sigma_r: 0.05_f64.to_radians(),
            dut_sigma_p: 2e-3,
        }
    }
}

/// Full configuration of a run; every field has the documented default.
#[derive(Debug, Clone, Default)]
pub struct Config {
    pub simulate: SimConfig,
    pub estimate: EstimateConfig,
    pub solver: SolverConfig,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Config::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Config, ConfigError> {
        let mut config = Config::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Bad {
                    line,
                    msg: format!("expected `key = value`, got `{content}`"),
                });
            };
            config.set(key.trim(), value.trim(), line)?;
        }
        Ok(config)
    }

    /// Applies one assignment; `line` only feeds error messages.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let bad = |msg: String| ConfigError::Bad { line, msg };
        let f = |v: &str| -> Result<f64, ConfigError> {
            v.parse::<f64>()
                .map_err(|_| bad(format!("`{v}` is not a number")))
                .and_then(|x| {
                    if x.is_finite() {
                        Ok(x)
                    } else {
                        Err(bad(format!("`{v}` is not finite")))
                    }
                })
        };
        let b = |v: &str| -> Result<bool, ConfigError> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(bad(format!("`{v}` is not `true` or `false`"))),
            }
        };
        let u = |v: &str| -> Result<usize, ConfigError> {
            v.parse::<usize>().map_err(|_| bad(format!("`{v}` is not a non-negative integer")))
        };
        match key {
            "simulate.duration" => self.simulate.duration = f(value)?,
            "simulate.mocap_hz" => self.simulate.mocap_hz = f(value)?,
            "simulate.imu_hz" => self.simulate.imu_hz = f(value)?,
            "simulate.dut_hz" => self.simulate.dut_hz = f(value)?,
            "simulate.noise_scale" => self.simulate.noise_scale = f(value)?,
            "simulate.amplitude_scale" => self.simulate.amplitude_scale = f(value)?,
            "simulate.clock_offset_max" => self.simulate.clock_offset_max = f(value)?,
            "simulate.dut_step_sigma_r" => self.simulate.dut_step_sigma_r = f(value)?,
            "simulate.dut_step_sigma_p" => self.simulate.dut_step_sigma_p = f(value)?,
            "simulate.truth_knot_dt" => self.simulate.truth_knot_dt = f(value)?,
            "simulate.degraded" => self.simulate.degraded = b(value)?,
            "simulate.randomize_extrinsics" => self.simulate.randomize_extrinsics = b(value)?,
            "simulate.randomize_intrinsics" => self.simulate.randomize_intrinsics = b(value)?,
            "noise.mocap_sigma_p" => self.simulate.noise.mocap_sigma_p = f(value)?,
            "noise.mocap_sigma_r" => self.simulate.noise.mocap_sigma_r = f(value)?,
            "noise.acc_nd" => self.simulate.noise.acc_nd = f(value)?,
            "noise.acc_rw" => self.simulate.noise.acc_rw = f(value)?,
            "noise.gyr_nd" => self.simulate.noise.gyr_nd = f(value)?,
            "noise.gyr_rw" => self.simulate.noise.gyr_rw = f(value)?,
            "noise.clock_drift" => self.simulate.noise.clock_drift = f(value)?,
            "estimate.motion_knot_dt" => self.estimate.knots.motion = f(value)?,
            "estimate.bias_knot_dt" => self.estimate.knots.bias = f(value)?,
            "estimate.offset_knot_dt" => self.estimate.knots.offset = f(value)?,
            "estimate.output_rate_hz" => self.estimate.output_rate_hz = f(value)?,
            "estimate.sync_rate_hz" => self.estimate.sync_rate_hz = f(value)?,
            "estimate.dut_sigma_r" => self.estimate.dut_sigma_r = f(value)?,
            "estimate.dut_sigma_p" => self.estimate.dut_sigma_p = f(value)?,
            "solver.max_iterations" => self.solver.max_iterations = u(value)?,
            "solver.stage1_iterations" => self.solver.stage1_iterations = u(value)?,
            "solver.two_stage" => self.solver.two_stage = b(value)?,
            "solver.lm_initial" => self.solver.lm_initial = f(value)?,
            "solver.lm_accept" => self.solver.lm_accept = f(value)?,
            "solver.lm_reject" => self.solver.lm_reject = f(value)?,
            "solver.rel_cost_tol" => self.solver.rel_cost_tol = f(value)?,
            "solver.abs_cost_tol" => self.solver.abs_cost_tol = f(value)?,
            "solver.grad_tol" => self.solver.grad_tol = f(value)?,
            "solver.fix_offsets" => self.solver.fix_offsets = b(value)?,
            _ => return Err(bad(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

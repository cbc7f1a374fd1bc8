//! The single JSON configuration shared by every command.
//!
//! Each command reads its own section; every section is optional and falls
//! back to defaults. Unknown keys anywhere are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::global::GlobalConfig;
use crate::preint::{NoiseParams, DEFAULT_MAX_DT};
use crate::quat::Vec3;
use crate::sim::SimConfig;
use crate::window::WindowConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    pub seed: u64,
    /// Random draws per factor kind.
    pub trials: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { seed: 0, trials: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreintegrateConfig {
    pub noise: NoiseParams,
    pub accel_bias: Vec3,
    pub gyro_bias: Vec3,
    pub max_dt: f64,
}

impl Default for PreintegrateConfig {
    fn default() -> Self {
        Self { noise: NoiseParams::default(), accel_bias: Vec3::zeros(), gyro_bias: Vec3::zeros(), max_dt: DEFAULT_MAX_DT }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Number of leading frames used.
    pub frames: usize,
    pub gravity: f64,
    pub noise: NoiseParams,
    pub accel_bias: Vec3,
    pub gyro_bias: Vec3,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            frames: 10,
            gravity: crate::GRAVITY,
            noise: NoiseParams::default(),
            accel_bias: Vec3::zeros(),
            gyro_bias: Vec3::zeros(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub simulate: SimConfig,
    pub check: CheckConfig,
    pub preintegrate: PreintegrateConfig,
    pub align: AlignConfig,
    pub estimate: WindowConfig,
    pub global: GlobalConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !value.is_object() {
            return Err(Error::Config("configuration must be a JSON object".into()));
        }
        let cfg: Config = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.simulate.validate()?;
        self.estimate.validate()?;
        self.global.validate()?;
        self.preintegrate.noise.validate().map_err(|e| Error::Config(format!("preintegrate: {e}")))?;
        self.align.noise.validate().map_err(|e| Error::Config(format!("align: {e}")))?;
        if self.check.trials == 0 {
            return Err(Error::Config("check.trials must be positive".into()));
        }
        if self.align.frames < 4 {
            return Err(Error::Config(format!("align.frames must be at least 4, got {}", self.align.frames)));
        }
        if !(self.align.gravity.is_finite() && self.align.gravity > 0.0) {
            return Err(Error::Config("align.gravity must be positive".into()));
        }
        if !(self.preintegrate.max_dt.is_finite() && self.preintegrate.max_dt > 0.0) {
            return Err(Error::Config("preintegrate.max_dt must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(Config::from_json("{}").unwrap(), Config::default());
    }

    #[test]
    fn defaults_round_trip() {
        let text = serde_json::to_string(&Config::default()).unwrap();
        assert_eq!(Config::from_json(&text).unwrap(), Config::default());
    }

    #[test]
    fn sections_override() {
        let c = Config::from_json(
            r#"{"simulate": {"seed": 7, "trajectory": {"kind": "figure-eight", "duration": 5}},
                "estimate": {"init": "ground-truth", "window_size": 8, "init_frames": 6},
                "global": {"strategy": "last-node"}}"#,
        )
        .unwrap();
        assert_eq!(c.simulate.seed, 7);
        assert_eq!(c.simulate.trajectory.duration, 5.0);
        assert_eq!(c.estimate.window_size, 8);
        assert_eq!(c.global.strategy, crate::global::TransformStrategy::LastNode);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        for bad in [
            r#"{"simulat": {}}"#,
            r#"{"simulate": {"sed": 1}}"#,
            r#"{"estimate": {"solver": {"max_iter": 3}}}"#,
            r#"{"estimate": {"window_size": 2}}"#,
            r#"{"simulate": {"imu_rate": -1}}"#,
            r#"{"simulate": {"extrinsics": {"p_c_b": [0,0,0], "q_c_b": [2,0,0,0]}}}"#,
            r#"{"check": {"trials": 0}}"#,
            r#"[]"#,
        ] {
            assert!(matches!(Config::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}

//! TOML configuration. A file only needs the keys it changes: it is merged
//! over the serialized defaults and the result is parsed strictly, so a
//! misspelt key is an error rather than a silent no-op.
//!
//! ```toml
//! seed = 7
//! [plant.backlash]
//! half_width = 0.0
//! [controller.gains]
//! kp = 450.0
//! [teleop]
//! tick_hz = 30.0
//! ```

use crate::control::ControllerConfig;
use crate::kinematics::RobotConfig;
use crate::marker::{BenchConfig, CameraIntrinsics};
use crate::plant::PlantParams;
use crate::teleop::TeleopConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;
use toml::{Table, Value};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub port: u16,
    pub tick_hz: f64,
    pub latency_ms: f64,
    pub jitter_ms: f64,
    pub initial_lift: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: 8765,
            tick_hz: 30.0,
            latency_ms: 0.0,
            jitter_ms: 0.0,
            initial_lift: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct Config {
    pub seed: u64,
    pub plant: PlantParams,
    pub controller: ControllerConfig,
    pub robot: RobotConfig,
    pub teleop: TeleopConfig,
    pub camera: CameraIntrinsics,
    pub bench: BenchConfig,
    pub service: ServiceConfig,
}

/// Overlay `over` onto `base`; tables merge key by key, anything else
/// replaces.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let over: Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut base = Table::try_from(Config::default()).map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut base, over);
        let cfg: Config = Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = ConfigError::Invalid;
        self.plant.validate().map_err(|e| inv(e.to_string()))?;
        self.controller.validate().map_err(inv)?;
        self.robot.validate().map_err(|e| inv(e.to_string()))?;
        self.teleop.validate().map_err(inv)?;
        self.camera.validate().map_err(|e| inv(e.to_string()))?;
        let s = &self.service;
        if !(s.tick_hz > 0.0 && s.latency_ms >= 0.0 && s.jitter_ms >= 0.0 && s.jitter_ms <= s.latency_ms) {
            return Err(inv(
                "service: tick_hz > 0, latency_ms >= 0, 0 <= jitter_ms <= latency_ms".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn partial_override() {
        let c = Config::from_toml_str("seed = 9\n[plant.backlash]\nhalf_width = 0.0\n[controller.gains]\nkp = 450.0\n")
            .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.plant.backlash.half_width, 0.0);
        assert_eq!(
            c.plant.backlash.contact_stiffness,
            PlantParams::default().backlash.contact_stiffness
        );
        assert_eq!(c.controller.gains.kp, 450.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            Config::from_toml_str("[plant]\nbacklash_width = 1.0\n"),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            Config::from_toml_str("sede = 1\n"),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(matches!(
            Config::from_toml_str("[plant.motor.friction]\ntau_s = 0.0\n"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn default_round_trips_through_toml() {
        let c = Config::default();
        assert_eq!(Config::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }
}

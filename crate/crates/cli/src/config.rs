//! JSON run configuration with the `"disabled"` / `"-inf"` sentinels for
//! the optional thresholds.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sparge_core::engine::EngineConfig;
use sparge_core::{Result, SpargeError};

/// Serializes an optional theta as its number or the string `"disabled"`.
pub mod theta_setting {
    use serde::de::Error as DeError;
    use serde::{Deserialize, Deserializer, Serializer};
    use serde_json::Value;

    pub fn serialize<S: Serializer>(value: &Option<f32>, ser: S) -> Result<S::Ok, S::Error> {
        match value {
            None => ser.serialize_str("disabled"),
            Some(v) => ser.serialize_f32(*v),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Option<f32>, D::Error> {
        match Value::deserialize(de)? {
            Value::String(s) if s == "disabled" => Ok(None),
            Value::Number(num) => num
                .as_f64()
                .map(|v| Some(v as f32))
                .ok_or_else(|| DeError::custom("theta must be a finite number")),
            other => Err(DeError::custom(format!(
                "theta must be a number or \"disabled\", got {other}"
            ))),
        }
    }
}

/// Serializes an optional lambda as its number or the string `"-inf"`.
pub mod lambda_setting {
    use serde::de::Error as DeError;
    use serde::{Deserialize, Deserializer, Serializer};
    use serde_json::Value;

    pub fn serialize<S: Serializer>(value: &Option<f32>, ser: S) -> Result<S::Ok, S::Error> {
        match value {
            None => ser.serialize_str("-inf"),
            Some(v) => ser.serialize_f32(*v),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Option<f32>, D::Error> {
        match Value::deserialize(de)? {
            Value::String(s) if s == "-inf" => Ok(None),
            Value::Number(num) => num
                .as_f64()
                .map(|v| Some(v as f32))
                .ok_or_else(|| DeError::custom("lambda must be a finite number")),
            other => Err(DeError::custom(format!(
                "lambda must be a number or \"-inf\", got {other}"
            ))),
        }
    }
}

/// The run configuration file. Every field has a default, unknown keys are
/// rejected. `seed` only matters for commands that synthesize inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub b_q: usize,
    pub b_k: usize,
    pub c_w: usize,
    pub tau: f32,
    #[serde(with = "theta_setting")]
    pub theta: Option<f32>,
    #[serde(with = "lambda_setting")]
    pub lambda: Option<f32>,
    pub quantize: bool,
    pub causal: bool,
    pub seed: u64,
}

impl Default for CliConfig {
    fn default() -> Self {
        let engine = EngineConfig::<f32>::default();
        CliConfig {
            b_q: engine.b_q,
            b_k: engine.b_k,
            c_w: engine.c_w,
            tau: engine.tau,
            theta: engine.theta,
            lambda: engine.lambda,
            quantize: engine.quantize,
            causal: engine.causal,
            seed: 0,
        }
    }
}

impl CliConfig {
    pub fn to_engine(self) -> EngineConfig<f32> {
        EngineConfig {
            b_q: self.b_q,
            b_k: self.b_k,
            c_w: self.c_w,
            tau: self.tau,
            theta: self.theta,
            lambda: self.lambda,
            quantize: self.quantize,
            causal: self.causal,
        }
    }

    pub fn from_engine(cfg: EngineConfig<f32>, seed: u64) -> Self {
        CliConfig {
            b_q: cfg.b_q,
            b_k: cfg.b_k,
            c_w: cfg.c_w,
            tau: cfg.tau,
            theta: cfg.theta,
            lambda: cfg.lambda,
            quantize: cfg.quantize,
            causal: cfg.causal,
            seed,
        }
    }
}

pub fn read_config(path: &Path) -> Result<CliConfig> {
    let file = File::open(path)?;
    let config: CliConfig = serde_json::from_reader(BufReader::new(file))
        .map_err(|err| SpargeError::format(format!("bad config {}: {err}", path.display())))?;
    config.to_engine().validate()?;
    Ok(config)
}

//! JSON report payloads written by the subcommands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sparge_core::tuner::TunedParams;
use sparge_core::{Result, SpargeError};

use crate::config::{lambda_setting, theta_setting, CliConfig};

/// Report of one `run` invocation. `relative_l1` is null unless the oracle
/// comparison was requested.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub sparsity: f64,
    pub per_head_sparsity: Vec<f64>,
    pub relative_l1: Option<f64>,
    pub predict_ms: f64,
    pub attn_ms: f64,
    pub config: CliConfig,
}

/// Tuned hyperparameters as written by `tune`, with the same sentinel
/// conventions as the config file.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TuneReport {
    pub tau: f32,
    #[serde(with = "theta_setting")]
    pub theta: Option<f32>,
    #[serde(with = "lambda_setting")]
    pub lambda: Option<f32>,
    pub achieved_l1_stage1: f64,
    pub achieved_l1_stage2: f64,
    pub achieved_sparsity: f64,
    pub fallback: bool,
}

impl From<TunedParams<f32>> for TuneReport {
    fn from(params: TunedParams<f32>) -> Self {
        TuneReport {
            tau: params.tau,
            theta: params.theta,
            lambda: params.lambda,
            achieved_l1_stage1: params.achieved_l1_stage1,
            achieved_l1_stage2: params.achieved_l1_stage2,
            achieved_sparsity: params.achieved_sparsity,
            fallback: params.fallback,
        }
    }
}

/// One permutation's row in the `permute-eval` report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PermuteRow {
    pub kind: String,
    pub sim_q: f64,
    pub sim_k: f64,
    pub relative_l1: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PermuteEvalReport {
    pub dims: [usize; 3],
    pub d: usize,
    pub seed: u64,
    pub config: CliConfig,
    pub kinds: Vec<PermuteRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub predict_ms: f64,
    pub attn_ms: f64,
    /// predict_ms over attn_ms; the prediction overhead relative to the
    /// dense block loop it is amortized against.
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub d: usize,
    pub heads: usize,
    pub rows: Vec<BenchRow>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, value)
        .map_err(|err| SpargeError::format(format!("cannot encode {}: {err}", path.display())))?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

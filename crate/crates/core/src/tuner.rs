//! Two-stage grid search for per-layer hyperparameters against calibration
//! inputs, plus the relative L1 metric every bound is expressed in.

use rayon::prelude::*;

use crate::engine::{
    aggregate_counters, dense_reference, sparse_attention, sparsity_of, AttnOutput, EngineConfig,
};
use crate::error::{Result, SpargeError};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

/// Sum of absolute elementwise differences over the absolute sum of the
/// reference. The reference supplies the denominator, so swapping the
/// arguments changes the value.
pub fn relative_l1<A: Scalar, B: Scalar>(
    o: &DenseTensor<A>,
    reference: &DenseTensor<B>,
) -> Result<f64> {
    if o.shape() != reference.shape() {
        return Err(SpargeError::validation(format!(
            "relative L1 needs matching shapes, got {:?} and {:?}",
            o.shape(),
            reference.shape()
        )));
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&a, &b) in o.data().iter().zip(reference.data()) {
        let b = b.to_f64();
        num += (a.to_f64() - b).abs();
        den += b.abs();
    }
    if den == 0.0 {
        return Err(SpargeError::validation(
            "relative L1 undefined against a zero-norm reference",
        ));
    }
    Ok(num / den)
}

/// Search space and budgets for one tuning run. `base` supplies the block
/// geometry and the quantize/causal switches; its tau, theta and lambda
/// fields are ignored and overwritten by every grid point.
#[derive(Debug, Clone)]
pub struct TuneSpec<S: Scalar> {
    /// Stage-1 bound: the worst calibration relative L1 of a (tau, theta)
    /// candidate must stay strictly below this.
    pub l1: f64,
    /// Stage-2 bound for the lambda scan; must exceed `l1`.
    pub l2: f64,
    pub tau_grid: Vec<S>,
    pub theta_grid: Vec<Option<S>>,
    pub lambda_grid: Vec<Option<S>>,
    pub base: EngineConfig<S>,
    pub calib: Vec<(DenseTensor<S>, DenseTensor<S>, DenseTensor<S>)>,
}

impl<S: Scalar> TuneSpec<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.l1 > 0.0 && self.l1.is_finite()) {
            return Err(SpargeError::validation("l1 must be positive and finite"));
        }
        if !(self.l2 > self.l1 && self.l2.is_finite()) {
            return Err(SpargeError::validation("l2 must exceed l1"));
        }
        if self.tau_grid.is_empty() || self.theta_grid.is_empty() || self.lambda_grid.is_empty() {
            return Err(SpargeError::validation("search grids must be non-empty"));
        }
        if self.calib.is_empty() {
            return Err(SpargeError::validation("calibration set must be non-empty"));
        }
        for (q, k, v) in &self.calib {
            if q.shape() != k.shape() || q.shape() != v.shape() {
                return Err(SpargeError::validation(
                    "calibration Q, K and V shapes must match",
                ));
            }
        }
        for &tau in &self.tau_grid {
            let probe = EngineConfig {
                tau,
                theta: None,
                lambda: None,
                ..self.base
            };
            probe.validate()?;
        }
        for &theta in &self.theta_grid {
            let probe = EngineConfig {
                tau: S::one(),
                theta,
                lambda: None,
                ..self.base
            };
            probe.validate()?;
        }
        for &lambda in &self.lambda_grid {
            let probe = EngineConfig {
                tau: S::one(),
                theta: None,
                lambda,
                ..self.base
            };
            probe.validate()?;
        }
        Ok(())
    }
}

/// Winning hyperparameters with the calibration numbers they achieved.
/// `fallback` marks a run where no stage-1 candidate met the bound and the
/// dense setting was returned instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TunedParams<S: Scalar> {
    pub tau: S,
    pub theta: Option<S>,
    pub lambda: Option<S>,
    pub achieved_l1_stage1: f64,
    pub achieved_l1_stage2: f64,
    pub achieved_sparsity: f64,
    pub fallback: bool,
}

pub fn default_tau_grid<S: Scalar>() -> Vec<S> {
    [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.98, 1.0]
        .iter()
        .map(|&v| S::from_f64(v))
        .collect()
}

pub fn default_theta_grid<S: Scalar>() -> Vec<Option<S>> {
    let mut grid = vec![None];
    grid.extend([0.0, 0.2, 0.4, 0.6, 0.8].iter().map(|&v| Some(S::from_f64(v))));
    grid
}

pub fn default_lambda_grid<S: Scalar>() -> Vec<Option<S>> {
    let mut grid = vec![None];
    grid.extend([-20.0, -15.0, -10.0, -8.0, -6.0, -5.0, -4.0].iter().map(|&v| Some(S::from_f64(v))));
    grid
}

/// Worst relative L1 and mean sparsity of one candidate over the whole
/// calibration set.
fn eval_candidate<S: Scalar>(
    spec: &TuneSpec<S>,
    oracles: &[AttnOutput<f64>],
    tau: S,
    theta: Option<S>,
    lambda: Option<S>,
) -> Result<(f64, f64)> {
    let cfg = EngineConfig {
        tau,
        theta,
        lambda,
        ..spec.base
    };
    let mut worst_l1 = 0.0f64;
    let mut sparsity_sum = 0.0f64;
    for ((q, k, v), oracle) in spec.calib.iter().zip(oracles) {
        let out = sparse_attention(q, k, v, &cfg)?;
        let l1 = relative_l1(&out.o, &oracle.o)?;
        if l1 > worst_l1 {
            worst_l1 = l1;
        }
        sparsity_sum += sparsity_of(&aggregate_counters(&out.counters))?;
    }
    Ok((worst_l1, sparsity_sum / spec.calib.len() as f64))
}

/// Tie-break rank for theta: larger is safer, disabled is safest of all
/// only through its forcing behavior, so it ranks lowest.
fn theta_rank<S: Scalar>(theta: Option<S>) -> f64 {
    theta.map_or(f64::NEG_INFINITY, |v| v.to_f64())
}

/// Tie-break rank for lambda: more negative skips less, disabled skips
/// nothing and ranks highest.
fn lambda_rank<S: Scalar>(lambda: Option<S>) -> f64 {
    lambda.map_or(f64::INFINITY, |v| -v.to_f64())
}

/// Two-stage hyperparameter search. Stage 1 scans the (tau, theta) grid
/// with the PV gate disabled, keeps candidates whose worst calibration L1
/// stays under `l1` and maximizes mean sparsity, breaking ties toward the
/// safer setting (larger tau, then larger theta). Stage 2 scans lambda at
/// the stage-1 winner under the looser `l2` bound, breaking sparsity ties
/// toward the more conservative (more negative) threshold. If stage 1 has
/// no feasible point the dense configuration is returned with `fallback`
/// set.
pub fn tune_layer<S: Scalar>(spec: &TuneSpec<S>) -> Result<TunedParams<S>> {
    spec.validate()?;
    let oracles: Vec<AttnOutput<f64>> = spec
        .calib
        .iter()
        .map(|(q, k, v)| dense_reference(q, k, v, spec.base.causal))
        .collect::<Result<_>>()?;

    let mut stage1_points = Vec::with_capacity(spec.tau_grid.len() * spec.theta_grid.len());
    for &tau in &spec.tau_grid {
        for &theta in &spec.theta_grid {
            stage1_points.push((tau, theta));
        }
    }
    let stage1_results: Vec<Result<(f64, f64)>> = stage1_points
        .par_iter()
        .map(|&(tau, theta)| eval_candidate(spec, &oracles, tau, theta, None))
        .collect();

    let mut best: Option<(S, Option<S>, f64, f64)> = None;
    for (&(tau, theta), result) in stage1_points.iter().zip(stage1_results) {
        let (l1, sparsity) = result?;
        if l1 >= spec.l1 {
            continue;
        }
        let better = match best {
            None => true,
            Some((best_tau, best_theta, _, best_sparsity)) => {
                let key = (sparsity, tau.to_f64(), theta_rank(theta));
                let best_key = (best_sparsity, best_tau.to_f64(), theta_rank(best_theta));
                key > best_key
            }
        };
        if better {
            best = Some((tau, theta, l1, sparsity));
        }
    }

    let Some((tau, theta, stage1_l1, stage1_sparsity)) = best else {
        let (l1, sparsity) = eval_candidate(spec, &oracles, S::one(), None, None)?;
        return Ok(TunedParams {
            tau: S::one(),
            theta: None,
            lambda: None,
            achieved_l1_stage1: l1,
            achieved_l1_stage2: l1,
            achieved_sparsity: sparsity,
            fallback: true,
        });
    };

    let stage2_results: Vec<Result<(f64, f64)>> = spec
        .lambda_grid
        .par_iter()
        .map(|&lambda| eval_candidate(spec, &oracles, tau, theta, lambda))
        .collect();

    let mut best2: Option<(Option<S>, f64, f64)> = None;
    for (&lambda, result) in spec.lambda_grid.iter().zip(stage2_results) {
        let (l1, sparsity) = result?;
        if l1 >= spec.l2 {
            continue;
        }
        let better = match best2 {
            None => true,
            Some((best_lambda, _, best_sparsity)) => {
                (sparsity, lambda_rank(lambda)) > (best_sparsity, lambda_rank(best_lambda))
            }
        };
        if better {
            best2 = Some((lambda, l1, sparsity));
        }
    }

    let (lambda, stage2_l1, stage2_sparsity) = match best2 {
        Some(found) => found,
        None => (None, stage1_l1, stage1_sparsity),
    };
    Ok(TunedParams {
        tau,
        theta,
        lambda,
        achieved_l1_stage1: stage1_l1,
        achieved_l1_stage2: stage2_l1,
        achieved_sparsity: stage2_sparsity,
        fallback: false,
    })
}

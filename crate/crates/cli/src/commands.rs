//! Implementations of the four subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use sparge_core::blocks::make_layout;
use sparge_core::engine::{
    aggregate_counters, attention_with_masks, dense_reference, predict_masks, sparse_attention,
    sparsity_of, EngineConfig, PredictedMasks,
};
use sparge_core::permute::{apply_permutation, block_self_similarity, build_permutation, ALL_KINDS};
use sparge_core::tensor::{gen_synthetic, tensor_load, tensor_store, GridDims, SyntheticKind};
use sparge_core::tuner::{
    default_lambda_grid, default_tau_grid, default_theta_grid, relative_l1, tune_layer, TuneSpec,
};
use sparge_core::{Result, SpargeError, Tensor};

use crate::config::{read_config, CliConfig};
use crate::report::{
    write_json, BenchReport, BenchRow, PermuteEvalReport, PermuteRow, RunReport, TuneReport,
};
use crate::{BenchArgs, PermuteEvalArgs, RunArgs, TuneArgs};

fn elapsed_ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

pub fn run(args: &RunArgs) -> Result<()> {
    let config = match &args.config {
        Some(path) => read_config(path)?,
        None => CliConfig::default(),
    };
    let cfg = config.to_engine();
    cfg.validate()?;
    let q = tensor_load(&args.q)?;
    let k = tensor_load(&args.k)?;
    let v = tensor_load(&args.v)?;

    let predict_start = Instant::now();
    let masks = predict_masks(&q, &k, &cfg)?;
    let predict_ms = elapsed_ms(predict_start);
    let attn_start = Instant::now();
    let out = attention_with_masks(&q, &k, &v, &cfg, &masks)?;
    let attn_ms = elapsed_ms(attn_start);

    let per_head_sparsity = out
        .counters
        .iter()
        .map(sparsity_of)
        .collect::<Result<Vec<f64>>>()?;
    let sparsity = sparsity_of(&aggregate_counters(&out.counters))?;
    let oracle_l1 = if args.oracle {
        let oracle = dense_reference(&q, &k, &v, cfg.causal)?;
        Some(relative_l1(&out.o, &oracle.o)?)
    } else {
        None
    };

    tensor_store(&out.o, &args.out)?;
    write_json(
        &args.report,
        &RunReport {
            sparsity,
            per_head_sparsity,
            relative_l1: oracle_l1,
            predict_ms,
            attn_ms,
            config,
        },
    )
}

/// Calibration triples are files named `<stem>.q.stz` / `<stem>.k.stz` /
/// `<stem>.v.stz` inside one directory, paired by stem in sorted order.
fn find_calibration(dir: &Path) -> Result<Vec<(PathBuf, PathBuf, PathBuf)>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(stem) = name.strip_suffix(".q.stz") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(SpargeError::validation(format!(
            "no *.q.stz calibration files in {}",
            dir.display()
        )));
    }
    let mut triples = Vec::with_capacity(stems.len());
    for stem in stems {
        let q = dir.join(format!("{stem}.q.stz"));
        let k = dir.join(format!("{stem}.k.stz"));
        let v = dir.join(format!("{stem}.v.stz"));
        for path in [&k, &v] {
            if !path.is_file() {
                return Err(SpargeError::validation(format!(
                    "calibration stem '{stem}' is missing {}",
                    path.display()
                )));
            }
        }
        triples.push((q, k, v));
    }
    Ok(triples)
}

pub fn tune(args: &TuneArgs) -> Result<()> {
    let calib = find_calibration(&args.calib)?
        .into_iter()
        .map(|(q, k, v)| Ok((tensor_load(&q)?, tensor_load(&k)?, tensor_load(&v)?)))
        .collect::<Result<Vec<(Tensor, Tensor, Tensor)>>>()?;
    let spec = TuneSpec {
        l1: args.l1,
        l2: args.l2,
        tau_grid: default_tau_grid(),
        theta_grid: default_theta_grid(),
        lambda_grid: default_lambda_grid(),
        base: EngineConfig::default(),
        calib,
    };
    let params = tune_layer(&spec)?;
    write_json(&args.out, &TuneReport::from(params))
}

fn parse_usize_list(text: &str, what: &str) -> Result<Vec<usize>> {
    let values = text
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| SpargeError::validation(format!("bad {what} entry '{part}'")))
        })
        .collect::<Result<Vec<usize>>>()?;
    if values.is_empty() {
        return Err(SpargeError::validation(format!("{what} must be non-empty")));
    }
    Ok(values)
}

pub fn permute_eval(args: &PermuteEvalArgs) -> Result<()> {
    let dims_list = parse_usize_list(&args.dims, "dims")?;
    let [t, h, w] = dims_list[..] else {
        return Err(SpargeError::validation("dims must be T,H,W"));
    };
    let dims = GridDims::new(t, h, w)?;
    let cfg = EngineConfig {
        tau: 0.9,
        theta: Some(0.5),
        lambda: Some(-8.0),
        ..EngineConfig::default()
    };

    let q = gen_synthetic(SyntheticKind::Smooth3d, dims, args.d, 1, args.seed)?;
    let k = gen_synthetic(SyntheticKind::Smooth3d, dims, args.d, 1, args.seed + 1)?;
    let v = gen_synthetic(SyntheticKind::Smooth3d, dims, args.d, 1, args.seed + 2)?;
    let oracle = dense_reference(&q, &k, &v, false)?;

    let mut rows = Vec::with_capacity(ALL_KINDS.len());
    for kind in ALL_KINDS {
        let p = build_permutation(kind, dims, args.seed + 17)?;
        let qp = apply_permutation(&q, &p)?;
        let kp = apply_permutation(&k, &p)?;
        let vp = apply_permutation(&v, &p)?;
        let out = sparse_attention(&qp, &kp, &vp, &cfg)?;
        let restored = apply_permutation(&out.o, &p.inverted())?;
        rows.push(PermuteRow {
            kind: kind.name().to_string(),
            sim_q: block_self_similarity(&qp, cfg.b_q)?,
            sim_k: block_self_similarity(&kp, cfg.b_k)?,
            relative_l1: relative_l1(&restored, &oracle.o)?,
            sparsity: sparsity_of(&aggregate_counters(&out.counters))?,
        });
    }
    write_json(
        &args.report,
        &PermuteEvalReport {
            dims: [t, h, w],
            d: args.d,
            seed: args.seed,
            config: CliConfig::from_engine(cfg, args.seed),
            kinds: rows,
        },
    )
}

pub fn bench(args: &BenchArgs) -> Result<()> {
    let lens = parse_usize_list(&args.lens, "lens")?;
    let cfg = EngineConfig::default();
    let mut rows = Vec::with_capacity(lens.len());
    for n in lens {
        let dims = GridDims::flat(n)?;
        let q = gen_synthetic(SyntheticKind::Gaussian, dims, args.d, args.heads, 0)?;
        let k = gen_synthetic(SyntheticKind::Gaussian, dims, args.d, args.heads, 1)?;
        let v = gen_synthetic(SyntheticKind::Gaussian, dims, args.d, args.heads, 2)?;

        let predict_start = Instant::now();
        let _ = predict_masks(&q, &k, &cfg)?;
        let predict_ms = elapsed_ms(predict_start);

        let layout = make_layout(n, cfg.b_q, cfg.b_k)?;
        let dense = PredictedMasks::dense(layout, args.heads);
        let attn_start = Instant::now();
        let _ = attention_with_masks(&q, &k, &v, &cfg, &dense)?;
        let attn_ms = elapsed_ms(attn_start);

        rows.push(BenchRow {
            n,
            predict_ms,
            attn_ms,
            ratio: predict_ms / attn_ms,
        });
    }
    write_json(
        &args.report,
        &BenchReport {
            d: args.d,
            heads: args.heads,
            rows,
        },
    )
}

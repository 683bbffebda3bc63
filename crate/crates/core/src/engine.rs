//! Tiled attention with block-mask skipping, warp-level PV gating, optional
//! per-block quantization, a dense reference oracle and skip accounting.

use std::ops::Range;

use rayon::prelude::*;

use crate::blocks::{
    int8_tile_matmul, make_layout, quantize_blocks, BlockLayout, QuantizedBlocks,
    DEFAULT_KEY_BLOCK, DEFAULT_QUERY_BLOCK,
};
use crate::error::{Result, SpargeError};
use crate::mask::{predict_mask, GlobalMask};
use crate::scalar::{dot, Scalar};
use crate::tensor::DenseTensor;

/// Hyperparameters of one sparse attention call.
///
/// `tau` bounds the cumulative mass TopCdf keeps per compressed row, `theta`
/// gates the self-similarity forcing (disabled when `None`), `lambda` is the
/// negative PV-skip threshold (`None` disables the gate, the equivalent of a
/// negative-infinity sentinel).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig<S: Scalar> {
    pub b_q: usize,
    pub b_k: usize,
    /// Warp groups per query block; each makes an independent PV decision.
    pub c_w: usize,
    pub tau: S,
    pub theta: Option<S>,
    pub lambda: Option<S>,
    pub quantize: bool,
    pub causal: bool,
}

impl<S: Scalar> Default for EngineConfig<S> {
    fn default() -> Self {
        EngineConfig {
            b_q: DEFAULT_QUERY_BLOCK,
            b_k: DEFAULT_KEY_BLOCK,
            c_w: 4,
            tau: S::one(),
            theta: None,
            lambda: None,
            quantize: false,
            causal: false,
        }
    }
}

impl<S: Scalar> EngineConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.b_q == 0 || self.b_k == 0 || self.c_w == 0 {
            return Err(SpargeError::validation("block sizes and c_w must be nonzero"));
        }
        if self.b_q % self.c_w != 0 {
            return Err(SpargeError::validation(format!(
                "b_q {} must be divisible by c_w {}",
                self.b_q, self.c_w
            )));
        }
        if !(self.tau > S::zero() && self.tau <= S::one()) {
            return Err(SpargeError::validation("tau must lie in (0, 1]"));
        }
        if let Some(theta) = self.theta {
            if !(theta >= -S::one() && theta <= S::one()) {
                return Err(SpargeError::validation("theta must lie in [-1, 1]"));
            }
        }
        if let Some(lambda) = self.lambda {
            if !(lambda < S::zero()) {
                return Err(SpargeError::validation("lambda must be negative"));
            }
        }
        Ok(())
    }
}

/// Streaming softmax state for one query block: running row maxima `m`
/// (init -inf), denominators `l` (init 0) and the unnormalized output
/// accumulator `o` (init 0). `m` and `l` never decrease over the key loop.
#[derive(Debug, Clone)]
pub struct OnlineState<S: Scalar> {
    pub m: Vec<S>,
    pub l: Vec<S>,
    pub o: Vec<S>,
}

impl<S: Scalar> OnlineState<S> {
    pub fn new(rows: usize, d: usize) -> Self {
        OnlineState {
            m: vec![S::neg_infinity(); rows],
            l: vec![S::zero(); rows],
            o: vec![S::zero(); rows * d],
        }
    }
}

/// Realized skip counts, in warp-group slots: every in-range tile
/// contributes one slot per warp group (`c_w` for a full query block) to
/// both totals; a mask skip marks all of the tile's QK and PV slots, a
/// lambda skip marks one PV slot per skipped group. Ratios therefore match
/// tile-level arithmetic whenever whole tiles are skipped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipCounters {
    pub qk_skipped: u64,
    pub qk_total: u64,
    pub pv_skipped: u64,
    pub pv_total: u64,
}

impl SkipCounters {
    pub fn merge(&mut self, other: &SkipCounters) {
        self.qk_skipped += other.qk_skipped;
        self.qk_total += other.qk_total;
        self.pv_skipped += other.pv_skipped;
        self.pv_total += other.pv_total;
    }
}

/// Sums counters across heads.
pub fn aggregate_counters(counters: &[SkipCounters]) -> SkipCounters {
    let mut total = SkipCounters::default();
    for c in counters {
        total.merge(c);
    }
    total
}

/// Fraction of QK-plus-PV work skipped relative to the dense total.
pub fn sparsity_of(counters: &SkipCounters) -> Result<f64> {
    let total = counters.qk_total + counters.pv_total;
    if total == 0 {
        return Err(SpargeError::validation("sparsity undefined for zero totals"));
    }
    Ok((counters.qk_skipped + counters.pv_skipped) as f64 / total as f64)
}

/// Attention output plus one skip-counter record per head.
#[derive(Debug, Clone)]
pub struct AttnOutput<S: Scalar> {
    pub o: DenseTensor<S>,
    pub counters: Vec<SkipCounters>,
}

fn validate_inputs<S: Scalar>(
    q: &DenseTensor<S>,
    k: &DenseTensor<S>,
    v: &DenseTensor<S>,
) -> Result<(usize, usize, usize)> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(SpargeError::validation(format!(
            "Q, K and V shapes must match, got {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    q.dims3()
}

/// Exact two-pass softmax attention with float64 accumulation. The oracle
/// every accuracy bound in this crate is measured against.
pub fn dense_reference<S: Scalar>(
    q: &DenseTensor<S>,
    k: &DenseTensor<S>,
    v: &DenseTensor<S>,
    causal: bool,
) -> Result<AttnOutput<f64>> {
    let (h, n, d) = validate_inputs(q, k, v)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0f64; h * n * d];
    out.par_chunks_mut(n * d)
        .enumerate()
        .for_each(|(head, o_head)| {
            let qh: Vec<f64> = q.head(head).iter().map(|&x| x.to_f64()).collect();
            let kh: Vec<f64> = k.head(head).iter().map(|&x| x.to_f64()).collect();
            let vh: Vec<f64> = v.head(head).iter().map(|&x| x.to_f64()).collect();
            let mut scores = vec![0.0f64; n];
            for r in 0..n {
                let limit = if causal { r + 1 } else { n };
                let qrow = &qh[r * d..(r + 1) * d];
                let mut max = f64::NEG_INFINITY;
                for (j, slot) in scores[..limit].iter_mut().enumerate() {
                    let s = dot(qrow, &kh[j * d..(j + 1) * d]) * scale;
                    *slot = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut denom = 0.0f64;
                for slot in scores[..limit].iter_mut() {
                    *slot = (*slot - max).exp();
                    denom += *slot;
                }
                let orow = &mut o_head[r * d..(r + 1) * d];
                for (j, &p) in scores[..limit].iter().enumerate() {
                    let w = p / denom;
                    for (slot, &vv) in orow.iter_mut().zip(&vh[j * d..(j + 1) * d]) {
                        *slot += w * vv;
                    }
                }
            }
        });
    Ok(AttnOutput {
        o: DenseTensor::new(q.shape().to_vec(), out)?,
        counters: vec![SkipCounters::default(); h],
    })
}

/// Contiguous row ranges of the warp groups inside one query block. Group
/// height is `b_q / c_w`; for a partial trailing block the ranges are
/// clamped to the real row count and empty groups are dropped.
pub fn warp_groups(rows: usize, b_q: usize, c_w: usize) -> Vec<Range<usize>> {
    debug_assert!(c_w >= 1 && b_q % c_w == 0);
    let height = b_q / c_w;
    let mut groups = Vec::with_capacity(c_w);
    for g in 0..c_w {
        let start = g * height;
        if start >= rows {
            break;
        }
        groups.push(start..((g + 1) * height).min(rows));
    }
    groups
}

/// Row contribution to the gate statistic `max(m_local - m_new)`. A row
/// whose tile scores were all masked reports -inf so it never forces a
/// compute on its own.
#[inline]
fn gate_diff<S: Scalar>(m_local: S, m_new: S) -> S {
    if m_local == S::neg_infinity() {
        S::neg_infinity()
    } else {
        m_local - m_new
    }
}

fn group_computes<S: Scalar>(
    range: Range<usize>,
    m_local: &[S],
    m_new: &[S],
    lambda: Option<S>,
) -> bool {
    let Some(lambda) = lambda else {
        return true;
    };
    let mut best = S::neg_infinity();
    for r in range {
        let diff = gate_diff(m_local[r], m_new[r]);
        if diff > best {
            best = diff;
        }
    }
    best > lambda
}

/// Per-group PV decisions for one full query block: group `g` computes its
/// PV product iff `max(m_local[I_g] - m_new[I_g]) > lambda`. A `lambda` of
/// `None` is the disabled sentinel and every group computes. Equality at
/// the threshold skips.
pub fn warp_gate<S: Scalar>(
    m_local: &[S],
    m_new: &[S],
    c_w: usize,
    lambda: Option<S>,
) -> Vec<bool> {
    debug_assert_eq!(m_local.len(), m_new.len());
    debug_assert!(m_local.len() % c_w == 0, "row count must be divisible by c_w");
    warp_groups(m_local.len(), m_local.len(), c_w)
        .into_iter()
        .map(|range| group_computes(range, m_local, m_new, lambda))
        .collect()
}

/// Predicted block masks for every head, tied to the layout they were built
/// for.
#[derive(Debug, Clone)]
pub struct PredictedMasks {
    pub layout: BlockLayout,
    pub masks: Vec<GlobalMask>,
}

impl PredictedMasks {
    /// All-ones masks: the engine runs every in-range tile.
    pub fn dense(layout: BlockLayout, heads: usize) -> Self {
        PredictedMasks {
            layout,
            masks: vec![GlobalMask::dense(layout.t_m, layout.t_n); heads],
        }
    }
}

/// Runs the first-stage mask prediction for every head.
pub fn predict_masks<S: Scalar>(
    q: &DenseTensor<S>,
    k: &DenseTensor<S>,
    cfg: &EngineConfig<S>,
) -> Result<PredictedMasks> {
    cfg.validate()?;
    if q.shape() != k.shape() {
        return Err(SpargeError::validation(format!(
            "Q and K shapes must match, got {:?} and {:?}",
            q.shape(),
            k.shape()
        )));
    }
    let (h, n, d) = q.dims3()?;
    let layout = make_layout(n, cfg.b_q, cfg.b_k)?;
    let scale = S::from_f64(1.0 / (d as f64).sqrt());
    let masks: Vec<GlobalMask> = (0..h)
        .into_par_iter()
        .map(|head| {
            let q_scaled: Vec<S> = q.head(head).iter().map(|&x| x * scale).collect();
            predict_mask(&q_scaled, k.head(head), &layout, cfg.tau, cfg.theta, cfg.causal)
        })
        .collect();
    Ok(PredictedMasks { layout, masks })
}

struct HeadData<S: Scalar> {
    q_scaled: Vec<S>,
    q_quant: Option<QuantizedBlocks<S>>,
    k_quant: Option<QuantizedBlocks<S>>,
}

struct BlockCtx<'a, S: Scalar> {
    layout: BlockLayout,
    cfg: &'a EngineConfig<S>,
    d: usize,
    q_scaled: &'a [S],
    k: &'a [S],
    v: &'a [S],
    q_quant: Option<&'a QuantizedBlocks<S>>,
    k_quant: Option<&'a QuantizedBlocks<S>>,
    mask: &'a GlobalMask,
}

/// One query block of the Algorithm: stream over key blocks, skip tiles the
/// mask rules out, maintain the online softmax state, gate PV per warp
/// group, and normalize at the end.
fn process_query_block<S: Scalar>(
    ctx: &BlockCtx<'_, S>,
    i: usize,
    out_rows: &mut [S],
) -> Result<SkipCounters> {
    let layout = &ctx.layout;
    let cfg = ctx.cfg;
    let d = ctx.d;
    let q_range = layout.q_range(i);
    let rows = q_range.len();
    debug_assert_eq!(out_rows.len(), rows * d);
    let groups = warp_groups(rows, cfg.b_q, cfg.c_w);
    let slots = groups.len() as u64;

    let mut counters = SkipCounters::default();
    let mut state = OnlineState::new(rows, d);
    let mut tile = vec![S::zero(); rows * layout.b_k];
    let mut m_local = vec![S::neg_infinity(); rows];
    let mut m_new = vec![S::zero(); rows];
    let mut alpha = vec![S::zero(); rows];

    for j in 0..layout.t_n {
        let k_range = layout.k_range(j);
        if cfg.causal && k_range.start >= q_range.end {
            continue;
        }
        counters.qk_total += slots;
        counters.pv_total += slots;
        if !ctx.mask.get(i, j) {
            counters.qk_skipped += slots;
            counters.pv_skipped += slots;
            continue;
        }
        let cols = k_range.len();
        let scores = &mut tile[..rows * cols];

        if let (Some(qq), Some(kq)) = (ctx.q_quant, ctx.k_quant) {
            let s_int = int8_tile_matmul(qq.block_values(i), kq.block_values(j), rows, cols, d);
            let scale = qq.scales[i] * kq.scales[j];
            for (slot, &s) in scores.iter_mut().zip(&s_int) {
                *slot = S::from_f64(s as f64) * scale;
            }
        } else {
            for r in 0..rows {
                let qrow = &ctx.q_scaled[(q_range.start + r) * d..(q_range.start + r + 1) * d];
                for (c, slot) in scores[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                    let key = k_range.start + c;
                    *slot = dot(qrow, &ctx.k[key * d..(key + 1) * d]);
                }
            }
        }

        if cfg.causal && k_range.end > q_range.start + 1 {
            for r in 0..rows {
                let query = q_range.start + r;
                for (c, slot) in scores[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                    if k_range.start + c > query {
                        *slot = S::neg_infinity();
                    }
                }
            }
        }

        for r in 0..rows {
            let mut local = S::neg_infinity();
            for &s in &scores[r * cols..(r + 1) * cols] {
                if s > local {
                    local = s;
                }
            }
            m_local[r] = local;
            m_new[r] = if state.m[r] > local { state.m[r] } else { local };
            alpha[r] = if state.m[r] == S::neg_infinity() {
                S::zero()
            } else {
                (state.m[r] - m_new[r]).exp()
            };
        }

        // l absorbs this tile's mass before the gate decides on PV, so the
        // normalizer is slightly conservative for skipped groups.
        for r in 0..rows {
            let mut row_sum = S::zero();
            for slot in scores[r * cols..(r + 1) * cols].iter_mut() {
                let p = if *slot == S::neg_infinity() {
                    S::zero()
                } else {
                    (*slot - m_new[r]).exp()
                };
                *slot = p;
                row_sum += p;
            }
            state.l[r] = alpha[r] * state.l[r] + row_sum;
            state.m[r] = m_new[r];
        }

        for range in &groups {
            if !group_computes(range.clone(), &m_local, &m_new, cfg.lambda) {
                // A skipped group necessarily kept its previous maxima
                // (alpha = 1), so leaving o untouched is exact up to the
                // dropped near-zero PV mass.
                counters.pv_skipped += 1;
                continue;
            }
            for r in range.clone() {
                let a = alpha[r];
                let orow = &mut state.o[r * d..(r + 1) * d];
                if a != S::one() {
                    for slot in orow.iter_mut() {
                        *slot *= a;
                    }
                }
                for (c, &p) in scores[r * cols..(r + 1) * cols].iter().enumerate() {
                    if p == S::zero() {
                        continue;
                    }
                    let key = k_range.start + c;
                    for (slot, &vv) in orow.iter_mut().zip(&ctx.v[key * d..(key + 1) * d]) {
                        *slot += p * vv;
                    }
                }
            }
        }
    }

    for r in 0..rows {
        if state.l[r] == S::zero() {
            return Err(SpargeError::invariant(format!(
                "query row {} has a zero softmax normalizer",
                q_range.start + r
            )));
        }
        let inv = S::one() / state.l[r];
        for (slot, &acc) in out_rows[r * d..(r + 1) * d].iter_mut().zip(&state.o[r * d..(r + 1) * d]) {
            *slot = acc * inv;
        }
    }
    Ok(counters)
}

/// Runs the block loop against externally supplied masks. Every (head,
/// query block) pair executes independently with a sequential inner loop,
/// so results are identical at any parallelism degree.
pub fn attention_with_masks<S: Scalar>(
    q: &DenseTensor<S>,
    k: &DenseTensor<S>,
    v: &DenseTensor<S>,
    cfg: &EngineConfig<S>,
    masks: &PredictedMasks,
) -> Result<AttnOutput<S>> {
    cfg.validate()?;
    let (h, n, d) = validate_inputs(q, k, v)?;
    let layout = make_layout(n, cfg.b_q, cfg.b_k)?;
    if masks.layout != layout {
        return Err(SpargeError::validation(format!(
            "mask layout {:?} does not match the run layout {:?}",
            masks.layout, layout
        )));
    }
    if masks.masks.len() != h {
        return Err(SpargeError::validation(format!(
            "expected {} per-head masks, got {}",
            h,
            masks.masks.len()
        )));
    }
    if cfg.quantize && d > 1024 {
        return Err(SpargeError::validation(
            "quantized path requires d <= 1024 for exact integer accumulation",
        ));
    }

    let scale = S::from_f64(1.0 / (d as f64).sqrt());
    let heads_data: Vec<HeadData<S>> = (0..h)
        .into_par_iter()
        .map(|head| -> Result<HeadData<S>> {
            let q_scaled: Vec<S> = q.head(head).iter().map(|&x| x * scale).collect();
            let (q_quant, k_quant) = if cfg.quantize {
                (
                    Some(quantize_blocks(&q_scaled, n, d, cfg.b_q)?),
                    Some(quantize_blocks(k.head(head), n, d, cfg.b_k)?),
                )
            } else {
                (None, None)
            };
            Ok(HeadData {
                q_scaled,
                q_quant,
                k_quant,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = vec![S::zero(); h * n * d];
    let mut slices: Vec<&mut [S]> = Vec::with_capacity(h * layout.t_m);
    let mut rest: &mut [S] = &mut out;
    for _ in 0..h {
        for i in 0..layout.t_m {
            let (current, next) = rest.split_at_mut(layout.q_range(i).len() * d);
            slices.push(current);
            rest = next;
        }
    }
    let per_pair: Vec<Result<SkipCounters>> = slices
        .into_par_iter()
        .enumerate()
        .map(|(pair, out_rows)| {
            let head = pair / layout.t_m;
            let i = pair % layout.t_m;
            let data = &heads_data[head];
            let ctx = BlockCtx {
                layout,
                cfg,
                d,
                q_scaled: &data.q_scaled,
                k: k.head(head),
                v: v.head(head),
                q_quant: data.q_quant.as_ref(),
                k_quant: data.k_quant.as_ref(),
                mask: &masks.masks[head],
            };
            process_query_block(&ctx, i, out_rows)
        })
        .collect();

    let mut counters = vec![SkipCounters::default(); h];
    for (pair, result) in per_pair.into_iter().enumerate() {
        counters[pair / layout.t_m].merge(&result?);
    }
    let o = DenseTensor::new(q.shape().to_vec(), out)
        .map_err(|_| SpargeError::invariant("attention produced non-finite output"))?;
    Ok(AttnOutput { o, counters })
}

/// Full two-stage sparse attention: predict the per-head block masks, then
/// run the gated block loop.
pub fn sparse_attention<S: Scalar>(
    q: &DenseTensor<S>,
    k: &DenseTensor<S>,
    v: &DenseTensor<S>,
    cfg: &EngineConfig<S>,
) -> Result<AttnOutput<S>> {
    let masks = predict_masks(q, k, cfg)?;
    attention_with_masks(q, k, v, cfg, &masks)
}

//! Block partitioning of token sequences and per-block 8-bit quantization.

use std::ops::Range;

use crate::error::{Result, SpargeError};
use crate::scalar::Scalar;

/// Query block size matching the reference kernel blocking.
pub const DEFAULT_QUERY_BLOCK: usize = 128;
/// Key/value block size matching the reference kernel blocking.
pub const DEFAULT_KEY_BLOCK: usize = 64;

/// How a sequence of `n` tokens tiles into query blocks of `b_q` rows and
/// key blocks of `b_k` rows. The last block on either axis may be partial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub n: usize,
    pub b_q: usize,
    pub b_k: usize,
    /// Number of query blocks, ceil(n / b_q).
    pub t_m: usize,
    /// Number of key blocks, ceil(n / b_k).
    pub t_n: usize,
}

/// Builds the tiling for a sequence of `n` tokens.
pub fn make_layout(n: usize, b_q: usize, b_k: usize) -> Result<BlockLayout> {
    if n == 0 || b_q == 0 || b_k == 0 {
        return Err(SpargeError::validation(
            "sequence length and block sizes must be nonzero",
        ));
    }
    Ok(BlockLayout {
        n,
        b_q,
        b_k,
        t_m: n.div_ceil(b_q),
        t_n: n.div_ceil(b_k),
    })
}

impl BlockLayout {
    /// Token rows covered by query block `i`.
    pub fn q_range(&self, i: usize) -> Range<usize> {
        debug_assert!(i < self.t_m);
        i * self.b_q..((i + 1) * self.b_q).min(self.n)
    }

    /// Token rows covered by key block `j`.
    pub fn k_range(&self, j: usize) -> Range<usize> {
        debug_assert!(j < self.t_n);
        j * self.b_k..((j + 1) * self.b_k).min(self.n)
    }
}

/// Per-block symmetric INT8 quantization of a `[rows, d]` matrix: one scale
/// per block of `block` consecutive rows, values in `[-127, 127]`.
#[derive(Debug, Clone)]
pub struct QuantizedBlocks<S: Scalar> {
    /// Quantized values, same row-major layout as the source matrix.
    pub values: Vec<i8>,
    /// One positive scale per block.
    pub scales: Vec<S>,
    pub rows: usize,
    pub d: usize,
    /// Rows per block; the last block may be partial.
    pub block: usize,
}

impl<S: Scalar> QuantizedBlocks<S> {
    /// Quantized rows of block `b` as a contiguous `[rows_in_block, d]` slice.
    pub fn block_values(&self, b: usize) -> &[i8] {
        let start = b * self.block;
        let end = ((b + 1) * self.block).min(self.rows);
        &self.values[start * self.d..end * self.d]
    }
}

/// Quantizes `x` (`[rows, d]` row-major) in blocks of `block` rows.
///
/// Per block the scale is `max|x| / 127`, or 1 when the block is all zeros,
/// and each element becomes `round(x / scale)` with halves rounded away from
/// zero, clamped to `[-127, 127]`.
pub fn quantize_blocks<S: Scalar>(x: &[S], rows: usize, d: usize, block: usize) -> Result<QuantizedBlocks<S>> {
    if rows == 0 || d == 0 || block == 0 {
        return Err(SpargeError::validation(
            "rows, d and block size must be nonzero",
        ));
    }
    if x.len() != rows * d {
        return Err(SpargeError::validation(format!(
            "expected {} elements for a [{rows}, {d}] matrix, got {}",
            rows * d,
            x.len()
        )));
    }
    let blocks = rows.div_ceil(block);
    let mut values = vec![0i8; rows * d];
    let mut scales = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let start = b * block;
        let end = ((b + 1) * block).min(rows);
        let slice = &x[start * d..end * d];
        let mut max_abs = S::zero();
        for &v in slice {
            max_abs = max_abs.max(v.abs());
        }
        let scale = if max_abs == S::zero() {
            S::one()
        } else {
            max_abs / S::from_f64(127.0)
        };
        let inv = S::one() / scale;
        let lo = S::from_f64(-127.0);
        let hi = S::from_f64(127.0);
        for (slot, &v) in values[start * d..end * d].iter_mut().zip(slice) {
            let q = (v * inv).round().max(lo).min(hi);
            *slot = q.to_f64() as i8;
        }
        scales.push(scale);
    }
    Ok(QuantizedBlocks {
        values,
        scales,
        rows,
        d,
        block,
    })
}

/// Exact integer product of two quantized tiles: `q_vals` is `[rows, d]`,
/// `k_vals` is `[cols, d]`, the result is `[rows, cols]` in i32. For
/// `d <= 1024` the accumulation cannot overflow (127*127*1024 < 2^31).
pub fn int8_tile_matmul(q_vals: &[i8], k_vals: &[i8], rows: usize, cols: usize, d: usize) -> Vec<i32> {
    debug_assert_eq!(q_vals.len(), rows * d);
    debug_assert_eq!(k_vals.len(), cols * d);
    debug_assert!(d <= 1024, "i32 accumulation is exact only for d <= 1024");
    let mut out = vec![0i32; rows * cols];
    for r in 0..rows {
        let qrow = &q_vals[r * d..(r + 1) * d];
        for c in 0..cols {
            let krow = &k_vals[c * d..(c + 1) * d];
            let mut acc = 0i32;
            for (&a, &b) in qrow.iter().zip(krow) {
                acc += a as i32 * b as i32;
            }
            out[r * cols + c] = acc;
        }
    }
    out
}

/// Rescales an integer score tile into float scores: `s_int * delta_q *
/// delta_k`. The 1/sqrt(d) normalization is folded into Q before
/// quantization, so `d` only bounds the exact-accumulation guarantee here.
pub fn dequant_score<S: Scalar>(s_int: &[i32], delta_q: S, delta_k: S, d: usize) -> Vec<S> {
    debug_assert!(d >= 1 && d <= 1024, "exactness bound requires 1 <= d <= 1024");
    let scale = delta_q * delta_k;
    s_int
        .iter()
        .map(|&v| S::from_f64(v as f64) * scale)
        .collect()
}

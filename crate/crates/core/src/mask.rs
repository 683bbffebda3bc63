//! First-stage filter: pooled-token compressed attention map, block
//! self-similarity gating, TopCdf selection and global mask assembly.

use crate::blocks::BlockLayout;
use crate::scalar::{dot, Scalar};

/// Absolute slack added to the cumulative-mass comparison so a threshold of
/// exactly 1 keeps the full support under floating-point summation.
pub const TOP_CDF_EPS: f64 = 1e-9;

/// Block-mean representatives of the query and key sequences.
#[derive(Debug, Clone)]
pub struct PooledTokens<S: Scalar> {
    /// `[t_m, d]` row-major means of query blocks.
    pub q: Vec<S>,
    /// `[t_n, d]` row-major means of key blocks.
    pub k: Vec<S>,
    pub t_m: usize,
    pub t_n: usize,
    pub d: usize,
}

/// Per-block self-similarity scores for the query and key sequences.
#[derive(Debug, Clone)]
pub struct SimilarityVectors<S: Scalar> {
    pub s_q: Vec<S>,
    pub s_k: Vec<S>,
}

/// Row-softmax of the pooled score matrix; `[t_m, t_n]` row-major. A row
/// whose scores were entirely masked is all zeros.
#[derive(Debug, Clone)]
pub struct CompressedMap<S: Scalar> {
    pub p_hat: Vec<S>,
    pub t_m: usize,
    pub t_n: usize,
}

impl<S: Scalar> CompressedMap<S> {
    pub fn row(&self, i: usize) -> &[S] {
        &self.p_hat[i * self.t_n..(i + 1) * self.t_n]
    }
}

/// Binary `[t_m, t_n]` matrix deciding which query-block x key-block tiles
/// the engine computes. Every row has at least one set bit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalMask {
    bits: Vec<bool>,
    pub t_m: usize,
    pub t_n: usize,
}

impl GlobalMask {
    /// All-ones mask (dense execution).
    pub fn dense(t_m: usize, t_n: usize) -> Self {
        GlobalMask {
            bits: vec![true; t_m * t_n],
            t_m,
            t_n,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.t_n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.bits[i * self.t_n + j] = value;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.t_n..(i + 1) * self.t_n]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Arithmetic mean over each block of `block` consecutive rows of the
/// `[n, d]` matrix `x`; returns `ceil(n/block)` pooled rows.
pub fn block_mean_pool<S: Scalar>(x: &[S], n: usize, d: usize, block: usize) -> Vec<S> {
    debug_assert_eq!(x.len(), n * d);
    let blocks = n.div_ceil(block);
    let mut pooled = vec![S::zero(); blocks * d];
    for b in 0..blocks {
        let start = b * block;
        let end = ((b + 1) * block).min(n);
        let out = &mut pooled[b * d..(b + 1) * d];
        for r in start..end {
            for (slot, &v) in out.iter_mut().zip(&x[r * d..(r + 1) * d]) {
                *slot += v;
            }
        }
        let inv = S::one() / S::from_f64((end - start) as f64);
        for slot in out.iter_mut() {
            *slot *= inv;
        }
    }
    pooled
}

/// Self-similarity of one `[rows, d]` block: the mean of its Gram matrix
/// `G = X X^T` divided by `|max(G)|`, or 1 when the block is all zeros
/// (`max(G) == 0`). Values never exceed 1.
pub fn block_cos_sim<S: Scalar>(block: &[S], rows: usize, d: usize) -> S {
    debug_assert_eq!(block.len(), rows * d);
    let mut sum = S::zero();
    let mut max = S::neg_infinity();
    for i in 0..rows {
        let a = &block[i * d..(i + 1) * d];
        for j in i..rows {
            let g = dot(a, &block[j * d..(j + 1) * d]);
            if g > max {
                max = g;
            }
            if i == j {
                sum += g;
            } else {
                sum += g + g;
            }
        }
    }
    if max == S::zero() {
        return S::one();
    }
    let mean = sum / S::from_f64((rows * rows) as f64);
    mean / max.abs()
}

/// [`block_cos_sim`] over every block of `block` consecutive rows.
pub fn block_similarities<S: Scalar>(x: &[S], n: usize, d: usize, block: usize) -> Vec<S> {
    let blocks = n.div_ceil(block);
    (0..blocks)
        .map(|b| {
            let start = b * block;
            let end = ((b + 1) * block).min(n);
            block_cos_sim(&x[start * d..end * d], end - start, d)
        })
        .collect()
}

/// Pooled score matrix `q_i . k_j` with every column of a non-self-similar
/// key block (`s_k[j] < theta`) forced to negative infinity. The pooled
/// query rows are expected to carry the same 1/sqrt(d) scaling the engine
/// folds into Q, so the scores approximate true attention logits. A `theta`
/// of `None` disables the similarity gate.
pub fn compressed_scores<S: Scalar>(
    pooled: &PooledTokens<S>,
    s_k: &[S],
    theta: Option<S>,
) -> Vec<S> {
    debug_assert_eq!(s_k.len(), pooled.t_n);
    let mut scores = vec![S::zero(); pooled.t_m * pooled.t_n];
    for i in 0..pooled.t_m {
        let qrow = &pooled.q[i * pooled.d..(i + 1) * pooled.d];
        let out = &mut scores[i * pooled.t_n..(i + 1) * pooled.t_n];
        for (j, slot) in out.iter_mut().enumerate() {
            let masked = matches!(theta, Some(th) if s_k[j] < th);
            *slot = if masked {
                S::neg_infinity()
            } else {
                dot(qrow, &pooled.k[j * pooled.d..(j + 1) * pooled.d])
            };
        }
    }
    scores
}

/// Forces tiles strictly above the block diagonal to negative infinity so
/// the compressed softmax ignores key blocks no query row may attend to.
pub fn mask_causal_tiles<S: Scalar>(scores: &mut [S], layout: &BlockLayout) {
    for i in 0..layout.t_m {
        let q_end = layout.q_range(i).end;
        for j in 0..layout.t_n {
            if layout.k_range(j).start >= q_end {
                scores[i * layout.t_n + j] = S::neg_infinity();
            }
        }
    }
}

/// Numerically stable row-wise softmax. A row that is entirely negative
/// infinity maps to all zeros, which [`build_global_mask`] later expands to
/// an all-ones mask row.
pub fn compressed_softmax<S: Scalar>(scores: &[S], t_m: usize, t_n: usize) -> CompressedMap<S> {
    debug_assert_eq!(scores.len(), t_m * t_n);
    let mut p_hat = vec![S::zero(); t_m * t_n];
    for i in 0..t_m {
        let row = &scores[i * t_n..(i + 1) * t_n];
        let out = &mut p_hat[i * t_n..(i + 1) * t_n];
        let mut max = S::neg_infinity();
        for &v in row {
            if v > max {
                max = v;
            }
        }
        if max == S::neg_infinity() {
            continue;
        }
        let mut sum = S::zero();
        for (slot, &v) in out.iter_mut().zip(row) {
            let e = if v == S::neg_infinity() {
                S::zero()
            } else {
                (v - max).exp()
            };
            *slot = e;
            sum += e;
        }
        let inv = S::one() / sum;
        for slot in out.iter_mut() {
            *slot *= inv;
        }
    }
    CompressedMap { p_hat, t_m, t_n }
}

/// Selects the positions of the largest entries whose cumulative sum stays
/// within `tau` times the row total.
///
/// The row is sorted descending (stable, so ties keep the lower original
/// index first) and the selected prefix is the longest run of positive
/// entries whose running sum is at most `tau * sum + 1e-9`. The largest
/// entry is always selected, so a mask row is never empty even for tiny
/// `tau`.
pub fn top_cdf<S: Scalar>(row: &[S], tau: S) -> Vec<bool> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
    // Mass accounting runs in float64 so the epsilon slack is not eaten by
    // accumulation error; at tau = 1 every positive entry must survive.
    let sum: f64 = row.iter().map(|&v| v.to_f64()).sum();
    let budget = tau.to_f64() * sum + TOP_CDF_EPS;
    let mut selected = vec![false; row.len()];
    let mut cumulative = 0.0f64;
    for &idx in &order {
        let p = row[idx].to_f64();
        if p <= 0.0 {
            break;
        }
        cumulative += p;
        if cumulative > budget {
            break;
        }
        selected[idx] = true;
    }
    if let Some(&first) = order.first() {
        selected[first] = true;
    }
    selected
}

/// Assembles the global block mask: TopCdf row selection, then the forcing
/// rules for non-self-similar blocks (rows where `s_q[i] < theta` and
/// columns where `s_k[j] < theta` become all ones), with an all-ones
/// fallback for rows whose compressed scores were fully masked.
pub fn build_global_mask<S: Scalar>(
    map: &CompressedMap<S>,
    s_q: &[S],
    s_k: &[S],
    tau: S,
    theta: Option<S>,
) -> GlobalMask {
    debug_assert_eq!(s_q.len(), map.t_m);
    debug_assert_eq!(s_k.len(), map.t_n);
    let mut mask = GlobalMask {
        bits: vec![false; map.t_m * map.t_n],
        t_m: map.t_m,
        t_n: map.t_n,
    };
    for i in 0..map.t_m {
        let row = map.row(i);
        if row.iter().all(|&p| p == S::zero()) {
            for j in 0..map.t_n {
                mask.set(i, j, true);
            }
            continue;
        }
        for (j, keep) in top_cdf(row, tau).into_iter().enumerate() {
            mask.set(i, j, keep);
        }
    }
    if let Some(th) = theta {
        for i in 0..map.t_m {
            if s_q[i] < th {
                for j in 0..map.t_n {
                    mask.set(i, j, true);
                }
            }
        }
        for j in 0..map.t_n {
            if s_k[j] < th {
                for i in 0..map.t_m {
                    mask.set(i, j, true);
                }
            }
        }
    }
    mask
}

/// Runs the full first-stage prediction for one head.
///
/// `q_scaled` must already carry the 1/sqrt(d) factor. Under `causal`,
/// tiles strictly above the block diagonal are masked out of the compressed
/// map, and every tile crossing the diagonal is forced on so each query row
/// keeps at least its own diagonal keys.
pub fn predict_mask<S: Scalar>(
    q_scaled: &[S],
    k: &[S],
    layout: &BlockLayout,
    tau: S,
    theta: Option<S>,
    causal: bool,
) -> GlobalMask {
    let pooled = PooledTokens {
        q: block_mean_pool(q_scaled, layout.n, q_scaled.len() / layout.n, layout.b_q),
        k: block_mean_pool(k, layout.n, k.len() / layout.n, layout.b_k),
        t_m: layout.t_m,
        t_n: layout.t_n,
        d: q_scaled.len() / layout.n,
    };
    let sims = SimilarityVectors {
        s_q: block_similarities(q_scaled, layout.n, pooled.d, layout.b_q),
        s_k: block_similarities(k, layout.n, pooled.d, layout.b_k),
    };
    let mut scores = compressed_scores(&pooled, &sims.s_k, theta);
    if causal {
        mask_causal_tiles(&mut scores, layout);
    }
    let map = compressed_softmax(&scores, layout.t_m, layout.t_n);
    let mut mask = build_global_mask(&map, &sims.s_q, &sims.s_k, tau, theta);
    if causal {
        for i in 0..layout.t_m {
            let q_range = layout.q_range(i);
            for j in 0..layout.t_n {
                let k_range = layout.k_range(j);
                if k_range.start < q_range.end && k_range.end > q_range.start {
                    mask.set(i, j, true);
                }
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::make_layout;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_row(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }

    #[test]
    fn pooling_identical_rows_returns_the_row() {
        let x = vec![3.0f32, -1.0, 3.0, -1.0, 3.0, -1.0];
        let pooled = block_mean_pool(&x, 3, 2, 3);
        assert_eq!(pooled, vec![3.0, -1.0]);
    }

    #[test]
    fn pooling_averages_two_rows() {
        let x = vec![1.0f32, 0.0, 0.0, 1.0];
        let pooled = block_mean_pool(&x, 2, 2, 2);
        assert_eq!(pooled, vec![0.5, 0.5]);
    }

    #[test]
    fn pooling_partial_block_uses_real_row_count() {
        let mut x = vec![0.0f32; 130 * 2];
        x[128 * 2] = 2.0;
        x[129 * 2] = 4.0;
        let pooled = block_mean_pool(&x, 130, 2, 128);
        assert_eq!(pooled.len(), 2 * 2);
        assert_eq!(pooled[2], 3.0);
        assert_eq!(pooled[3], 0.0);
    }

    #[test]
    fn cos_sim_identical_unit_rows_is_one() {
        let x = vec![1.0f32, 0.0, 1.0, 0.0, 1.0, 0.0];
        assert!((block_cos_sim(&x, 3, 2) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cos_sim_orthonormal_pair_is_half() {
        let x = vec![1.0f32, 0.0, 0.0, 1.0];
        assert!((block_cos_sim(&x, 2, 2) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn cos_sim_all_zero_block_is_one() {
        let x = vec![0.0f32; 6];
        assert_eq!(block_cos_sim(&x, 3, 2), 1.0);
    }

    #[test]
    fn cos_sim_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = 9;
        let d = 7;
        let x: Vec<f64> = (0..rows * d).map(|_| rng.sample(StandardNormal)).collect();
        let score = block_cos_sim(&x, rows, d);

        let mut gram = vec![0.0f64; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += x[i * d + c] * x[j * d + c];
                }
                gram[i * rows + j] = acc;
            }
        }
        let max = gram.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean: f64 = gram.iter().sum::<f64>() / (rows * rows) as f64;
        let expected = mean / max.abs();
        assert!((score - expected).abs() < 1e-10);
    }

    #[test]
    fn scores_mask_columns_below_theta() {
        let pooled = PooledTokens {
            q: vec![1.0f32, 0.0],
            k: vec![1.0, 0.0, 0.0, 1.0],
            t_m: 1,
            t_n: 2,
            d: 2,
        };
        let all_masked = compressed_scores(&pooled, &[0.1, 0.2], Some(0.5));
        assert!(all_masked.iter().all(|&v| v == f32::NEG_INFINITY));

        let open = compressed_scores(&pooled, &[0.9, 0.2], Some(0.5));
        assert_eq!(open[0], 1.0);
        assert_eq!(open[1], f32::NEG_INFINITY);

        let disabled = compressed_scores(&pooled, &[0.1, 0.2], None);
        assert_eq!(disabled, vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        let map = compressed_softmax(&[2.0f64, 2.0, 2.0, 2.0], 1, 4);
        for &p in map.row(0) {
            assert!((p - 0.25).abs() < 1e-12);
        }

        let map = compressed_softmax(&[0.0f64, f64::NEG_INFINITY], 1, 2);
        assert_eq!(map.row(0), &[1.0, 0.0]);

        let map = compressed_softmax(&[f64::NEG_INFINITY; 3], 1, 3);
        assert_eq!(map.row(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let scores: Vec<f32> = (0..6 * 9)
            .map(|_| rng.sample::<f32, _>(StandardNormal) * 3.0)
            .collect();
        let map = compressed_softmax(&scores, 6, 9);
        for i in 0..6 {
            let sum: f32 = map.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn top_cdf_hand_example() {
        assert_eq!(top_cdf(&[0.5f64, 0.3, 0.2], 0.8), vec![true, true, false]);
    }

    #[test]
    fn top_cdf_tau_one_selects_full_support() {
        assert_eq!(top_cdf(&[0.5f64, 0.5, 0.0], 1.0), vec![true, true, false]);
    }

    #[test]
    fn top_cdf_tau_zero_keeps_argmax() {
        assert_eq!(top_cdf(&[0.5f64, 0.3, 0.2], 0.0), vec![true, false, false]);
    }

    #[test]
    fn top_cdf_breaks_ties_toward_lower_index() {
        assert_eq!(top_cdf(&[0.4f64, 0.4, 0.2], 0.5), vec![true, false, false]);
        assert_eq!(top_cdf(&[0.2f64, 0.4, 0.4], 0.5), vec![false, true, false]);
    }

    #[test]
    fn top_cdf_matches_brute_force_on_random_rows() {
        for seed in 0..50 {
            let row = random_row(16, seed);
            for &tau in &[0.0, 0.3, 0.5, 0.9, 1.0] {
                let got = top_cdf(&row, tau);
                let want = brute_force_top_cdf(&row, tau);
                assert_eq!(got, want, "seed {seed} tau {tau}");
            }
        }
    }

    fn brute_force_top_cdf(row: &[f64], tau: f64) -> Vec<bool> {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let total: f64 = row.iter().sum();
        let mut best = vec![false; row.len()];
        let mut running = 0.0;
        for &idx in &order {
            if row[idx] <= 0.0 {
                break;
            }
            running += row[idx];
            if running > tau * total + TOP_CDF_EPS {
                break;
            }
            best[idx] = true;
        }
        best[order[0]] = true;
        best
    }

    #[test]
    fn mask_forces_rows_and_columns() {
        let map = CompressedMap {
            p_hat: vec![0.9f64, 0.1, 0.8, 0.2],
            t_m: 2,
            t_n: 2,
        };
        let mask = build_global_mask(&map, &[0.9, 0.1], &[0.9, 0.1], 0.5, Some(0.5));
        assert!(mask.get(1, 0) && mask.get(1, 1), "row 1 forced by s_q");
        assert!(mask.get(0, 1), "column 1 forced by s_k");

        let saturated = build_global_mask(&map, &[0.9, 0.1], &[0.9, 0.1], 0.5, Some(0.95));
        assert_eq!(saturated.count_ones(), 4);
    }

    #[test]
    fn mask_without_theta_keeps_positive_support_at_tau_one() {
        let map = CompressedMap {
            p_hat: vec![0.7f64, 0.3, 0.0, 1.0, 0.0, 0.0],
            t_m: 2,
            t_n: 3,
        };
        let mask = build_global_mask(&map, &[1.0, 1.0], &[1.0, 1.0, 1.0], 1.0, None);
        assert_eq!(mask.row(0), &[true, true, false]);
        assert_eq!(mask.row(1), &[true, false, false]);
    }

    #[test]
    fn mask_all_zero_row_becomes_all_ones() {
        let map = CompressedMap {
            p_hat: vec![0.0f64, 0.0, 0.0, 0.5, 0.25, 0.25],
            t_m: 2,
            t_n: 3,
        };
        let mask = build_global_mask(&map, &[1.0, 1.0], &[1.0, 1.0, 1.0], 0.4, None);
        assert_eq!(mask.row(0), &[true, true, true]);
        assert_eq!(mask.row(1), &[true, false, false]);
    }

    #[test]
    fn mask_is_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..4 * 8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let map = compressed_softmax(&scores, 4, 8);
            let sims_q = vec![1.0; 4];
            let sims_k = vec![1.0; 8];
            let small = build_global_mask(&map, &sims_q, &sims_k, 0.5, None);
            let large = build_global_mask(&map, &sims_q, &sims_k, 0.9, None);
            for i in 0..4 {
                for j in 0..8 {
                    assert!(!small.get(i, j) || large.get(i, j));
                }
            }
        }
    }

    #[test]
    fn causal_tiles_above_diagonal_are_masked() {
        let layout = make_layout(256, 128, 64).unwrap();
        let mut scores = vec![0.0f32; layout.t_m * layout.t_n];
        mask_causal_tiles(&mut scores, &layout);
        assert_eq!(scores[0 * 4 + 1], 0.0, "crossing tile stays");
        assert_eq!(scores[0 * 4 + 2], f32::NEG_INFINITY);
        assert_eq!(scores[0 * 4 + 3], f32::NEG_INFINITY);
        assert!(scores[4..8].iter().all(|&v| v == 0.0), "last block row all valid");
    }

    #[test]
    fn predict_mask_keeps_causal_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let n = 256;
        let d = 16;
        let q: Vec<f32> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        let k: Vec<f32> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        let layout = make_layout(n, 128, 64).unwrap();
        let mask = predict_mask(&q, &k, &layout, 0.3, None, true);
        for i in 0..layout.t_m {
            let q_range = layout.q_range(i);
            for j in 0..layout.t_n {
                let k_range = layout.k_range(j);
                if k_range.start < q_range.end && k_range.end > q_range.start {
                    assert!(mask.get(i, j), "diagonal tile ({i}, {j}) must stay on");
                }
                if k_range.start >= q_range.end {
                    assert!(!mask.get(i, j), "tile ({i}, {j}) is above the diagonal");
                }
            }
        }
    }
}

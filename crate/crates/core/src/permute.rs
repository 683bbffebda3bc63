//! Token reorderings for grid-shaped (video-like) sequences and the block
//! self-similarity metric used to compare them.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SpargeError};
use crate::mask::block_cos_sim;
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, GridDims};

/// The five supported token orders over a (T, H, W) grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PermutationKind {
    /// Seeded uniform shuffle.
    Random,
    /// Scan along W fastest, then H, then T. The grid's native layout, so
    /// this is the identity.
    RowMajor,
    /// Scan along H fastest, then W, then T.
    ColMajor,
    /// Scan along T fastest, then W, then H.
    TimeMajor,
    /// Generalized Hilbert curve over the grid; works for arbitrary
    /// extents, not just powers of two.
    Hilbert,
}

/// Every kind, in the order reports enumerate them.
pub const ALL_KINDS: [PermutationKind; 5] = [
    PermutationKind::Random,
    PermutationKind::RowMajor,
    PermutationKind::ColMajor,
    PermutationKind::TimeMajor,
    PermutationKind::Hilbert,
];

impl PermutationKind {
    pub fn name(&self) -> &'static str {
        match self {
            PermutationKind::Random => "random",
            PermutationKind::RowMajor => "rowmajor",
            PermutationKind::ColMajor => "colmajor",
            PermutationKind::TimeMajor => "timemajor",
            PermutationKind::Hilbert => "hilbert",
        }
    }
}

impl fmt::Display for PermutationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PermutationKind {
    type Err = SpargeError;

    fn from_str(s: &str) -> Result<Self> {
        ALL_KINDS
            .iter()
            .copied()
            .find(|kind| kind.name() == s)
            .ok_or_else(|| SpargeError::validation(format!("unknown permutation kind '{s}'")))
    }
}

/// A bijective token reordering with its precomputed inverse.
///
/// `forward[new] = old`: position `new` of the permuted sequence is read
/// from position `old` of the source.
#[derive(Debug, Clone)]
pub struct Permutation {
    kind: PermutationKind,
    dims: GridDims,
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    /// Builds from an explicit forward map, checking bijectivity.
    pub fn from_forward(kind: PermutationKind, dims: GridDims, forward: Vec<usize>) -> Result<Self> {
        let n = forward.len();
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in forward.iter().enumerate() {
            if old >= n {
                return Err(SpargeError::validation(format!(
                    "permutation entry {old} out of range for length {n}"
                )));
            }
            if inverse[old] != usize::MAX {
                return Err(SpargeError::validation(format!(
                    "permutation maps two positions to source {old}"
                )));
            }
            inverse[old] = new;
        }
        Ok(Permutation {
            kind,
            dims,
            forward,
            inverse,
        })
    }

    pub fn kind(&self) -> PermutationKind {
        self.kind
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    /// The inverse reordering; applying both in sequence restores the
    /// original order.
    pub fn inverted(&self) -> Permutation {
        Permutation {
            kind: self.kind,
            dims: self.dims,
            forward: self.inverse.clone(),
            inverse: self.forward.clone(),
        }
    }

    /// Extends to a longer sequence: positions `offset..offset + len()`
    /// permute as before, everything else stays in place.
    pub fn embed(&self, total_n: usize, offset: usize) -> Result<Permutation> {
        if offset.checked_add(self.len()).map_or(true, |end| end > total_n) {
            return Err(SpargeError::validation(format!(
                "embedding region {}..{} exceeds length {total_n}",
                offset,
                offset + self.len()
            )));
        }
        let mut forward: Vec<usize> = (0..total_n).collect();
        for (new, &old) in self.forward.iter().enumerate() {
            forward[offset + new] = offset + old;
        }
        Permutation::from_forward(self.kind, self.dims, forward)
    }
}

fn sgn(v: i64) -> i64 {
    v.signum()
}

/// Generalized Hilbert curve over an arbitrary cuboid. Visits every cell of
/// the `width x height x depth` box exactly once, recursing on halved axis
/// vectors with even splits preferred so steps stay unit-length wherever
/// the extents allow.
fn gilbert3d(width: i64, height: i64, depth: i64) -> Vec<(i64, i64, i64)> {
    let mut path = Vec::with_capacity((width * height * depth) as usize);
    if width >= height && width >= depth {
        generate3d((0, 0, 0), (width, 0, 0), (0, height, 0), (0, 0, depth), &mut path);
    } else if height >= width && height >= depth {
        generate3d((0, 0, 0), (0, height, 0), (width, 0, 0), (0, 0, depth), &mut path);
    } else {
        generate3d((0, 0, 0), (0, 0, depth), (width, 0, 0), (0, height, 0), &mut path);
    }
    path
}

type V3 = (i64, i64, i64);

fn add(p: V3, q: V3) -> V3 {
    (p.0 + q.0, p.1 + q.1, p.2 + q.2)
}

fn sub(p: V3, q: V3) -> V3 {
    (p.0 - q.0, p.1 - q.1, p.2 - q.2)
}

fn neg(p: V3) -> V3 {
    (-p.0, -p.1, -p.2)
}

fn unit(p: V3) -> V3 {
    (sgn(p.0), sgn(p.1), sgn(p.2))
}

fn extent(p: V3) -> i64 {
    (p.0 + p.1 + p.2).abs()
}

fn half(p: V3) -> V3 {
    (p.0 / 2, p.1 / 2, p.2 / 2)
}

fn generate3d(p: V3, a: V3, b: V3, c: V3, path: &mut Vec<V3>) {
    let w = extent(a);
    let h = extent(b);
    let d = extent(c);

    let da = unit(a);
    let db = unit(b);
    let dc = unit(c);

    if h == 1 && d == 1 {
        let mut cursor = p;
        for _ in 0..w {
            path.push(cursor);
            cursor = add(cursor, da);
        }
        return;
    }
    if w == 1 && d == 1 {
        let mut cursor = p;
        for _ in 0..h {
            path.push(cursor);
            cursor = add(cursor, db);
        }
        return;
    }
    if w == 1 && h == 1 {
        let mut cursor = p;
        for _ in 0..d {
            path.push(cursor);
            cursor = add(cursor, dc);
        }
        return;
    }

    let mut a2 = half(a);
    let mut b2 = half(b);
    let mut c2 = half(c);

    if extent(a2) % 2 == 1 && w > 2 {
        a2 = add(a2, da);
    }
    if extent(b2) % 2 == 1 && h > 2 {
        b2 = add(b2, db);
    }
    if extent(c2) % 2 == 1 && d > 2 {
        c2 = add(c2, dc);
    }

    if 2 * w > 3 * h && 2 * w > 3 * d {
        // Wide case: split along the major axis only.
        generate3d(p, a2, b, c, path);
        generate3d(add(p, a2), sub(a, a2), b, c, path);
    } else if 3 * h > 4 * d {
        // Tall case: split along the major and second axes.
        generate3d(p, b2, c, a2, path);
        generate3d(add(p, b2), a, sub(b, b2), c, path);
        generate3d(
            add(p, add(sub(a, da), sub(b2, db))),
            neg(b2),
            c,
            neg(sub(a, a2)),
            path,
        );
    } else if 3 * d > 4 * h {
        // Deep case: split along the major and third axes.
        generate3d(p, c2, a2, b, path);
        generate3d(add(p, c2), a, b, sub(c, c2), path);
        generate3d(
            add(p, add(sub(a, da), sub(c2, dc))),
            neg(c2),
            neg(sub(a, a2)),
            b,
            path,
        );
    } else {
        // Regular case: split along all three axes.
        generate3d(p, b2, c2, a2, path);
        generate3d(add(p, b2), c, a2, sub(b, b2), path);
        generate3d(
            add(p, add(sub(b2, db), sub(c, dc))),
            a,
            neg(b2),
            neg(sub(c, c2)),
            path,
        );
        generate3d(
            add(p, add(sub(a, da), add(b2, sub(c, dc)))),
            neg(c),
            neg(sub(a, a2)),
            sub(b, b2),
            path,
        );
        generate3d(
            add(p, add(sub(a, da), sub(b2, db))),
            neg(b2),
            c2,
            neg(sub(a, a2)),
            path,
        );
    }
}

/// Builds the forward map of `kind` over `dims`. The seed only matters for
/// the random kind.
pub fn build_permutation(kind: PermutationKind, dims: GridDims, seed: u64) -> Result<Permutation> {
    let n = dims.n();
    let forward: Vec<usize> = match kind {
        PermutationKind::RowMajor => (0..n).collect(),
        PermutationKind::ColMajor => {
            let mut order = Vec::with_capacity(n);
            for t in 0..dims.t {
                for w in 0..dims.w {
                    for h in 0..dims.h {
                        order.push(dims.index(t, h, w));
                    }
                }
            }
            order
        }
        PermutationKind::TimeMajor => {
            let mut order = Vec::with_capacity(n);
            for h in 0..dims.h {
                for w in 0..dims.w {
                    for t in 0..dims.t {
                        order.push(dims.index(t, h, w));
                    }
                }
            }
            order
        }
        PermutationKind::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
            order
        }
        PermutationKind::Hilbert => {
            let path = gilbert3d(dims.w as i64, dims.h as i64, dims.t as i64);
            path.into_iter()
                .map(|(x, y, z)| dims.index(z as usize, y as usize, x as usize))
                .collect()
        }
    };
    Permutation::from_forward(kind, dims, forward)
}

/// Reorders the token axis of a `[n, d]` or `[heads, n, d]` tensor.
pub fn apply_permutation<S: Scalar>(x: &DenseTensor<S>, p: &Permutation) -> Result<DenseTensor<S>> {
    let (h, n, d) = x.dims3()?;
    if n != p.len() {
        return Err(SpargeError::validation(format!(
            "permutation length {} does not match token count {n}",
            p.len()
        )));
    }
    let mut data = Vec::with_capacity(x.numel());
    for head in 0..h {
        let src = x.head(head);
        for &old in p.forward() {
            data.extend_from_slice(&src[old * d..(old + 1) * d]);
        }
    }
    DenseTensor::new(x.shape().to_vec(), data)
}

/// Mean self-similarity of consecutive `block`-row groups, averaged over
/// heads. Higher values mean the ordering packs similar tokens together.
pub fn block_self_similarity<S: Scalar>(x: &DenseTensor<S>, block: usize) -> Result<f64> {
    if block == 0 {
        return Err(SpargeError::validation("block size must be nonzero"));
    }
    let (h, n, d) = x.dims3()?;
    let blocks = n.div_ceil(block);
    let mut total = 0.0f64;
    for head in 0..h {
        let data = x.head(head);
        for b in 0..blocks {
            let start = b * block;
            let end = ((b + 1) * block).min(n);
            let sim = block_cos_sim(&data[start * d..end * d], end - start, d);
            total += sim.to_f64();
        }
    }
    Ok(total / (h * blocks) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn unit_step_fraction(path: &[(i64, i64, i64)]) -> f64 {
        let steps = path.len() - 1;
        let units = path
            .windows(2)
            .filter(|pair| {
                let (a, b) = (pair[0], pair[1]);
                (a.0 - b.0).abs() + (a.1 - b.1).abs() + (a.2 - b.2).abs() == 1
            })
            .count();
        units as f64 / steps as f64
    }

    fn assert_covers(path: &[(i64, i64, i64)], w: i64, h: i64, d: i64) {
        assert_eq!(path.len() as i64, w * h * d);
        let mut seen = vec![false; (w * h * d) as usize];
        for &(x, y, z) in path {
            assert!(x >= 0 && x < w && y >= 0 && y < h && z >= 0 && z < d, "({x},{y},{z})");
            let idx = ((z * h + y) * w + x) as usize;
            assert!(!seen[idx], "cell visited twice");
            seen[idx] = true;
        }
    }

    #[test]
    fn gilbert_covers_and_walks_unit_steps_on_even_cube() {
        let path = gilbert3d(8, 8, 8);
        assert_covers(&path, 8, 8, 8);
        assert_eq!(unit_step_fraction(&path), 1.0);
    }

    #[test]
    fn gilbert_handles_flat_and_odd_grids() {
        let path = gilbert3d(6, 6, 1);
        assert_covers(&path, 6, 6, 1);
        assert!(unit_step_fraction(&path) >= 0.95);

        let path = gilbert3d(5, 3, 1);
        assert_covers(&path, 5, 3, 1);

        let path = gilbert3d(7, 5, 3);
        assert_covers(&path, 7, 5, 3);

        let path = gilbert3d(4, 1, 1);
        assert_covers(&path, 4, 1, 1);
        assert_eq!(unit_step_fraction(&path), 1.0);

        let path = gilbert3d(16, 4, 2);
        assert_covers(&path, 16, 4, 2);
    }

    #[test]
    fn non_random_kinds_on_a_line_are_identity() {
        let dims = GridDims::new(1, 1, 4).unwrap();
        for kind in [
            PermutationKind::RowMajor,
            PermutationKind::ColMajor,
            PermutationKind::TimeMajor,
            PermutationKind::Hilbert,
        ] {
            let p = build_permutation(kind, dims, 0).unwrap();
            assert_eq!(p.forward(), &[0, 1, 2, 3], "{kind}");
        }
    }

    #[test]
    fn colmajor_and_timemajor_traverse_expected_axes() {
        let dims = GridDims::new(2, 2, 2).unwrap();
        let col = build_permutation(PermutationKind::ColMajor, dims, 0).unwrap();
        // (t, w, h) loops with h fastest: (0,0,0),(0,1,0),(0,0,1),(0,1,1),...
        assert_eq!(col.forward(), &[0, 2, 1, 3, 4, 6, 5, 7]);
        let time = build_permutation(PermutationKind::TimeMajor, dims, 0).unwrap();
        // (h, w, t) loops with t fastest.
        assert_eq!(time.forward(), &[0, 4, 1, 5, 2, 6, 3, 7]);
    }

    #[test]
    fn all_kinds_are_bijective_on_odd_grid() {
        let dims = GridDims::new(3, 5, 7).unwrap();
        for kind in ALL_KINDS {
            let p = build_permutation(kind, dims, 9).unwrap();
            assert_eq!(p.len(), dims.n());
            let mut seen = vec![false; p.len()];
            for &old in p.forward() {
                assert!(!seen[old]);
                seen[old] = true;
            }
            for (new, &old) in p.forward().iter().enumerate() {
                assert_eq!(p.inverse()[old], new, "{kind}");
            }
        }
    }

    #[test]
    fn random_is_seed_deterministic() {
        let dims = GridDims::flat(64).unwrap();
        let a = build_permutation(PermutationKind::Random, dims, 5).unwrap();
        let b = build_permutation(PermutationKind::Random, dims, 5).unwrap();
        let c = build_permutation(PermutationKind::Random, dims, 6).unwrap();
        assert_eq!(a.forward(), b.forward());
        assert_ne!(a.forward(), c.forward());
    }

    #[test]
    fn apply_then_inverse_restores_input() {
        let dims = GridDims::new(2, 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..2 * dims.n() * 5).map(|_| rng.sample(StandardNormal)).collect();
        let x = DenseTensor::new(vec![2, dims.n(), 5], data).unwrap();
        let p = build_permutation(PermutationKind::Random, dims, 11).unwrap();
        let permuted = apply_permutation(&x, &p).unwrap();
        assert_ne!(permuted.data(), x.data());
        let restored = apply_permutation(&permuted, &p.inverted()).unwrap();
        assert_eq!(restored.data(), x.data());
    }

    #[test]
    fn apply_rejects_length_mismatch() {
        let x = DenseTensor::new(vec![4, 2], vec![0.0f32; 8]).unwrap();
        let p = build_permutation(PermutationKind::RowMajor, GridDims::flat(8).unwrap(), 0).unwrap();
        assert!(apply_permutation(&x, &p).is_err());
    }

    #[test]
    fn embed_leaves_outside_region_fixed() {
        let dims = GridDims::flat(4).unwrap();
        let p = Permutation::from_forward(PermutationKind::Random, dims, vec![2, 0, 3, 1]).unwrap();
        let embedded = p.embed(8, 2).unwrap();
        assert_eq!(embedded.forward(), &[0, 1, 4, 2, 5, 3, 6, 7]);
        assert!(p.embed(5, 2).is_err());
    }

    #[test]
    fn from_forward_rejects_non_bijections() {
        let dims = GridDims::flat(3).unwrap();
        assert!(Permutation::from_forward(PermutationKind::Random, dims, vec![0, 0, 1]).is_err());
        assert!(Permutation::from_forward(PermutationKind::Random, dims, vec![0, 1, 3]).is_err());
    }

    #[test]
    fn self_similarity_is_one_for_repeated_tokens() {
        let row = vec![0.5f32, -1.0, 2.0];
        let x = DenseTensor::new(vec![8, 3], row.repeat(8)).unwrap();
        let sim = block_self_similarity(&x, 4).unwrap();
        assert!((sim - 1.0).abs() < 1e-6);
    }

    #[test]
    fn self_similarity_near_zero_for_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data: Vec<f32> = (0..256 * 128).map(|_| rng.sample(StandardNormal)).collect();
        let x = DenseTensor::new(vec![256, 128], data).unwrap();
        let sim = block_self_similarity(&x, 64).unwrap();
        assert!(sim.abs() < 0.1, "gaussian self-similarity {sim}");
    }
}

//! Dense tensors, the STZ on-disk format and synthetic input generators.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SpargeError};
use crate::scalar::Scalar;

/// Shape-tagged row-major tensor. Carrier for `Q`, `K`, `V` and `O`, with
/// shape `[heads, n, d]` for attention inputs or `[n, d]` for single-head
/// slices.
///
/// Invariants: the shape product equals the data length, every extent is at
/// least one, and every element is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> DenseTensor<S> {
    /// Builds a tensor after checking the container invariants.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() {
            return Err(SpargeError::validation("tensor rank must be at least 1"));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(SpargeError::validation("tensor extents must be nonzero"));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| SpargeError::validation("tensor extent product overflows"))?;
        if numel != data.len() {
            return Err(SpargeError::validation(format!(
                "shape {:?} implies {} elements but data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SpargeError::validation("tensor contains NaN or Inf"));
        }
        Ok(DenseTensor { shape, data })
    }

    /// Zero-filled tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| SpargeError::validation("tensor extent product overflows"))?;
        Self::new(shape, vec![S::zero(); numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Interprets the tensor as `[heads, n, d]`, treating a rank-2 tensor as
    /// a single head.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [n, d] => Ok((1, *n, *d)),
            [h, n, d] => Ok((*h, *n, *d)),
            other => Err(SpargeError::validation(format!(
                "expected rank 2 or 3 tensor, got shape {other:?}"
            ))),
        }
    }

    /// Row-major slice of one head; `head` must be in range for the rank
    /// reported by [`dims3`](Self::dims3).
    pub fn head(&self, head: usize) -> &[S] {
        let (h, n, d) = self.dims3().expect("head() requires a rank 2 or 3 tensor");
        debug_assert!(head < h, "head {head} out of range {h}");
        &self.data[head * n * d..(head + 1) * n * d]
    }

    /// Element-wise conversion to another scalar width.
    pub fn cast<T: Scalar>(&self) -> DenseTensor<T> {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Token-count extents of a 3D visual grid (frames x height x width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridDims {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(SpargeError::validation("grid extents must be nonzero"));
        }
        Ok(GridDims { t, h, w })
    }

    /// A 1D sequence viewed as a degenerate 1 x 1 x n grid.
    pub fn flat(n: usize) -> Result<Self> {
        Self::new(1, 1, n)
    }

    /// Total token count t*h*w.
    pub fn n(&self) -> usize {
        self.t * self.h * self.w
    }

    /// Row-major token index of grid cell (t, h, w).
    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.h + h) * self.w + w
    }
}

/// Magic bytes opening every STZ tensor file.
pub const STZ_MAGIC: [u8; 4] = *b"SPRG";
/// Only supported STZ format version.
pub const STZ_VERSION: u32 = 1;
const STZ_DTYPE_F32: u32 = 0;
const STZ_MAX_RANK: u32 = 8;

/// Writes a tensor in the STZ format: magic `SPRG`, u32 version, u32 ndim,
/// ndim x u64 extents, u32 dtype code (0 = f32), then the row-major payload.
/// All integers and floats are little-endian.
pub fn tensor_store(tensor: &DenseTensor<f32>, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    out.write_all(&STZ_MAGIC)?;
    out.write_all(&STZ_VERSION.to_le_bytes())?;
    out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &extent in tensor.shape() {
        out.write_all(&(extent as u64).to_le_bytes())?;
    }
    out.write_all(&STZ_DTYPE_F32.to_le_bytes())?;
    let mut payload = Vec::with_capacity(tensor.numel() * 4);
    for &value in tensor.data() {
        payload.extend_from_slice(&value.to_le_bytes());
    }
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

fn read_u32(reader: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(reader: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    reader.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Reads a tensor written by [`tensor_store`].
///
/// Malformed magic, version, rank, extents or dtype report a format error;
/// a truncated payload surfaces as the underlying I/O error; NaN or Inf in
/// the payload is a validation error.
pub fn tensor_load(path: &Path) -> Result<DenseTensor<f32>> {
    let file = File::open(path)?;
    let mut input = BufReader::new(file);

    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != STZ_MAGIC {
        return Err(SpargeError::format(format!(
            "bad magic bytes {magic:?}, expected {STZ_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut input)?;
    if version != STZ_VERSION {
        return Err(SpargeError::format(format!(
            "unsupported version {version}, expected {STZ_VERSION}"
        )));
    }
    let ndim = read_u32(&mut input)?;
    if ndim == 0 || ndim > STZ_MAX_RANK {
        return Err(SpargeError::format(format!(
            "rank {ndim} outside supported range 1..={STZ_MAX_RANK}"
        )));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        let extent = read_u64(&mut input)?;
        if extent == 0 {
            return Err(SpargeError::format("zero extent in header"));
        }
        shape.push(usize::try_from(extent).map_err(|_| {
            SpargeError::format(format!("extent {extent} exceeds addressable size"))
        })?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| SpargeError::format("extent product overflows"))?;
    let dtype = read_u32(&mut input)?;
    if dtype != STZ_DTYPE_F32 {
        return Err(SpargeError::format(format!(
            "unsupported dtype code {dtype}, expected {STZ_DTYPE_F32} (f32)"
        )));
    }
    let byte_len = numel
        .checked_mul(4)
        .ok_or_else(|| SpargeError::format("payload size overflows"))?;
    let mut payload = vec![0u8; byte_len];
    input.read_exact(&mut payload)?;
    let mut trailing = [0u8; 1];
    match input.read(&mut trailing)? {
        0 => {}
        _ => return Err(SpargeError::format("trailing bytes after payload")),
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    DenseTensor::new(shape, data)
}

/// Families of synthetic inputs used for calibration and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Independent standard-normal entries.
    Gaussian,
    /// Low-frequency field over the grid: each channel is a sum of eight
    /// random cosine waves of low integer frequency, so neighboring grid
    /// cells get similar feature vectors.
    Smooth3d,
}

const SMOOTH_WAVES: usize = 8;

/// Deterministic synthetic tensor of shape `[heads, n, d]` over the given
/// grid. A fixed `(kind, dims, d, heads, seed)` tuple always produces the
/// same tensor.
pub fn gen_synthetic(
    kind: SyntheticKind,
    dims: GridDims,
    d: usize,
    heads: usize,
    seed: u64,
) -> Result<DenseTensor<f32>> {
    if d == 0 || heads == 0 {
        return Err(SpargeError::validation("d and heads must be nonzero"));
    }
    let n = dims.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f32; heads * n * d];
    match kind {
        SyntheticKind::Gaussian => {
            for value in data.iter_mut() {
                *value = rng.sample(StandardNormal);
            }
        }
        SyntheticKind::Smooth3d => {
            for head in 0..heads {
                fill_smooth_head(&mut data[head * n * d..(head + 1) * n * d], dims, d, &mut rng);
            }
        }
    }
    DenseTensor::new(vec![heads, n, d], data)
}

fn fill_smooth_head(out: &mut [f32], dims: GridDims, d: usize, rng: &mut ChaCha8Rng) {
    use std::f32::consts::TAU;
    // Wave parameters per channel: integer frequencies along (t, h, w),
    // gaussian amplitude, uniform phase. Temporal frequency is capped at 1
    // so the field varies most slowly along the frame axis.
    let mut waves = vec![[0.0f32; 5]; d * SMOOTH_WAVES];
    for wave in waves.iter_mut() {
        wave[0] = rng.random_range(0..=1) as f32;
        wave[1] = rng.random_range(0..=2) as f32;
        wave[2] = rng.random_range(0..=2) as f32;
        wave[3] = rng.sample::<f32, _>(StandardNormal) * 0.5;
        wave[4] = rng.random::<f32>() * TAU;
    }
    for t in 0..dims.t {
        let ft = t as f32 / dims.t as f32;
        for h in 0..dims.h {
            let fh = h as f32 / dims.h as f32;
            for w in 0..dims.w {
                let fw = w as f32 / dims.w as f32;
                let row = &mut out[dims.index(t, h, w) * d..(dims.index(t, h, w) + 1) * d];
                for (c, slot) in row.iter_mut().enumerate() {
                    let mut acc = 0.0f32;
                    for wave in &waves[c * SMOOTH_WAVES..(c + 1) * SMOOTH_WAVES] {
                        let angle = TAU * (wave[0] * ft + wave[1] * fh + wave[2] * fw) + wave[4];
                        acc += wave[3] * angle.cos();
                    }
                    *slot = acc;
                }
            }
        }
    }
}

const PEAKED_QUERY_BLOCK: usize = 128;
const PEAKED_KEY_BLOCK: usize = 64;

/// Synthetic `(Q, K, V)` triple whose attention map concentrates each query
/// block's mass on a single key block.
///
/// Key tokens cluster around one random unit direction per 64-token key
/// block; every 128-token query block points at the direction of one key
/// block, so after scaling the target block scores near `strength` while all
/// other scores stay O(1). Useful as a calibration input with predictable
/// high sparsity.
pub fn gen_peaked_qkv(
    n: usize,
    d: usize,
    heads: usize,
    seed: u64,
    strength: f32,
) -> Result<(DenseTensor<f32>, DenseTensor<f32>, DenseTensor<f32>)> {
    if n == 0 || d == 0 || heads == 0 {
        return Err(SpargeError::validation("n, d and heads must be nonzero"));
    }
    if !(strength.is_finite() && strength > 0.0) {
        return Err(SpargeError::validation("strength must be positive"));
    }
    let k_blocks = n.div_ceil(PEAKED_KEY_BLOCK);
    let scale = strength.sqrt() * (d as f32).sqrt().sqrt();
    let noise = 0.05 * scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = vec![0.0f32; heads * n * d];
    let mut k = vec![0.0f32; heads * n * d];
    let mut v = vec![0.0f32; heads * n * d];
    for head in 0..heads {
        let mut directions = vec![0.0f32; k_blocks * d];
        for dir in directions.chunks_exact_mut(d) {
            let mut norm = 0.0f32;
            for slot in dir.iter_mut() {
                *slot = rng.sample(StandardNormal);
                norm += *slot * *slot;
            }
            let inv = 1.0 / norm.sqrt().max(f32::MIN_POSITIVE);
            for slot in dir.iter_mut() {
                *slot *= inv;
            }
        }
        let base = head * n * d;
        for token in 0..n {
            let block = token / PEAKED_KEY_BLOCK;
            let dir = &directions[block * d..(block + 1) * d];
            for c in 0..d {
                let eps: f32 = rng.sample(StandardNormal);
                k[base + token * d + c] = scale * dir[c] + noise * eps;
            }
        }
        for token in 0..n {
            let block = token / PEAKED_QUERY_BLOCK;
            let target = ((block as u64).wrapping_mul(2654435761) % k_blocks as u64) as usize;
            let dir = &directions[target * d..(target + 1) * d];
            for c in 0..d {
                let eps: f32 = rng.sample(StandardNormal);
                q[base + token * d + c] = scale * dir[c] + noise * eps;
            }
        }
        for slot in v[base..base + n * d].iter_mut() {
            *slot = rng.sample(StandardNormal);
        }
    }
    Ok((
        DenseTensor::new(vec![heads, n, d], q)?,
        DenseTensor::new(vec![heads, n, d], k)?,
        DenseTensor::new(vec![heads, n, d], v)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::dot;

    fn cos_sim(a: &[f32], b: &[f32]) -> f64 {
        let ab = dot(a, b) as f64;
        let aa = dot(a, a) as f64;
        let bb = dot(b, b) as f64;
        ab / (aa.sqrt() * bb.sqrt()).max(1e-30)
    }

    #[test]
    fn new_rejects_shape_data_mismatch() {
        let err = DenseTensor::new(vec![2, 3], vec![0.0f32; 5]).unwrap_err();
        assert!(matches!(err, SpargeError::Validation(_)));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = DenseTensor::new(vec![2], vec![1.0f32, f32::NAN]).unwrap_err();
        assert!(matches!(err, SpargeError::Validation(_)));
    }

    #[test]
    fn new_rejects_zero_extent() {
        let err = DenseTensor::<f32>::new(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, SpargeError::Validation(_)));
    }

    #[test]
    fn dims3_normalizes_rank2() {
        let t = DenseTensor::new(vec![4, 2], vec![0.0f32; 8]).unwrap();
        assert_eq!(t.dims3().unwrap(), (1, 4, 2));
        let t = DenseTensor::new(vec![3, 4, 2], vec![0.0f32; 24]).unwrap();
        assert_eq!(t.dims3().unwrap(), (3, 4, 2));
        assert_eq!(t.head(1).len(), 8);
    }

    #[test]
    fn store_then_load_round_trips_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.stz");
        let t = DenseTensor::new(vec![2, 3], vec![0.5f32; 6]).unwrap();
        tensor_store(&t, &path).unwrap();
        let back = tensor_load(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.stz");
        let t = DenseTensor::new(vec![1, 1], vec![0.0f32]).unwrap();
        tensor_store(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"SPRG");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&0u32.to_le_bytes());
        expected.extend_from_slice(&0.0f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn payload_size_matches_extent_product() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.stz");
        let t = DenseTensor::new(vec![128, 64], vec![1.0f32; 128 * 64]).unwrap();
        tensor_store(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = 4 + 4 + 4 + 2 * 8 + 4;
        assert_eq!(bytes.len(), header + 128 * 64 * 4);
    }

    #[test]
    fn load_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.stz");
        let t = DenseTensor::new(vec![1, 1], vec![0.0f32]).unwrap();
        tensor_store(&t, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            tensor_load(&path).unwrap_err(),
            SpargeError::Format(_)
        ));
    }

    #[test]
    fn load_reports_truncation_as_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.stz");
        let t = DenseTensor::new(vec![2, 2], vec![1.0f32; 4]).unwrap();
        tensor_store(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(tensor_load(&path).unwrap_err(), SpargeError::Io(_)));
    }

    #[test]
    fn load_rejects_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.stz");
        let t = DenseTensor::new(vec![2, 2], vec![1.0f32; 4]).unwrap();
        tensor_store(&t, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(7);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            tensor_load(&path).unwrap_err(),
            SpargeError::Format(_)
        ));
    }

    #[test]
    fn load_rejects_nan_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.stz");
        let t = DenseTensor::new(vec![1, 2], vec![1.0f32, 2.0]).unwrap();
        tensor_store(&t, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let nan = f32::NAN.to_le_bytes();
        let off = bytes.len() - 4;
        bytes[off..].copy_from_slice(&nan);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            tensor_load(&path).unwrap_err(),
            SpargeError::Validation(_)
        ));
    }

    #[test]
    fn gen_synthetic_is_deterministic() {
        let dims = GridDims::new(2, 4, 4).unwrap();
        let a = gen_synthetic(SyntheticKind::Gaussian, dims, 16, 2, 7).unwrap();
        let b = gen_synthetic(SyntheticKind::Gaussian, dims, 16, 2, 7).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(SyntheticKind::Gaussian, dims, 16, 2, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_channel_means_are_centered() {
        let dims = GridDims::flat(4096).unwrap();
        let t = gen_synthetic(SyntheticKind::Gaussian, dims, 128, 1, 3).unwrap();
        let (_, n, d) = t.dims3().unwrap();
        let head = t.head(0);
        for c in 0..d {
            let mean: f64 = (0..n).map(|r| head[r * d + c] as f64).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.1, "channel {c} mean {mean}");
        }
    }

    #[test]
    fn smooth3d_neighbors_beat_random_pairs() {
        let dims = GridDims::new(4, 16, 16).unwrap();
        let t = gen_synthetic(SyntheticKind::Smooth3d, dims, 32, 1, 11).unwrap();
        let head = t.head(0);
        let d = 32;
        let row = |i: usize| &head[i * d..(i + 1) * d];

        let mut adjacent = 0.0f64;
        let mut adjacent_count = 0usize;
        for t_i in 0..dims.t {
            for h_i in 0..dims.h {
                for w_i in 0..dims.w {
                    let a = dims.index(t_i, h_i, w_i);
                    if w_i + 1 < dims.w {
                        adjacent += cos_sim(row(a), row(dims.index(t_i, h_i, w_i + 1)));
                        adjacent_count += 1;
                    }
                    if h_i + 1 < dims.h {
                        adjacent += cos_sim(row(a), row(dims.index(t_i, h_i + 1, w_i)));
                        adjacent_count += 1;
                    }
                    if t_i + 1 < dims.t {
                        adjacent += cos_sim(row(a), row(dims.index(t_i + 1, h_i, w_i)));
                        adjacent_count += 1;
                    }
                }
            }
        }
        let adjacent_mean = adjacent / adjacent_count as f64;

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = dims.n();
        let mut random = 0.0f64;
        let pairs = 2000;
        for _ in 0..pairs {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            random += cos_sim(row(a), row(b));
        }
        let random_mean = random / pairs as f64;
        assert!(
            adjacent_mean > random_mean,
            "adjacent {adjacent_mean} vs random {random_mean}"
        );
    }

    #[test]
    fn peaked_qkv_has_expected_shapes_and_determinism() {
        let (q, k, v) = gen_peaked_qkv(256, 32, 2, 5, 10.0).unwrap();
        assert_eq!(q.shape(), &[2, 256, 32]);
        assert_eq!(k.shape(), &[2, 256, 32]);
        assert_eq!(v.shape(), &[2, 256, 32]);
        let (q2, _, _) = gen_peaked_qkv(256, 32, 2, 5, 10.0).unwrap();
        assert_eq!(q, q2);
    }
}

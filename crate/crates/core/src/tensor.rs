//! Dense row-major f32 tensors, seeded convolution kernels, and the ESGT dump
//! format.
//!
//! Layout is always row-major with the leading extent slowest, so a
//! `[C, H, W]` tensor stores channel-major image planes and a `[C, Y, X, Z]`
//! voxel tensor can be relabeled to `[C*Y, X, Z]` without moving data.
//!
//! # ESGT dump format
//!
//! Little-endian throughout: 4 magic bytes `ESGT`, a `u32` rank, `rank`
//! `u32` extents, then the f32 payload in row-major order. Readers reject
//! bad magic, rank outside 1..=5, payload length mismatches, and non-finite
//! values.
//!
//! # Seeded kernels
//!
//! All "trained" weights in this crate come from [`SplitMix64`], the 64-bit
//! mix generator from Steele et al. (state advances by 0x9E3779B97F4A7C15,
//! output is the xor-shift/multiply finalizer). A weight is drawn by taking
//! the top 24 bits of the next output as a uniform in [0, 1), then mapping
//! to [-0.1, 0.1). Biases are zero. Given the same seed this produces
//! bit-identical kernels on any platform, which is what pins the golden
//! files under `tests/data`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const ESGT_MAGIC: [u8; 4] = *b"ESGT";
pub const MAX_RANK: usize = 5;

/// Deterministic 64-bit generator (SplitMix64).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 24 bits of resolution.
    pub fn next_f32(&mut self) -> f32 {
        ((self.next_u64() >> 40) as f32) * (1.0 / 16_777_216.0)
    }

    /// Uniform in [-1, 1).
    pub fn next_symmetric(&mut self) -> f32 {
        self.next_f32() * 2.0 - 1.0
    }
}

/// Dense row-major f32 tensor of rank 1 to 5.
///
/// Extents may be zero (an empty tensor), which keeps channel concatenation
/// total; operations that need actual data validate non-emptiness
/// themselves. Constructors reject NaN and infinity so downstream code can
/// assume finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::shape(format!(
                "tensor rank must be 1..={MAX_RANK}, got {}",
                dims.len()
            )));
        }
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::shape(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                len,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {v}")));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len: usize = dims.iter().product();
        Tensor::new(dims, vec![0.0; len])
    }

    /// Tensor filled with uniform [-1, 1) draws from a [`SplitMix64`] seed.
    pub fn random(seed: u64, dims: Vec<usize>) -> Result<Self> {
        let len: usize = dims.iter().product();
        let mut rng = SplitMix64::new(seed);
        let data = (0..len).map(|_| rng.next_symmetric()).collect();
        Tensor::new(dims, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        let mut off = 0;
        for (i, &x) in idx.iter().enumerate() {
            debug_assert!(x < self.dims[i], "index {idx:?} out of {:?}", self.dims);
            off = off * self.dims[i] + x;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f32 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f32) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("tensor element {v}")));
        }
        let off = self.offset(idx);
        self.data[off] = v;
        Ok(())
    }

    /// Relabels the extents without touching the payload.
    pub fn reshaped(&self, dims: Vec<usize>) -> Result<Tensor> {
        Tensor::new(dims, self.data.clone())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&ESGT_MAGIC)?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let bad = |msg: String| Error::format("ESGT tensor", msg);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| bad(format!("short header: {e}")))?;
        if magic != ESGT_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut u = [0u8; 4];
        r.read_exact(&mut u)
            .map_err(|e| bad(format!("short rank: {e}")))?;
        let rank = u32::from_le_bytes(u) as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(bad(format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u)
                .map_err(|e| bad(format!("short extents: {e}")))?;
            dims.push(u32::from_le_bytes(u) as usize);
        }
        let len: usize = dims.iter().product();
        let mut payload = vec![0u8; len * 4];
        r.read_exact(&mut payload)
            .map_err(|e| bad(format!("short payload for dims {dims:?}: {e}")))?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra).map_err(|e| bad(e.to_string()))? != 0 {
            return Err(bad("trailing bytes after payload".into()));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(dims, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(&mut f).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Tensor::read_from(&mut f)
    }
}

/// 2D convolution weights of shape `[out, in, kh, kw]` plus one bias per
/// output channel.
#[derive(Debug, Clone)]
pub struct ConvKernel {
    weights: Tensor,
    bias: Vec<f32>,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Vec<f32>) -> Result<Self> {
        if weights.rank() != 4 {
            return Err(Error::shape(format!(
                "kernel weights must be [out, in, kh, kw], got {:?}",
                weights.dims()
            )));
        }
        if weights.dims().contains(&0) {
            return Err(Error::shape("kernel extents must be positive"));
        }
        if bias.len() != weights.dims()[0] {
            return Err(Error::shape(format!(
                "{} output channels but {} biases",
                weights.dims()[0],
                bias.len()
            )));
        }
        if let Some(v) = bias.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("kernel bias {v}")));
        }
        Ok(ConvKernel { weights, bias })
    }

    /// Kernel with weights drawn uniformly from [-0.1, 0.1) by a
    /// [`SplitMix64`] stream and zero biases. Draws are consumed in
    /// row-major weight order.
    pub fn seeded(seed: u64, out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> ConvKernel {
        assert!(
            out_ch >= 1 && in_ch >= 1 && kh >= 1 && kw >= 1,
            "kernel extents must be positive"
        );
        let mut rng = SplitMix64::new(seed);
        let n = out_ch * in_ch * kh * kw;
        let data: Vec<f32> = (0..n).map(|_| rng.next_symmetric() * 0.1).collect();
        let weights = Tensor::new(vec![out_ch, in_ch, kh, kw], data).expect("finite seeded data");
        ConvKernel {
            weights,
            bias: vec![0.0; out_ch],
        }
    }

    /// 1x1 kernel that passes every channel through unchanged.
    pub fn identity(channels: usize) -> ConvKernel {
        assert!(channels >= 1, "kernel extents must be positive");
        let mut data = vec![0.0; channels * channels];
        for c in 0..channels {
            data[c * channels + c] = 1.0;
        }
        let weights = Tensor::new(vec![channels, channels, 1, 1], data).expect("finite identity");
        ConvKernel {
            weights,
            bias: vec![0.0; channels],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.weights.dims()[2], self.weights.dims()[3])
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }
}

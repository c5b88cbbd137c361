//! Stereo front end: the paired feature pyramid stub, cost-volume
//! correlation, and the reprojected stereo-volume chain.
//!
//! Correlation pairs the left column `w - d` with the right column `w + d`,
//! so a disparity index d corresponds to an effective column offset of 2d
//! between the two images; any out-of-range access contributes a zero
//! feature. The per-entry sum runs over channels in ascending order and is
//! divided by the channel count once at the end.

use crate::error::{Error, Result};
use crate::ops::{avg_pool2, concat_channels, conv2d, reshape_to_volume};
use crate::tensor::{ConvKernel, Tensor};

/// Shape plan for the three-scale feature pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidConfig {
    /// Pixels per feature cell at each scale; each must be a power of two.
    pub strides: [usize; 3],
    /// Feature channels C at every scale.
    pub channels: usize,
    /// Disparity indices D in every cost volume.
    pub disparity_count: usize,
    /// Largest full-resolution column offset the pipeline is meant to
    /// resolve; documents the config, not used by the kernels themselves.
    pub max_disparity_px: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            strides: [4, 8, 16],
            channels: 8,
            disparity_count: 24,
            max_disparity_px: 192,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channels must be >= 1".into()));
        }
        if self.disparity_count < 2 {
            return Err(Error::Config("disparity_count must be >= 2".into()));
        }
        if self.max_disparity_px == 0 {
            return Err(Error::Config("max_disparity_px must be >= 1".into()));
        }
        for w in self.strides.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config(format!(
                    "strides must be strictly increasing, got {:?}",
                    self.strides
                )));
            }
        }
        for &s in &self.strides {
            if s == 0 || !s.is_power_of_two() {
                return Err(Error::Config(format!(
                    "stride {s} must be a positive power of two"
                )));
            }
        }
        Ok(())
    }
}

/// Left and right feature pyramids, index 0 being the finest scale.
#[derive(Debug, Clone)]
pub struct PairedPyramid {
    pub left: [Tensor; 3],
    pub right: [Tensor; 3],
}

/// Deterministic stand-in for a trained backbone: each scale pools the
/// previous one down to its stride and applies a seeded 3x3 convolution.
/// Kernel seeds are `seed + 1 .. seed + 3`, shared between left and right
/// so epipolar structure survives.
pub fn backbone_stub(
    left: &Tensor,
    right: &Tensor,
    cfg: &PyramidConfig,
    seed: u64,
) -> Result<PairedPyramid> {
    cfg.validate()?;
    if left.dims() != right.dims() {
        return Err(Error::shape(format!(
            "stereo images differ: {:?} vs {:?}",
            left.dims(),
            right.dims()
        )));
    }
    if left.rank() != 3 {
        return Err(Error::shape(format!(
            "images must be [C, H, W], got {:?}",
            left.dims()
        )));
    }
    let (h, w) = (left.dims()[1], left.dims()[2]);
    for &s in &cfg.strides {
        if h % s != 0 || w % s != 0 {
            return Err(Error::shape(format!(
                "image {h}x{w} not divisible by stride {s}"
            )));
        }
    }
    let mut outs: Vec<(Tensor, Tensor)> = Vec::with_capacity(3);
    let mut cur_l = left.clone();
    let mut cur_r = right.clone();
    let mut pooled = 0u32;
    for (i, &stride) in cfg.strides.iter().enumerate() {
        let target = stride.trailing_zeros();
        while pooled < target {
            cur_l = avg_pool2(&cur_l)?;
            cur_r = avg_pool2(&cur_r)?;
            pooled += 1;
        }
        let k = ConvKernel::seeded(
            seed + 1 + i as u64,
            cfg.channels,
            cur_l.dims()[0],
            3,
            3,
        );
        cur_l = conv2d(&cur_l, &k)?;
        cur_r = conv2d(&cur_r, &k)?;
        outs.push((cur_l.clone(), cur_r.clone()));
    }
    let mut it = outs.into_iter();
    let (l1, r1) = it.next().unwrap();
    let (l2, r2) = it.next().unwrap();
    let (l3, r3) = it.next().unwrap();
    Ok(PairedPyramid {
        left: [l1, l2, l3],
        right: [r1, r2, r3],
    })
}

/// Builds the cost volume `[D, H, W]` from paired `[C, H, W]` features:
/// entry (d, h, w) is the channel-mean product of left column w-d and
/// right column w+d, zero whenever either column is out of range.
pub fn correlate(f_l: &Tensor, f_r: &Tensor, disparity_count: usize) -> Result<Tensor> {
    if f_l.dims() != f_r.dims() {
        return Err(Error::shape(format!(
            "correlate inputs differ: {:?} vs {:?}",
            f_l.dims(),
            f_r.dims()
        )));
    }
    if f_l.rank() != 3 {
        return Err(Error::shape(format!(
            "correlate inputs must be [C, H, W], got {:?}",
            f_l.dims()
        )));
    }
    if disparity_count == 0 {
        return Err(Error::shape("disparity_count must be >= 1"));
    }
    let (c, h, w) = (f_l.dims()[0], f_l.dims()[1], f_l.dims()[2]);
    if c == 0 {
        return Err(Error::shape("correlate needs >= 1 channel"));
    }
    let (ld, rd) = (f_l.data(), f_r.data());
    let mut out = vec![0.0f32; disparity_count * h * w];
    for d in 0..disparity_count {
        for hh in 0..h {
            for ww in 0..w {
                if ww < d || ww + d >= w {
                    continue;
                }
                let (wl, wr) = (ww - d, ww + d);
                let mut sum = 0.0f32;
                for cc in 0..c {
                    let base = cc * h * w + hh * w;
                    sum += ld[base + wl] * rd[base + wr];
                }
                out[(d * h + hh) * w + ww] = sum / c as f32;
            }
        }
    }
    Tensor::new(vec![disparity_count, h, w], out)
}

/// Seeded kernels for the stereo-volume chain: scale 1 maps D cost
/// channels to C*D, scales 2 and 3 map the concatenated C*D + D channels
/// to C*D. Seeds are `seed + 1 .. seed + 3`.
pub fn seeded_volume_kernels(
    seed: u64,
    cfg: &PyramidConfig,
    kernel_size: usize,
) -> [ConvKernel; 3] {
    let (c, d) = (cfg.channels, cfg.disparity_count);
    [
        ConvKernel::seeded(seed + 1, c * d, d, kernel_size, kernel_size),
        ConvKernel::seeded(seed + 2, c * d, c * d + d, kernel_size, kernel_size),
        ConvKernel::seeded(seed + 3, c * d, c * d + d, kernel_size, kernel_size),
    ]
}

/// Runs the reprojection chain over the three cost volumes:
/// the first raw volume is a convolution of the first cost volume, each
/// later one convolves the pooled predecessor concatenated with its own
/// cost volume, and every raw volume reshapes to `[C, D, H_i, W_i]`.
pub fn build_stereo_volumes(
    cost: &[Tensor; 3],
    channels: usize,
    kernels: &[ConvKernel; 3],
) -> Result<[Tensor; 3]> {
    let d = cost[0].dims()[0];
    for cv in cost {
        if cv.rank() != 3 || cv.dims()[0] != d {
            return Err(Error::shape(format!(
                "cost volumes must share [D, H, W] with D={d}, got {:?}",
                cv.dims()
            )));
        }
    }
    for k in kernels {
        if k.out_channels() != channels * d {
            return Err(Error::shape(format!(
                "volume kernel must emit {} channels, emits {}",
                channels * d,
                k.out_channels()
            )));
        }
    }
    let rsv1 = conv2d(&cost[0], &kernels[0])?;
    let rsv2 = conv2d(&concat_channels(&avg_pool2(&rsv1)?, &cost[1])?, &kernels[1])?;
    let rsv3 = conv2d(&concat_channels(&avg_pool2(&rsv2)?, &cost[2])?, &kernels[2])?;
    Ok([
        reshape_to_volume(&rsv1, channels, d)?,
        reshape_to_volume(&rsv2, channels, d)?,
        reshape_to_volume(&rsv3, channels, d)?,
    ])
}

/// Correlates all three pyramid scales with a shared disparity count.
pub fn cost_volumes(pyr: &PairedPyramid, disparity_count: usize) -> Result<[Tensor; 3]> {
    Ok([
        correlate(&pyr.left[0], &pyr.right[0], disparity_count)?,
        correlate(&pyr.left[1], &pyr.right[1], disparity_count)?,
        correlate(&pyr.left[2], &pyr.right[2], disparity_count)?,
    ])
}

//! Numeric primitives composed by the pipeline: same-padding convolution,
//! 2x2 average pooling, channel concatenation, and volume reshaping.
//!
//! Accumulation orders are part of the contract so independent
//! reimplementations can match results bit for bit: [`conv2d`] starts from
//! the bias and adds terms in ascending (in-channel, kernel-row, kernel-col)
//! order, skipping out-of-bounds taps; [`avg_pool2`] sums each window in
//! row-major order and divides by the number of cells present.

use crate::error::{Error, Result};
use crate::tensor::{ConvKernel, Tensor};

/// 2D convolution with "same" zero padding over a `[C_in, H, W]` tensor.
pub fn conv2d(x: &Tensor, k: &ConvKernel) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() != 3 {
        return Err(Error::shape(format!(
            "conv2d input must be [C, H, W], got {dims:?}"
        )));
    }
    let (cin, h, w) = (dims[0], dims[1], dims[2]);
    if cin != k.in_channels() {
        return Err(Error::shape(format!(
            "conv2d input has {cin} channels, kernel expects {}",
            k.in_channels()
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("conv2d input has an empty extent"));
    }
    let cout = k.out_channels();
    let (kh, kw) = k.size();
    let (oy, ox) = ((kh / 2) as isize, (kw / 2) as isize);
    let xd = x.data();
    let wd = k.weights().data();
    let mut out = vec![0.0f32; cout * h * w];
    for o in 0..cout {
        let obase = o * h * w;
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = k.bias()[o];
                for c in 0..cin {
                    let xbase = c * h * w;
                    let kbase = (o * cin + c) * kh * kw;
                    for i in 0..kh {
                        let sy = yy as isize + i as isize - oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + sy as usize * w;
                        let krow = kbase + i * kw;
                        for j in 0..kw {
                            let sx = xx as isize + j as isize - ox;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += wd[krow + j] * xd[xrow + sx as usize];
                        }
                    }
                }
                out[obase + yy * w + xx] = acc;
            }
        }
    }
    Tensor::new(vec![cout, h, w], out)
}

/// 2x2 average pooling; edge windows average over the cells present.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() != 3 {
        return Err(Error::shape(format!(
            "avg_pool2 input must be [C, H, W], got {dims:?}"
        )));
    }
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    if h == 0 || w == 0 {
        return Err(Error::shape("avg_pool2 input has an empty extent"));
    }
    let (oh, ow) = ((h + 1) / 2, (w + 1) / 2);
    let xd = x.data();
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        let xbase = ch * h * w;
        let obase = ch * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = 0.0f32;
                let mut n = 0u32;
                for i in 0..2 {
                    let y = oy * 2 + i;
                    if y >= h {
                        continue;
                    }
                    for j in 0..2 {
                        let x = ox * 2 + j;
                        if x >= w {
                            continue;
                        }
                        sum += xd[xbase + y * w + x];
                        n += 1;
                    }
                }
                out[obase + oy * ow + ox] = sum / n as f32;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Concatenates along the leading (channel) extent; trailing extents must
/// match. Either side may have zero channels.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != b.rank() || a.dims()[1..] != b.dims()[1..] {
        return Err(Error::shape(format!(
            "concat_channels trailing dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut dims = a.dims().to_vec();
    dims[0] += b.dims()[0];
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(dims, data)
}

/// Splits the leading extent at `at`; exact inverse of [`concat_channels`].
pub fn split_channels(x: &Tensor, at: usize) -> Result<(Tensor, Tensor)> {
    let c = x.dims()[0];
    if at > c {
        return Err(Error::shape(format!(
            "split point {at} exceeds {c} channels"
        )));
    }
    let block: usize = x.dims()[1..].iter().product();
    let mut a_dims = x.dims().to_vec();
    a_dims[0] = at;
    let mut b_dims = x.dims().to_vec();
    b_dims[0] = c - at;
    let a = Tensor::new(a_dims, x.data()[..at * block].to_vec())?;
    let b = Tensor::new(b_dims, x.data()[at * block..].to_vec())?;
    Ok((a, b))
}

/// Relabels `[C*D, H, W]` as `[C, D, H, W]` with channel `c*D + d` becoming
/// plane `(c, d)`. Pure index relabel, no data movement.
pub fn reshape_to_volume(x: &Tensor, c: usize, d: usize) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() != 3 {
        return Err(Error::shape(format!(
            "reshape_to_volume input must be [C*D, H, W], got {dims:?}"
        )));
    }
    if c == 0 || d == 0 || dims[0] != c * d {
        return Err(Error::shape(format!(
            "cannot split {} channels into {c}x{d}",
            dims[0]
        )));
    }
    x.reshaped(vec![c, d, dims[1], dims[2]])
}

//! 2x2 average pooling and nearest-neighbour upsampling over the last two axes.

use super::Tensor;
use crate::error::{Error, Result};

fn planes(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 3 {
        return Err(Error::dim(op, "rank", 3, s.len()));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((s[..s.len() - 2].iter().product(), h, w))
}

fn with_hw(t: &Tensor, h: usize, w: usize) -> Vec<usize> {
    let mut s = t.shape().to_vec();
    let n = s.len();
    s[n - 2] = h;
    s[n - 1] = w;
    s
}

/// Mean over non-overlapping 2x2 windows (kernel 2, stride 2).
pub fn avgpool2d(input: &Tensor) -> Result<Tensor> {
    const OP: &str = "avgpool2d";
    let (p, h, w) = planes(OP, input)?;
    let rank = input.shape().len();
    for (axis, extent) in [(rank - 2, h), (rank - 1, w)] {
        if extent % 2 != 0 {
            return Err(Error::OddExtent { op: OP, axis, extent });
        }
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.values();
    let mut out = Vec::with_capacity(p * oh * ow);
    for plane in x.chunks(h * w) {
        for i in 0..oh {
            let r0 = &plane[2 * i * w..(2 * i + 1) * w];
            let r1 = &plane[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..ow {
                out.push(0.25 * (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]));
            }
        }
    }
    Ok(Tensor::with_precision(with_hw(input, oh, ow), out, input.precision()))
}

/// Spreads each output gradient uniformly over its 2x2 window.
pub fn avgpool2d_backward(input_shape: &[usize], grad_output: &Tensor) -> Result<Tensor> {
    let (p, oh, ow) = planes("avgpool2d_backward", grad_output)?;
    let n = input_shape.len();
    if n != grad_output.shape().len() || input_shape[n - 2] != 2 * oh || input_shape[n - 1] != 2 * ow {
        return Err(Error::dim("avgpool2d_backward", "spatial extent", input_shape[n - 1], 2 * ow));
    }
    let (h, w) = (2 * oh, 2 * ow);
    let g = grad_output.values();
    let mut out = vec![0f32; p * h * w];
    for (plane, gp) in out.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = 0.25 * gp[(y / 2) * ow + x / 2];
            }
        }
    }
    Tensor::from_vec(input_shape.to_vec(), out)
}

/// Replicates each value into a 2x2 block.
pub fn upsample_nearest2d(input: &Tensor) -> Result<Tensor> {
    let (p, h, w) = planes("upsample_nearest2d", input)?;
    let (oh, ow) = (2 * h, 2 * w);
    let x = input.values();
    let mut out = vec![0f32; p * oh * ow];
    for (plane, xp) in out.chunks_mut(oh * ow).zip(x.chunks(h * w)) {
        for y in 0..oh {
            let src = &xp[(y / 2) * w..(y / 2 + 1) * w];
            for (x_, v) in plane[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *v = src[x_ / 2];
            }
        }
    }
    Ok(Tensor::with_precision(with_hw(input, oh, ow), out, input.precision()))
}

/// Sums the four gradients of each replicated block.
pub fn upsample_nearest2d_backward(grad_output: &Tensor) -> Result<Tensor> {
    const OP: &str = "upsample_nearest2d_backward";
    let (p, oh, ow) = planes(OP, grad_output)?;
    let rank = grad_output.shape().len();
    for (axis, extent) in [(rank - 2, oh), (rank - 1, ow)] {
        if extent % 2 != 0 {
            return Err(Error::OddExtent { op: OP, axis, extent });
        }
    }
    let (h, w) = (oh / 2, ow / 2);
    let g = grad_output.values();
    let mut out = vec![0f32; p * h * w];
    for (plane, gp) in out.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
        for y in 0..oh {
            for x in 0..ow {
                plane[(y / 2) * w + x / 2] += gp[y * ow + x];
            }
        }
    }
    Tensor::from_vec(with_hw(grad_output, h, w), out)
}

//! 2D/3D convolution and transposed convolution via chunked im2col + GEMM.
//!
//! Convolutions are cross-correlations. 2D problems are run through the 3D
//! kernels with a unit leading spatial axis.

use serde::{Deserialize, Serialize};

use super::gemm::{sgemm, MatRef};
use super::{combine, Tensor};
use crate::error::{Error, Result};

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
}

impl ConvParams {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: &[usize],
        stride: &[usize],
        padding: &[usize],
    ) -> Result<Self> {
        let dims = kernel.len();
        if !(1..=3).contains(&dims) || stride.len() != dims || padding.len() != dims {
            return Err(Error::config(format!(
                "kernel/stride/padding must share 1..=3 spatial dims, got {kernel:?}/{stride:?}/{padding:?}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if kernel.contains(&0) || stride.contains(&0) {
            return Err(Error::config("kernel extents and strides must be positive"));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel: kernel.to_vec(),
            stride: stride.to_vec(),
            padding: padding.to_vec(),
        })
    }

    /// Square 2D kernel with uniform padding and stride.
    pub fn square2d(in_channels: usize, out_channels: usize, k: usize, p: usize, s: usize) -> Self {
        Self::new(in_channels, out_channels, &[k, k], &[s, s], &[p, p]).expect("valid 2d params")
    }

    pub fn spatial_dims(&self) -> usize {
        self.kernel.len()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel.iter().all(|&k| k == 1)
            && self.stride.iter().all(|&s| s == 1)
            && self.padding.iter().all(|&p| p == 0)
    }

    /// `[out, in, kernel...]`
    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend(&self.kernel);
        s
    }

    /// `[in, out, kernel...]`, the transposed-convolution weight layout.
    pub fn transpose_weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.in_channels, self.out_channels];
        s.extend(&self.kernel);
        s
    }

    /// `floor((in + 2p - k) / s) + 1` per axis.
    pub fn output_extent(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.check_rank("conv", input)?;
        input
            .iter()
            .enumerate()
            .map(|(axis, &n)| {
                let span = n + 2 * self.padding[axis];
                if span < self.kernel[axis] {
                    return Err(Error::dim("conv", format!("spatial axis {axis}"), self.kernel[axis], span));
                }
                Ok((span - self.kernel[axis]) / self.stride[axis] + 1)
            })
            .collect()
    }

    /// `(in - 1) * s - 2p + k` per axis.
    pub fn transpose_output_extent(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.check_rank("conv_transpose", input)?;
        input
            .iter()
            .enumerate()
            .map(|(axis, &n)| {
                let out = (n as isize - 1) * self.stride[axis] as isize - 2 * self.padding[axis] as isize
                    + self.kernel[axis] as isize;
                if n == 0 || out < 1 {
                    return Err(Error::dim("conv_transpose", format!("spatial axis {axis}"), 1, out.max(0) as usize));
                }
                Ok(out as usize)
            })
            .collect()
    }

    fn check_rank(&self, op: &'static str, spatial: &[usize]) -> Result<()> {
        if spatial.len() != self.spatial_dims() {
            return Err(Error::dim(op, "spatial rank", self.spatial_dims(), spatial.len()));
        }
        Ok(())
    }

    fn pad3(v: &[usize], fill: usize) -> [usize; 3] {
        let mut out = [fill; 3];
        out[3 - v.len()..].copy_from_slice(v);
        out
    }
}

/// Gradients of a (transposed) convolution with respect to its arguments.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Sliding-window geometry normalised to three spatial axes. `input` is the
/// side the kernel slides over, `output` the side with one column per
/// window position.
struct Geometry {
    channels: usize,
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl Geometry {
    fn new(channels: usize, input: &[usize], output: &[usize], p: &ConvParams) -> Self {
        Self {
            channels,
            input: ConvParams::pad3(input, 1),
            output: ConvParams::pad3(output, 1),
            kernel: ConvParams::pad3(&p.kernel, 1),
            stride: ConvParams::pad3(&p.stride, 1),
            padding: ConvParams::pad3(&p.padding, 0),
        }
    }

    fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    fn output_len(&self) -> usize {
        self.output.iter().product()
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / self.rows().max(1)).clamp(1, self.output_len().max(1))
    }

    /// Top-left-front input coordinate of each window in `[l0, l0 + n)`.
    fn window_origins(&self, l0: usize, n: usize) -> Vec<[isize; 3]> {
        let [_, oh, ow] = self.output;
        (l0..l0 + n)
            .map(|l| {
                let o = [l / (oh * ow), (l / ow) % oh, l % ow];
                [0, 1, 2].map(|a| (o[a] * self.stride[a]) as isize - self.padding[a] as isize)
            })
            .collect()
    }

    /// Visit every (column-matrix row, window, input offset) triple whose
    /// input coordinate lies inside the volume.
    #[inline]
    fn for_each_tap(&self, l0: usize, n: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [id, ih, iw] = self.input.map(|v| v as isize);
        let [kd, kh, kw] = self.kernel;
        let plane = self.input_len();
        let origins = self.window_origins(l0, n);
        let mut row = 0;
        for c in 0..self.channels {
            let base = c * plane;
            for dz in 0..kd {
                for dy in 0..kh {
                    for dx in 0..kw {
                        for (j, o) in origins.iter().enumerate() {
                            let z = o[0] + dz as isize;
                            let y = o[1] + dy as isize;
                            let x = o[2] + dx as isize;
                            if z >= 0 && z < id && y >= 0 && y < ih && x >= 0 && x < iw {
                                f(row, j, base + ((z * ih + y) * iw + x) as usize);
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f32], l0: usize, n: usize, col: &mut [f32]) {
        col[..self.rows() * n].fill(0.0);
        self.for_each_tap(l0, n, |row, j, idx| col[row * n + j] = input[idx]);
    }

    fn col2im(&self, col: &[f32], l0: usize, n: usize, out: &mut [f32]) {
        self.for_each_tap(l0, n, |row, j, idx| out[idx] += col[row * n + j]);
    }
}

fn check_input(op: &'static str, input: &Tensor, params: &ConvParams, channels: usize) -> Result<()> {
    let rank = params.spatial_dims() + 1;
    if input.shape().len() != rank {
        return Err(Error::dim(op, "input rank", rank, input.shape().len()));
    }
    if input.shape()[0] != channels {
        return Err(Error::dim(op, "channel axis", channels, input.shape()[0]));
    }
    Ok(())
}

fn check_shape(op: &'static str, what: &str, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape().len() != expected.len() {
        return Err(Error::dim(op, format!("{what} rank"), expected.len(), t.shape().len()));
    }
    for (axis, (&want, &got)) in expected.iter().zip(t.shape()).enumerate() {
        if want != got {
            return Err(Error::dim(op, format!("{what} axis {axis}"), want, got));
        }
    }
    Ok(())
}

fn check_grad_output(op: &'static str, grad: &Tensor, channels: usize, spatial: &[usize]) -> Result<()> {
    let mut want = vec![channels];
    want.extend(spatial);
    check_shape(op, "grad_output", grad, &want)
}

fn output_shape(channels: usize, spatial: &[usize]) -> Vec<usize> {
    let mut s = vec![channels];
    s.extend(spatial);
    s
}

pub fn conv_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, params: &ConvParams) -> Result<Tensor> {
    const OP: &str = "conv_forward";
    check_input(OP, input, params, params.in_channels)?;
    check_shape(OP, "weight", weight, &params.weight_shape())?;
    check_shape(OP, "bias", bias, &[params.out_channels])?;
    let spatial = params.output_extent(&input.shape()[1..])?;
    let geom = Geometry::new(params.in_channels, &input.shape()[1..], &spatial, params);
    let precision = combine(input.precision(), weight.precision());

    let x = input.values();
    let w = weight.values();
    let b = bias.values();
    let (rows, len) = (geom.rows(), geom.output_len());
    let mut out = vec![0f32; params.out_channels * len];
    for (o, row) in out.chunks_mut(len).enumerate() {
        row.fill(b[o]);
    }
    let wmat = MatRef::row_major(&w, params.out_channels, rows);
    if params.is_pointwise() {
        sgemm(1.0, wmat, MatRef::row_major(&x, rows, len), 1.0, &mut out, len, 1);
    } else {
        let chunk = geom.chunk();
        let mut col = vec![0f32; rows * chunk];
        for l0 in (0..len).step_by(chunk) {
            let n = chunk.min(len - l0);
            geom.im2col(&x, l0, n, &mut col);
            sgemm(1.0, wmat, MatRef::row_major(&col[..rows * n], rows, n), 1.0, &mut out[l0..], len, 1);
        }
    }
    Ok(Tensor::with_precision(output_shape(params.out_channels, &spatial), out, precision))
}

/// Gradients of `sum(grad_output * conv_forward(input, weight, bias))`.
pub fn conv_backward(input: &Tensor, weight: &Tensor, params: &ConvParams, grad_output: &Tensor) -> Result<ConvGrads> {
    conv_backward_impl(input, weight, params, grad_output, true)
}

pub(crate) fn conv_backward_impl(
    input: &Tensor,
    weight: &Tensor,
    params: &ConvParams,
    grad_output: &Tensor,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    const OP: &str = "conv_backward";
    check_input(OP, input, params, params.in_channels)?;
    check_shape(OP, "weight", weight, &params.weight_shape())?;
    let spatial = params.output_extent(&input.shape()[1..])?;
    check_grad_output(OP, grad_output, params.out_channels, &spatial)?;
    let geom = Geometry::new(params.in_channels, &input.shape()[1..], &spatial, params);

    let x = input.values();
    let w = weight.values();
    let g = grad_output.values();
    let (rows, len, outc) = (geom.rows(), geom.output_len(), params.out_channels);

    let grad_bias: Vec<f32> = g.chunks(len).map(|r| r.iter().map(|&v| v as f64).sum::<f64>() as f32).collect();
    let mut grad_w = vec![0f32; outc * rows];
    let mut grad_x = need_input_grad.then(|| vec![0f32; x.len()]);
    let wmat = MatRef::row_major(&w, outc, rows);

    if params.is_pointwise() {
        let gmat = MatRef::row_major(&g, outc, len);
        sgemm(1.0, gmat, MatRef::row_major(&x, rows, len).t(), 0.0, &mut grad_w, rows, 1);
        if let Some(gx) = grad_x.as_mut() {
            sgemm(1.0, wmat.t(), gmat, 0.0, gx, len, 1);
        }
    } else {
        let chunk = geom.chunk();
        let mut col = vec![0f32; rows * chunk];
        let mut gcol = vec![0f32; rows * chunk];
        for l0 in (0..len).step_by(chunk) {
            let n = chunk.min(len - l0);
            let gview = MatRef {
                data: &g[l0..],
                rows: outc,
                cols: n,
                row_stride: len,
                col_stride: 1,
            };
            geom.im2col(&x, l0, n, &mut col);
            sgemm(1.0, gview, MatRef::row_major(&col[..rows * n], rows, n).t(), 1.0, &mut grad_w, rows, 1);
            if let Some(gx) = grad_x.as_mut() {
                sgemm(1.0, wmat.t(), gview, 0.0, &mut gcol[..rows * n], n, 1);
                geom.col2im(&gcol, l0, n, gx);
            }
        }
    }

    Ok(ConvGrads {
        input: grad_x.map(|v| Tensor::from_vec(input.shape().to_vec(), v)).transpose()?,
        weight: Tensor::from_vec(params.weight_shape(), grad_w)?,
        bias: Tensor::from_vec(vec![outc], grad_bias)?,
    })
}

/// Transposed convolution; `weight` is laid out `[in, out, kernel...]`.
pub fn conv_transpose_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    params: &ConvParams,
) -> Result<Tensor> {
    const OP: &str = "conv_transpose_forward";
    check_input(OP, input, params, params.in_channels)?;
    check_shape(OP, "weight", weight, &params.transpose_weight_shape())?;
    check_shape(OP, "bias", bias, &[params.out_channels])?;
    let spatial = params.transpose_output_extent(&input.shape()[1..])?;
    // The forward pass scatters through the geometry of the matching
    // convolution, whose input is our output.
    let geom = Geometry::new(params.out_channels, &spatial, &input.shape()[1..], params);
    let precision = combine(input.precision(), weight.precision());

    let x = input.values();
    let w = weight.values();
    let b = bias.values();
    let (rows, len_in, len_out) = (geom.rows(), geom.output_len(), geom.input_len());
    let wmat = MatRef::row_major(&w, params.in_channels, rows);
    let mut out = vec![0f32; params.out_channels * len_out];

    if params.is_pointwise() {
        sgemm(1.0, wmat.t(), MatRef::row_major(&x, params.in_channels, len_in), 0.0, &mut out, len_in, 1);
    } else {
        let chunk = geom.chunk();
        let mut col = vec![0f32; rows * chunk];
        for l0 in (0..len_in).step_by(chunk) {
            let n = chunk.min(len_in - l0);
            let xview = MatRef {
                data: &x[l0..],
                rows: params.in_channels,
                cols: n,
                row_stride: len_in,
                col_stride: 1,
            };
            sgemm(1.0, wmat.t(), xview, 0.0, &mut col[..rows * n], n, 1);
            geom.col2im(&col, l0, n, &mut out);
        }
    }
    for (o, row) in out.chunks_mut(len_out).enumerate() {
        row.iter_mut().for_each(|v| *v += b[o]);
    }
    Ok(Tensor::with_precision(output_shape(params.out_channels, &spatial), out, precision))
}

pub fn conv_transpose_backward(
    input: &Tensor,
    weight: &Tensor,
    params: &ConvParams,
    grad_output: &Tensor,
) -> Result<ConvGrads> {
    conv_transpose_backward_impl(input, weight, params, grad_output, true)
}

pub(crate) fn conv_transpose_backward_impl(
    input: &Tensor,
    weight: &Tensor,
    params: &ConvParams,
    grad_output: &Tensor,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    const OP: &str = "conv_transpose_backward";
    check_input(OP, input, params, params.in_channels)?;
    check_shape(OP, "weight", weight, &params.transpose_weight_shape())?;
    let spatial = params.transpose_output_extent(&input.shape()[1..])?;
    check_grad_output(OP, grad_output, params.out_channels, &spatial)?;
    let geom = Geometry::new(params.out_channels, &spatial, &input.shape()[1..], params);

    let x = input.values();
    let w = weight.values();
    let g = grad_output.values();
    let (rows, len_in, len_out, inc) = (geom.rows(), geom.output_len(), geom.input_len(), params.in_channels);

    let grad_bias: Vec<f32> = g
        .chunks(len_out)
        .map(|r| r.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    let mut grad_w = vec![0f32; inc * rows];
    let mut grad_x = need_input_grad.then(|| vec![0f32; x.len()]);
    let wmat = MatRef::row_major(&w, inc, rows);

    if params.is_pointwise() {
        let gmat = MatRef::row_major(&g, rows, len_in);
        sgemm(1.0, MatRef::row_major(&x, inc, len_in), gmat.t(), 0.0, &mut grad_w, rows, 1);
        if let Some(gx) = grad_x.as_mut() {
            sgemm(1.0, wmat, gmat, 0.0, gx, len_in, 1);
        }
    } else {
        let chunk = geom.chunk();
        let mut col = vec![0f32; rows * chunk];
        for l0 in (0..len_in).step_by(chunk) {
            let n = chunk.min(len_in - l0);
            geom.im2col(&g, l0, n, &mut col);
            let cmat = MatRef::row_major(&col[..rows * n], rows, n);
            let xview = MatRef {
                data: &x[l0..],
                rows: inc,
                cols: n,
                row_stride: len_in,
                col_stride: 1,
            };
            sgemm(1.0, xview, cmat.t(), 1.0, &mut grad_w, rows, 1);
            if let Some(gx) = grad_x.as_mut() {
                sgemm(1.0, wmat, cmat, 0.0, &mut gx[l0..], len_in, 1);
            }
        }
    }

    Ok(ConvGrads {
        input: grad_x.map(|v| Tensor::from_vec(input.shape().to_vec(), v)).transpose()?,
        weight: Tensor::from_vec(params.transpose_weight_shape(), grad_w)?,
        bias: Tensor::from_vec(vec![params.out_channels], grad_bias)?,
    })
}

//! Architecture builders for the 2D and 3D encoder/decoder families.

use super::graph::{GraphBuilder, LayerGraph};
use super::spec::{ModelSpec, Variant, BCAEPP_WIDTHS, THREE_D_STAGES};
use crate::error::{Error, Result};
use crate::tensor::{Activation, ConvParams};

const DOWN_KERNEL_3D: [usize; 3] = [3, 4, 4];
const DOWN_STRIDE_3D: [usize; 3] = [1, 2, 2];
const DOWN_PADDING_3D: [usize; 3] = [1, 1, 1];

/// Input conv (k=7, p=3), then `m` stages of optional 2x2 average pooling
/// (first `d` stages) and two residual blocks, then a 1x1 conv to the code.
pub fn build_encoder_2d(
    m: usize,
    d: usize,
    trunk_width: usize,
    code_channels: usize,
    in_channels: usize,
) -> Result<LayerGraph> {
    if d > m {
        return Err(Error::config(format!("encoder has {m} blocks but {d} downsampling layers")));
    }
    let mut b = GraphBuilder::new("encoder");
    b.conv("in", ConvParams::square2d(in_channels, trunk_width, 7, 3, 1));
    for i in 1..=m {
        if i <= d {
            b.avgpool();
        }
        b.residual(&format!("block{i}.res0"), trunk_width, &[3, 3]);
        b.residual(&format!("block{i}.res1"), trunk_width, &[3, 3]);
    }
    b.conv("out", ConvParams::square2d(trunk_width, code_channels, 1, 0, 1));
    Ok(b.finish())
}

/// `n` stages of optional nearest upsampling (first `d` stages) and two
/// residual blocks, a 1x1 conv to `out_channels`, then `activation`.
pub fn build_decoder_2d(
    name: &str,
    n: usize,
    d: usize,
    trunk_width: usize,
    code_channels: usize,
    out_channels: usize,
    activation: Activation,
) -> Result<LayerGraph> {
    if d > n {
        return Err(Error::config(format!("decoder has {n} blocks but {d} upsampling layers")));
    }
    if code_channels != trunk_width {
        return Err(Error::config(format!(
            "decoder trunk width {trunk_width} does not match {code_channels} code channels"
        )));
    }
    let mut b = GraphBuilder::new(name);
    for i in 1..=n {
        if i <= d {
            b.upsample();
        }
        b.residual(&format!("block{i}.res0"), trunk_width, &[3, 3]);
        b.residual(&format!("block{i}.res1"), trunk_width, &[3, 3]);
    }
    b.conv("out", ConvParams::square2d(trunk_width, out_channels, 1, 0, 1));
    b.activation(activation);
    Ok(b.finish())
}

fn widths_3d(spec: &ModelSpec) -> Result<[usize; THREE_D_STAGES]> {
    if !spec.variant.is_3d() {
        return Err(Error::config(format!("{:?} is not a 3D variant", spec.variant)));
    }
    spec.widths
        .as_slice()
        .try_into()
        .map_err(|_| Error::config("3D variants need four stage widths"))
}

/// Four stages of (stride (1,2,2) conv, residual block), then a 1x1x1 conv
/// to the code channels. The radial axis keeps its extent.
pub fn build_encoder_3d(spec: &ModelSpec) -> Result<LayerGraph> {
    let widths = widths_3d(spec)?;
    let mut b = GraphBuilder::new("encoder");
    let mut cin = 1;
    for (i, &w) in widths.iter().enumerate() {
        b.conv(
            &format!("down{i}"),
            ConvParams::new(cin, w, &DOWN_KERNEL_3D, &DOWN_STRIDE_3D, &DOWN_PADDING_3D)?,
        );
        b.residual(&format!("res{i}"), w, &[3, 3, 3]);
        cin = w;
    }
    b.conv("out", ConvParams::new(cin, spec.code_channels, &[1, 1, 1], &[1, 1, 1], &[0, 0, 0])?);
    Ok(b.finish())
}

/// Mirror of the 3D encoder built from transposed convolutions. Both 3D
/// variants share the wide decoder; only their encoders differ.
pub fn build_decoder_3d(spec: &ModelSpec, name: &str, activation: Activation) -> Result<LayerGraph> {
    widths_3d(spec)?;
    let widths = BCAEPP_WIDTHS;
    let mut b = GraphBuilder::new(name);
    let top = widths[THREE_D_STAGES - 1];
    b.conv("in", ConvParams::new(spec.code_channels, top, &[1, 1, 1], &[1, 1, 1], &[0, 0, 0])?);
    for i in (0..THREE_D_STAGES).rev() {
        let out = if i == 0 { widths[0] } else { widths[i - 1] };
        b.residual(&format!("res{i}"), widths[i], &[3, 3, 3]);
        b.conv_transpose(
            &format!("up{i}"),
            ConvParams::new(widths[i], out, &DOWN_KERNEL_3D, &DOWN_STRIDE_3D, &DOWN_PADDING_3D)?,
        );
    }
    b.conv("out", ConvParams::new(widths[0], 1, &[1, 1, 1], &[1, 1, 1], &[0, 0, 0])?);
    b.activation(activation);
    Ok(b.finish())
}

/// Encoder plus segmentation (sigmoid) and regression (identity) decoders.
pub fn build_graphs(spec: &ModelSpec) -> Result<[LayerGraph; 3]> {
    spec.validate()?;
    Ok(match spec.variant {
        Variant::Bcae2d => {
            let w = spec.trunk_width();
            [
                build_encoder_2d(spec.m, spec.d, w, spec.code_channels, spec.radial_layers)?,
                build_decoder_2d("seg", spec.n, spec.d, w, spec.code_channels, spec.radial_layers, Activation::Sigmoid)?,
                build_decoder_2d("reg", spec.n, spec.d, w, spec.code_channels, spec.radial_layers, Activation::Identity)?,
            ]
        }
        Variant::Bcaepp | Variant::Bcaeht => [
            build_encoder_3d(spec)?,
            build_decoder_3d(spec, "seg", Activation::Sigmoid)?,
            build_decoder_3d(spec, "reg", Activation::Identity)?,
        ],
    })
}

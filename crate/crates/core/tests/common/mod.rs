//! Naive f64 reference implementations and finite-difference helpers shared
//! by the integration tests. Nothing here calls into the library's kernels.
#![allow(dead_code)]

use bcae_core::data::{generate_wedge, GeneratorConfig, LogWedge, RawWedge};
use bcae_core::model::{Bcae, Layer, LayerGraph};
use bcae_core::tensor::{Activation, ConvParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense f64 array, row-major, `[channels, spatial...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn random(shape: Vec<usize>, rng: &mut impl Rng, scale: f64) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        Self { shape, data }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::new(t.shape().to_vec(), t.values().iter().map(|&v| v as f64).collect())
    }

    /// Round to f32; oracle inputs go through this so both sides see the
    /// same values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.shape.clone(), self.data.iter().map(|&v| v as f32).collect()).unwrap()
    }

    pub fn rounded(&self) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| v as f32 as f64).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn dot(&self, other: &Arr) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// Pad a spatial shape to three axes with leading ones.
fn as3(spatial: &[usize]) -> [usize; 3] {
    let mut s = [1; 3];
    s[3 - spatial.len()..].copy_from_slice(spatial);
    s
}

fn lift(v: &[usize], fill: usize) -> [usize; 3] {
    let mut s = [fill; 3];
    s[3 - v.len()..].copy_from_slice(v);
    s
}

/// Direct cross-correlation, weight `[O, C, k...]`.
pub fn conv_ref(x: &Arr, w: &Arr, b: &[f64], p: &ConvParams) -> Arr {
    let (c, o) = (p.in_channels, p.out_channels);
    let si = as3(&x.shape[1..]);
    let k = lift(&p.kernel, 1);
    let st = lift(&p.stride, 1);
    let pd = lift(&p.padding, 0);
    let so: Vec<usize> = (0..3).map(|a| (si[a] + 2 * pd[a] - k[a]) / st[a] + 1).collect();
    let mut out_shape = vec![o];
    out_shape.extend(&so[3 - p.kernel.len()..]);
    let mut out = Arr::zeros(out_shape);
    let kv = k[0] * k[1] * k[2];
    let mut idx = 0;
    for oc in 0..o {
        for z in 0..so[0] {
            for y in 0..so[1] {
                for xx in 0..so[2] {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for kz in 0..k[0] {
                            let iz = (z * st[0] + kz) as isize - pd[0] as isize;
                            if iz < 0 || iz >= si[0] as isize {
                                continue;
                            }
                            for ky in 0..k[1] {
                                let iy = (y * st[1] + ky) as isize - pd[1] as isize;
                                if iy < 0 || iy >= si[1] as isize {
                                    continue;
                                }
                                for kx in 0..k[2] {
                                    let ix = (xx * st[2] + kx) as isize - pd[2] as isize;
                                    if ix < 0 || ix >= si[2] as isize {
                                        continue;
                                    }
                                    let xi = ((ic * si[0] + iz as usize) * si[1] + iy as usize) * si[2] + ix as usize;
                                    let wi = (oc * c + ic) * kv + (kz * k[1] + ky) * k[2] + kx;
                                    acc += x.data[xi] * w.data[wi];
                                }
                            }
                        }
                    }
                    out.data[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    out
}

/// Scatter form of the transposed convolution, weight `[C, O, k...]`:
/// input voxel `i` adds `x[i] * w[k]` to output `i * s - p + k`.
pub fn conv_transpose_ref(x: &Arr, w: &Arr, b: &[f64], p: &ConvParams) -> Arr {
    let (c, o) = (p.in_channels, p.out_channels);
    let si = as3(&x.shape[1..]);
    let k = lift(&p.kernel, 1);
    let st = lift(&p.stride, 1);
    let pd = lift(&p.padding, 0);
    let so: Vec<usize> = (0..3).map(|a| (si[a] - 1) * st[a] + k[a] - 2 * pd[a]).collect();
    let mut out_shape = vec![o];
    out_shape.extend(&so[3 - p.kernel.len()..]);
    let vol = so[0] * so[1] * so[2];
    let mut out = Arr::zeros(out_shape);
    for oc in 0..o {
        out.data[oc * vol..(oc + 1) * vol].iter_mut().for_each(|v| *v = b[oc]);
    }
    let kv = k[0] * k[1] * k[2];
    for ic in 0..c {
        for z in 0..si[0] {
            for y in 0..si[1] {
                for xx in 0..si[2] {
                    let xv = x.data[((ic * si[0] + z) * si[1] + y) * si[2] + xx];
                    for oc in 0..o {
                        for kz in 0..k[0] {
                            let oz = (z * st[0] + kz) as isize - pd[0] as isize;
                            if oz < 0 || oz >= so[0] as isize {
                                continue;
                            }
                            for ky in 0..k[1] {
                                let oy = (y * st[1] + ky) as isize - pd[1] as isize;
                                if oy < 0 || oy >= so[1] as isize {
                                    continue;
                                }
                                for kx in 0..k[2] {
                                    let ox = (xx * st[2] + kx) as isize - pd[2] as isize;
                                    if ox < 0 || ox >= so[2] as isize {
                                        continue;
                                    }
                                    let wi = (ic * o + oc) * kv + (kz * k[1] + ky) * k[2] + kx;
                                    let oi = ((oc * so[0] + oz as usize) * so[1] + oy as usize) * so[2] + ox as usize;
                                    out.data[oi] += xv * w.data[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Mean over 2x2 windows of the last two axes.
pub fn avgpool_ref(x: &Arr) -> Arr {
    let r = x.shape.len();
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    let lead: usize = x.shape[..r - 2].iter().product();
    let mut shape = x.shape.clone();
    shape[r - 2] = h / 2;
    shape[r - 1] = w / 2;
    let mut out = Arr::zeros(shape);
    for l in 0..lead {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let at = |di: usize, dj: usize| x.data[(l * h + 2 * i + di) * w + 2 * j + dj];
                out.data[(l * (h / 2) + i) * (w / 2) + j] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of the last two axes.
pub fn upsample_ref(x: &Arr) -> Arr {
    let r = x.shape.len();
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    let lead: usize = x.shape[..r - 2].iter().product();
    let mut shape = x.shape.clone();
    shape[r - 2] = 2 * h;
    shape[r - 1] = 2 * w;
    let mut out = Arr::zeros(shape);
    for l in 0..lead {
        for i in 0..2 * h {
            for j in 0..2 * w {
                out.data[(l * 2 * h + i) * 2 * w + j] = x.data[(l * h + i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub fn sigmoid_ref(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn activation_ref(x: f64, kind: Activation) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::Sigmoid => sigmoid_ref(x),
        Activation::Identity => x,
        Activation::ExpAffine { a, b } => a as f64 + b as f64 * x.exp(),
    }
}

fn add(a: &Arr, b: &Arr) -> Arr {
    assert_eq!(a.shape, b.shape);
    Arr::new(a.shape.clone(), a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

/// Parameters of a graph as f64 vectors.
pub fn graph_params(g: &LayerGraph) -> Vec<Vec<f64>> {
    g.params.iter().map(|p| p.tensor.values().iter().map(|&v| v as f64).collect()).collect()
}

fn shaped(g: &LayerGraph, params: &[Vec<f64>], i: usize) -> Arr {
    Arr::new(g.params[i].tensor.shape().to_vec(), params[i].clone())
}

/// Evaluate `g` layer by layer with the oracle operators and the given
/// parameter values.
pub fn graph_ref(g: &LayerGraph, params: &[Vec<f64>], input: &Arr) -> Arr {
    let mut x = input.clone();
    for layer in &g.layers {
        x = match layer {
            Layer::Conv { conv, weight, bias } => conv_ref(&x, &shaped(g, params, *weight), &params[*bias], conv),
            Layer::ConvTranspose { conv, weight, bias } => {
                conv_transpose_ref(&x, &shaped(g, params, *weight), &params[*bias], conv)
            }
            Layer::Residual { first, second, params: idx } => {
                let h = conv_ref(&x, &shaped(g, params, idx[0]), &params[idx[1]], first).map(|v| v.max(0.0));
                let y = conv_ref(&h, &shaped(g, params, idx[2]), &params[idx[3]], second);
                add(&y, &x).map(|v| v.max(0.0))
            }
            Layer::AvgPool2d => avgpool_ref(&x),
            Layer::Upsample2d => upsample_ref(&x),
            Layer::Act(kind) => x.map(|v| activation_ref(v, *kind)),
        };
    }
    x
}

/// Focal loss in bits, clamped like the library: mean over voxels.
pub fn focal_ref(seg: &[f64], labels: &[f64], gamma: f64) -> f64 {
    let eps = 1e-7;
    let total: f64 = seg
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let p = p.clamp(eps, 1.0 - eps);
            -l * (1.0 - p).powf(gamma) * p.log2() - (1.0 - l) * p.powf(gamma) * (1.0 - p).log2()
        })
        .sum();
    total / seg.len() as f64
}

/// Mean absolute error of `mask * reg` against `target`, with a given mask.
pub fn masked_mae_ref(reg: &[f64], target: &[f64], mask: &[bool]) -> f64 {
    let total: f64 = reg
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((&r, &t), &m)| ((if m { r } else { 0.0 }) - t).abs())
        .sum();
    total / reg.len() as f64
}

/// All parameters of a model as f64, encoder then seg then reg decoder.
pub fn model_params(model: &Bcae) -> Vec<Vec<f64>> {
    model.graphs().iter().flat_map(|g| graph_params(g)).collect()
}

/// `c * L_seg + L_reg` of one padded wedge evaluated entirely by the
/// oracles, with the regression mask held at `mask`.
pub fn combined_loss_ref(model: &Bcae, params: &[Vec<f64>], wedge: &LogWedge, c: f64, gamma: f64, mask: &[bool]) -> f64 {
    let [enc, seg, reg] = model.graphs();
    let (pe, rest) = params.split_at(enc.params.len());
    let (ps, pr) = rest.split_at(seg.params.len());
    let x = Arr::from_tensor(&model.input_tensor(wedge).unwrap());
    let z = graph_ref(enc, pe, &x);
    let s = graph_ref(seg, ps, &z);
    let transform = model.regression_transform();
    let r = graph_ref(reg, pr, &z).map(|v| activation_ref(v, transform));
    let target: Vec<f64> = wedge.values().iter().map(|&v| v as f64).collect();
    let labels: Vec<f64> = target.iter().map(|&v| (v > 0.0) as u8 as f64).collect();
    c * focal_ref(&s.data, &labels, gamma) + masked_mae_ref(&r.data, &target, mask)
}

/// Segmentation output of the oracle forward pass.
pub fn seg_ref(model: &Bcae, params: &[Vec<f64>], wedge: &LogWedge) -> Vec<f64> {
    let [enc, seg, _] = model.graphs();
    let (pe, rest) = params.split_at(enc.params.len());
    let x = Arr::from_tensor(&model.input_tensor(wedge).unwrap());
    let z = graph_ref(enc, pe, &x);
    graph_ref(seg, &rest[..seg.params.len()], &z).data
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Relative error with a floor on the denominator so that tiny gradients
/// are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `count` synthetic log wedges of the given extents. Small wedges hold
/// few tracks, so the occupancy window is widened.
pub fn synthetic(extents: [usize; 3], count: usize, seed: u64) -> Vec<LogWedge> {
    let mut cfg = GeneratorConfig::desk(extents, seed);
    cfg.events = 1;
    cfg.occupancy_tolerance = 0.06;
    (0..count).map(|i| generate_wedge(&cfg, i).unwrap().log_transform()).collect()
}

/// Random zero-suppressed wedge with roughly `density` nonzero voxels; for
/// extents too small for the track generator.
pub fn sparse_random(extents: [usize; 3], density: f64, rng: &mut impl Rng) -> LogWedge {
    let n = extents.iter().product();
    let adc = (0..n)
        .map(|_| if rng.random_bool(density) { rng.random_range(64..=1023) } else { 0 })
        .collect();
    RawWedge::new(extents, adc).unwrap().log_transform()
}

//! Sequential operator graphs with named parameters and explicit backward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv::{conv_backward_impl, conv_transpose_backward_impl};
use crate::tensor::{
    activation_backward, activation_forward, avgpool2d, avgpool2d_backward, conv_forward, conv_transpose_forward,
    upsample_nearest2d, upsample_nearest2d_backward, Activation, ConvParams, Precision, Tensor,
};

/// One operator of a [`LayerGraph`]. Parameter fields index into
/// [`LayerGraph::params`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv { conv: ConvParams, weight: usize, bias: usize },
    ConvTranspose { conv: ConvParams, weight: usize, bias: usize },
    /// `relu(x + conv2(relu(conv1(x))))`
    Residual {
        first: ConvParams,
        second: ConvParams,
        params: [usize; 4],
    },
    AvgPool2d,
    Upsample2d,
    Act(Activation),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Bound of the uniform initialisation, `sqrt(1 / fan_in)`.
    pub init_bound: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerGraph {
    pub layers: Vec<Layer>,
    pub params: Vec<Param>,
}

/// Activations recorded by [`LayerGraph::forward_train`].
pub struct Tape {
    /// `values[i]` is the input of layer `i`; the last entry is the output.
    values: Vec<Tensor>,
    /// Hidden activation `relu(conv1(x))` of each residual layer.
    hidden: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        self.values.last().expect("tape holds at least the input")
    }
}

/// Result of a backward pass: one gradient per parameter, in order.
pub struct Backward {
    pub input: Option<Tensor>,
    pub params: Vec<Tensor>,
}

impl LayerGraph {
    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Re-draw every parameter uniformly in `±init_bound`.
    pub fn init_uniform(&mut self, rng: &mut impl Rng) {
        for p in &mut self.params {
            let bound = p.init_bound;
            let data = p.tensor.as_f32_mut().expect("parameters are full precision");
            for v in data {
                *v = rng.random_range(-bound..=bound);
            }
        }
    }

    /// Copy of the graph with every parameter stored in `precision`.
    pub fn cast(&self, precision: Precision) -> LayerGraph {
        LayerGraph {
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(precision).tensor,
                    init_bound: p.init_bound,
                })
                .collect(),
        }
    }

    /// Compose the shape laws of every layer over `input`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for layer in &self.layers {
            shape = match layer {
                Layer::Conv { conv, .. } => {
                    check_channels(conv.in_channels, &shape)?;
                    prepend(conv.out_channels, conv.output_extent(&shape[1..])?)
                }
                Layer::ConvTranspose { conv, .. } => {
                    check_channels(conv.in_channels, &shape)?;
                    prepend(conv.out_channels, conv.transpose_output_extent(&shape[1..])?)
                }
                Layer::Residual { first, second, .. } => {
                    check_channels(first.in_channels, &shape)?;
                    let mid = prepend(first.out_channels, first.output_extent(&shape[1..])?);
                    let out = prepend(second.out_channels, second.output_extent(&mid[1..])?);
                    if out != shape {
                        return Err(Error::config(format!("residual block changes shape {shape:?} -> {out:?}")));
                    }
                    out
                }
                Layer::AvgPool2d => {
                    let n = shape.len();
                    for axis in [n - 2, n - 1] {
                        if !shape[axis].is_multiple_of(2) {
                            return Err(Error::OddExtent {
                                op: "avgpool2d",
                                axis,
                                extent: shape[axis],
                            });
                        }
                        shape[axis] /= 2;
                    }
                    shape
                }
                Layer::Upsample2d => {
                    let n = shape.len();
                    shape[n - 2] *= 2;
                    shape[n - 1] *= 2;
                    shape
                }
                Layer::Act(_) => shape,
            };
        }
        Ok(shape)
    }

    fn param(&self, i: usize) -> &Tensor {
        &self.params[i].tensor
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = self.apply(layer, &x, None)?;
        }
        Ok(x)
    }

    pub fn forward_train(&self, input: &Tensor) -> Result<Tape> {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        let mut hidden = Vec::with_capacity(self.layers.len());
        values.push(input.clone());
        for layer in &self.layers {
            let mut h = None;
            let y = self.apply(layer, values.last().unwrap(), Some(&mut h))?;
            values.push(y);
            hidden.push(h);
        }
        Ok(Tape { values, hidden })
    }

    fn apply(&self, layer: &Layer, x: &Tensor, hidden: Option<&mut Option<Tensor>>) -> Result<Tensor> {
        Ok(match layer {
            Layer::Conv { conv, weight, bias } => conv_forward(x, self.param(*weight), self.param(*bias), conv)?,
            Layer::ConvTranspose { conv, weight, bias } => {
                conv_transpose_forward(x, self.param(*weight), self.param(*bias), conv)?
            }
            Layer::Residual { first, second, params } => {
                let h = conv_forward(x, self.param(params[0]), self.param(params[1]), first)?;
                let h = activation_forward(&h, Activation::Relu);
                let y = conv_forward(&h, self.param(params[2]), self.param(params[3]), second)?;
                if let Some(slot) = hidden {
                    *slot = Some(h);
                }
                activation_forward(&y.add(x)?, Activation::Relu)
            }
            Layer::AvgPool2d => avgpool2d(x)?,
            Layer::Upsample2d => upsample_nearest2d(x)?,
            Layer::Act(kind) => activation_forward(x, *kind),
        })
    }

    /// Short name of layer `i`, derived from its parameters when it has any.
    pub fn describe_layer(&self, i: usize) -> String {
        let strip = |p: usize, suffix: &str| {
            let name = &self.params[p].name;
            name.strip_suffix(suffix).unwrap_or(name).to_owned()
        };
        match &self.layers[i] {
            Layer::Conv { weight, .. } => format!("{} (conv)", strip(*weight, ".weight")),
            Layer::ConvTranspose { weight, .. } => format!("{} (transposed conv)", strip(*weight, ".weight")),
            Layer::Residual { params, .. } => format!("{} (residual block)", strip(params[0], ".conv1.weight")),
            Layer::AvgPool2d => format!("layer {i} (avgpool2d)"),
            Layer::Upsample2d => format!("layer {i} (upsample2d)"),
            Layer::Act(kind) => format!("layer {i} ({kind:?})"),
        }
    }

    /// First layer whose recorded output holds a NaN or infinity.
    pub fn first_non_finite(&self, tape: &Tape) -> Option<String> {
        if !tape.values[0].all_finite() {
            return Some("input".to_owned());
        }
        (0..self.layers.len())
            .find(|&i| !tape.values[i + 1].all_finite())
            .map(|i| self.describe_layer(i))
    }

    /// Back-propagate `grad_output` through a recorded forward pass.
    pub fn backward(&self, tape: &Tape, grad_output: &Tensor, need_input_grad: bool) -> Result<Backward> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut g = grad_output.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.values[i];
            let y = &tape.values[i + 1];
            let want_input = need_input_grad || i > 0;
            let next = match layer {
                Layer::Conv { conv, weight, bias } => {
                    let cg = conv_backward_impl(x, self.param(*weight), conv, &g, want_input)?;
                    grads[*weight] = Some(cg.weight);
                    grads[*bias] = Some(cg.bias);
                    cg.input
                }
                Layer::ConvTranspose { conv, weight, bias } => {
                    let cg = conv_transpose_backward_impl(x, self.param(*weight), conv, &g, want_input)?;
                    grads[*weight] = Some(cg.weight);
                    grads[*bias] = Some(cg.bias);
                    cg.input
                }
                Layer::Residual { first, second, params } => {
                    let h = tape.hidden[i].as_ref().expect("residual hidden state recorded");
                    let gs = relu_mask(y, &g)?;
                    let c2 = conv_backward_impl(h, self.param(params[2]), second, &gs, true)?;
                    let gh = relu_mask(h, &c2.input.expect("requested"))?;
                    let c1 = conv_backward_impl(x, self.param(params[0]), first, &gh, want_input)?;
                    grads[params[0]] = Some(c1.weight);
                    grads[params[1]] = Some(c1.bias);
                    grads[params[2]] = Some(c2.weight);
                    grads[params[3]] = Some(c2.bias);
                    match c1.input {
                        Some(mut gx) => {
                            gx.add_assign(&gs)?;
                            Some(gx)
                        }
                        None => None,
                    }
                }
                Layer::AvgPool2d => Some(avgpool2d_backward(x.shape(), &g)?),
                Layer::Upsample2d => Some(upsample_nearest2d_backward(&g)?),
                Layer::Act(kind) => Some(activation_backward(x, y, &g, *kind)?),
            };
            match next {
                Some(n) => g = n,
                None => break,
            }
        }
        let params = grads
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
            .collect();
        Ok(Backward {
            input: need_input_grad.then_some(g),
            params,
        })
    }
}

/// `grad * 1[out > 0]`, the ReLU derivative expressed through its output.
fn relu_mask(out: &Tensor, grad: &Tensor) -> Result<Tensor> {
    crate::tensor::check_same_shape("relu_backward", out, grad)?;
    let o = out.values();
    let data = grad
        .values()
        .iter()
        .zip(o.iter())
        .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(out.shape().to_vec(), data)
}

fn check_channels(expected: usize, shape: &[usize]) -> Result<()> {
    if shape.first() != Some(&expected) {
        return Err(Error::dim("graph", "channel axis", expected, shape.first().copied().unwrap_or(0)));
    }
    Ok(())
}

fn prepend(c: usize, spatial: Vec<usize>) -> Vec<usize> {
    let mut s = Vec::with_capacity(spatial.len() + 1);
    s.push(c);
    s.extend(spatial);
    s
}

/// Appends layers and allocates their parameters under a name prefix.
pub struct GraphBuilder {
    prefix: String,
    graph: LayerGraph,
}

impl GraphBuilder {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            graph: LayerGraph::default(),
        }
    }

    fn alloc(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> usize {
        self.graph.params.push(Param {
            name: format!("{}.{name}", self.prefix),
            tensor: Tensor::zeros(&shape),
            init_bound: (1.0 / fan_in as f32).sqrt(),
        });
        self.graph.params.len() - 1
    }

    pub fn conv(&mut self, name: &str, conv: ConvParams) -> &mut Self {
        let fan_in = conv.in_channels * conv.kernel_volume();
        let weight = self.alloc(&format!("{name}.weight"), conv.weight_shape(), fan_in);
        let bias = self.alloc(&format!("{name}.bias"), vec![conv.out_channels], fan_in);
        self.graph.layers.push(Layer::Conv { conv, weight, bias });
        self
    }

    pub fn conv_transpose(&mut self, name: &str, conv: ConvParams) -> &mut Self {
        let fan_in = conv.in_channels * conv.kernel_volume();
        let weight = self.alloc(&format!("{name}.weight"), conv.transpose_weight_shape(), fan_in);
        let bias = self.alloc(&format!("{name}.bias"), vec![conv.out_channels], fan_in);
        self.graph.layers.push(Layer::ConvTranspose { conv, weight, bias });
        self
    }

    /// Two same-padding convolutions of `width` channels with a skip.
    pub fn residual(&mut self, name: &str, width: usize, kernel: &[usize]) -> &mut Self {
        let padding: Vec<usize> = kernel.iter().map(|k| (k - 1) / 2).collect();
        let stride = vec![1; kernel.len()];
        let conv = ConvParams::new(width, width, kernel, &stride, &padding).expect("valid residual conv");
        let fan_in = width * conv.kernel_volume();
        let params = [
            self.alloc(&format!("{name}.conv1.weight"), conv.weight_shape(), fan_in),
            self.alloc(&format!("{name}.conv1.bias"), vec![width], fan_in),
            self.alloc(&format!("{name}.conv2.weight"), conv.weight_shape(), fan_in),
            self.alloc(&format!("{name}.conv2.bias"), vec![width], fan_in),
        ];
        self.graph.layers.push(Layer::Residual {
            first: conv.clone(),
            second: conv,
            params,
        });
        self
    }

    pub fn avgpool(&mut self) -> &mut Self {
        self.graph.layers.push(Layer::AvgPool2d);
        self
    }

    pub fn upsample(&mut self) -> &mut Self {
        self.graph.layers.push(Layer::Upsample2d);
        self
    }

    pub fn activation(&mut self, kind: Activation) -> &mut Self {
        if kind != Activation::Identity {
            self.graph.layers.push(Layer::Act(kind));
        }
        self
    }

    pub fn finish(&mut self) -> LayerGraph {
        std::mem::take(&mut self.graph)
    }
}

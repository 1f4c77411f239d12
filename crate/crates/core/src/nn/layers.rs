//! Layer definitions with batched forward and backward passes.
//!
//! Backward passes take `&self` and return parameter gradients in the same
//! order as [`Layer::params`], so a model can be shared read-only across
//! threads during inference and explanation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::ops::{self, ConvGeom, PoolGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Batch statistics for normalization, active dropout seeded by `seed`.
    Train {
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// (out_c, in_c, k, k)
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl Conv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            weight: he_uniform(out_c * fan_in, fan_in, rng),
            bias: bias.then(|| vec![0.0; out_c]),
        }
    }

    fn geom(&self, x: &Tensor) -> Result<ConvGeom> {
        let (c, h, w) = x.chw()?;
        if c != self.in_c {
            return Err(Error::Shape(format!("conv expects {} channels, got {c}", self.in_c)));
        }
        ConvGeom::new(c, h, w, self.out_c, self.kernel, self.stride, self.pad).ok_or_else(|| {
            Error::Shape(format!(
                "{h}x{w} input too small for {}x{} kernel",
                self.kernel, self.kernel
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            weight: vec![1.0; channels],
            bias: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    /// (out_f, in_f)
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(in_f: usize, out_f: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_f as f32).sqrt();
        Linear {
            in_f,
            out_f,
            weight: (0..in_f * out_f).map(|_| rng.gen_range(-bound..bound)).collect(),
            bias: vec![0.0; out_f],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.item_len() != self.in_f {
            return Err(Error::DimensionMismatch {
                expected: self.in_f,
                actual: x.item_len(),
            });
        }
        let n = x.batch();
        let y = ops::linear_forward(&x.data, n, &self.weight, &self.bias, self.in_f, self.out_f);
        Ok(Tensor {
            shape: vec![n, self.out_f],
            data: y,
        })
    }
}

fn he_uniform(n: usize, fan_in: usize, rng: &mut impl Rng) -> Vec<f32> {
    let bound = (6.0 / fan_in as f32).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// A layer with a stable name, used for parameter naming and Grad-CAM targets.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedLayer {
    pub name: String,
    pub layer: Layer,
}

impl NamedLayer {
    pub fn new(name: impl Into<String>, layer: Layer) -> Self {
        NamedLayer {
            name: name.into(),
            layer,
        }
    }
}

/// Basic two-convolution residual block with an optional projection shortcut.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub main: Vec<NamedLayer>,
    pub shortcut: Vec<NamedLayer>,
}

impl ResidualBlock {
    pub fn basic(in_c: usize, out_c: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let main = vec![
            NamedLayer::new(
                "conv1",
                Layer::Conv2d(Conv2d::new(in_c, out_c, 3, stride, 1, false, rng)),
            ),
            NamedLayer::new("bn1", Layer::BatchNorm2d(BatchNorm2d::new(out_c))),
            NamedLayer::new("relu", Layer::Relu),
            NamedLayer::new("conv2", Layer::Conv2d(Conv2d::new(out_c, out_c, 3, 1, 1, false, rng))),
            NamedLayer::new("bn2", Layer::BatchNorm2d(BatchNorm2d::new(out_c))),
        ];
        let shortcut = if stride != 1 || in_c != out_c {
            vec![
                NamedLayer::new(
                    "downsample.0",
                    Layer::Conv2d(Conv2d::new(in_c, out_c, 1, stride, 0, false, rng)),
                ),
                NamedLayer::new("downsample.1", Layer::BatchNorm2d(BatchNorm2d::new(out_c))),
            ]
        } else {
            Vec::new()
        };
        ResidualBlock { main, shortcut }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    AdaptiveAvgPool2d {
        out_h: usize,
        out_w: usize,
    },
    /// (N, C, H, W) → (N, C)
    GlobalAvgPool,
    Flatten,
    Dropout {
        p: f32,
    },
    Linear(Linear),
    Residual(ResidualBlock),
}

/// Whether a tensor is a parameter trained by the optimizer or a running buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Param,
    Buffer,
}

pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
    pub data: &'a [f32],
}

pub struct NamedTensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut Vec<f32>,
}

#[derive(Debug, Clone)]
pub enum Cache {
    Input(Tensor),
    Output(Tensor),
    Pool {
        arg: Vec<u32>,
        in_shape: Vec<usize>,
    },
    Shape(Vec<usize>),
    BatchNorm {
        xhat: Tensor,
        inv_std: Vec<f32>,
        batch_mean: Vec<f32>,
        batch_var: Vec<f32>,
    },
    Dropout {
        mask: Vec<f32>,
    },
    Residual {
        main: Vec<Cache>,
        shortcut: Vec<Cache>,
        out: Tensor,
    },
    None,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "Conv2d",
            Layer::BatchNorm2d(_) => "BatchNorm2d",
            Layer::Relu => "Relu",
            Layer::MaxPool2d { .. } => "MaxPool2d",
            Layer::AdaptiveAvgPool2d { .. } => "AdaptiveAvgPool2d",
            Layer::GlobalAvgPool => "GlobalAvgPool",
            Layer::Flatten => "Flatten",
            Layer::Dropout { .. } => "Dropout",
            Layer::Linear(_) => "Linear",
            Layer::Residual(_) => "Residual",
        }
    }

    /// Output shape for a single item of shape `input` (no batch dimension).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match input {
                [c, h, w] => Ok((*c, *h, *w)),
                other => Err(Error::Shape(format!("{what} expects (C,H,W), got {other:?}"))),
            }
        };
        match self {
            Layer::Conv2d(c) => {
                let (ch, h, w) = spatial("conv")?;
                if ch != c.in_c {
                    return Err(Error::Shape(format!("conv expects {} channels, got {ch}", c.in_c)));
                }
                let g = ConvGeom::new(ch, h, w, c.out_c, c.kernel, c.stride, c.pad)
                    .ok_or_else(|| Error::Shape(format!("{h}x{w} too small for conv")))?;
                Ok(vec![c.out_c, g.out_h, g.out_w])
            }
            Layer::MaxPool2d { kernel, stride, pad } => {
                let (ch, h, w) = spatial("maxpool")?;
                let g = PoolGeom::new(ch, h, w, *kernel, *stride, *pad)
                    .ok_or_else(|| Error::Shape(format!("{h}x{w} too small for pooling")))?;
                Ok(vec![ch, g.out_h, g.out_w])
            }
            Layer::AdaptiveAvgPool2d { out_h, out_w } => {
                let (ch, _, _) = spatial("adaptive pool")?;
                Ok(vec![ch, *out_h, *out_w])
            }
            Layer::GlobalAvgPool => Ok(vec![spatial("global pool")?.0]),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Linear(l) => {
                let n: usize = input.iter().product();
                if n != l.in_f {
                    return Err(Error::DimensionMismatch {
                        expected: l.in_f,
                        actual: n,
                    });
                }
                Ok(vec![l.out_f])
            }
            Layer::Residual(b) => {
                let mut s = input.to_vec();
                for l in &b.main {
                    s = l.layer.output_shape(&s)?;
                }
                Ok(s)
            }
            Layer::BatchNorm2d(_) | Layer::Relu | Layer::Dropout { .. } => Ok(input.to_vec()),
        }
    }

    pub fn params(&self) -> Vec<&Vec<f32>> {
        match self {
            Layer::Conv2d(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Layer::BatchNorm2d(b) => vec![&b.weight, &b.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Residual(r) => r
                .main
                .iter()
                .chain(&r.shortcut)
                .flat_map(|l| l.layer.params())
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        match self {
            Layer::Conv2d(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Layer::BatchNorm2d(b) => vec![&mut b.weight, &mut b.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Residual(r) => r
                .main
                .iter_mut()
                .chain(r.shortcut.iter_mut())
                .flat_map(|l| l.layer.params_mut())
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Parameters and buffers with dotted names under `prefix`.
    pub fn named_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        let mut push = |suffix: &str, shape: Vec<usize>, role: TensorRole, data: &'a [f32]| {
            out.push(NamedTensor {
                name: format!("{prefix}.{suffix}"),
                shape,
                role,
                data,
            })
        };
        match self {
            Layer::Conv2d(c) => {
                push(
                    "weight",
                    vec![c.out_c, c.in_c, c.kernel, c.kernel],
                    TensorRole::Param,
                    &c.weight,
                );
                if let Some(b) = &c.bias {
                    push("bias", vec![c.out_c], TensorRole::Param, b);
                }
            }
            Layer::BatchNorm2d(b) => {
                push("weight", vec![b.channels], TensorRole::Param, &b.weight);
                push("bias", vec![b.channels], TensorRole::Param, &b.bias);
                push("running_mean", vec![b.channels], TensorRole::Buffer, &b.running_mean);
                push("running_var", vec![b.channels], TensorRole::Buffer, &b.running_var);
            }
            Layer::Linear(l) => {
                push("weight", vec![l.out_f, l.in_f], TensorRole::Param, &l.weight);
                push("bias", vec![l.out_f], TensorRole::Param, &l.bias);
            }
            Layer::Residual(r) => {
                for l in r.main.iter().chain(&r.shortcut) {
                    l.layer.named_tensors(&format!("{prefix}.{}", l.name), out);
                }
            }
            _ => {}
        }
    }

    pub fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        let mut push = |suffix: &str, shape: Vec<usize>, data: &'a mut Vec<f32>| {
            out.push(NamedTensorMut {
                name: format!("{prefix}.{suffix}"),
                shape,
                data,
            })
        };
        match self {
            Layer::Conv2d(c) => {
                push("weight", vec![c.out_c, c.in_c, c.kernel, c.kernel], &mut c.weight);
                if let Some(b) = &mut c.bias {
                    push("bias", vec![c.out_c], b);
                }
            }
            Layer::BatchNorm2d(b) => {
                push("weight", vec![b.channels], &mut b.weight);
                push("bias", vec![b.channels], &mut b.bias);
                push("running_mean", vec![b.channels], &mut b.running_mean);
                push("running_var", vec![b.channels], &mut b.running_var);
            }
            Layer::Linear(l) => {
                push("weight", vec![l.out_f, l.in_f], &mut l.weight);
                push("bias", vec![l.out_f], &mut l.bias);
            }
            Layer::Residual(r) => {
                for l in r.main.iter_mut().chain(r.shortcut.iter_mut()) {
                    l.layer.named_tensors_mut(&format!("{prefix}.{}", l.name), out);
                }
            }
            _ => {}
        }
    }

    pub fn forward(&self, x: Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
        match self {
            Layer::Conv2d(conv) => {
                let g = conv.geom(&x)?;
                let per_out = g.out_c * g.out_h * g.out_w;
                let mut y = vec![0.0f32; x.batch() * per_out];
                y.par_chunks_mut(per_out).enumerate().for_each(|(i, dst)| {
                    dst.copy_from_slice(&ops::conv2d_forward(x.item(i), &conv.weight, conv.bias.as_deref(), &g));
                });
                let out = Tensor {
                    shape: vec![x.batch(), g.out_c, g.out_h, g.out_w],
                    data: y,
                };
                Ok((out, Cache::Input(x)))
            }
            Layer::BatchNorm2d(bn) => batchnorm_forward(bn, x, mode),
            Layer::Relu => {
                let mut y = x;
                y.data.iter_mut().for_each(|v| *v = v.max(0.0));
                Ok((y.clone(), Cache::Output(y)))
            }
            Layer::MaxPool2d { kernel, stride, pad } => {
                let (c, h, w) = x.chw()?;
                let g = PoolGeom::new(c, h, w, *kernel, *stride, *pad)
                    .ok_or_else(|| Error::Shape(format!("{h}x{w} too small for pooling")))?;
                let per_out = c * g.out_h * g.out_w;
                let results: Vec<(Vec<f32>, Vec<u32>)> = (0..x.batch())
                    .into_par_iter()
                    .map(|i| ops::maxpool_forward(x.item(i), &g))
                    .collect();
                let mut y = Vec::with_capacity(x.batch() * per_out);
                let mut arg = Vec::with_capacity(x.batch() * per_out);
                for (yy, aa) in results {
                    y.extend(yy);
                    arg.extend(aa);
                }
                Ok((
                    Tensor {
                        shape: vec![x.batch(), c, g.out_h, g.out_w],
                        data: y,
                    },
                    Cache::Pool {
                        arg,
                        in_shape: x.shape.clone(),
                    },
                ))
            }
            Layer::AdaptiveAvgPool2d { out_h, out_w } => {
                let (c, h, w) = x.chw()?;
                let mut y = Vec::with_capacity(x.batch() * c * out_h * out_w);
                for i in 0..x.batch() {
                    y.extend(ops::adaptive_avg_forward(x.item(i), c, h, w, *out_h, *out_w));
                }
                Ok((
                    Tensor {
                        shape: vec![x.batch(), c, *out_h, *out_w],
                        data: y,
                    },
                    Cache::Shape(x.shape.clone()),
                ))
            }
            Layer::GlobalAvgPool => {
                let (c, h, w) = x.chw()?;
                let hw = (h * w) as f32;
                let y: Vec<f32> = x.data.chunks(h * w).map(|s| s.iter().sum::<f32>() / hw).collect();
                Ok((
                    Tensor {
                        shape: vec![x.batch(), c],
                        data: y,
                    },
                    Cache::Shape(x.shape.clone()),
                ))
            }
            Layer::Flatten => {
                let shape = x.shape.clone();
                let n = x.batch();
                let d = x.item_len();
                Ok((
                    Tensor {
                        shape: vec![n, d],
                        data: x.data,
                    },
                    Cache::Shape(shape),
                ))
            }
            Layer::Dropout { p } => match mode {
                Mode::Eval => Ok((x, Cache::None)),
                Mode::Train { seed } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let keep = 1.0 - p;
                    let mask: Vec<f32> = (0..x.data.len())
                        .map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let mut y = x;
                    y.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                    Ok((y, Cache::Dropout { mask }))
                }
            },
            Layer::Linear(l) => {
                let y = l.forward(&x)?;
                Ok((y, Cache::Input(x)))
            }
            Layer::Residual(block) => {
                let (main_out, main_caches) = seq_forward(&block.main, x.clone(), mode)?;
                let (short_out, short_caches) = seq_forward(&block.shortcut, x, mode)?;
                if main_out.shape != short_out.shape {
                    return Err(Error::Shape(format!(
                        "residual branches disagree: {:?} vs {:?}",
                        main_out.shape, short_out.shape
                    )));
                }
                let mut out = main_out;
                out.data
                    .iter_mut()
                    .zip(&short_out.data)
                    .for_each(|(a, b)| *a = (*a + b).max(0.0));
                Ok((
                    out.clone(),
                    Cache::Residual {
                        main: main_caches,
                        shortcut: short_caches,
                        out,
                    },
                ))
            }
        }
    }

    /// Returns the input gradient and, when requested, parameter gradients
    /// ordered as in [`Layer::params`].
    pub fn backward(&self, cache: &Cache, dy: Tensor, param_grads: bool) -> Result<(Tensor, Vec<Vec<f32>>)> {
        match (self, cache) {
            (Layer::Conv2d(conv), Cache::Input(x)) => {
                let g = conv.geom(x)?;
                let per_in = x.item_len();
                let per_out = dy.item_len();
                let parts: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)> = (0..x.batch())
                    .into_par_iter()
                    .map(|i| {
                        ops::conv2d_backward(
                            x.item(i),
                            &dy.data[i * per_out..(i + 1) * per_out],
                            &conv.weight,
                            &g,
                            param_grads,
                        )
                    })
                    .collect();
                let mut dx = Vec::with_capacity(x.batch() * per_in);
                let mut dw = vec![0.0f32; if param_grads { conv.weight.len() } else { 0 }];
                let mut db = vec![0.0f32; if param_grads { conv.out_c } else { 0 }];
                for (dxi, dwi, dbi) in parts {
                    dx.extend(dxi);
                    dw.iter_mut().zip(&dwi).for_each(|(a, b)| *a += b);
                    db.iter_mut().zip(&dbi).for_each(|(a, b)| *a += b);
                }
                let mut grads = Vec::new();
                if param_grads {
                    grads.push(dw);
                    if conv.bias.is_some() {
                        grads.push(db);
                    }
                }
                Ok((
                    Tensor {
                        shape: x.shape.clone(),
                        data: dx,
                    },
                    grads,
                ))
            }
            (Layer::BatchNorm2d(bn), _) => batchnorm_backward(bn, cache, dy, param_grads),
            (Layer::Relu, Cache::Output(y)) => {
                let mut dx = dy;
                dx.data.iter_mut().zip(&y.data).for_each(|(g, &o)| {
                    if o <= 0.0 {
                        *g = 0.0
                    }
                });
                Ok((dx, Vec::new()))
            }
            (Layer::MaxPool2d { .. }, Cache::Pool { arg, in_shape }) => {
                let per_in: usize = in_shape[1..].iter().product();
                let per_out = dy.item_len();
                let mut dx = Vec::with_capacity(in_shape[0] * per_in);
                for i in 0..in_shape[0] {
                    dx.extend(ops::maxpool_backward(
                        &dy.data[i * per_out..(i + 1) * per_out],
                        &arg[i * per_out..(i + 1) * per_out],
                        per_in,
                    ));
                }
                Ok((
                    Tensor {
                        shape: in_shape.clone(),
                        data: dx,
                    },
                    Vec::new(),
                ))
            }
            (Layer::AdaptiveAvgPool2d { out_h, out_w }, Cache::Shape(in_shape)) => {
                let (c, h, w) = (in_shape[1], in_shape[2], in_shape[3]);
                let per_out = dy.item_len();
                let mut dx = Vec::with_capacity(in_shape.iter().product());
                for i in 0..in_shape[0] {
                    dx.extend(ops::adaptive_avg_backward(
                        &dy.data[i * per_out..(i + 1) * per_out],
                        c,
                        h,
                        w,
                        *out_h,
                        *out_w,
                    ));
                }
                Ok((
                    Tensor {
                        shape: in_shape.clone(),
                        data: dx,
                    },
                    Vec::new(),
                ))
            }
            (Layer::GlobalAvgPool, Cache::Shape(in_shape)) => {
                let hw = in_shape[2] * in_shape[3];
                let mut dx = Vec::with_capacity(in_shape.iter().product());
                for &g in &dy.data {
                    dx.extend(std::iter::repeat_n(g / hw as f32, hw));
                }
                Ok((
                    Tensor {
                        shape: in_shape.clone(),
                        data: dx,
                    },
                    Vec::new(),
                ))
            }
            (Layer::Flatten, Cache::Shape(in_shape)) => Ok((
                Tensor {
                    shape: in_shape.clone(),
                    data: dy.data,
                },
                Vec::new(),
            )),
            (Layer::Dropout { .. }, Cache::None) => Ok((dy, Vec::new())),
            (Layer::Dropout { .. }, Cache::Dropout { mask }) => {
                let mut dx = dy;
                dx.data.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
                Ok((dx, Vec::new()))
            }
            (Layer::Linear(l), Cache::Input(x)) => {
                let (dx, dw, db) =
                    ops::linear_backward(&x.data, &dy.data, x.batch(), &l.weight, l.in_f, l.out_f, param_grads);
                let grads = if param_grads { vec![dw, db] } else { Vec::new() };
                Ok((
                    Tensor {
                        shape: x.shape.clone(),
                        data: dx,
                    },
                    grads,
                ))
            }
            (Layer::Residual(block), Cache::Residual { main, shortcut, out }) => {
                let mut d = dy;
                d.data.iter_mut().zip(&out.data).for_each(|(g, &o)| {
                    if o <= 0.0 {
                        *g = 0.0
                    }
                });
                let (dx_main, mut g_main) = seq_backward(&block.main, main, d.clone(), param_grads)?;
                let (dx_short, g_short) = seq_backward(&block.shortcut, shortcut, d, param_grads)?;
                let mut dx = dx_main;
                dx.data.iter_mut().zip(&dx_short.data).for_each(|(a, b)| *a += b);
                g_main.extend(g_short);
                Ok((dx, g_main))
            }
            (layer, _) => Err(Error::Shape(format!(
                "cache does not match layer {}",
                layer.kind_name()
            ))),
        }
    }

    /// Folds batch statistics recorded during a training forward pass into
    /// the running estimates.
    pub fn commit_stats(&mut self, cache: &Cache) {
        match (self, cache) {
            (
                Layer::BatchNorm2d(bn),
                Cache::BatchNorm {
                    batch_mean, batch_var, ..
                },
            ) => {
                let m = bn.momentum;
                for c in 0..bn.channels {
                    bn.running_mean[c] = (1.0 - m) * bn.running_mean[c] + m * batch_mean[c];
                    bn.running_var[c] = (1.0 - m) * bn.running_var[c] + m * batch_var[c];
                }
            }
            (Layer::Residual(block), Cache::Residual { main, shortcut, .. }) => {
                for (l, c) in block.main.iter_mut().zip(main) {
                    l.layer.commit_stats(c);
                }
                for (l, c) in block.shortcut.iter_mut().zip(shortcut) {
                    l.layer.commit_stats(c);
                }
            }
            _ => {}
        }
    }
}

fn batchnorm_forward(bn: &BatchNorm2d, x: Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
    let (c, h, w) = x.chw()?;
    if c != bn.channels {
        return Err(Error::Shape(format!(
            "batchnorm expects {} channels, got {c}",
            bn.channels
        )));
    }
    let n = x.batch();
    let hw = h * w;
    match mode {
        Mode::Eval => {
            let mut y = x;
            for i in 0..n {
                for ch in 0..c {
                    let inv = 1.0 / (bn.running_var[ch] + bn.eps).sqrt();
                    let scale = bn.weight[ch] * inv;
                    let shift = bn.bias[ch] - bn.running_mean[ch] * scale;
                    for v in &mut y.data[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                        *v = *v * scale + shift;
                    }
                }
            }
            Ok((y, Cache::None))
        }
        Mode::Train { .. } => {
            let count = (n * hw) as f64;
            let mut mean = vec![0f32; c];
            let mut var = vec![0f32; c];
            let mut unbiased = vec![0f32; c];
            for ch in 0..c {
                let vals = (0..n).flat_map(|i| x.data[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter());
                let s: f64 = vals.clone().map(|&v| v as f64).sum();
                let m = s / count;
                let ss: f64 = vals.map(|&v| (v as f64 - m).powi(2)).sum();
                mean[ch] = m as f32;
                var[ch] = (ss / count) as f32;
                unbiased[ch] = if count > 1.0 {
                    (ss / (count - 1.0)) as f32
                } else {
                    var[ch]
                };
            }
            let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
            let mut xhat = x;
            let mut y = Vec::with_capacity(xhat.data.len());
            for i in 0..n {
                for ch in 0..c {
                    for v in &mut xhat.data[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                        *v = (*v - mean[ch]) * inv_std[ch];
                        y.push(*v * bn.weight[ch] + bn.bias[ch]);
                    }
                }
            }
            let shape = xhat.shape.clone();
            Ok((
                Tensor { shape, data: y },
                Cache::BatchNorm {
                    xhat,
                    inv_std,
                    batch_mean: mean,
                    batch_var: unbiased,
                },
            ))
        }
    }
}

fn batchnorm_backward(
    bn: &BatchNorm2d,
    cache: &Cache,
    dy: Tensor,
    param_grads: bool,
) -> Result<(Tensor, Vec<Vec<f32>>)> {
    let (n, c, h, w) = match dy.shape.as_slice() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => return Err(Error::Shape(format!("batchnorm gradient shape {other:?}"))),
    };
    let hw = h * w;
    match cache {
        Cache::None => {
            let mut dx = dy;
            for i in 0..n {
                for ch in 0..c {
                    let scale = bn.weight[ch] / (bn.running_var[ch] + bn.eps).sqrt();
                    dx.data[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                        .iter_mut()
                        .for_each(|g| *g *= scale);
                }
            }
            // parameter gradients in eval mode are not used for training
            let grads = if param_grads {
                vec![vec![0.0; c], vec![0.0; c]]
            } else {
                Vec::new()
            };
            Ok((dx, grads))
        }
        Cache::BatchNorm { xhat, inv_std, .. } => {
            let m = (n * hw) as f32;
            let mut dgamma = vec![0f32; c];
            let mut dbeta = vec![0f32; c];
            for i in 0..n {
                for ch in 0..c {
                    let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                    for (g, xh) in dy.data[r.clone()].iter().zip(&xhat.data[r]) {
                        dgamma[ch] += g * xh;
                        dbeta[ch] += g;
                    }
                }
            }
            let mut dx = dy;
            for i in 0..n {
                for ch in 0..c {
                    let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                    let k = bn.weight[ch] * inv_std[ch] / m;
                    for (g, xh) in dx.data[r.clone()].iter_mut().zip(&xhat.data[r]) {
                        *g = k * (m * *g - dbeta[ch] - xh * dgamma[ch]);
                    }
                }
            }
            let grads = if param_grads { vec![dgamma, dbeta] } else { Vec::new() };
            Ok((dx, grads))
        }
        _ => Err(Error::Shape("cache does not match BatchNorm2d".into())),
    }
}

pub fn seq_forward(layers: &[NamedLayer], mut x: Tensor, mode: Mode) -> Result<(Tensor, Vec<Cache>)> {
    let mut caches = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let layer_mode = match mode {
            Mode::Train { seed } => Mode::Train {
                seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64),
            },
            Mode::Eval => Mode::Eval,
        };
        let (y, c) = l.layer.forward(x, layer_mode)?;
        caches.push(c);
        x = y;
    }
    Ok((x, caches))
}

pub fn seq_backward(
    layers: &[NamedLayer],
    caches: &[Cache],
    mut dy: Tensor,
    param_grads: bool,
) -> Result<(Tensor, Vec<Vec<f32>>)> {
    let mut grads_rev: Vec<Vec<Vec<f32>>> = Vec::with_capacity(layers.len());
    for (l, c) in layers.iter().zip(caches).rev() {
        let (dx, g) = l.layer.backward(c, dy, param_grads)?;
        grads_rev.push(g);
        dy = dx;
    }
    Ok((dy, grads_rev.into_iter().rev().flatten().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
        }
    }

    /// Finite-difference check of d(Σ r⊙f(x))/dx for a layer stack.
    fn grad_check(layers: &[NamedLayer], x: Tensor, mode: Mode) {
        let (y, caches) = seq_forward(layers, x.clone(), mode).unwrap();
        let r = rand_tensor(y.shape.clone(), 77);
        let (dx, _) = seq_backward(layers, &caches, r.clone(), true).unwrap();
        let loss = |x: Tensor| -> f64 {
            let (y, _) = seq_forward(layers, x, mode).unwrap();
            y.data.iter().zip(&r.data).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let eps = 1e-2;
        for i in (0..x.data.len()).step_by(x.data.len() / 7 + 1) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (loss(xp) - loss(xm)) / (2.0 * eps as f64);
            assert!(
                (fd - dx.data[i] as f64).abs() < 2e-2 * (1.0 + fd.abs()),
                "index {i}: fd {fd} vs {}",
                dx.data[i]
            );
        }
    }

    #[test]
    fn batchnorm_train_gradient() {
        let layers = vec![NamedLayer::new(
            "bn",
            Layer::BatchNorm2d(BatchNorm2d {
                weight: vec![1.5, 0.5],
                bias: vec![0.1, -0.2],
                ..BatchNorm2d::new(2)
            }),
        )];
        grad_check(&layers, rand_tensor(vec![3, 2, 3, 3], 1), Mode::Train { seed: 0 });
        grad_check(&layers, rand_tensor(vec![3, 2, 3, 3], 1), Mode::Eval);
    }

    #[test]
    fn residual_block_gradient() {
        let mut r = rng();
        let layers = vec![NamedLayer::new(
            "block",
            Layer::Residual(ResidualBlock::basic(2, 3, 2, &mut r)),
        )];
        grad_check(&layers, rand_tensor(vec![2, 2, 6, 6], 2), Mode::Eval);
    }

    #[test]
    fn pooling_stack_gradient() {
        let mut r = rng();
        let layers = vec![
            NamedLayer::new("conv", Layer::Conv2d(Conv2d::new(3, 4, 3, 1, 1, true, &mut r))),
            NamedLayer::new(
                "pool",
                Layer::MaxPool2d {
                    kernel: 2,
                    stride: 2,
                    pad: 0,
                },
            ),
            NamedLayer::new("avg", Layer::AdaptiveAvgPool2d { out_h: 2, out_w: 2 }),
            NamedLayer::new("flat", Layer::Flatten),
            NamedLayer::new("fc", Layer::Linear(Linear::new(16, 3, &mut r))),
        ];
        grad_check(&layers, rand_tensor(vec![2, 3, 8, 8], 3), Mode::Eval);
        let gap = vec![
            NamedLayer::new("conv", Layer::Conv2d(Conv2d::new(3, 4, 3, 2, 1, false, &mut r))),
            NamedLayer::new("gap", Layer::GlobalAvgPool),
        ];
        grad_check(&gap, rand_tensor(vec![2, 3, 7, 7], 4), Mode::Eval);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scaled_in_train() {
        let l = Layer::Dropout { p: 0.5 };
        let x = rand_tensor(vec![1, 1000], 9);
        let (y, _) = l.forward(x.clone(), Mode::Eval).unwrap();
        assert_eq!(y, x);
        let (y, _) = l.forward(x.clone(), Mode::Train { seed: 1 }).unwrap();
        let zeros = y.data.iter().filter(|&&v| v == 0.0).count();
        assert!((400..600).contains(&zeros));
        assert!(y
            .data
            .iter()
            .zip(&x.data)
            .all(|(a, b)| *a == 0.0 || (*a - 2.0 * b).abs() < 1e-6));
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut l = Layer::BatchNorm2d(BatchNorm2d::new(1));
        let x = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let (_, cache) = l.forward(x, Mode::Train { seed: 0 }).unwrap();
        l.commit_stats(&cache);
        let Layer::BatchNorm2d(bn) = &l else { unreachable!() };
        assert!((bn.running_mean[0] - 0.4).abs() < 1e-6);
        // unbiased variance of {1,3,5,7} is 20/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-5);
    }

    #[test]
    fn output_shapes_propagate() {
        let mut r = rng();
        let conv = Layer::Conv2d(Conv2d::new(3, 8, 11, 4, 2, true, &mut r));
        assert_eq!(conv.output_shape(&[3, 224, 224]).unwrap(), vec![8, 55, 55]);
        let pool = Layer::MaxPool2d {
            kernel: 3,
            stride: 2,
            pad: 0,
        };
        assert_eq!(pool.output_shape(&[8, 55, 55]).unwrap(), vec![8, 27, 27]);
        assert!(conv.output_shape(&[3, 4, 4]).is_err());
    }
}

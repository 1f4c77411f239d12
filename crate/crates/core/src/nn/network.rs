use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    seq_backward, seq_forward, BatchNorm2d, Cache, Conv2d, Layer, Linear, Mode, NamedLayer, NamedTensor,
    NamedTensorMut, ResidualBlock, TensorRole,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Eight learned layers with large early kernels, torchvision AlexNet layout.
    LargeKernelNet,
    /// ResNet-18 with basic residual blocks.
    ResidualNet18,
    /// Three conv-BN-ReLU blocks pooled to 4x4, for desk-scale runs.
    Tiny,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::LargeKernelNet => "large_kernel_net",
            BackboneKind::ResidualNet18 => "residual_net18",
            BackboneKind::Tiny => "tiny",
        }
    }

    /// Layer whose activations Grad-CAM uses by default.
    pub fn default_cam_layer(self) -> &'static str {
        match self {
            BackboneKind::LargeKernelNet => "features.11",
            BackboneKind::ResidualNet18 => "layer4.1",
            BackboneKind::Tiny => "relu3",
        }
    }

    fn head_name(self) -> &'static str {
        match self {
            BackboneKind::LargeKernelNet => "classifier.6",
            BackboneKind::ResidualNet18 => "fc",
            BackboneKind::Tiny => "head",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "large_kernel_net" | "alexnet" => Ok(BackboneKind::LargeKernelNet),
            "residual_net18" | "resnet18" => Ok(BackboneKind::ResidualNet18),
            "tiny" => Ok(BackboneKind::Tiny),
            other => Err(Error::Config(format!("unknown backbone '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneKind,
    pub num_classes: usize,
    pub input_size: usize,
    /// Width of the side input concatenated to the pooled features (3 for the one-hot plane).
    #[serde(default)]
    pub aux_width: usize,
    #[serde(default)]
    pub pretrained: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(backbone: BackboneKind, num_classes: usize, input_size: usize) -> Self {
        ModelSpec {
            backbone,
            num_classes,
            input_size,
            aux_width: 0,
            pretrained: false,
            seed: 0,
        }
    }

    pub fn with_aux(mut self, width: usize) -> Self {
        self.aux_width = width;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Feature extractor followed by a linear head over `[features, aux]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: ModelSpec,
    pub features: Vec<NamedLayer>,
    pub head: NamedLayer,
    pub feature_dim: usize,
}

pub struct NetCache {
    features: Vec<Cache>,
    head: Cache,
}

impl Network {
    /// Randomly initialised network; pretrained weights are applied by the caller.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if spec.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let features = match spec.backbone {
            BackboneKind::Tiny => tiny_features(&mut rng),
            BackboneKind::LargeKernelNet => large_kernel_features(&mut rng),
            BackboneKind::ResidualNet18 => resnet18_features(&mut rng),
        };
        let mut shape = vec![3, spec.input_size, spec.input_size];
        for l in &features {
            shape = l.layer.output_shape(&shape)?;
        }
        if shape.len() != 1 {
            return Err(Error::Shape(format!("feature extractor ends with shape {shape:?}")));
        }
        let feature_dim = shape[0];
        let head = NamedLayer::new(
            spec.backbone.head_name(),
            Layer::Linear(Linear::new(feature_dim + spec.aux_width, spec.num_classes, &mut rng)),
        );
        Ok(Network {
            spec,
            features,
            head,
            feature_dim,
        })
    }

    pub fn head_linear(&self) -> &Linear {
        match &self.head.layer {
            Layer::Linear(l) => l,
            _ => unreachable!("head is always linear"),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&Vec<f32>> {
        self.features
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|l| l.layer.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        self.features
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .flat_map(|l| l.layer.params_mut())
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        for l in self.features.iter().chain(std::iter::once(&self.head)) {
            l.layer.named_tensors(&l.name, &mut out);
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_>> {
        let mut out = Vec::new();
        for l in self.features.iter_mut().chain(std::iter::once(&mut self.head)) {
            l.layer.named_tensors_mut(&l.name, &mut out);
        }
        out
    }

    pub fn buffer_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|t| t.role == TensorRole::Buffer)
            .count()
    }

    /// Per-item shapes after each feature layer, starting from the input.
    pub fn trace_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![vec![3, self.spec.input_size, self.spec.input_size]];
        for l in &self.features {
            let next = l.layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|l| l.name == name)
    }

    fn check_input(&self, x: &Tensor, aux: Option<&Tensor>) -> Result<()> {
        let s = self.spec.input_size;
        if x.shape.len() != 4 || x.shape[1..] != [3, s, s] {
            return Err(Error::Shape(format!(
                "network expects (N,3,{s},{s}), got {:?}",
                x.shape
            )));
        }
        match (self.spec.aux_width, aux) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(Error::DimensionMismatch {
                expected: 0,
                actual: aux.map(|a| a.item_len()).unwrap_or(0),
            }),
            (w, None) => Err(Error::DimensionMismatch { expected: w, actual: 0 }),
            (w, Some(a)) if a.item_len() != w || a.batch() != x.batch() => Err(Error::DimensionMismatch {
                expected: w,
                actual: a.item_len(),
            }),
            _ => Ok(()),
        }
    }

    /// Pooled feature vectors, shape (N, feature_dim).
    pub fn features_forward(&self, x: Tensor, mode: Mode) -> Result<(Tensor, Vec<Cache>)> {
        seq_forward(&self.features, x, mode)
    }

    pub fn head_forward(&self, features: Tensor, aux: Option<&Tensor>, mode: Mode) -> Result<(Tensor, Cache)> {
        let joined = concat_aux(features, aux)?;
        self.head.layer.forward(joined, mode)
    }

    pub fn forward(&self, x: Tensor, aux: Option<&Tensor>, mode: Mode) -> Result<(Tensor, NetCache)> {
        self.check_input(&x, aux)?;
        let (f, features) = self.features_forward(x, mode)?;
        let (logits, head) = self.head_forward(f, aux, mode)?;
        Ok((logits, NetCache { features, head }))
    }

    pub fn logits(&self, x: Tensor, aux: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward(x, aux, Mode::Eval)?.0)
    }

    /// Parameter gradients in [`Network::params`] order.
    pub fn backward(&self, cache: &NetCache, dlogits: Tensor) -> Result<Vec<Vec<f32>>> {
        let (djoined, head_grads) = self.head.layer.backward(&cache.head, dlogits, true)?;
        let dfeat = split_aux_grad(djoined, self.feature_dim);
        let (_, mut grads) = seq_backward(&self.features, &cache.features, dfeat, true)?;
        grads.extend(head_grads);
        Ok(grads)
    }

    pub fn commit_stats(&mut self, cache: &NetCache) {
        for (l, c) in self.features.iter_mut().zip(&cache.features) {
            l.layer.commit_stats(c);
        }
    }

    /// Copies every tensor whose name and length match from `source`.
    /// Returns the names that were copied.
    pub fn load_matching(&mut self, source: &[(String, Vec<f32>)], skip_head: bool) -> Vec<String> {
        let head_prefix = format!("{}.", self.head.name);
        let mut copied = Vec::new();
        for t in self.named_tensors_mut() {
            if skip_head && t.name.starts_with(&head_prefix) {
                continue;
            }
            if let Some((_, v)) = source.iter().find(|(n, v)| *n == t.name && v.len() == t.data.len()) {
                t.data.copy_from_slice(v);
                copied.push(t.name);
            }
        }
        copied
    }
}

pub fn concat_aux(features: Tensor, aux: Option<&Tensor>) -> Result<Tensor> {
    let Some(aux) = aux else { return Ok(features) };
    let n = features.batch();
    if aux.batch() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: aux.batch(),
        });
    }
    let d = features.item_len();
    let a = aux.item_len();
    let mut data = Vec::with_capacity(n * (d + a));
    for i in 0..n {
        data.extend_from_slice(features.item(i));
        data.extend_from_slice(aux.item(i));
    }
    Ok(Tensor {
        shape: vec![n, d + a],
        data,
    })
}

fn split_aux_grad(djoined: Tensor, d: usize) -> Tensor {
    let n = djoined.batch();
    let w = djoined.item_len();
    if w == d {
        return djoined;
    }
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        data.extend_from_slice(&djoined.data[i * w..i * w + d]);
    }
    Tensor {
        shape: vec![n, d],
        data,
    }
}

fn tiny_features(rng: &mut ChaCha8Rng) -> Vec<NamedLayer> {
    let mut layers = Vec::new();
    for (i, (in_c, out_c)) in [(3, 16), (16, 32), (32, 32)].into_iter().enumerate() {
        let n = i + 1;
        layers.push(NamedLayer::new(
            format!("conv{n}"),
            Layer::Conv2d(Conv2d::new(in_c, out_c, 3, 1, 1, false, rng)),
        ));
        layers.push(NamedLayer::new(
            format!("bn{n}"),
            Layer::BatchNorm2d(BatchNorm2d::new(out_c)),
        ));
        layers.push(NamedLayer::new(format!("relu{n}"), Layer::Relu));
        if n < 3 {
            layers.push(NamedLayer::new(
                format!("pool{n}"),
                Layer::MaxPool2d {
                    kernel: 2,
                    stride: 2,
                    pad: 0,
                },
            ));
        }
    }
    layers.push(NamedLayer::new(
        "avgpool",
        Layer::AdaptiveAvgPool2d { out_h: 4, out_w: 4 },
    ));
    layers.push(NamedLayer::new("flatten", Layer::Flatten));
    layers
}

fn large_kernel_features(rng: &mut ChaCha8Rng) -> Vec<NamedLayer> {
    let conv = |name: &str, i, o, k, s, p, rng: &mut ChaCha8Rng| {
        NamedLayer::new(name, Layer::Conv2d(Conv2d::new(i, o, k, s, p, true, rng)))
    };
    let relu = |name: &str| NamedLayer::new(name, Layer::Relu);
    let pool = |name: &str| {
        NamedLayer::new(
            name,
            Layer::MaxPool2d {
                kernel: 3,
                stride: 2,
                pad: 0,
            },
        )
    };
    vec![
        conv("features.0", 3, 64, 11, 4, 2, rng),
        relu("features.1"),
        pool("features.2"),
        conv("features.3", 64, 192, 5, 1, 2, rng),
        relu("features.4"),
        pool("features.5"),
        conv("features.6", 192, 384, 3, 1, 1, rng),
        relu("features.7"),
        conv("features.8", 384, 256, 3, 1, 1, rng),
        relu("features.9"),
        conv("features.10", 256, 256, 3, 1, 1, rng),
        relu("features.11"),
        pool("features.12"),
        NamedLayer::new("avgpool", Layer::AdaptiveAvgPool2d { out_h: 6, out_w: 6 }),
        NamedLayer::new("flatten", Layer::Flatten),
        NamedLayer::new("classifier.0", Layer::Dropout { p: 0.5 }),
        NamedLayer::new("classifier.1", Layer::Linear(Linear::new(256 * 36, 4096, rng))),
        relu("classifier.2"),
        NamedLayer::new("classifier.3", Layer::Dropout { p: 0.5 }),
        NamedLayer::new("classifier.4", Layer::Linear(Linear::new(4096, 4096, rng))),
        relu("classifier.5"),
    ]
}

fn resnet18_features(rng: &mut ChaCha8Rng) -> Vec<NamedLayer> {
    let mut layers = vec![
        NamedLayer::new("conv1", Layer::Conv2d(Conv2d::new(3, 64, 7, 2, 3, false, rng))),
        NamedLayer::new("bn1", Layer::BatchNorm2d(BatchNorm2d::new(64))),
        NamedLayer::new("relu", Layer::Relu),
        NamedLayer::new(
            "maxpool",
            Layer::MaxPool2d {
                kernel: 3,
                stride: 2,
                pad: 1,
            },
        ),
    ];
    let mut in_c = 64;
    for (stage, out_c) in [64, 128, 256, 512].into_iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            layers.push(NamedLayer::new(
                format!("layer{}.{block}", stage + 1),
                Layer::Residual(ResidualBlock::basic(in_c, out_c, stride, rng)),
            ));
            in_c = out_c;
        }
    }
    layers.push(NamedLayer::new("avgpool", Layer::GlobalAvgPool));
    layers
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_width_matches_classes() {
        let net = Network::new(ModelSpec::new(BackboneKind::ResidualNet18, 3, 64)).unwrap();
        let y = net.logits(Tensor::zeros(vec![1, 3, 64, 64]), None).unwrap();
        assert_eq!(y.shape, vec![1, 3]);
        assert!(y.is_finite());
    }

    #[test]
    fn parameter_counts() {
        let alex = Network::new(ModelSpec::new(BackboneKind::LargeKernelNet, 1000, 224)).unwrap();
        let n = alex.parameter_count() as f64;
        assert!((n - 60e6).abs() / 60e6 < 0.05, "{n}");
        let alex3 = Network::new(ModelSpec::new(BackboneKind::LargeKernelNet, 3, 224)).unwrap();
        let n3 = alex3.parameter_count() as f64;
        assert!((n3 - 60e6).abs() / 60e6 < 0.05, "{n3}");
        let res = Network::new(ModelSpec::new(BackboneKind::ResidualNet18, 1000, 224)).unwrap();
        let r = res.parameter_count() as f64;
        assert!((r - 11.7e6).abs() / 11.7e6 < 0.01, "{r}");
        let tiny = Network::new(ModelSpec::new(BackboneKind::Tiny, 3, 32)).unwrap();
        assert!(tiny.parameter_count() < 100_000);
    }

    #[test]
    fn tensor_names_follow_torchvision_layout() {
        let res = Network::new(ModelSpec::new(BackboneKind::ResidualNet18, 3, 32)).unwrap();
        let names: Vec<String> = res.named_tensors().into_iter().map(|t| t.name).collect();
        for expected in [
            "conv1.weight",
            "bn1.running_var",
            "layer2.0.downsample.0.weight",
            "layer4.1.bn2.bias",
            "fc.weight",
        ] {
            assert!(names.iter().any(|n| n == expected), "missing {expected}");
        }
    }

    #[test]
    fn aux_width_is_checked() {
        let net = Network::new(ModelSpec::new(BackboneKind::Tiny, 4, 32).with_aux(3)).unwrap();
        assert_eq!(net.head_linear().in_f, net.feature_dim + 3);
        let x = Tensor::zeros(vec![2, 3, 32, 32]);
        assert!(matches!(
            net.logits(x.clone(), None),
            Err(Error::DimensionMismatch { expected: 3, actual: 0 })
        ));
        let aux = Tensor::zeros(vec![2, 3]);
        assert_eq!(net.logits(x, Some(&aux)).unwrap().shape, vec![2, 4]);
    }

    #[test]
    fn full_backward_matches_finite_difference_on_first_conv() {
        let net = Network::new(ModelSpec::new(BackboneKind::Tiny, 3, 16).with_aux(3).with_seed(3)).unwrap();
        let x = Tensor {
            shape: vec![2, 3, 16, 16],
            data: (0..2 * 3 * 256).map(|i| ((i * 37) % 101) as f32 / 101.0).collect(),
        };
        let aux = Tensor::new(vec![2, 3], vec![1., 0., 0., 0., 0., 1.]).unwrap();
        let (y, cache) = net.forward(x.clone(), Some(&aux), Mode::Eval).unwrap();
        let r = [0.3f32, -0.7, 0.2, 0.5, 0.1, -0.4];
        let grads = net
            .backward(&cache, Tensor::new(y.shape.clone(), r.to_vec()).unwrap())
            .unwrap();
        assert_eq!(grads.len(), net.params().len());
        // weight of the first conv, checked at a few positions
        let loss = |n: &Network| -> f64 {
            let y = n.logits(x.clone(), Some(&aux)).unwrap();
            y.data.iter().zip(&r).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        for idx in [0usize, 50, 300] {
            let eps = 1e-2;
            let mut p = net.clone();
            p.params_mut()[0][idx] += eps;
            let mut m = net.clone();
            m.params_mut()[0][idx] -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps as f64);
            assert!(
                (fd - grads[0][idx] as f64).abs() < 1e-2 * (1.0 + fd.abs()),
                "{fd} vs {}",
                grads[0][idx]
            );
        }
    }
}

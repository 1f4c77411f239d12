//! ONNX export and import for [`Network`], plus a reference interpreter.

mod interp;
pub mod proto;

use std::path::Path;

use prost::Message;

use super::layers::{Layer, NamedLayer};
use super::network::Network;
use crate::error::{Error, Result};
use proto::{AttributeProto, GraphProto, ModelProto, NodeProto, OperatorSetIdProto, TensorProto, ValueInfoProto};

pub use interp::run_graph;

pub const IR_VERSION: i64 = 8;
pub const OPSET: i64 = 13;
pub const INPUT_NAME: &str = "input";
pub const AUX_NAME: &str = "plane";
pub const OUTPUT_NAME: &str = "probs";

struct Builder {
    nodes: Vec<NodeProto>,
    initializers: Vec<TensorProto>,
    counter: usize,
}

impl Builder {
    fn fresh(&mut self, hint: &str) -> String {
        self.counter += 1;
        format!("{hint}_out{}", self.counter)
    }

    fn node(&mut self, op: &str, name: &str, inputs: Vec<String>, attrs: Vec<AttributeProto>) -> String {
        let out = self.fresh(name);
        self.nodes.push(NodeProto {
            input: inputs,
            output: vec![out.clone()],
            name: name.into(),
            op_type: op.into(),
            attribute: attrs,
            ..Default::default()
        });
        out
    }

    fn init(&mut self, name: String, dims: &[usize], data: &[f32]) -> String {
        self.initializers.push(TensorProto::from_f32(&name, dims, data));
        name
    }

    /// Emits `layers` starting from value `x` with per-item shape `shape`.
    fn emit_seq(
        &mut self,
        layers: &[NamedLayer],
        prefix: &str,
        mut x: String,
        mut shape: Vec<usize>,
    ) -> Result<(String, Vec<usize>)> {
        for l in layers {
            let name = if prefix.is_empty() {
                l.name.clone()
            } else {
                format!("{prefix}.{}", l.name)
            };
            let next = l.layer.output_shape(&shape)?;
            x = self.emit(&l.layer, &name, x, &shape, &next)?;
            shape = next;
        }
        Ok((x, shape))
    }

    fn emit(
        &mut self,
        layer: &Layer,
        name: &str,
        x: String,
        in_shape: &[usize],
        out_shape: &[usize],
    ) -> Result<String> {
        let p = |v: usize| v as i64;
        Ok(match layer {
            Layer::Conv2d(c) => {
                let w = self.init(
                    format!("{name}.weight"),
                    &[c.out_c, c.in_c, c.kernel, c.kernel],
                    &c.weight,
                );
                let mut inputs = vec![x, w];
                if let Some(b) = &c.bias {
                    inputs.push(self.init(format!("{name}.bias"), &[c.out_c], b));
                }
                self.node(
                    "Conv",
                    name,
                    inputs,
                    vec![
                        AttributeProto::ints("kernel_shape", &[p(c.kernel), p(c.kernel)]),
                        AttributeProto::ints("strides", &[p(c.stride), p(c.stride)]),
                        AttributeProto::ints("pads", &[p(c.pad); 4]),
                    ],
                )
            }
            Layer::BatchNorm2d(b) => {
                let inputs = vec![
                    x,
                    self.init(format!("{name}.weight"), &[b.channels], &b.weight),
                    self.init(format!("{name}.bias"), &[b.channels], &b.bias),
                    self.init(format!("{name}.running_mean"), &[b.channels], &b.running_mean),
                    self.init(format!("{name}.running_var"), &[b.channels], &b.running_var),
                ];
                self.node(
                    "BatchNormalization",
                    name,
                    inputs,
                    vec![AttributeProto::float("epsilon", b.eps)],
                )
            }
            Layer::Relu => self.node("Relu", name, vec![x], vec![]),
            Layer::MaxPool2d { kernel, stride, pad } => self.node(
                "MaxPool",
                name,
                vec![x],
                vec![
                    AttributeProto::ints("kernel_shape", &[p(*kernel), p(*kernel)]),
                    AttributeProto::ints("strides", &[p(*stride), p(*stride)]),
                    AttributeProto::ints("pads", &[p(*pad); 4]),
                ],
            ),
            Layer::AdaptiveAvgPool2d { out_h, out_w } => {
                let (h, w) = (in_shape[1], in_shape[2]);
                if (*out_h, *out_w) == (1, 1) {
                    self.node("GlobalAveragePool", name, vec![x], vec![])
                } else if h % out_h == 0 && w % out_w == 0 {
                    let (kh, kw) = (h / out_h, w / out_w);
                    if (kh, kw) == (1, 1) {
                        return Ok(x);
                    }
                    self.node(
                        "AveragePool",
                        name,
                        vec![x],
                        vec![
                            AttributeProto::ints("kernel_shape", &[p(kh), p(kw)]),
                            AttributeProto::ints("strides", &[p(kh), p(kw)]),
                        ],
                    )
                } else {
                    return Err(Error::UnsupportedLayer(format!(
                        "{name}: adaptive pooling {h}x{w} -> {out_h}x{out_w} has uneven bins"
                    )));
                }
            }
            Layer::GlobalAvgPool => {
                let pooled = self.node("GlobalAveragePool", name, vec![x], vec![]);
                self.node(
                    "Flatten",
                    &format!("{name}.flatten"),
                    vec![pooled],
                    vec![AttributeProto::int("axis", 1)],
                )
            }
            Layer::Flatten => {
                if in_shape.len() == 1 {
                    return Ok(x);
                }
                self.node("Flatten", name, vec![x], vec![AttributeProto::int("axis", 1)])
            }
            Layer::Dropout { .. } => x,
            Layer::Linear(l) => {
                let w = self.init(format!("{name}.weight"), &[l.out_f, l.in_f], &l.weight);
                let b = self.init(format!("{name}.bias"), &[l.out_f], &l.bias);
                self.node("Gemm", name, vec![x, w, b], vec![AttributeProto::int("transB", 1)])
            }
            Layer::Residual(block) => {
                let (main, main_shape) = self.emit_seq(&block.main, name, x.clone(), in_shape.to_vec())?;
                let (short, _) = self.emit_seq(&block.shortcut, name, x, in_shape.to_vec())?;
                debug_assert_eq!(main_shape, out_shape);
                let sum = self.node("Add", &format!("{name}.add"), vec![main, short], vec![]);
                self.node("Relu", &format!("{name}.relu_out"), vec![sum], vec![])
            }
        })
    }
}

/// Builds an ONNX model computing class probabilities from `input` (and `plane` when the
/// network takes a side input).
pub fn export_network(net: &Network) -> Result<ModelProto> {
    let mut b = Builder {
        nodes: Vec::new(),
        initializers: Vec::new(),
        counter: 0,
    };
    let s = net.spec.input_size;
    let (feat, _) = b.emit_seq(&net.features, "", INPUT_NAME.to_string(), vec![3, s, s])?;
    let mut inputs = vec![ValueInfoProto::batched(INPUT_NAME, &[3, s, s])];
    let joined = if net.spec.aux_width > 0 {
        inputs.push(ValueInfoProto::batched(AUX_NAME, &[net.spec.aux_width]));
        b.node(
            "Concat",
            "concat_aux",
            vec![feat, AUX_NAME.to_string()],
            vec![AttributeProto::int("axis", 1)],
        )
    } else {
        feat
    };
    let head_shape = vec![net.feature_dim + net.spec.aux_width];
    let logits = b.emit(
        &net.head.layer,
        &net.head.name,
        joined,
        &head_shape,
        &[net.spec.num_classes],
    )?;
    b.nodes.push(NodeProto {
        input: vec![logits],
        output: vec![OUTPUT_NAME.into()],
        name: "softmax".into(),
        op_type: "Softmax".into(),
        attribute: vec![AttributeProto::int("axis", 1)],
        ..Default::default()
    });
    Ok(ModelProto {
        ir_version: IR_VERSION,
        producer_name: "planemeta".into(),
        producer_version: env!("CARGO_PKG_VERSION").into(),
        graph: Some(GraphProto {
            node: b.nodes,
            name: net.spec.backbone.name().into(),
            initializer: b.initializers,
            input: inputs,
            output: vec![ValueInfoProto::batched(OUTPUT_NAME, &[net.spec.num_classes])],
            ..Default::default()
        }),
        opset_import: vec![OperatorSetIdProto {
            domain: String::new(),
            version: OPSET,
        }],
        ..Default::default()
    })
}

pub fn encode_model(model: &ModelProto) -> Vec<u8> {
    model.encode_to_vec()
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelProto> {
    let model = ModelProto::decode(bytes).map_err(|e| Error::Bundle(format!("not a readable ONNX model: {e}")))?;
    if model.graph.is_none() {
        return Err(Error::Bundle("ONNX model has no graph".into()));
    }
    Ok(model)
}

pub fn write_model(model: &ModelProto, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<ModelProto> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

/// All float initializers by name.
pub fn initializers(model: &ModelProto) -> Result<Vec<(String, Vec<f32>)>> {
    let graph = model
        .graph
        .as_ref()
        .ok_or_else(|| Error::Bundle("ONNX model has no graph".into()))?;
    graph
        .initializer
        .iter()
        .map(|t| {
            let data = t
                .to_f32()
                .ok_or_else(|| Error::Bundle(format!("initializer {} is not float32", t.name)))?;
            if data.len() != t.shape().iter().product::<usize>() {
                return Err(Error::Bundle(format!("initializer {} is truncated", t.name)));
            }
            Ok((t.name.clone(), data))
        })
        .collect()
}

/// Loads every parameter and buffer of `net` from the model's initializers.
pub fn load_weights(net: &mut Network, model: &ModelProto) -> Result<()> {
    let inits = initializers(model)?;
    let expected: Vec<String> = net.named_tensors().into_iter().map(|t| t.name).collect();
    let copied = net.load_matching(&inits, false);
    if copied.len() != expected.len() {
        let missing: Vec<&String> = expected.iter().filter(|n| !copied.contains(n)).take(5).collect();
        return Err(Error::Bundle(format!("bundle lacks tensors for {missing:?}")));
    }
    Ok(())
}

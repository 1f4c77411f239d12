//! Direct-loop evaluator for the ONNX operator subset the exporter emits.
//!
//! Kept deliberately independent of the training engine's kernels so it can
//! serve as a parity reference for exported bundles.

use std::collections::HashMap;

use super::proto::{AttributeProto, ModelProto, NodeProto};
use crate::error::{Error, Result};
use crate::nn::Tensor;

fn attr<'a>(node: &'a NodeProto, name: &str) -> Option<&'a AttributeProto> {
    node.attribute.iter().find(|a| a.name == name)
}

fn attr_ints(node: &NodeProto, name: &str, default: &[i64]) -> Vec<usize> {
    attr(node, name)
        .map(|a| a.ints.clone())
        .unwrap_or_else(|| default.to_vec())
        .into_iter()
        .map(|v| v as usize)
        .collect()
}

fn attr_int(node: &NodeProto, name: &str, default: i64) -> i64 {
    attr(node, name).map(|a| a.i).unwrap_or(default)
}

fn attr_float(node: &NodeProto, name: &str, default: f32) -> f32 {
    attr(node, name).map(|a| a.f).unwrap_or(default)
}

fn dims4(t: &Tensor, op: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape.as_slice() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => Err(Error::Shape(format!("{op} expects 4D input, got {s:?}"))),
    }
}

/// Evaluates the graph and returns every named value, including the outputs.
pub fn run_graph(model: &ModelProto, feeds: &[(&str, Tensor)]) -> Result<HashMap<String, Tensor>> {
    let graph = model
        .graph
        .as_ref()
        .ok_or_else(|| Error::Bundle("ONNX model has no graph".into()))?;
    let mut values: HashMap<String, Tensor> = HashMap::new();
    for init in &graph.initializer {
        let data = init
            .to_f32()
            .ok_or_else(|| Error::Bundle(format!("initializer {} is not float32", init.name)))?;
        values.insert(init.name.clone(), Tensor::new(init.shape(), data)?);
    }
    for input in &graph.input {
        if !values.contains_key(&input.name) && !feeds.iter().any(|(n, _)| *n == input.name) {
            return Err(Error::Bundle(format!("missing graph input '{}'", input.name)));
        }
    }
    for (name, t) in feeds {
        values.insert(name.to_string(), t.clone());
    }
    for node in &graph.node {
        let get = |i: usize| -> Result<&Tensor> {
            let name = node
                .input
                .get(i)
                .ok_or_else(|| Error::Bundle(format!("{} lacks input {i}", node.name)))?;
            values
                .get(name)
                .ok_or_else(|| Error::Bundle(format!("{} reads undefined value '{name}'", node.name)))
        };
        let out = match node.op_type.as_str() {
            "Conv" => conv(node, get(0)?, get(1)?, node.input.get(2).map(|_| get(2)).transpose()?)?,
            "BatchNormalization" => batchnorm(
                get(0)?,
                get(1)?,
                get(2)?,
                get(3)?,
                get(4)?,
                attr_float(node, "epsilon", 1e-5),
            )?,
            "Relu" => {
                let x = get(0)?;
                Tensor::new(x.shape.clone(), x.data.iter().map(|v| v.max(0.0)).collect())?
            }
            "MaxPool" | "AveragePool" => pool(node, get(0)?)?,
            "GlobalAveragePool" => {
                let x = get(0)?;
                let (n, c, h, w) = dims4(x, "GlobalAveragePool")?;
                let data = x
                    .data
                    .chunks(h * w)
                    .map(|s| (s.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64) as f32)
                    .collect();
                Tensor::new(vec![n, c, 1, 1], data)?
            }
            "Flatten" => {
                let x = get(0)?;
                let axis = attr_int(node, "axis", 1) as usize;
                let lead: usize = x.shape[..axis].iter().product();
                let rest: usize = x.shape[axis..].iter().product();
                Tensor::new(vec![lead, rest], x.data.clone())?
            }
            "Gemm" => gemm(node, get(0)?, get(1)?, node.input.get(2).map(|_| get(2)).transpose()?)?,
            "Add" => {
                let (a, b) = (get(0)?, get(1)?);
                if a.shape != b.shape {
                    return Err(Error::UnsupportedLayer("Add with broadcasting".into()));
                }
                Tensor::new(
                    a.shape.clone(),
                    a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
                )?
            }
            "Concat" => {
                if attr_int(node, "axis", 0) != 1 {
                    return Err(Error::UnsupportedLayer("Concat on an axis other than 1".into()));
                }
                let parts: Vec<&Tensor> = (0..node.input.len()).map(get).collect::<Result<_>>()?;
                let n = parts[0].shape[0];
                let widths: Vec<usize> = parts.iter().map(|p| p.data.len() / n).collect();
                let mut data = Vec::new();
                for i in 0..n {
                    for (p, w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
                    }
                }
                Tensor::new(vec![n, widths.iter().sum()], data)?
            }
            "Softmax" => {
                let x = get(0)?;
                let c = *x.shape.last().unwrap_or(&1);
                let mut data = Vec::with_capacity(x.data.len());
                for row in x.data.chunks(c) {
                    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
                    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    data.extend(e.iter().map(|v| (v / z) as f32));
                }
                Tensor::new(x.shape.clone(), data)?
            }
            "Dropout" | "Identity" => get(0)?.clone(),
            other => return Err(Error::UnsupportedLayer(format!("ONNX operator {other}"))),
        };
        values.insert(node.output[0].clone(), out);
    }
    for o in &graph.output {
        if !values.contains_key(&o.name) {
            return Err(Error::Bundle(format!("graph output '{}' never produced", o.name)));
        }
    }
    Ok(values)
}

fn conv(node: &NodeProto, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if attr_int(node, "group", 1) != 1 || attr_ints(node, "dilations", &[1, 1]) != [1, 1] {
        return Err(Error::UnsupportedLayer("grouped or dilated Conv".into()));
    }
    let (n, c, h, wd) = dims4(x, "Conv")?;
    let (oc, ic, kh, kw) = dims4(w, "Conv weight")?;
    if ic != c {
        return Err(Error::Shape(format!(
            "Conv weight expects {ic} channels, input has {c}"
        )));
    }
    let s = attr_ints(node, "strides", &[1, 1]);
    let p = attr_ints(node, "pads", &[0, 0, 0, 0]);
    let oh = (h + p[0] + p[2] - kh) / s[0] + 1;
    let ow = (wd + p[1] + p[3] - kw) / s[1] + 1;
    let mut out = vec![0f32; n * oc * oh * ow];
    for bi in 0..n {
        for o in 0..oc {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.map(|b| b.data[o] as f64).unwrap_or(0.0);
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (y * s[0] + ky) as isize - p[0] as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (xo * s[1] + kx) as isize - p[1] as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data[((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data[((o * ic + ci) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((bi * oc + o) * oh + y) * ow + xo] = acc as f32;
                }
            }
        }
    }
    Tensor::new(vec![n, oc, oh, ow], out)
}

fn batchnorm(x: &Tensor, scale: &Tensor, bias: &Tensor, mean: &Tensor, var: &Tensor, eps: f32) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "BatchNormalization")?;
    let mut out = x.data.clone();
    for bi in 0..n {
        for ch in 0..c {
            let denom = (var.data[ch] as f64 + eps as f64).sqrt();
            for v in &mut out[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w] {
                *v = ((*v as f64 - mean.data[ch] as f64) / denom * scale.data[ch] as f64 + bias.data[ch] as f64) as f32;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

fn pool(node: &NodeProto, x: &Tensor) -> Result<Tensor> {
    if attr_int(node, "ceil_mode", 0) != 0 {
        return Err(Error::UnsupportedLayer("pooling with ceil_mode".into()));
    }
    let is_max = node.op_type == "MaxPool";
    let include_pad = attr_int(node, "count_include_pad", 0) != 0;
    let (n, c, h, w) = dims4(x, &node.op_type)?;
    let k = attr_ints(node, "kernel_shape", &[]);
    if k.len() != 2 {
        return Err(Error::Bundle(format!("{} lacks kernel_shape", node.name)));
    }
    let s = attr_ints(node, "strides", &[1, 1]);
    let p = attr_ints(node, "pads", &[0, 0, 0, 0]);
    let oh = (h + p[0] + p[2] - k[0]) / s[0] + 1;
    let ow = (w + p[1] + p[3] - k[1]) / s[1] + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data.chunks(h * w) {
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut sum = 0f64;
                let mut count = 0usize;
                for ky in 0..k[0] {
                    for kx in 0..k[1] {
                        let iy = (y * s[0] + ky) as isize - p[0] as isize;
                        let ix = (xo * s[1] + kx) as isize - p[1] as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            if include_pad {
                                count += 1;
                            }
                            continue;
                        }
                        let v = plane[iy as usize * w + ix as usize] as f64;
                        best = best.max(v);
                        sum += v;
                        count += 1;
                    }
                }
                out.push(if is_max { best } else { sum / count as f64 } as f32);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

fn gemm(node: &NodeProto, a: &Tensor, b: &Tensor, c: Option<&Tensor>) -> Result<Tensor> {
    let alpha = attr_float(node, "alpha", 1.0) as f64;
    let beta = attr_float(node, "beta", 1.0) as f64;
    let ta = attr_int(node, "transA", 0) != 0;
    let tb = attr_int(node, "transB", 0) != 0;
    let (ar, ac) = (a.shape[0], a.shape[1]);
    let (br, bc) = (b.shape[0], b.shape[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, nn) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: k2,
        });
    }
    let mut out = Vec::with_capacity(m * nn);
    for i in 0..m {
        for j in 0..nn {
            let mut acc = 0f64;
            for q in 0..k {
                let av = if ta { a.data[q * ac + i] } else { a.data[i * ac + q] };
                let bv = if tb { b.data[j * bc + q] } else { b.data[q * bc + j] };
                acc += av as f64 * bv as f64;
            }
            let bias = match c {
                Some(c) if c.data.len() == nn => c.data[j] as f64,
                Some(c) if c.data.len() == 1 => c.data[0] as f64,
                Some(c) => c.data[i * nn + j] as f64,
                None => 0.0,
            };
            out.push((alpha * acc + beta * bias) as f32);
        }
    }
    Tensor::new(vec![m, nn], out)
}

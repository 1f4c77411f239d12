//! Grad-CAM heatmaps and galleries of confident misclassifications.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::RecordPrediction;
use crate::nn::layers::{seq_backward, seq_forward, Mode};
use crate::nn::{concat_aux, Network, Tensor};
use crate::preprocess::resize_bilinear;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Input-sized map in [0, 1].
    pub values: Array2<f32>,
    pub target_class: usize,
    pub layer_id: String,
}

/// Combines activations and class-score gradients at one layer, both
/// shaped (C, h, w), into an (out_h, out_w) heatmap.
pub fn cam_from_activations(
    acts: &[f32],
    grads: &[f32],
    shape: (usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Array2<f32> {
    let (c, h, w) = shape;
    let hw = h * w;
    let mut cam = vec![0f64; hw];
    for k in 0..c {
        let g = &grads[k * hw..(k + 1) * hw];
        let weight = g.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        if weight == 0.0 {
            continue;
        }
        for (dst, &a) in cam.iter_mut().zip(&acts[k * hw..(k + 1) * hw]) {
            *dst += weight * a as f64;
        }
    }
    let small = Array2::from_shape_vec((h, w), cam.iter().map(|&v| v.max(0.0) as f32).collect()).expect("cam shape");
    let mut up = resize_bilinear(&small, out_h, out_w);
    let max = up.iter().copied().fold(0f32, f32::max);
    if max > 0.0 {
        up.mapv_inplace(|v| (v / max).clamp(0.0, 1.0));
    } else {
        up.fill(0.0);
    }
    up
}

/// Grad-CAM for one (3, S, S) input at a named top-level feature layer.
pub fn grad_cam(
    network: &Network,
    input: &[f32],
    aux: Option<[f32; 3]>,
    target_class: usize,
    layer_id: &str,
) -> Result<Heatmap> {
    grad_cam_scaled(network, input, aux, target_class, layer_id, 1.0)
}

/// As [`grad_cam`], with the class score multiplied by `score_scale` before differentiation.
pub fn grad_cam_scaled(
    network: &Network,
    input: &[f32],
    aux: Option<[f32; 3]>,
    target_class: usize,
    layer_id: &str,
    score_scale: f32,
) -> Result<Heatmap> {
    let k = network
        .layer_index(layer_id)
        .ok_or_else(|| Error::LayerNotFound(layer_id.to_string()))?;
    let shapes = network.trace_shapes()?;
    let act_shape = match shapes[k + 1].as_slice() {
        [c, h, w] => (*c, *h, *w),
        _ => return Err(Error::NonConvolutionalLayer(layer_id.to_string())),
    };
    if target_class >= network.spec.num_classes {
        return Err(Error::Shape(format!(
            "target class {target_class} outside {} classes",
            network.spec.num_classes
        )));
    }
    let s = network.spec.input_size;
    let x = Tensor::new(vec![1, 3, s, s], input.to_vec())?;
    let aux_t = aux.map(|a| Tensor {
        shape: vec![1, 3],
        data: a.to_vec(),
    });
    if aux_t.is_some() != (network.spec.aux_width > 0) {
        return Err(Error::DimensionMismatch {
            expected: network.spec.aux_width,
            actual: aux_t.as_ref().map(|a| a.item_len()).unwrap_or(0),
        });
    }
    let (acts, _) = seq_forward(&network.features[..=k], x, Mode::Eval)?;
    let (feat, tail_caches) = seq_forward(&network.features[k + 1..], acts.clone(), Mode::Eval)?;
    let joined = concat_aux(feat, aux_t.as_ref())?;
    let (logits, head_cache) = network.head.layer.forward(joined, Mode::Eval)?;
    let mut dy = Tensor::zeros(logits.shape.clone());
    dy.data[target_class] = score_scale;
    let (djoined, _) = network.head.layer.backward(&head_cache, dy, false)?;
    let d = network.feature_dim;
    let dfeat = Tensor::new(vec![1, d], djoined.data[..d].to_vec())?;
    let (dacts, _) = seq_backward(&network.features[k + 1..], &tail_caches, dfeat, false)?;
    Ok(Heatmap {
        values: cam_from_activations(&acts.data, &dacts.data, act_shape, s, s),
        target_class,
        layer_id: layer_id.to_string(),
    })
}

/// Share of heatmap mass falling inside `mask`.
pub fn mass_inside(heatmap: &Array2<f32>, mask: &Array2<bool>) -> f64 {
    let total: f64 = heatmap.iter().map(|&v| v as f64).sum();
    if total == 0.0 {
        return 0.0;
    }
    let inside: f64 = heatmap
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v as f64)
        .sum();
    inside / total
}

/// The `k` misclassified records with the highest predicted-class
/// probability, most confident first. Ties are broken by record id so the
/// result does not depend on input order.
pub fn confident_errors(predictions: &[RecordPrediction], k: usize) -> Vec<RecordPrediction> {
    let mut errors: Vec<&RecordPrediction> = predictions.iter().filter(|p| p.prediction.label != p.truth).collect();
    let conf = |p: &RecordPrediction| p.prediction.probs[p.prediction.label];
    errors.sort_by(|a, b| conf(b).total_cmp(&conf(a)).then_with(|| a.record_id.cmp(&b.record_id)));
    errors.into_iter().take(k).cloned().collect()
}

/// Groups gallery entries by ground-truth class, keeping confidence order within each group.
pub fn group_by_truth(entries: &[RecordPrediction]) -> BTreeMap<usize, Vec<RecordPrediction>> {
    let mut groups: BTreeMap<usize, Vec<RecordPrediction>> = BTreeMap::new();
    for e in entries {
        groups.entry(e.truth).or_default().push(e.clone());
    }
    groups
}

pub fn output_name(record_id: &str, model: &str, class: &str) -> String {
    format!("{record_id}__{model}__{class}.png")
}

fn viridis(t: f32) -> [u8; 3] {
    let c = colorous::VIRIDIS.eval_continuous(t.clamp(0.0, 1.0) as f64);
    [c.r, c.g, c.b]
}

fn gray(v: f32) -> [u8; 3] {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [g, g, g]
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn heatmap_image(values: &Array2<f32>) -> RgbImage {
    let (h, w) = values.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(viridis(values[[y as usize, x as usize]]))
    })
}

/// Heatmap blended over the grayscale slice at 50% opacity.
pub fn overlay_image(slice: &Array2<f32>, values: &Array2<f32>) -> Result<RgbImage> {
    if slice.dim() != values.dim() {
        return Err(Error::Shape(format!(
            "slice {:?} vs heatmap {:?}",
            slice.dim(),
            values.dim()
        )));
    }
    let (h, w) = slice.dim();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        let g = gray(slice[[r, c]]);
        let v = viridis(values[[r, c]]);
        Rgb([0, 1, 2].map(|i| (g[i] as u16 + v[i] as u16).div_ceil(2) as u8))
    }))
}

/// Grid of grayscale tiles: one row per model, one column per record.
/// Tiles in a row may differ in size; each cell is sized to the largest tile.
pub fn gallery_image(rows: &[Vec<Array2<f32>>]) -> RgbImage {
    let cell_h = rows.iter().flatten().map(|t| t.nrows()).max().unwrap_or(1);
    let cell_w = rows.iter().flatten().map(|t| t.ncols()).max().unwrap_or(1);
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0).max(1);
    let pad = 2;
    let width = cols * (cell_w + pad) + pad;
    let height = rows.len().max(1) * (cell_h + pad) + pad;
    let mut img = RgbImage::from_pixel(width as u32, height as u32, Rgb([32, 32, 32]));
    for (ri, row) in rows.iter().enumerate() {
        for (ci, tile) in row.iter().enumerate() {
            let ox = pad + ci * (cell_w + pad);
            let oy = pad + ri * (cell_h + pad);
            for ((y, x), &v) in tile.indexed_iter() {
                img.put_pixel((ox + x) as u32, (oy + y) as u32, Rgb(gray(v)));
            }
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedFiles {
    pub heatmap: String,
    pub overlay: String,
}

/// Writes `heat_<name>` and `<name>` (overlay) for one heatmap.
pub fn write_heatmap_pngs(
    dir: &Path,
    record_id: &str,
    model: &str,
    class: &str,
    slice: &Array2<f32>,
    heatmap: &Heatmap,
) -> Result<RenderedFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = output_name(record_id, model, class);
    let heat = format!("heat_{name}");
    save(&heatmap_image(&heatmap.values), &dir.join(&heat))?;
    save(&overlay_image(slice, &heatmap.values)?, &dir.join(&name))?;
    Ok(RenderedFiles {
        heatmap: heat,
        overlay: name,
    })
}

pub fn write_gallery_png(path: &Path, rows: &[Vec<Array2<f32>>]) -> Result<()> {
    save(&gallery_image(rows), path)
}

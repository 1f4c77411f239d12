use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{NormConfig, NormMode, Prediction, Task};
use crate::context::ContextKind;
use crate::error::{Error, Result};
use crate::ingest::{self, PlaneLabel};
use crate::nn::onnx::{self, AUX_NAME, INPUT_NAME, OUTPUT_NAME};
use crate::nn::{ModelSpec, Network, Tensor};
use crate::preprocess::{pad_square, resize_bilinear};

pub const MODEL_FILE: &str = "model.onnx";
pub const META_FILE: &str = "meta.json";
pub const FIXTURE_DIR: &str = "fixtures";
pub const FIXTURE_INDEX: &str = "fixtures.json";
pub const CACHE_ENV: &str = "PLANEMETA_CACHE";
pub const BUNDLE_SCHEMA_VERSION: u32 = 1;

/// Contents of `meta.json` next to `model.onnx`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub schema_version: u32,
    pub task: Task,
    pub class_names: Vec<String>,
    pub architecture: ModelSpec,
    pub normalization: NormConfig,
    pub input_size: usize,
    pub input_channels: usize,
    pub context: ContextKind,
    pub inputs: Vec<String>,
    pub output: String,
    pub model_file: String,
    pub model_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures: Option<String>,
    pub producer: String,
}

#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub network: Network,
    pub meta: BundleMeta,
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Bundle(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes `model.onnx` and `meta.json` into `dir`.
pub fn save_bundle(
    dir: &Path,
    network: &Network,
    task: Task,
    norm: &NormConfig,
    context: ContextKind,
) -> Result<BundleMeta> {
    if network.spec.num_classes != task.num_classes() {
        return Err(Error::ClassMismatch(network.spec.num_classes, task.num_classes()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = onnx::encode_model(&onnx::export_network(network)?);
    let model_path = dir.join(MODEL_FILE);
    fs::write(&model_path, &bytes).map_err(|e| Error::io(&model_path, e))?;
    let mut inputs = vec![INPUT_NAME.to_string()];
    if network.spec.aux_width > 0 {
        inputs.push(AUX_NAME.to_string());
    }
    let meta = BundleMeta {
        schema_version: BUNDLE_SCHEMA_VERSION,
        task,
        class_names: task.class_names(),
        architecture: network.spec.clone(),
        normalization: *norm,
        input_size: network.spec.input_size,
        input_channels: 3,
        context,
        inputs,
        output: OUTPUT_NAME.to_string(),
        model_file: MODEL_FILE.to_string(),
        model_sha256: sha256_hex(&bytes),
        fixtures: None,
        producer: format!("planemeta {}", env!("CARGO_PKG_VERSION")),
    };
    write_json(&dir.join(META_FILE), &meta)?;
    Ok(meta)
}

/// Reads and verifies a bundle. When `requested` is given, a bundle trained
/// under a different normalization is refused.
pub fn load_bundle(dir: &Path, requested: Option<NormMode>) -> Result<LoadedModel> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BundleMeta =
        serde_json::from_str(&text).map_err(|e| Error::Bundle(format!("{}: {e}", meta_path.display())))?;
    if meta.schema_version != BUNDLE_SCHEMA_VERSION {
        return Err(Error::Bundle(format!(
            "unsupported bundle schema_version {}",
            meta.schema_version
        )));
    }
    if let Some(req) = requested {
        if req != meta.normalization.mode {
            return Err(Error::NormalizationMismatch {
                bundle: meta.normalization.mode.to_string(),
                requested: req.to_string(),
            });
        }
    }
    if meta.class_names.len() != meta.architecture.num_classes {
        return Err(Error::Bundle(format!(
            "{} class names for a {}-class model",
            meta.class_names.len(),
            meta.architecture.num_classes
        )));
    }
    let model_path = dir.join(&meta.model_file);
    let bytes = fs::read(&model_path).map_err(|e| Error::io(&model_path, e))?;
    if sha256_hex(&bytes) != meta.model_sha256 {
        return Err(Error::Bundle(format!(
            "{} does not match its recorded checksum",
            model_path.display()
        )));
    }
    let model = onnx::decode_model(&bytes)?;
    let mut network = Network::new(ModelSpec {
        pretrained: false,
        ..meta.architecture.clone()
    })?;
    onnx::load_weights(&mut network, &model)?;
    Ok(LoadedModel { network, meta })
}

/// Location of cached pretrained weights for a backbone.
pub fn pretrained_path(kind: crate::nn::BackboneKind) -> Result<PathBuf> {
    let dir = std::env::var_os(CACHE_ENV).ok_or_else(|| {
        Error::WeightsUnavailable(format!(
            "{CACHE_ENV} is not set; pretrained {kind} weights cannot be fetched offline"
        ))
    })?;
    Ok(PathBuf::from(dir).join(format!("{}.onnx", kind.name())))
}

/// Builds a network; with `pretrained` set, every tensor except the head is
/// loaded from the weight cache.
pub fn build_model(spec: ModelSpec) -> Result<Network> {
    let mut network = Network::new(spec.clone())?;
    if spec.pretrained {
        let path = pretrained_path(spec.backbone)?;
        if !path.is_file() {
            return Err(Error::WeightsUnavailable(format!(
                "no cached weights at {}",
                path.display()
            )));
        }
        let model = onnx::read_model(&path)?;
        let inits = onnx::initializers(&model)?;
        let copied = network.load_matching(&inits, true);
        let head_prefix = format!("{}.", network.head.name);
        let wanted = network
            .named_tensors()
            .iter()
            .filter(|t| !t.name.starts_with(&head_prefix))
            .count();
        if copied.len() != wanted {
            return Err(Error::WeightsUnavailable(format!(
                "{} covers {} of {wanted} backbone tensors",
                path.display(),
                copied.len()
            )));
        }
    }
    Ok(network)
}

/// Single-image input: pad to square, resize, repeat into three channels, normalize.
/// `pixels` must already be min-max normalized.
pub fn image_input(pixels: &Array2<f32>, size: usize, norm: &NormConfig) -> Vec<f32> {
    let resized = resize_bilinear(&pad_square(pixels), size, size);
    let plane: Vec<f32> = resized.iter().copied().collect();
    let mut v = Vec::with_capacity(plane.len() * 3);
    for _ in 0..3 {
        v.extend_from_slice(&plane);
    }
    norm.apply(&mut v);
    v
}

/// Classifies one raster image with a model that takes no side input.
pub fn classify_image(model: &LoadedModel, path: &Path) -> Result<Prediction> {
    if model.network.spec.aux_width != 0 {
        return Err(Error::DimensionMismatch {
            expected: model.network.spec.aux_width,
            actual: 0,
        });
    }
    let pixels = ingest::load_gray_normalized(path)?;
    let s = model.meta.input_size;
    let x = Tensor::new(vec![1, 3, s, s], image_input(&pixels, s, &model.meta.normalization))?;
    let logits = model.network.logits(x, None)?;
    Ok(Prediction::from_logits(&logits.data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub file: String,
    pub record_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane: Option<PlaneLabel>,
    /// Normalized (3, H, W) tensor, row-major.
    pub input: Vec<f32>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportReport {
    pub fixtures: usize,
    /// Original network vs the bundle reloaded into the native engine.
    pub max_abs_diff_native: f64,
    /// Original network vs the reference ONNX interpreter.
    pub max_abs_diff_reference: f64,
    pub meta: BundleMeta,
}

pub const PARITY_TOLERANCE: f64 = 1e-5;

fn save_png8(pixels: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = pixels.dim();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |c, r| {
        Luma([(pixels[[r as usize, c as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    buf.save(path).map_err(|e| Error::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes the bundle plus parity fixtures built from `images`, then reloads
/// it both natively and through the reference interpreter and checks that
/// probabilities agree within [`PARITY_TOLERANCE`].
pub fn export_portable(
    network: &Network,
    task: Task,
    norm: &NormConfig,
    context: ContextKind,
    images: &[(String, Array2<f32>, Option<PlaneLabel>)],
    out_dir: &Path,
) -> Result<ExportReport> {
    let mut meta = save_bundle(out_dir, network, task, norm, context)?;
    let fixture_dir = out_dir.join(FIXTURE_DIR);
    fs::create_dir_all(&fixture_dir).map_err(|e| Error::io(&fixture_dir, e))?;
    let s = network.spec.input_size;
    let mut fixtures = Vec::with_capacity(images.len());
    for (i, (record_id, pixels, plane)) in images.iter().enumerate() {
        if network.spec.aux_width > 0 && plane.is_none() {
            return Err(Error::DimensionMismatch {
                expected: network.spec.aux_width,
                actual: 0,
            });
        }
        let file = format!("fixture_{i:02}.png");
        let path = fixture_dir.join(&file);
        save_png8(pixels, &path)?;
        let decoded = ingest::load_gray_normalized(&path)?;
        let input = image_input(&decoded, s, norm);
        fixtures.push(Fixture {
            file,
            record_id: record_id.clone(),
            plane: *plane,
            input,
            probs: Vec::new(),
        });
    }
    let x = fixture_tensor(&fixtures, s)?;
    let aux = aux_tensor(&fixtures, network.spec.aux_width);
    let original = probs_of(&network.logits(x.clone(), aux.as_ref())?, network.spec.num_classes);
    for (f, p) in fixtures.iter_mut().zip(original.chunks(network.spec.num_classes)) {
        f.probs = p.to_vec();
    }
    write_json(&fixture_dir.join(FIXTURE_INDEX), &fixtures)?;
    meta.fixtures = Some(format!("{FIXTURE_DIR}/{FIXTURE_INDEX}"));
    write_json(&out_dir.join(META_FILE), &meta)?;

    let reloaded = load_bundle(out_dir, Some(norm.mode))?;
    let native = probs_of(
        &reloaded.network.logits(x.clone(), aux.as_ref())?,
        network.spec.num_classes,
    );
    let model = onnx::read_model(&out_dir.join(MODEL_FILE))?;
    let mut feeds = vec![(INPUT_NAME, x)];
    if let Some(a) = aux {
        feeds.push((AUX_NAME, a));
    }
    let outputs = onnx::run_graph(&model, &feeds)?;
    let reference: Vec<f64> = outputs[OUTPUT_NAME].data.iter().map(|&v| v as f64).collect();
    let diff = |a: &[f64]| original.iter().zip(a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let report = ExportReport {
        fixtures: fixtures.len(),
        max_abs_diff_native: diff(&native),
        max_abs_diff_reference: diff(&reference),
        meta,
    };
    if report.max_abs_diff_native >= PARITY_TOLERANCE || report.max_abs_diff_reference >= PARITY_TOLERANCE {
        return Err(Error::Bundle(format!(
            "parity check failed: native {:.3e}, reference {:.3e}",
            report.max_abs_diff_native, report.max_abs_diff_reference
        )));
    }
    Ok(report)
}

fn fixture_tensor(fixtures: &[Fixture], s: usize) -> Result<Tensor> {
    let refs: Vec<&[f32]> = fixtures.iter().map(|f| f.input.as_slice()).collect();
    Tensor::stack(&refs, &[3, s, s])
}

fn aux_tensor(fixtures: &[Fixture], width: usize) -> Option<Tensor> {
    (width > 0).then(|| Tensor {
        shape: vec![fixtures.len(), 3],
        data: fixtures
            .iter()
            .flat_map(|f| f.plane.map(|p| p.one_hot()).unwrap_or([0.0; 3]))
            .collect(),
    })
}

fn probs_of(logits: &Tensor, c: usize) -> Vec<f64> {
    logits.data.chunks(c).flat_map(crate::nn::ops::softmax).collect()
}

/// Reads `fixtures/fixtures.json` from a bundle.
pub fn read_fixtures(dir: &Path) -> Result<Vec<Fixture>> {
    let path = dir.join(FIXTURE_DIR).join(FIXTURE_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Bundle(format!("{}: {e}", path.display())))
}

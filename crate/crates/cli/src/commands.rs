use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use planemeta::explain::{confident_errors, grad_cam, group_by_truth, write_gallery_png, write_heatmap_pngs};
use planemeta::fusion::{
    fusion_report, infer_planes, prediction_pairs, read_pairs, sweep_threshold, write_pairs, EntropyMode, ModelHandle,
    SweepResult,
};
use planemeta::ingest::{
    generate_lesion_phantom, generate_phantom, load_slice_dataset, read_manifest, serialize_nifti, write_manifest,
    write_slice_dataset, NiftiDatatype, ParseOptions, SliceRecord, TumorLabel,
};
use planemeta::models::assign_volume_splits;
use planemeta::models::{
    build_model, evaluate, export_portable, load_bundle, save_bundle, split_by_volume, train, Dataset, LoadedModel,
    NormConfig, Task,
};
use planemeta::nn::ModelSpec;
use planemeta::preprocess::{is_nifti_path, lesion_records, run_pipeline_paths};
use planemeta::Error;
use serde::{Deserialize, Serialize};

use crate::config::{self, FileConfig, CONFIG_FILE};
use crate::manifest::{walk_files, write_json, FileDigest, RunManifest, RUN_MANIFEST_FILE, RUN_MANIFEST_VERSION};
use crate::{CleaningFlags, Cli, Command};

pub const DATASET_MANIFEST: &str = "manifest.csv";
pub const SWEEP_FILE: &str = "sweep.json";

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

/// Sweep output: the curve plus the entropy mode it was computed under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFile {
    pub entropy: EntropyMode,
    pub grid_points: usize,
    #[serde(flatten)]
    pub result: SweepResult,
}

struct Run {
    command: &'static str,
    cfg: FileConfig,
    seed: u64,
    out: PathBuf,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    metrics: serde_json::Value,
}

impl Run {
    fn set_out(&mut self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        self.out = out.to_path_buf();
        Ok(())
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of_path(role, path)?);
        Ok(())
    }

    fn input_dataset(&mut self, role: &str, manifest: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of_dataset(role, manifest)?);
        Ok(())
    }

    fn input_bundle(&mut self, role: &str, dir: &Path) -> Result<()> {
        for file in [planemeta::models::META_FILE, planemeta::models::MODEL_FILE] {
            self.input(&format!("{role}/{file}"), &dir.join(file))?;
        }
        Ok(())
    }

    fn output(&mut self, role: &str, rel: &str) -> Result<()> {
        let mut d = FileDigest::of_path(role, &self.out.join(rel))?;
        d.path = rel.to_string();
        self.outputs.push(d);
        Ok(())
    }

    fn output_dataset(&mut self, role: &str, rel: &str) -> Result<()> {
        let mut d = FileDigest::of_dataset(role, &self.out.join(rel))?;
        d.path = rel.to_string();
        self.outputs.push(d);
        Ok(())
    }

    fn finish(mut self, started: Instant) -> Result<()> {
        fs::write(self.out.join(CONFIG_FILE), self.cfg.to_toml())
            .with_context(|| format!("writing {}", self.out.join(CONFIG_FILE).display()))?;
        self.output("config", CONFIG_FILE)?;
        let manifest = RunManifest {
            schema_version: RUN_MANIFEST_VERSION,
            command: self.command.to_string(),
            args: std::env::args().skip(1).collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config: self.cfg,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            metrics: self.metrics,
        };
        write_json(&self.out.join(RUN_MANIFEST_FILE), &manifest)
    }
}

fn apply_cleaning(flags: &CleaningFlags, cfg: &mut FileConfig) {
    let c = &mut cfg.preprocess;
    if let Some(v) = flags.stride {
        c.sample_stride = v;
    }
    if let Some(v) = flags.mean_min {
        c.mean_intensity_min = v;
    }
    if let Some(v) = flags.coverage_min {
        c.coverage_min = v;
    }
    if let Some(v) = flags.size {
        c.target_size = v;
    }
    if let Some(v) = flags.opening_radius {
        c.opening_radius = v;
    }
    if let Some(v) = flags.foreground_threshold {
        c.foreground_threshold = v;
    }
}

fn read_sweep(path: &Path) -> Result<SweepFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())).into())
}

/// Folds command-line flags into the configuration.
fn apply_flags(command: &Command, cfg: &mut FileConfig) -> Result<()> {
    match command {
        Command::Phantom(a) => apply_cleaning(&a.cleaning, cfg),
        Command::Preprocess(a) => apply_cleaning(&a.cleaning, cfg),
        Command::Train(a) => {
            let t = &mut cfg.train;
            if let Some(v) = &a.context {
                t.context = v.parse()?;
            }
            if let Some(v) = a.epochs {
                t.epochs = v;
            }
            if let Some(v) = a.lr {
                t.learning_rate = v;
            }
            if let Some(v) = a.batch_size {
                t.batch_size = v;
            }
            if let Some(v) = &a.norm {
                t.norm = v.parse()?;
            }
            if a.no_augment {
                t.augment = false;
            }
            if a.unbalanced {
                t.balanced = false;
            }
            if let Some(v) = &a.backbone {
                cfg.model.backbone = v.parse()?;
            }
            if a.pretrained {
                cfg.model.pretrained = true;
            }
            if let Some(v) = a.val_frac {
                cfg.model.val_fraction = v;
            }
        }
        Command::Sweep(a) => {
            if let Some(v) = a.grid {
                cfg.fusion.grid_points = v;
            }
            if let Some(v) = &a.entropy {
                cfg.fusion.entropy = v.parse()?;
            }
        }
        Command::GateEval(a) => {
            let flag_mode: Option<EntropyMode> = a.entropy.as_deref().map(str::parse).transpose()?;
            if let Some(path) = &a.sweep {
                let sweep = read_sweep(path)?;
                if flag_mode.is_some_and(|m| m != sweep.entropy) {
                    return Err(Error::Config(format!(
                        "--entropy {} conflicts with the {} entropy of {}",
                        flag_mode.unwrap(),
                        sweep.entropy,
                        path.display()
                    ))
                    .into());
                }
                cfg.fusion.tau = sweep.result.best_tau;
                cfg.fusion.entropy = sweep.entropy;
            }
            if let Some(v) = a.tau {
                cfg.fusion.tau = v;
            }
            if let Some(m) = flag_mode {
                cfg.fusion.entropy = m;
            }
        }
        Command::Split(_) | Command::Evaluate(_) | Command::Pairs(_) | Command::Export(_) | Command::Explain(_) => {}
    }
    Ok(())
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Phantom(_) => "phantom",
        Command::Preprocess(_) => "preprocess",
        Command::Split(_) => "split",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Pairs(_) => "pairs",
        Command::Sweep(_) => "sweep",
        Command::GateEval(_) => "gate-eval",
        Command::Export(_) => "export",
        Command::Explain(_) => "explain",
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let (mut cfg, source) = match &cli.config {
        Some(p) => (config::load(p)?, p.display().to_string()),
        None => (FileConfig::default(), "command line".to_string()),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(cfg.train.seed);
    cfg.seed = Some(seed);
    cfg.train.seed = seed;
    apply_flags(&cli.command, &mut cfg)?;
    cfg.validate(&source)?;
    if cli.dry_run {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let mut run = Run {
        command: command_name(&cli.command),
        cfg,
        seed,
        out: PathBuf::from("."),
        inputs: Vec::new(),
        outputs: Vec::new(),
        metrics: serde_json::Value::Null,
    };
    match &cli.command {
        Command::Phantom(a) => phantom(a, &mut run)?,
        Command::Preprocess(a) => preprocess(a, &mut run)?,
        Command::Split(a) => split(a, &mut run)?,
        Command::Train(a) => train_cmd(a, &mut run)?,
        Command::Evaluate(a) => evaluate_cmd(a, &mut run)?,
        Command::Pairs(a) => pairs(a, &mut run)?,
        Command::Sweep(a) => sweep(a, &mut run)?,
        Command::GateEval(a) => gate_eval(a, &mut run)?,
        Command::Export(a) => export(a, &mut run)?,
        Command::Explain(a) => explain(a, &mut run)?,
    }
    run.finish(started)
}

fn phantom(a: &crate::PhantomArgs, run: &mut Run) -> Result<()> {
    run.set_out(&a.out)?;
    let shape: [usize; 3] = a
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::Config("--shape takes three sizes".into()))?;
    let first = run.seed;
    let seeds = (0..a.count as u64).map(|i| first + i);
    match a.kind {
        crate::PhantomKind::Head => {
            for s in seeds {
                let vol = generate_phantom(s, shape)?;
                let name = format!("{}.nii.gz", vol.source_id());
                serialize_nifti(&vol, &run.out.join(&name), NiftiDatatype::F32)?;
                run.output("volume", &name)?;
            }
            println!("wrote {} head phantoms to {}", a.count, run.out.display());
        }
        crate::PhantomKind::Lesion => {
            let mut records = Vec::new();
            for (i, s) in seeds.enumerate() {
                let label = TumorLabel::ALL[i % TumorLabel::ALL.len()];
                let (vol, info) = generate_lesion_phantom(s, shape, label)?;
                records.extend(lesion_records(&vol, &info, &run.cfg.preprocess, a.spread));
            }
            write_slice_dataset(&run.out, DATASET_MANIFEST, &records)?;
            run.output_dataset("dataset", DATASET_MANIFEST)?;
            println!(
                "wrote {} lesion slices from {} phantoms to {}",
                records.len(),
                a.count,
                run.out.display()
            );
        }
    }
    run.metrics = serde_json::json!({ "count": a.count, "shape": shape });
    Ok(())
}

fn is_source_file(p: &Path) -> bool {
    let hidden = p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'));
    let image = p
        .extension()
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_ascii_lowercase().as_str()));
    !hidden && (is_nifti_path(p) || image)
}

fn preprocess(a: &crate::PreprocessArgs, run: &mut Run) -> Result<()> {
    let files: Vec<PathBuf> = walk_files(&a.input)?
        .into_iter()
        .filter(|p| is_source_file(p))
        .collect();
    if files.is_empty() {
        return Err(Error::Manifest(format!("no NIfTI volumes or images under {}", a.input.display())).into());
    }
    let parse = ParseOptions {
        assume_orientation: a.assume_orientation.as_deref().map(str::parse).transpose()?,
    };
    run.input("input", &a.input)?;
    run.set_out(&a.out)?;
    let out = run_pipeline_paths(&files, &run.cfg.preprocess, &parse);
    write_slice_dataset(&run.out, DATASET_MANIFEST, &out.records)?;
    write_json(&run.out.join("report.json"), &out.report)?;
    run.output_dataset("dataset", DATASET_MANIFEST)?;
    run.output("report", "report.json")?;
    println!(
        "kept {} slices, discarded {} ({:.2}%), {} unreadable sources",
        out.report.kept,
        out.report.discarded,
        out.report.discarded_pct,
        out.report.failures.len()
    );
    run.metrics = serde_json::json!({
        "sources": out.report.sources.len(),
        "kept": out.report.kept,
        "discarded": out.report.discarded,
        "discarded_pct": out.report.discarded_pct,
        "failures": out.report.failures.len(),
    });
    Ok(())
}

fn split(a: &crate::SplitArgs, run: &mut Run) -> Result<()> {
    if a.names.len() != a.fractions.len() {
        return Err(Error::Config(format!("{} names for {} fractions", a.names.len(), a.fractions.len())).into());
    }
    let base = a.data.parent().unwrap_or(Path::new("."));
    let out = a.out.clone().unwrap_or_else(|| base.to_path_buf());
    run.input_dataset("dataset", &a.data)?;
    run.set_out(&out)?;
    let rows = read_manifest(&a.data)?;
    let parts = assign_volume_splits(rows.iter().map(|r| r.volume_id.as_str()), &a.fractions, run.seed)?;
    let same_dir = fs::canonicalize(base)? == fs::canonicalize(&out)?;
    let mut split_rows = vec![Vec::new(); a.names.len()];
    for mut row in rows {
        if !same_dir {
            row.path = fs::canonicalize(row.resolve(base))?;
        }
        split_rows[parts[&row.volume_id]].push(row);
    }
    let mut summary = serde_json::Map::new();
    for (name, rows) in a.names.iter().zip(&split_rows) {
        let file = format!("{name}.csv");
        write_manifest(&run.out.join(&file), rows)?;
        run.output(name, &file)?;
        let volumes = parts.iter().filter(|(_, &p)| a.names[p] == *name).count();
        println!("{name}: {} slices from {volumes} volumes", rows.len());
        summary.insert(
            name.clone(),
            serde_json::json!({ "slices": rows.len(), "volumes": volumes }),
        );
    }
    run.metrics = serde_json::Value::Object(summary);
    Ok(())
}

fn load_model(dir: &Path) -> Result<LoadedModel> {
    load_bundle(dir, None).with_context(|| format!("loading bundle {}", dir.display()))
}

fn load_plane_model(dir: &Path) -> Result<LoadedModel> {
    let m = load_model(dir)?;
    if m.meta.task != Task::Plane {
        return Err(Error::Config(format!(
            "{} holds a {} model, not a plane model",
            dir.display(),
            m.meta.task
        ))
        .into());
    }
    Ok(m)
}

fn handle(m: &LoadedModel) -> ModelHandle<'_> {
    ModelHandle {
        network: &m.network,
        context: m.meta.context,
        norm: m.meta.normalization,
    }
}

/// Labeled dataset for a bundle, with planes from the plane model when the bundle takes them.
fn dataset_for(model: &LoadedModel, records: Vec<SliceRecord>, plane_model: Option<&LoadedModel>) -> Result<Dataset> {
    let data = Dataset::new(model.meta.task, records)?;
    if model.network.spec.aux_width == 0 {
        return Ok(data);
    }
    let pm = plane_model.ok_or_else(|| Error::Config("this model takes a plane input; pass --plane-model".into()))?;
    let planes = infer_planes(&data.records, &handle(pm))?;
    Ok(data.with_aux_planes(planes)?)
}

fn square_side(records: &[SliceRecord]) -> Result<usize> {
    let first = records.first().ok_or(Error::EmptyTestSet)?;
    let side = first.pixels.nrows();
    if let Some(r) = records.iter().find(|r| r.pixels.dim() != (side, side)) {
        return Err(Error::Shape(format!(
            "{} is {:?}, expected {side}x{side}; preprocess the data first",
            r.record_id(),
            r.pixels.dim()
        ))
        .into());
    }
    Ok(side)
}

fn train_cmd(a: &crate::TrainArgs, run: &mut Run) -> Result<()> {
    let task: Task = a.task.parse()?;
    let cfg = run.cfg.clone();
    run.input_dataset("train", &a.data)?;
    let records = load_slice_dataset(&a.data)?;
    let (train_records, val_records) = match &a.val {
        Some(v) => {
            run.input_dataset("val", v)?;
            (records, load_slice_dataset(v)?)
        }
        None => split_by_volume(records, cfg.model.val_fraction, run.seed),
    };
    let size = square_side(&train_records)?;
    let plane_model = match &a.plane_model {
        Some(dir) if task == Task::Tumor => {
            run.input_bundle("plane_model", dir)?;
            Some(load_plane_model(dir)?)
        }
        Some(_) => return Err(Error::Config("--plane-model only applies to the tumor task".into()).into()),
        None => None,
    };
    let mut train_set = Dataset::new(task, train_records)?;
    let mut val_set = Dataset::new(task, val_records)?;
    if let Some(pm) = &plane_model {
        let planes = infer_planes(&train_set.records, &handle(pm))?;
        train_set = train_set.with_aux_planes(planes)?;
        let planes = infer_planes(&val_set.records, &handle(pm))?;
        val_set = val_set.with_aux_planes(planes)?;
    }
    let mut spec = ModelSpec::new(cfg.model.backbone, task.num_classes(), size).with_seed(run.seed);
    spec.pretrained = cfg.model.pretrained;
    if plane_model.is_some() {
        spec = spec.with_aux(3);
    }
    let network = build_model(spec)?;
    // Fail before training when the bundle could not be written afterwards.
    planemeta::nn::onnx::export_network(&network)?;
    run.set_out(&a.out)?;
    let outcome = train(network, &train_set, &val_set, &cfg.train)?;
    for e in &outcome.history {
        match e.val_accuracy {
            Some(acc) => println!("epoch {:>3}  loss {:.4}  val acc {:.4}", e.epoch + 1, e.train_loss, acc),
            None => println!("epoch {:>3}  loss {:.4}", e.epoch + 1, e.train_loss),
        }
    }
    let norm = NormConfig::new(cfg.train.norm);
    save_bundle(&run.out, &outcome.network, task, &norm, cfg.train.context)?;
    write_json(&run.out.join("history.json"), &outcome.history)?;
    for (role, file) in [
        ("model", planemeta::models::MODEL_FILE),
        ("meta", planemeta::models::META_FILE),
        ("history", "history.json"),
    ] {
        run.output(role, file)?;
    }
    let last = outcome.history.last();
    run.metrics = serde_json::json!({
        "task": task,
        "train_records": train_set.len(),
        "val_records": val_set.len(),
        "train_class_counts": train_set.class_counts(),
        "metadata_enhanced": plane_model.is_some(),
        "final_train_loss": last.map(|e| e.train_loss),
        "final_val_accuracy": last.and_then(|e| e.val_accuracy),
    });
    Ok(())
}

fn evaluate_cmd(a: &crate::EvaluateArgs, run: &mut Run) -> Result<()> {
    run.input_bundle("model", &a.model)?;
    run.input_dataset("data", &a.data)?;
    let model = load_model(&a.model)?;
    let plane_model = a.plane_model.as_deref().map(load_plane_model).transpose()?;
    if let Some(dir) = &a.plane_model {
        run.input_bundle("plane_model", dir)?;
    }
    let data = dataset_for(&model, load_slice_dataset(&a.data)?, plane_model.as_ref())?;
    let h = handle(&model);
    let metrics = evaluate(h.network, &data, h.context, &h.norm)?;
    run.set_out(&a.out)?;
    write_json(
        &run.out.join("metrics.json"),
        &serde_json::json!({ "class_names": model.meta.class_names, "metrics": metrics }),
    )?;
    run.output("metrics", "metrics.json")?;
    println!(
        "accuracy {:.4} ({} of {} misclassified)",
        metrics.accuracy, metrics.misclassified, metrics.total
    );
    run.metrics = serde_json::json!({
        "total": metrics.total,
        "accuracy": metrics.accuracy,
        "per_class_accuracy": metrics.per_class_accuracy,
        "misclassified": metrics.misclassified,
    });
    Ok(())
}

fn pairs(a: &crate::PairsArgs, run: &mut Run) -> Result<()> {
    for (role, dir) in [
        ("image_model", &a.image_model),
        ("meta_model", &a.meta_model),
        ("plane_model", &a.plane_model),
    ] {
        run.input_bundle(role, dir)?;
    }
    run.input_dataset("data", &a.data)?;
    let image = load_model(&a.image_model)?;
    let meta = load_model(&a.meta_model)?;
    let plane = load_plane_model(&a.plane_model)?;
    for (m, dir) in [(&image, &a.image_model), (&meta, &a.meta_model)] {
        if m.meta.task != Task::Tumor {
            return Err(Error::Config(format!(
                "{} holds a {} model, not a tumor model",
                dir.display(),
                m.meta.task
            ))
            .into());
        }
    }
    let records = load_slice_dataset(&a.data)?;
    let pairs = prediction_pairs(&records, &handle(&image), &handle(&meta), &handle(&plane))?;
    run.set_out(&a.out)?;
    write_pairs(&run.out.join("pairs.csv"), &pairs)?;
    run.output("pairs", "pairs.csv")?;
    let acc = |f: &dyn Fn(&planemeta::fusion::PredictionPair) -> bool| {
        pairs.iter().filter(|p| f(p)).count() as f64 / pairs.len() as f64
    };
    let image_acc = acc(&|p| planemeta::models::argmax(&p.image_probs) == p.truth);
    let meta_acc = acc(&|p| planemeta::models::argmax(&p.meta_probs) == p.truth);
    println!(
        "{} pairs, image-only acc {image_acc:.4}, metadata acc {meta_acc:.4}",
        pairs.len()
    );
    run.metrics = serde_json::json!({ "pairs": pairs.len(), "image_accuracy": image_acc, "meta_accuracy": meta_acc });
    Ok(())
}

fn sweep(a: &crate::SweepArgs, run: &mut Run) -> Result<()> {
    run.input("pairs", &a.pairs)?;
    let pairs = read_pairs(&a.pairs)?;
    let f = &run.cfg.fusion;
    let result = sweep_threshold(&pairs, &f.grid(), f.entropy)?;
    let file = SweepFile {
        entropy: f.entropy,
        grid_points: f.grid_points,
        result,
    };
    run.set_out(&a.out)?;
    write_json(&run.out.join(SWEEP_FILE), &file)?;
    run.output("sweep", SWEEP_FILE)?;
    println!(
        "best tau {} with accuracy {:.4} over {} pairs",
        file.result.best_tau, file.result.best_accuracy, file.result.total
    );
    run.metrics = serde_json::json!({ "best_tau": file.result.best_tau, "best_accuracy": file.result.best_accuracy, "total": file.result.total });
    Ok(())
}

fn gate_eval(a: &crate::GateEvalArgs, run: &mut Run) -> Result<()> {
    run.input("pairs", &a.pairs)?;
    if let Some(s) = &a.sweep {
        run.input("sweep", s)?;
    }
    let pairs = read_pairs(&a.pairs)?;
    let report = fusion_report(&pairs, run.cfg.fusion.tau, run.cfg.fusion.entropy)?;
    run.set_out(&a.out)?;
    write_json(&run.out.join("fusion_report.json"), &report)?;
    run.output("report", "fusion_report.json")?;
    for r in &report.rows {
        println!("{:<18} acc {:.4}  errors {}", r.variant, r.accuracy, r.errors);
    }
    println!(
        "tau {}: {} of {} routed to metadata",
        report.tau, report.routed_to_metadata, report.total
    );
    run.metrics = serde_json::to_value(&report)?;
    Ok(())
}

/// `n` indices spread evenly over `len` records.
fn spread_indices(len: usize, n: usize) -> Vec<usize> {
    let n = n.min(len);
    (0..n).map(|i| i * len / n).collect()
}

fn export(a: &crate::ExportArgs, run: &mut Run) -> Result<()> {
    run.input_bundle("model", &a.model)?;
    run.input_dataset("data", &a.data)?;
    let model = load_model(&a.model)?;
    let records = load_slice_dataset(&a.data)?;
    let picks = spread_indices(records.len(), a.fixtures);
    let chosen: Vec<SliceRecord> = picks.iter().map(|&i| records[i].clone()).collect();
    let planes = if model.network.spec.aux_width > 0 {
        let dir = a
            .plane_model
            .as_ref()
            .ok_or_else(|| Error::Config("this model takes a plane input; pass --plane-model".into()))?;
        run.input_bundle("plane_model", dir)?;
        infer_planes(&chosen, &handle(&load_plane_model(dir)?))?
            .into_iter()
            .map(Some)
            .collect()
    } else {
        vec![None; chosen.len()]
    };
    let images: Vec<_> = chosen
        .iter()
        .zip(planes)
        .map(|(r, p)| (r.record_id(), r.pixels.clone(), p))
        .collect();
    run.set_out(&a.out)?;
    let m = &model.meta;
    let report = export_portable(&model.network, m.task, &m.normalization, m.context, &images, &run.out)?;
    write_json(&run.out.join("export_report.json"), &report)?;
    for (role, file) in [
        ("model", planemeta::models::MODEL_FILE),
        ("meta", planemeta::models::META_FILE),
        ("fixtures", planemeta::models::FIXTURE_DIR),
        ("report", "export_report.json"),
    ] {
        run.output(role, file)?;
    }
    println!(
        "exported {} fixtures, max diff native {:.2e}, reference {:.2e}",
        report.fixtures, report.max_abs_diff_native, report.max_abs_diff_reference
    );
    run.metrics = serde_json::json!({
        "fixtures": report.fixtures,
        "max_abs_diff_native": report.max_abs_diff_native,
        "max_abs_diff_reference": report.max_abs_diff_reference,
    });
    Ok(())
}

#[derive(Serialize)]
struct ExplainedError {
    record_id: String,
    truth: String,
    predicted: String,
    confidence: f64,
    heatmap: String,
    overlay: String,
}

fn model_name(dir: &Path, i: usize) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .filter(|n| !n.is_empty() && n != "." && n != "..")
        .unwrap_or_else(|| format!("model{i}"))
}

fn explain(a: &crate::ExplainArgs, run: &mut Run) -> Result<()> {
    run.input_dataset("data", &a.data)?;
    let records = load_slice_dataset(&a.data)?;
    let plane_model = a.plane_model.as_deref().map(load_plane_model).transpose()?;
    if let Some(dir) = &a.plane_model {
        run.input_bundle("plane_model", dir)?;
    }
    run.set_out(&a.out)?;
    let mut rows = Vec::new();
    let mut listing = serde_json::Map::new();
    let mut names_seen: HashMap<String, usize> = HashMap::new();
    for (mi, dir) in a.model.iter().enumerate() {
        run.input_bundle(&format!("model{mi}"), dir)?;
        let model = load_model(dir)?;
        let mut name = model_name(dir, mi);
        let seen = names_seen.entry(name.clone()).or_default();
        *seen += 1;
        if *seen > 1 {
            name = format!("{name}{mi}");
        }
        let data = dataset_for(&model, records.clone(), plane_model.as_ref())?;
        let h = handle(&model);
        let metrics = evaluate(h.network, &data, h.context, &h.norm)?;
        let index: HashMap<String, usize> = data
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.record_id(), i))
            .collect();
        let layer = a
            .layer
            .clone()
            .unwrap_or_else(|| model.meta.architecture.backbone.default_cam_layer().to_string());
        let classes = &model.meta.class_names;
        let mut tiles = Vec::new();
        let mut entries = Vec::new();
        for group in group_by_truth(&confident_errors(&metrics.predictions, a.k)).into_values() {
            for e in group {
                let i = index[&e.record_id];
                let input = data.inference_input(i, h.context, &h.norm)?;
                let aux = data.aux_planes.as_ref().map(|p| p[i].one_hot());
                let heat = grad_cam(h.network, &input, aux, e.prediction.label, &layer)?;
                let files = write_heatmap_pngs(
                    &run.out,
                    &e.record_id,
                    &name,
                    &classes[e.prediction.label],
                    &data.records[i].pixels,
                    &heat,
                )?;
                tiles.push(data.records[i].pixels.clone());
                entries.push(ExplainedError {
                    record_id: e.record_id.clone(),
                    truth: classes[e.truth].clone(),
                    predicted: classes[e.prediction.label].clone(),
                    confidence: e.prediction.probs[e.prediction.label],
                    heatmap: files.heatmap,
                    overlay: files.overlay,
                });
            }
        }
        println!(
            "{name}: {} misclassified, {} rendered",
            metrics.misclassified,
            entries.len()
        );
        listing.insert(name, serde_json::to_value(&entries)?);
        rows.push(tiles);
    }
    write_gallery_png(&run.out.join("gallery.png"), &rows)?;
    write_json(&run.out.join("errors.json"), &listing)?;
    run.output("gallery", "gallery.png")?;
    run.output("errors", "errors.json")?;
    run.metrics = serde_json::json!({
        "rendered": listing.iter().map(|(k, v)| (k.clone(), v.as_array().map_or(0, Vec::len))).collect::<std::collections::BTreeMap<_, _>>(),
    });
    Ok(())
}

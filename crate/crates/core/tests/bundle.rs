mod common;

use planemeta::context::ContextKind;
use planemeta::models::{
    classify_image, export_portable, load_bundle, read_fixtures, save_bundle, NormConfig, NormMode, Task, FIXTURE_DIR,
    META_FILE, MODEL_FILE,
};
use planemeta::nn::{BackboneKind, ModelSpec, Network, Tensor};
use planemeta::Error;
use std::fs;

fn tiny(aux: bool) -> Network {
    let spec = ModelSpec::new(BackboneKind::Tiny, 3, common::SIZE).with_seed(4);
    Network::new(if aux { spec.with_aux(3) } else { spec }).unwrap()
}

fn exported(aux: bool) -> (tempfile::TempDir, Network) {
    let dir = tempfile::tempdir().unwrap();
    let net = tiny(aux);
    let images: Vec<_> = common::plane_records(0..2, 8)
        .into_iter()
        .take(4)
        .map(|r| (r.record_id(), r.pixels, Some(r.plane)))
        .collect();
    let norm = NormConfig::new(NormMode::MinMax01);
    export_portable(&net, Task::Plane, &norm, ContextKind::Static2D, &images, dir.path()).unwrap();
    (dir, net)
}

#[test]
fn reload_gives_identical_logits() {
    let dir = tempfile::tempdir().unwrap();
    let net = tiny(false);
    save_bundle(
        dir.path(),
        &net,
        Task::Plane,
        &NormConfig::new(NormMode::MinMax01),
        ContextKind::Random,
    )
    .unwrap();
    let loaded = load_bundle(dir.path(), None).unwrap();
    let s = common::SIZE;
    let x = Tensor::new(
        vec![2, 3, s, s],
        (0..2 * 3 * s * s).map(|i| (i % 17) as f32 / 17.0).collect(),
    )
    .unwrap();
    assert_eq!(
        loaded.network.logits(x.clone(), None).unwrap(),
        net.logits(x, None).unwrap()
    );
    assert_eq!(loaded.meta.class_names, vec!["axial", "coronal", "sagittal"]);
    assert_eq!(loaded.meta.context, ContextKind::Random);
}

#[test]
fn normalization_conflict_is_refused() {
    let (dir, _) = exported(false);
    match load_bundle(dir.path(), Some(NormMode::PretrainStats)) {
        Err(Error::NormalizationMismatch { bundle, requested }) => {
            assert_eq!(bundle, "min_max01");
            assert_eq!(requested, "pretrain_stats");
        }
        other => panic!("expected a normalization mismatch, got {other:?}"),
    }
    assert!(load_bundle(dir.path(), Some(NormMode::MinMax01)).is_ok());
}

#[test]
fn tampered_or_truncated_model_is_rejected() {
    let (dir, _) = exported(false);
    let path = dir.path().join(MODEL_FILE);
    let bytes = fs::read(&path).unwrap();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x01;
    fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_bundle(dir.path(), None), Err(Error::Bundle(_))));
    fs::write(&path, &bytes[..bytes.len() / 3]).unwrap();
    assert!(load_bundle(dir.path(), None).is_err());
}

#[test]
fn unknown_meta_fields_are_rejected() {
    let (dir, _) = exported(false);
    let path = dir.path().join(META_FILE);
    let mut meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    meta["surprise"] = serde_json::json!(1);
    fs::write(&path, meta.to_string()).unwrap();
    assert!(matches!(load_bundle(dir.path(), None), Err(Error::Bundle(_))));
}

#[test]
fn fixtures_classify_to_their_recorded_probabilities() {
    let (dir, _) = exported(false);
    let loaded = load_bundle(dir.path(), None).unwrap();
    let fixtures = read_fixtures(dir.path()).unwrap();
    assert_eq!(fixtures.len(), 4);
    for fx in &fixtures {
        let p = classify_image(&loaded, &dir.path().join(FIXTURE_DIR).join(&fx.file)).unwrap();
        let worst = p
            .probs
            .iter()
            .zip(&fx.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-5, "{}: {worst}", fx.file);
    }
}

#[test]
fn metadata_bundle_declares_plane_input() {
    let (dir, _) = exported(true);
    let loaded = load_bundle(dir.path(), None).unwrap();
    assert_eq!(loaded.meta.inputs.len(), 2);
    let fixtures = read_fixtures(dir.path()).unwrap();
    assert!(fixtures.iter().all(|f| f.plane.is_some()));
    // a raster alone cannot feed a model that also needs the plane
    let first = dir.path().join(FIXTURE_DIR).join(&fixtures[0].file);
    assert!(matches!(
        classify_image(&loaded, &first),
        Err(Error::DimensionMismatch { .. })
    ));
}

//! Emulator bundles saved to and loaded from an artifact directory.

mod common;

use rand::Rng;
use specal_core::model::ParameterPoint;
use specal_core::pipeline::store::{load_bundle, save_bundle, ArtifactStore};
use specal_core::rng::seeded;
use specal_core::Error;

fn saved_store() -> (tempfile::TempDir, specal_core::emulator::EmulatorBundle) {
    let dir = tempfile::tempdir().unwrap();
    let bundle = common::small_bundle(50, 200, 5);
    let mut store = ArtifactStore::open(dir.path()).unwrap();
    save_bundle(&bundle, &mut store).unwrap();
    store.save_manifest().unwrap();
    (dir, bundle)
}

#[test]
fn round_trip_predictions_are_bit_identical() {
    let (dir, bundle) = saved_store();
    let loaded = load_bundle(&ArtifactStore::open(dir.path()).unwrap()).unwrap();
    let mut rng = seeded(5);
    for _ in 0..100 {
        let theta = ParameterPoint::new([rng.random(), rng.random(), rng.random()]).unwrap();
        assert_eq!(bundle.predict_weights(&theta), loaded.predict_weights(&theta));
    }
    for _ in 0..10 {
        let theta = ParameterPoint::new([rng.random(), rng.random(), rng.random()]).unwrap();
        let (a, _) = bundle.emulate_spectrum(&theta).unwrap();
        let (b, _) = loaded.emulate_spectrum(&theta).unwrap();
        assert_eq!(a.intensity(), b.intensity());
    }
    assert_eq!(loaded.hyperparameters(), bundle.hyperparameters());
}

#[test]
fn manifest_records_basis_shape() {
    let (dir, _) = saved_store();
    let store = ArtifactStore::open(dir.path()).unwrap();
    let k = &store.manifest().arrays["K"];
    assert_eq!(k.shape, vec![200, 5]);
    assert_eq!(k.byte_len, 200 * 5 * 8);
}

#[test]
fn flipped_byte_is_an_integrity_error() {
    let (dir, _) = saved_store();
    let path = dir.path().join("arrays/W.f64");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[17] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    let err = load_bundle(&ArtifactStore::open(dir.path()).unwrap()).unwrap_err();
    assert!(err.is_integrity(), "{err}");
}

#[test]
fn truncated_array_is_an_integrity_error() {
    let (dir, _) = saved_store();
    let path = dir.path().join("arrays/K.f64");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    let err = load_bundle(&ArtifactStore::open(dir.path()).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err}");
}

#[test]
fn unknown_schema_version_is_rejected() {
    let (dir, _) = saved_store();
    let path = dir.path().join("manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    manifest["schema_version"] = 99.into();
    std::fs::write(&path, serde_json::to_vec(&manifest).unwrap()).unwrap();
    let err = ArtifactStore::open(dir.path()).unwrap_err();
    assert!(matches!(err, Error::SchemaVersion { found: 99, .. }), "{err}");
}

use std::fs;
use std::path::Path;

use kinject_core::knowledge::load_triples;
use kinject_core::synth::{default_catalog, generate_dataset, linear_probe, load_dataset, DatasetManifest, SynthError};

fn small() -> DatasetManifest {
    DatasetManifest {
        train_per_category: 30,
        val_per_category: 10,
        ..DatasetManifest::default()
    }
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generated_dataset_loads_and_regenerates_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let manifest = small();
    generate_dataset(&a, &manifest, &default_catalog()).unwrap();
    generate_dataset(&b, &manifest, &default_catalog()).unwrap();
    assert_eq!(tree_bytes(&a), tree_bytes(&b));

    let d = load_dataset(&a).unwrap();
    assert_eq!(d.categories.len(), 6);
    assert_eq!(d.train.len(), 180);
    assert_eq!(d.val.len(), 60);
    assert_eq!(d.train.images.shape(), &[180, 3, 64, 64]);
    assert!(d.train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(d.train.labels.windows(2).all(|w| w[0] <= w[1]));
    let boxes = d.val.boxes.as_ref().unwrap();
    assert!(boxes.iter().all(|b| b[0] < b[2] && b[1] < b[3] && b[0] >= 0 && b[3] <= 64));
    assert_eq!(load_dataset(&a).unwrap(), d);

    for c in &d.categories {
        assert!(!load_triples(&a.join("knowledge").join(format!("{c}.tsv"))).unwrap().is_empty());
    }
    assert!(!load_triples(&a.join("external_graph.tsv")).unwrap().is_empty());

    // Layout cues alone make the categories linearly separable.
    let acc = linear_probe(&d.train, &d.val, 6, 20, 0);
    assert!(acc > 0.5, "probe accuracy {acc}");
}

#[test]
fn different_seed_changes_pixels() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = small();
    m.train_per_category = 2;
    m.val_per_category = 1;
    generate_dataset(&tmp.path().join("a"), &m, &default_catalog()).unwrap();
    m.seed = 1;
    generate_dataset(&tmp.path().join("b"), &m, &default_catalog()).unwrap();
    let a = load_dataset(&tmp.path().join("a")).unwrap();
    let b = load_dataset(&tmp.path().join("b")).unwrap();
    assert_ne!(a.train.images, b.train.images);
}

#[test]
fn corrupt_image_and_missing_split_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = small();
    m.train_per_category = 1;
    m.val_per_category = 1;
    generate_dataset(tmp.path(), &m, &default_catalog()).unwrap();
    let cat = &m.categories[0];
    let png = tmp.path().join("images/train").join(cat).join("00000.png");
    fs::write(&png, b"not a png").unwrap();
    assert!(matches!(load_dataset(tmp.path()), Err(SynthError::CorruptImage { .. })));
    fs::remove_dir_all(tmp.path().join("images/val")).unwrap();
    fs::remove_dir_all(tmp.path().join("images/train")).unwrap();
    assert!(matches!(load_dataset(tmp.path()), Err(SynthError::MissingSplit(_))));
}

#[test]
fn manifest_rejects_unknown_fields_and_bad_values() {
    assert!(serde_json::from_str::<DatasetManifest>(r#"{"categories":[],"bogus":1}"#).is_err());
    let m = DatasetManifest {
        resolution: 8,
        ..DatasetManifest::default()
    };
    assert!(matches!(m.validate(), Err(SynthError::Manifest(_))));
}

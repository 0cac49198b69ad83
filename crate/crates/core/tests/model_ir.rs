use std::fs;

use frustra::graph_builder::assemble;
use frustra::model_ir::synthetic::{generate_synthetic, Template};
use frustra::model_ir::{load_manifest, read_blob, write_blob, Blob, LayerKind, LayerOp, Model};
use proptest::prelude::*;

fn saved_bytes(model: &Model, dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    model.save(dir.join("manifest.json")).unwrap();
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn template_generation_is_byte_for_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for template in Template::ALL {
        let a = dir.path().join(format!("{template}-a"));
        let b = dir.path().join(format!("{template}-b"));
        fs::create_dir_all(&a).unwrap();
        fs::create_dir_all(&b).unwrap();
        let first = saved_bytes(&generate_synthetic(1, template).unwrap(), &a);
        let second = saved_bytes(&generate_synthetic(1, template).unwrap(), &b);
        assert_eq!(first, second, "{template}");
    }
}

#[test]
fn template_contracts() {
    let residual = generate_synthetic(1, Template::ResidualCnn).unwrap();
    let adds: Vec<usize> = (0..residual.manifest.layers().len())
        .filter(|&i| residual.manifest.layer(i).kind == LayerKind::Add)
        .collect();
    assert!(!adds.is_empty());
    assert!(adds
        .iter()
        .any(|&i| residual.manifest.inputs_of(i).len() == 2));

    let grouped = generate_synthetic(2, Template::GroupedCnn).unwrap();
    for i in 0..grouped.manifest.layers().len() {
        if let LayerOp::Conv(g) = grouped.manifest.op(i) {
            assert_eq!(g.in_c % g.groups, 0);
            assert_eq!(g.out_c % g.groups, 0);
        }
    }
}

#[test]
fn corrupt_blob_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = generate_synthetic(0, Template::TinyMlp).unwrap();
    let path = dir.path().join("manifest.json");
    model.save(&path).unwrap();
    let blob_path = dir.path().join("fc2_w.blob");
    let blob = read_blob(&blob_path).unwrap();
    write_blob(
        &blob_path,
        &Blob::new(vec![blob.data.len() - 1], blob.data[1..].to_vec()).unwrap(),
    )
    .unwrap();
    let err = load_manifest(&path).unwrap_err();
    assert!(err.is_validation(), "{err}");

    fs::remove_file(&blob_path).unwrap();
    assert!(load_manifest(&path).unwrap_err().is_validation());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn save_then_load_reproduces_the_model(seed in 0u64..1000, which in 0usize..4) {
        let template = Template::ALL[which];
        let dir = tempfile::tempdir().unwrap();
        let model = generate_synthetic(seed, template).unwrap();
        let path = dir.path().join("m/manifest.json");
        model.save(&path).unwrap();
        let back = load_manifest(&path).unwrap();
        prop_assert_eq!(back.manifest.to_document(), model.manifest.to_document());
        let mut a: Vec<_> = model.store.iter().collect();
        let mut b: Vec<_> = back.store.iter().collect();
        a.sort_by(|x, y| x.0.cmp(y.0));
        b.sort_by(|x, y| x.0.cmp(y.0));
        prop_assert_eq!(a, b);
        prop_assert_eq!(assemble(&model).unwrap(), assemble(&back).unwrap());
    }
}

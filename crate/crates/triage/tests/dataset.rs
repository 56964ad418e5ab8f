mod common;

use mcunet_core::data::{extract_patches, synth_vessels, ImageRecord, SyntheticConfig};
use mcunet_core::Tensor;
use mcunet_triage::checkpoint::{self, Checkpoint};
use mcunet_triage::dataset::{self, Layout};
use mcunet_triage::{pgm, tns, TriageError};

use common::{image, mask, params};

fn write_pair(dir: &std::path::Path, image_name: &str, mask_name: &str, h: usize, w: usize, seed: u64) {
    pgm::write(&dir.join(image_name), &image(seed, h, w)).unwrap();
    pgm::write(&dir.join(mask_name), &mask(seed, h, w)).unwrap();
}

#[test]
fn flat_layout() {
    let dir = tempfile::tempdir().unwrap();
    assert!(dataset::load_dataset(dir.path(), Layout::Flat).unwrap().is_empty());
    for (id, seed) in [("c", 3), ("a", 1), ("b", 2)] {
        write_pair(dir.path(), &format!("{id}.pgm"), &format!("{id}_mask.pgm"), 8, 12, seed);
    }
    let records = dataset::load_dataset(dir.path(), Layout::Flat).unwrap();
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
    assert_eq!(records[0].image.shape(), &[1, 8, 12]);
    assert_eq!(records[0].mask, mask(1, 8, 12));
    assert!(records[0].image.max_abs_diff(&image(1, 8, 12).reshape(&[1, 8, 12]).unwrap()) <= 0.5 / 255.0 + 1e-7);

    pgm::write(&dir.path().join("b_mask.pgm"), &mask(2, 4, 12)).unwrap();
    let err = dataset::load_dataset(dir.path(), Layout::Flat).unwrap_err();
    assert!(matches!(&err, TriageError::Data(m) if m.starts_with("b:")), "{err}");

    std::fs::remove_file(dir.path().join("b_mask.pgm")).unwrap();
    let err = dataset::load_dataset(dir.path(), Layout::Flat).unwrap_err();
    assert!(err.to_string().contains("b: image without mask"), "{err}");
}

#[test]
fn flat_layout_reads_field_of_view() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "x.pgm", "x_mask.pgm", 8, 8, 1);
    pgm::write(&dir.path().join("x_fov.pgm"), &Tensor::full(&[8, 8], 1.0)).unwrap();
    let r = dataset::load_dataset(dir.path(), Layout::Flat).unwrap();
    assert_eq!(r[0].fov.as_ref().unwrap().sum_f64(), 64.0);
}

#[test]
fn drive_layout_pairs_by_index() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["images", "1st_manual", "mask"] {
        std::fs::create_dir(dir.path().join(sub)).unwrap();
    }
    for (n, seed) in [(21, 1), (3, 2), (10, 3)] {
        pgm::write(&dir.path().join(format!("images/{n}_training.pgm")), &image(seed, 8, 8)).unwrap();
        pgm::write(&dir.path().join(format!("1st_manual/{n}_manual1.pgm")), &mask(seed, 8, 8)).unwrap();
    }
    pgm::write(&dir.path().join("mask/3_training_mask.pgm"), &Tensor::full(&[8, 8], 1.0)).unwrap();
    let records = dataset::load_dataset(dir.path(), Layout::Drive).unwrap();
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["3", "10", "21"]);
    assert!(records[0].fov.is_some() && records[1].fov.is_none());
    assert_eq!(records[2].mask, mask(1, 8, 8));
    assert_eq!(dataset::load_auto(dir.path()).unwrap(), records);

    std::fs::remove_file(dir.path().join("1st_manual/10_manual1.pgm")).unwrap();
    let err = dataset::load_dataset(dir.path(), Layout::Drive).unwrap_err();
    assert!(err.to_string().contains("10: image without manual"), "{err}");
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let records =
        synth_vessels(&SyntheticConfig { count: 3, height: 16, width: 16, ..SyntheticConfig::default() }).unwrap();
    let manifest = dataset::save_flat(dir.path(), &records).unwrap();
    assert_eq!(manifest.len(), 3);
    let loaded = dataset::load_auto(dir.path()).unwrap();
    assert_eq!(loaded.len(), 3);
    for (a, b) in records.iter().zip(&loaded) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.mask, b.mask);
        assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-7);
    }
    // the flat reading of the same directory agrees
    let flat = dataset::load_dataset(dir.path(), Layout::Flat).unwrap();
    assert_eq!(flat, loaded);
    assert!("tiff".parse::<Layout>().is_err());
}

#[test]
fn manifest_rejects_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a.pgm", "a_mask.pgm", 8, 8, 1);
    let m = r#"[{"id":"a","image_path":"a.pgm","mask_path":"a_mask.pgm"},{"id":"a","image_path":"a.pgm","mask_path":"a_mask.pgm"}]"#;
    std::fs::write(dir.path().join("manifest.json"), m).unwrap();
    let err = dataset::load_auto(dir.path()).unwrap_err();
    assert!(err.to_string().contains("duplicate id \"a\""), "{err}");
}

#[test]
fn patch_sets_persist_as_tns_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let rec = ImageRecord::new("r", image(1, 16, 16).reshape(&[1, 16, 16]).unwrap(), mask(1, 16, 16), None).unwrap();
    let set = extract_patches(&[rec], 5, 8, 3).unwrap();
    dataset::save_patches(dir.path(), &set).unwrap();
    assert_eq!(tns::read(&dir.path().join("00002.mask.tns")).unwrap(), set.patches[2].mask);
    assert_eq!(dataset::load_patches(dir.path()).unwrap(), set);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = Checkpoint { params: params(), dropout_p: 0.3, seed: 9, epoch: 4 };
    let manifest = checkpoint::save(dir.path(), &ckpt).unwrap();
    assert_eq!(manifest.layers.len(), 11);
    assert_eq!(manifest.layers[0].weight_shape, [8, 1, 3, 3]);
    assert_eq!(manifest.layers[10].name, "head");
    assert_eq!(checkpoint::load(dir.path()).unwrap(), ckpt);

    tns::write(&dir.path().join("head.bias.tns"), &Tensor::zeros(&[3])).unwrap();
    let err = checkpoint::load(dir.path()).unwrap_err();
    assert!(err.to_string().contains("head"), "{err}");
}

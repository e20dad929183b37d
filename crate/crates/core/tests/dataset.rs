use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use vessel_core::dataset::{
    load_dataset, load_dataset_with, test_split, train_split, DatasetId, LoadOptions, MapData, MapKind, MapMeta,
    MapStore, Split, StoredMap,
};
use vessel_core::imageio;
use vessel_core::raster::{Mask, Plane, RgbImage};
use vessel_core::synth::{write_drive_layout, SynthConfig};
use vessel_core::Error;

const ANY_SIZE: LoadOptions = LoadOptions {
    enforce_native_size: false,
};

fn small() -> SynthConfig {
    SynthConfig {
        width: 48,
        height: 40,
        seed: 5,
    }
}

fn drive_tree(root: &Path, n_train: usize, n_test: usize) {
    write_drive_layout(root, &small(), n_train, n_test).unwrap();
}

#[test]
fn drive_layout_loads_with_splits() {
    let dir = tempfile::tempdir().unwrap();
    drive_tree(dir.path(), 4, 3);
    let samples = load_dataset_with(dir.path(), DatasetId::Drive, ANY_SIZE).unwrap();
    assert_eq!(samples.len(), 7);
    let train = train_split(&samples);
    let test = test_split(&samples);
    assert_eq!((train.len(), test.len()), (4, 3));
    let train_ids: BTreeSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
    let test_ids: BTreeSet<&str> = test.iter().map(|s| s.id.as_str()).collect();
    assert!(train_ids.is_disjoint(&test_ids));
    assert_eq!(
        train_ids,
        BTreeSet::from(["21_training", "22_training", "23_training", "24_training"])
    );
    for s in &samples {
        assert_eq!(s.dims(), (48, 40));
        assert_eq!(s.label.dims(), (48, 40));
        assert!(s.fov.is_some());
        assert_eq!(s.dataset, DatasetId::Drive);
    }

    let again = load_dataset_with(dir.path(), DatasetId::Drive, ANY_SIZE).unwrap();
    for (a, b) in samples.iter().zip(&again) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.image, b.image);
        assert_eq!(a.label, b.label);
        assert_eq!(a.split, b.split);
    }
}

#[test]
fn native_size_is_enforced_by_default() {
    let dir = tempfile::tempdir().unwrap();
    drive_tree(dir.path(), 1, 1);
    assert!(matches!(
        load_dataset(dir.path(), DatasetId::Drive),
        Err(Error::Integrity(_))
    ));
}

#[test]
fn missing_label_names_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    drive_tree(dir.path(), 2, 1);
    std::fs::remove_file(dir.path().join("DRIVE/training/1st_manual/22_manual1.png")).unwrap();
    let err = load_dataset_with(dir.path(), DatasetId::Drive, ANY_SIZE).unwrap_err();
    assert!(matches!(err, Error::MissingFile(_)));
    assert!(err.to_string().contains("22_training"), "{err}");
}

#[test]
fn label_of_the_wrong_size_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    drive_tree(dir.path(), 2, 1);
    imageio::write_binary(
        &dir.path().join("DRIVE/test/1st_manual/01_manual1.png"),
        &Mask::new(47, 40),
    )
    .unwrap();
    let err = load_dataset_with(dir.path(), DatasetId::Drive, ANY_SIZE).unwrap_err();
    assert!(matches!(err, Error::Integrity(_)));
    assert!(err.to_string().contains("01_test"), "{err}");
}

#[test]
fn missing_dataset_directory() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_dataset(dir.path(), DatasetId::ChaseDb1),
        Err(Error::MissingFile(_))
    ));
}

#[test]
fn chase_archive_splits_first_twenty_for_training() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("CHASE_DB1");
    let img = RgbImage::from_fn(12, 10, |x, y| [x as f32 / 12.0, y as f32 / 10.0, 0.5]);
    for n in 1..=14 {
        for eye in ["L", "R"] {
            let id = format!("Image_{n:02}{eye}");
            imageio::write_rgb8(&base.join(format!("{id}.png")), &img).unwrap();
            imageio::write_binary(
                &base.join(format!("{id}_1stHO.png")),
                &Mask::from_fn(12, 10, |x, _| x == n % 12),
            )
            .unwrap();
            imageio::write_binary(&base.join(format!("{id}_2ndHO.png")), &Mask::new(12, 10)).unwrap();
        }
    }
    let samples = load_dataset_with(dir.path(), DatasetId::ChaseDb1, ANY_SIZE).unwrap();
    assert_eq!(samples.len(), 28);
    let split: BTreeMap<&str, Split> = samples.iter().map(|s| (s.id.as_str(), s.split)).collect();
    assert_eq!(train_split(&samples).len(), 20);
    assert_eq!(test_split(&samples).len(), 8);
    assert_eq!(split["Image_10R"], Split::Train);
    assert_eq!(split["Image_11L"], Split::Test);
    // The first observer is used.
    let s = samples.iter().find(|s| s.id == "Image_03L").unwrap();
    assert_eq!(s.label.count(), 10);
}

fn meta(run: &str, fold: Option<usize>) -> MapMeta {
    MapMeta {
        run: run.into(),
        fold,
        params: BTreeMap::from([("ratio".to_string(), serde_json::json!(0.7))]),
    }
}

#[test]
fn map_store_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let store = MapStore::new(dir.path());

    let mask = Mask::from_fn(31, 17, |x, y| (x * 3 + y) % 7 == 0);
    let erased = StoredMap {
        sample_id: "21_training".into(),
        kind: MapKind::ErasedLabel,
        data: MapData::Binary(mask.clone()),
        meta: meta("r0.70_s0", None),
    };
    store.save(&erased).unwrap();
    assert_eq!(
        store.load("r0.70_s0", "21_training", MapKind::ErasedLabel).unwrap(),
        erased
    );

    let plane = Plane::from_fn(
        31,
        17,
        |x, y| if (x + y) % 2 == 0 { 0.5 } else { (x * y) as f32 / 510.0 },
    );
    let pseudo = StoredMap {
        sample_id: "22_training".into(),
        kind: MapKind::PseudoLabel,
        data: MapData::Gray(plane.clone()),
        meta: meta("pseudo", Some(3)),
    };
    store.save(&pseudo).unwrap();
    let back = store.load("pseudo", "22_training", MapKind::PseudoLabel).unwrap();
    assert_eq!(back.meta.fold, Some(3));
    assert_eq!(back.meta, pseudo.meta);
    let MapData::Gray(p) = back.data else {
        panic!("gray map expected")
    };
    for (a, b) in p.data().iter().zip(plane.data()) {
        assert!((a - b).abs() <= 1.0 / 65535.0);
    }
    assert!((p.get(0, 0) - 0.5).abs() <= 1.0 / 65535.0);

    let rgb = RgbImage::from_fn(9, 8, |x, y| [x as f32 / 8.0, y as f32 / 7.0, 0.3]);
    let enh = StoredMap {
        sample_id: "01_test".into(),
        kind: MapKind::Enhancement,
        data: MapData::Rgb(rgb.clone()),
        meta: meta("test", None),
    };
    store.save(&enh).unwrap();
    let MapData::Rgb(r) = store.load("test", "01_test", MapKind::Enhancement).unwrap().data else {
        panic!("rgb map expected")
    };
    for (a, b) in r.data().iter().zip(rgb.data()) {
        assert!((a - b).abs() <= 1.0 / 65535.0);
    }
}

#[test]
fn map_store_reports_unknown_maps() {
    let dir = tempfile::tempdir().unwrap();
    let store = MapStore::new(dir.path());
    assert!(!store.contains("run", MapKind::Probability, "x"));
    assert!(matches!(
        store.load("run", "x", MapKind::Probability),
        Err(Error::NotFound(_))
    ));
    let wrong = StoredMap {
        sample_id: "x".into(),
        kind: MapKind::Enhancement,
        data: MapData::Gray(Plane::new(2, 2)),
        meta: meta("run", None),
    };
    assert!(matches!(store.save(&wrong), Err(Error::Contract(_))));
}

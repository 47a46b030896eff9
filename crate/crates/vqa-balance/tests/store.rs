use std::fs;
use std::path::Path;

use vqa_balance::checkpoint::{expected_shapes, Checkpoint};
use vqa_balance::store::{
    load_store, load_world, read_neighbors, save_store, save_world, store_files, write_neighbors, StoreError, IMAGES,
    NEIGHBORS,
};
use vqa_balance_core::data::{DataStore, Split};
use vqa_balance_core::knn::neighbor_table;
use vqa_balance_core::model::ModelKind;
use vqa_balance_core::pipeline::{assemble_balanced, create_tasks, explanation_tasks};
use vqa_balance_core::synth::{generate_world, WorldConfig};
use vqa_balance_core::train::{fit, ArchConfig, TrainConfig};
use vqa_balance_core::vocab::FeatureTable;
use vqa_balance_core::Error;

fn collected(n_images: usize, seed: u64) -> (DataStore, vqa_balance_core::synth::World) {
    let (mut store, world) = generate_world(&WorldConfig {
        n_images,
        feature_dim: 8,
        seed,
        ..WorldConfig::default()
    })
    .unwrap();
    let nb = neighbor_table(&store, 24).unwrap();
    create_tasks(&mut store, &nb).unwrap();
    world.simulate_collection(&mut store, seed).unwrap();
    (store, world)
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn round_trip_is_lossless_and_byte_stable() {
    let (store, _) = collected(130, 1);
    assert!(store.sizes().1 >= 100);
    assert!(store.pairs().count() > 0);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_store(&store, a.path()).unwrap();
    let loaded = load_store(a.path()).unwrap();
    assert_eq!(loaded, store);
    save_store(&loaded, b.path()).unwrap();
    assert_eq!(read_dir_bytes(a.path()), read_dir_bytes(b.path()));
    // no temporary files are left behind
    assert!(read_dir_bytes(a.path()).iter().all(|(n, _)| n.ends_with(".jsonl")));

    for (name, bytes) in store_files(&store) {
        let text = String::from_utf8(bytes).unwrap();
        for line in text.lines() {
            assert!(line.starts_with("{\"schema_version\":1,"), "{name}: {line}");
        }
    }
}

#[test]
fn features_survive_the_round_trip_bit_for_bit() {
    let (store, _) = collected(130, 2);
    let dir = tempfile::tempdir().unwrap();
    save_store(&store, dir.path()).unwrap();
    let loaded = load_store(dir.path()).unwrap();
    for (a, b) in store.images().zip(loaded.images()) {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.features.values), bits(&b.features.values));
    }
}

#[test]
fn missing_and_empty_files_load_as_an_empty_store() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(load_store(dir.path()).unwrap(), DataStore::new());
    fs::write(dir.path().join(IMAGES), "").unwrap();
    fs::write(dir.path().join("questions.jsonl"), "\n\n").unwrap();
    assert_eq!(load_store(dir.path()).unwrap(), DataStore::new());
}

#[test]
fn missing_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_store(&dir.path().join("nope")), Err(StoreError::Io { .. })));
}

#[test]
fn unwritable_destination_is_an_io_error() {
    let (store, _) = collected(130, 3);
    let dir = tempfile::tempdir().unwrap();
    // a regular file where a directory is needed fails even for root
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    match save_store(&store, &blocker.join("store")) {
        Err(StoreError::Io { path, .. }) => assert!(path.starts_with(&blocker)),
        other => panic!("{other:?}"),
    }
}

fn image_line(id: &str, dim: usize) -> String {
    let values = vec!["0.5"; dim].join(",");
    format!(
        "{{\"schema_version\":1,\"image_id\":\"{id}\",\"features\":{{\"values\":[{values}],\"normalized\":false}},\"split\":\"train\",\"display_uri\":null}}\n"
    )
}

#[test]
fn mixed_feature_dimensions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(IMAGES), image_line("a", 4) + &image_line("b", 4)).unwrap();
    assert_eq!(load_store(dir.path()).unwrap().dim(), Some(4));

    fs::write(dir.path().join(IMAGES), image_line("a", 4) + &image_line("b", 8)).unwrap();
    match load_store(dir.path()) {
        Err(StoreError::Invalid(Error::DimensionMismatch { id, expected, got })) => {
            assert_eq!((id.as_str(), expected, got), ("b", 4, 8));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_lines_report_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(IMAGES), image_line("a", 4) + "{oops\n").unwrap();
    match load_store(dir.path()) {
        Err(e @ StoreError::Parse { line: 2, .. }) => assert!(e.to_string().contains("images.jsonl:2")),
        other => panic!("{other:?}"),
    }
    fs::write(dir.path().join(IMAGES), image_line("a", 4).replace("\"schema_version\":1", "\"schema_version\":7")).unwrap();
    assert!(matches!(load_store(dir.path()), Err(StoreError::Parse { line: 1, .. })));
}

#[test]
fn records_that_break_invariants_are_rejected_on_load() {
    let (store, _) = collected(130, 4);
    let dir = tempfile::tempdir().unwrap();
    save_store(&store, dir.path()).unwrap();
    // drop the images: every question now dangles
    fs::write(dir.path().join(IMAGES), "").unwrap();
    assert!(matches!(load_store(dir.path()), Err(StoreError::Invalid(_))));
}

#[test]
fn world_and_neighbor_files_round_trip() {
    let (store, world) = collected(130, 5);
    let dir = tempfile::tempdir().unwrap();
    save_world(&world, dir.path()).unwrap();
    assert_eq!(load_world(dir.path()).unwrap(), world);

    let table = neighbor_table(&store, 24).unwrap();
    let path = dir.path().join(NEIGHBORS);
    write_neighbors(&path, table.values()).unwrap();
    assert_eq!(read_neighbors(&path).unwrap(), table);
    assert!(read_neighbors(&dir.path().join("absent.jsonl")).is_err());
}

fn small_model(kind: ModelKind) -> (vqa_balance_core::train::TrainedModel, DataStore) {
    let (store, _) = collected(160, 6);
    let table = FeatureTable::from_store(&store);
    let train = assemble_balanced(&store, Split::Train).unwrap();
    let arch = ArchConfig {
        word_dim: 4,
        hidden_dim: 8,
        common_dim: 4,
        answer_embed_dim: 4,
        ..ArchConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let out = fit(kind, &train.instances, &explanation_tasks(&store, Split::Train), &[], &table, &arch, &cfg).unwrap();
    (out.model, store)
}

#[test]
fn checkpoints_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ModelKind::ALL {
        let (model, store) = small_model(kind);
        let ckpt = Checkpoint::new(model.clone());
        ckpt.validate().unwrap();
        let path = dir.path().join(format!("{}.json", kind.as_str()));
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), fs::read(&path).unwrap());
        let table = FeatureTable::from_store(&store);
        for q in store.questions().take(20) {
            let f = table.by_id(&q.image_id).unwrap();
            assert_eq!(back.model.predict(&q.tokens, f).unwrap(), model.predict(&q.tokens, f).unwrap());
        }
        if let Some(p) = &model.params {
            assert_eq!(back.shapes, expected_shapes(p));
            assert_eq!(back.shapes["explain_mix.weight"], [24, 24]);
        } else {
            assert!(back.shapes.is_empty());
        }
    }
}

#[test]
fn inconsistent_checkpoints_are_rejected() {
    let (model, _) = small_model(ModelKind::Joint);
    let good = Checkpoint::new(model);

    let mut wrong_version = good.clone();
    wrong_version.format_version = 99;
    assert!(wrong_version.validate().is_err());

    let mut wrong_shape = good.clone();
    wrong_shape.shapes.insert("answer_head.weight".into(), [1, 1]);
    assert!(wrong_shape.validate().is_err());

    let mut truncated = good.clone();
    truncated.model.params.as_mut().unwrap().answer_head.bias.pop();
    assert!(truncated.validate().is_err());

    let mut nan = good.clone();
    nan.model.params.as_mut().unwrap().image_proj.bias[0] = f64::NAN;
    assert!(nan.validate().is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, truncated.to_bytes()).unwrap();
    assert!(Checkpoint::load(&path).is_err());
    fs::write(&path, "{").unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

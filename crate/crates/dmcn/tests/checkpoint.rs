mod common;

use dmcn::checkpoint::{checkpoint_layout, load_checkpoint, load_checkpoint_for, save_checkpoint, TensorFile};
use dmcn::Error;
use dmcn_core::model::{Model, ModelConfig};
use dmcn_core::training::{TrainConfig, Trainer, TrainingData};
use dmcn_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trained() -> Trainer {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = Shape::new(6, 1, 8, 8);
    let x = Tensor::from_fn(shape, |_, _, _, _| rng.random::<f32>());
    let y = x.map(|v| (v * 0.9 + 0.05).min(1.0));
    let data = TrainingData::new(x, y).unwrap();
    let mut cfg = TrainConfig::new(3, 5);
    cfg.batch_size = 4;
    let mut t = Trainer::new(Model::build(&common::tiny_model()).unwrap(), cfg).unwrap();
    t.train(&data, |_, _| {}).unwrap();
    t
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn save_then_load_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    let ckpt = trained().checkpoint();
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.model_config, ckpt.model_config);
    assert_eq!(back.train_config, ckpt.train_config);
    assert_eq!((back.epoch, back.optimizer.t), (3, ckpt.optimizer.t));
    assert_eq!(back.history, ckpt.history);
    for (a, b) in back.params.iter().zip(&ckpt.params) {
        assert_eq!(bits(a.weights().data()), bits(b.weights().data()));
        assert_eq!(bits(a.bias()), bits(b.bias()));
        assert_eq!((a.stride(), a.padding()), (b.stride(), b.padding()));
    }
    for (a, b) in back
        .optimizer
        .m
        .iter()
        .chain(&back.optimizer.v)
        .zip(ckpt.optimizer.m.iter().chain(&ckpt.optimizer.v))
    {
        assert_eq!(bits(a), bits(b));
    }
    // and saving again reproduces the file
    let again = dir.path().join("d.bin");
    save_checkpoint(&again, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn file_starts_with_magic_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    save_checkpoint(&path, &trained().checkpoint()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"DMCN");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let file = TensorFile::from_bytes(&bytes).unwrap();
    let layout = checkpoint_layout(&common::tiny_model()).unwrap();
    let names: Vec<&str> = file.tensors.iter().map(|t| t.name.as_str()).collect();
    let expected: Vec<&str> = layout.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, expected);
    assert_eq!(names[0], "input.conv.weight");
    assert!(names.contains(&"adam.v.output.conv.bias"));
}

#[test]
fn mismatched_config_names_first_divergent_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    save_checkpoint(&path, &trained().checkpoint()).unwrap();
    let wider = ModelConfig {
        channels: 8,
        ..common::tiny_model()
    };
    match load_checkpoint_for(&path, &wider) {
        Err(Error::TensorMismatch { tensor, .. }) => assert_eq!(tensor, "input.conv.weight"),
        other => panic!("{other:?}"),
    }
    let deeper = ModelConfig {
        blocks_per_stage: 2,
        ..common::tiny_model()
    };
    match load_checkpoint_for(&path, &deeper) {
        Err(Error::TensorMismatch { tensor, found, .. }) => {
            assert_eq!(tensor, "stage1.block2.conv1.weight");
            assert!(found.starts_with("down2."), "{found}");
        }
        other => panic!("{other:?}"),
    }
    let flags = ModelConfig {
        enable_local_memory: false,
        ..common::tiny_model()
    };
    assert!(load_checkpoint_for(&path, &flags).is_err());
    assert!(load_checkpoint_for(&path, &common::tiny_model()).is_ok());
}

#[test]
fn truncated_and_corrupt_files_fail_to_parse() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    save_checkpoint(&path, &trained().checkpoint()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [0, 3, 7, 8, 100, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Parse { offset, .. }) => assert!(offset as usize <= cut),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    std::fs::write(&path, &bad).unwrap();
    let msg = load_checkpoint(&path).unwrap_err().to_string();
    assert!(msg.contains("byte 0"), "{msg}");
}

#[test]
fn resume_from_file_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = Shape::new(5, 1, 8, 8);
    let x = Tensor::from_fn(shape, |_, _, _, _| rng.random::<f32>());
    let y = x.map(|v| 1.0 - v);
    let data = TrainingData::new(x, y).unwrap();
    let mut cfg = TrainConfig::new(4, 1);
    cfg.batch_size = 2;
    let model = Model::build(&common::tiny_model()).unwrap();

    let mut straight = Trainer::new(model.clone(), cfg.clone()).unwrap();
    straight.train(&data, |_, _| {}).unwrap();

    let mut first = Trainer::new(model, TrainConfig { epochs: 2, ..cfg }).unwrap();
    first.train(&data, |_, _| {}).unwrap();
    let path = dir.path().join("half.bin");
    save_checkpoint(&path, &first.checkpoint()).unwrap();
    let mut ckpt = load_checkpoint(&path).unwrap();
    ckpt.train_config.epochs = 4;
    let mut resumed = Trainer::from_checkpoint(ckpt).unwrap();
    resumed.train(&data, |_, _| {}).unwrap();

    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    save_checkpoint(&a, &straight.checkpoint()).unwrap();
    save_checkpoint(&b, &resumed.checkpoint()).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

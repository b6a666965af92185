#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dmcn::checkpoint::save_checkpoint;
use dmcn::config::RunConfig;
use dmcn::io::{read_png, write_png};
use dmcn_core::image::Image;
use dmcn_core::model::{Model, ModelConfig};
use dmcn_core::training::{TrainConfig, Trainer};

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

pub fn sample(name: &str) -> Image {
    read_png(&data_dir().join(format!("{name}.png"))).unwrap()
}

/// Writes `(name, x, y, size)` crops of the sample images into `dir`.
pub fn write_crops(dir: &Path, crops: &[(&str, usize, usize, usize)]) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, &(name, x, y, size)) in crops.iter().enumerate() {
        let img = sample(name).crop(x, y, size, size).unwrap();
        write_png(&dir.join(format!("{i:02}_{name}.png")), &img).unwrap();
    }
}

/// Small network that trains in well under a second per epoch.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        channels: 4,
        blocks_per_stage: 1,
        ..ModelConfig::default()
    }
}

pub fn tiny_run(data: &Path, out: &Path, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig {
        model: tiny_model(),
        ..RunConfig::default()
    };
    cfg.set("epochs", &epochs.to_string()).unwrap();
    cfg.set("batch_size", "4").unwrap();
    cfg.data_dir = Some(data.to_path_buf());
    cfg.out_dir = Some(out.to_path_buf());
    cfg
}

/// A checkpoint whose network is the identity map.
pub fn identity_checkpoint(path: &Path, config: &ModelConfig) {
    let mut model = Model::<f32>::build(config).unwrap();
    model.zero_residual_branches();
    let trainer = Trainer::new(model, TrainConfig::new(1, 0)).unwrap();
    save_checkpoint(path, &trainer.checkpoint()).unwrap();
}

pub fn dmcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmcn")).args(args).output().unwrap()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

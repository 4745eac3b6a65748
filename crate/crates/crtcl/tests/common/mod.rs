#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use crtcl::config::{DatasetSpec, ExperimentConfig};
use crtcl_core::active::{Ablation, Selector};
use crtcl_core::data::SynthConfig;
use crtcl_core::formats::{encode_cifar10_record, encode_idx_images, encode_idx_labels};
use crtcl_core::optim::StepSchedule;

/// A configuration small enough to run several times per test.
pub fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 5,
        trials: 2,
        out: out.to_path_buf(),
        dataset: DatasetSpec::Synthetic(SynthConfig {
            train_per_class: 20,
            test_per_class: 5,
            ..SynthConfig::default()
        }),
        ..ExperimentConfig::default()
    };
    cfg.model.widths = [4, 4, 4, 4];
    cfg.train.epochs = 3;
    cfg.train.stop_epoch = 2;
    cfg.train.lr = 0.01;
    cfg.train.batch_size = 16;
    cfg.train.schedule = StepSchedule {
        drop_epoch: 2,
        factor: 0.1,
    };
    cfg.active.initial_k = 20;
    cfg.active.budget = 10;
    cfg.active.cycles = 2;
    cfg.active.selector = Selector::Critic;
    cfg.active.ablation = Ablation::Full;
    cfg
}

pub fn cifar_pixels(seed: u8) -> Vec<u8> {
    (0..3072u32).map(|i| (i.wrapping_mul(31) as u8).wrapping_add(seed)).collect()
}

/// A CIFAR-10 directory where every batch holds one record.
pub fn cifar_fixture(dir: &Path) -> Vec<(u8, Vec<u8>)> {
    fs::create_dir_all(dir).unwrap();
    let mut records = Vec::new();
    let names = crtcl::io::CIFAR_TRAIN_FILES
        .iter()
        .chain([&crtcl::io::CIFAR_TEST_FILE]);
    for (i, name) in names.enumerate() {
        let (label, pixels) = (i as u8 % 10, cifar_pixels(i as u8));
        fs::write(dir.join(name), encode_cifar10_record(label, &pixels)).unwrap();
        records.push((label, pixels));
    }
    records
}

pub fn digit(seed: u8) -> Vec<u8> {
    (0..784u32).map(|i| ((i * 7) as u8) ^ seed).collect()
}

/// An MNIST directory with one digit per split.
pub fn mnist_fixture(dir: &Path) -> [(u8, Vec<u8>); 2] {
    fs::create_dir_all(dir).unwrap();
    let train = (3u8, digit(1));
    let test = (8u8, digit(2));
    fs::write(dir.join(crtcl::io::MNIST_TRAIN_IMAGES), encode_idx_images(28, 28, std::slice::from_ref(&train.1))).unwrap();
    fs::write(dir.join(crtcl::io::MNIST_TRAIN_LABELS), encode_idx_labels(&[train.0])).unwrap();
    fs::write(dir.join(crtcl::io::MNIST_TEST_IMAGES), encode_idx_images(28, 28, std::slice::from_ref(&test.1))).unwrap();
    fs::write(dir.join(crtcl::io::MNIST_TEST_LABELS), encode_idx_labels(&[test.0])).unwrap();
    [train, test]
}

/// Relative paths and contents of every `.csv` file under `dir`.
pub fn csv_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

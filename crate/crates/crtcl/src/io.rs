//! Dataset directories and plain file helpers.

use std::fs;
use std::path::{Path, PathBuf};

use crtcl_core::data::Dataset;
use crtcl_core::formats::{center_fit, parse_cifar10, parse_idx_images, parse_idx_labels};
use crtcl_core::models::ImageShape;

use crate::error::{Error, Result};

pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Side length every MNIST digit is padded to.
pub const MNIST_TARGET: usize = 32;

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn require(dir: &Path, names: &[&str], what: &str) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!(
            "{} is not a directory; point the config at the unpacked {what} files",
            dir.display()
        )));
    }
    let paths: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).collect();
    let missing: Vec<&str> = names
        .iter()
        .zip(&paths)
        .filter(|(_, p)| !p.is_file())
        .map(|(n, _)| *n)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "{} is missing {} (expected {what} files: {})",
            dir.display(),
            missing.join(", "),
            names.join(", ")
        )));
    }
    Ok(paths)
}

fn in_file<T>(path: &Path, r: crtcl_core::Result<T>) -> Result<T> {
    r.map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn cifar_file(path: &Path) -> Result<Vec<(Vec<f64>, usize)>> {
    in_file(path, parse_cifar10(&read_file(path)?))
}

/// The CIFAR-10 binary distribution: five training batches and one test
/// batch.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let mut names = CIFAR_TRAIN_FILES.to_vec();
    names.push(CIFAR_TEST_FILE);
    let paths = require(dir, &names, "CIFAR-10 binary")?;
    let mut train = Vec::new();
    for p in &paths[..CIFAR_TRAIN_FILES.len()] {
        train.extend(cifar_file(p)?);
    }
    let test = cifar_file(&paths[CIFAR_TRAIN_FILES.len()])?;
    let ds = Dataset {
        shape: ImageShape {
            channels: 3,
            height: 32,
            width: 32,
        },
        classes: 10,
        train,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

fn idx_split(images: &Path, labels: &Path) -> Result<Vec<(Vec<f64>, usize)>> {
    let imgs = in_file(images, parse_idx_images(&read_file(images)?))?;
    let labs = in_file(labels, parse_idx_labels(&read_file(labels)?))?;
    if imgs.images.len() != labs.len() {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            message: format!(
                "{} labels for {} images in {}",
                labs.len(),
                imgs.images.len(),
                images.display()
            ),
        });
    }
    if let Some((i, y)) = labs.iter().enumerate().find(|(_, &y)| y > 9) {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            message: format!("label {i} is {y}, expected a digit 0-9"),
        });
    }
    Ok(imgs
        .images
        .iter()
        .zip(&labs)
        .map(|(px, &y)| (center_fit(px, imgs.rows, imgs.cols, MNIST_TARGET), y as usize))
        .collect())
}

/// MNIST IDX files, each digit centre-padded to 32×32 grayscale.
pub fn load_mnist_idx(dir: &Path) -> Result<Dataset> {
    let p = require(
        dir,
        &[MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS, MNIST_TEST_IMAGES, MNIST_TEST_LABELS],
        "MNIST IDX",
    )?;
    let ds = Dataset {
        shape: ImageShape {
            channels: 1,
            height: MNIST_TARGET,
            width: MNIST_TARGET,
        },
        classes: 10,
        train: idx_split(&p[0], &p[1])?,
        test: idx_split(&p[2], &p[3])?,
    };
    ds.validate()?;
    Ok(ds)
}

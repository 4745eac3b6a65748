//! Samples, the labeled / unlabeled / test pools, preprocessing and the
//! synthetic template dataset.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::ImageShape;
use crate::tensor::Tensor;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SampleId(pub u32);

impl SampleId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl core::fmt::Display for SampleId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An image with a stable id and, once revealed, its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    /// `(C, H, W)` row-major.
    pub image: Vec<f64>,
    pub label: Option<usize>,
}

/// Raw labeled images before they are placed into pools.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: ImageShape,
    pub classes: usize,
    pub train: Vec<(Vec<f64>, usize)>,
    pub test: Vec<(Vec<f64>, usize)>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let n = self.shape.len();
        for (img, y) in self.train.iter().chain(&self.test) {
            if img.len() != n {
                return Err(invalid(format!("image has {} values, expected {n}", img.len())));
            }
            if *y >= self.classes {
                return Err(invalid(format!("label {y} out of range for {} classes", self.classes)));
            }
            if img.iter().any(|v| !v.is_finite()) {
                return Err(invalid("image contains non-finite values"));
            }
        }
        Ok(())
    }

    /// Keeps the first `train` and `test` samples of each split.
    pub fn truncated(mut self, train: usize, test: usize) -> Self {
        self.train.truncate(train);
        self.test.truncate(test);
        self
    }
}

/// Per-channel `(x − mean) / std` with statistics from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Population mean and standard deviation per channel over `images`.
    pub fn fit<'a>(shape: ImageShape, images: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let plane = shape.height * shape.width;
        let c = shape.channels;
        let (mut sum, mut count) = (vec![0.0; c], 0usize);
        let images: Vec<&[f64]> = images.into_iter().collect();
        for img in &images {
            for ch in 0..c {
                sum[ch] += img[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
            }
            count += plane;
        }
        if count == 0 {
            return Err(Error::Empty("normalization input"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; c];
        for img in &images {
            for ch in 0..c {
                sq[ch] += img[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| libm::sqrt(s / count as f64)).collect();
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(invalid("normalization: a channel has zero variance"));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, image: &mut [f64]) {
        let plane = image.len() / self.mean.len();
        for (ch, chunk) in image.chunks_mut(plane).enumerate() {
            chunk
                .iter_mut()
                .for_each(|v| *v = (*v - self.mean[ch]) / self.std[ch]);
        }
    }

    pub fn invert(&self, image: &[f64]) -> Vec<f64> {
        let plane = image.len() / self.mean.len();
        image
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i / plane] + self.mean[i / plane])
            .collect()
    }
}

/// `D_L`, `D_U` and `D_Test` over one backing store of samples.
///
/// Ids are dense: training samples first, then test samples. Ground-truth
/// labels of unlabeled samples stay hidden in the store until revealed.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePools {
    shape: ImageShape,
    classes: usize,
    samples: Vec<Sample>,
    truth: Vec<usize>,
    labeled: BTreeSet<SampleId>,
    unlabeled: BTreeSet<SampleId>,
    test: BTreeSet<SampleId>,
}

impl SamplePools {
    /// Every training sample starts unlabeled; test labels are visible.
    pub fn from_dataset(ds: Dataset) -> Result<Self> {
        ds.validate()?;
        let total = ds.train.len() + ds.test.len();
        if total > u32::MAX as usize {
            return Err(invalid("dataset too large for 32-bit sample ids"));
        }
        let n_train = ds.train.len();
        let mut samples = Vec::with_capacity(total);
        let mut truth = Vec::with_capacity(total);
        for (i, (image, y)) in ds.train.into_iter().chain(ds.test).enumerate() {
            let is_test = i >= n_train;
            samples.push(Sample {
                id: SampleId(i as u32),
                image,
                label: is_test.then_some(y),
            });
            truth.push(y);
        }
        let ids = |r: core::ops::Range<usize>| r.map(|i| SampleId(i as u32)).collect();
        Ok(Self {
            shape: ds.shape,
            classes: ds.classes,
            samples,
            truth,
            labeled: BTreeSet::new(),
            unlabeled: ids(0..n_train),
            test: ids(n_train..total),
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labeled(&self) -> &BTreeSet<SampleId> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<SampleId> {
        &self.unlabeled
    }

    pub fn test(&self) -> &BTreeSet<SampleId> {
        &self.test
    }

    pub fn train_len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn sample(&self, id: SampleId) -> Option<&Sample> {
        self.samples.get(id.index())
    }

    /// Revealed label of a labeled or test sample.
    pub fn label(&self, id: SampleId) -> Option<usize> {
        self.sample(id).and_then(|s| s.label)
    }

    /// Hidden ground truth, for simulated oracles only.
    pub fn ground_truth(&self, id: SampleId) -> Option<usize> {
        self.truth.get(id.index()).copied()
    }

    /// Moves `id` from `D_U` to `D_L` with the supplied label.
    pub fn reveal(&mut self, id: SampleId, label: usize) -> Result<()> {
        if label >= self.classes {
            return Err(invalid(format!("label {label} out of range for {} classes", self.classes)));
        }
        if !self.unlabeled.remove(&id) {
            return Err(invalid(format!("sample {id} is not in the unlabeled pool")));
        }
        self.labeled.insert(id);
        self.samples[id.index()].label = Some(label);
        Ok(())
    }

    /// Reveals a batch atomically: either every pair is applied or none.
    pub fn reveal_all(&mut self, labels: &[(SampleId, usize)]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &(id, y) in labels {
            if y >= self.classes || !self.unlabeled.contains(&id) || !seen.insert(id) {
                return Err(invalid(format!("cannot label sample {id} as {y}")));
            }
        }
        for &(id, y) in labels {
            self.reveal(id, y)?;
        }
        Ok(())
    }

    /// Disjointness, coverage of the training split, and label presence.
    pub fn check_invariants(&self) -> Result<()> {
        if self.labeled.intersection(&self.unlabeled).next().is_some() {
            return Err(invalid("labeled and unlabeled pools overlap"));
        }
        if self.test.iter().any(|id| self.labeled.contains(id) || self.unlabeled.contains(id)) {
            return Err(invalid("a test id appears in a training pool"));
        }
        if self.train_len() + self.test.len() != self.samples.len() {
            return Err(invalid("pool sizes do not cover the sample store"));
        }
        if self.labeled.iter().any(|&id| self.label(id).is_none()) {
            return Err(invalid("a labeled sample has no label"));
        }
        if self.unlabeled.iter().any(|&id| self.label(id).is_some()) {
            return Err(invalid("an unlabeled sample exposes a label"));
        }
        Ok(())
    }

    /// Stacks the images of `ids` into `(B, C, H, W)`, optionally flipping
    /// each with probability 0.5.
    pub fn batch(&self, ids: &[SampleId], mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ids.len() * self.shape.len());
        for &id in ids {
            let s = self
                .sample(id)
                .ok_or_else(|| invalid(format!("unknown sample {id}")))?;
            match rng.as_deref_mut() {
                Some(r) => data.extend(augment(&s.image, self.shape, r)),
                None => data.extend_from_slice(&s.image),
            }
        }
        let s = self.shape;
        Tensor::new(vec![ids.len(), s.channels, s.height, s.width], data)
    }

    pub fn normalize(&mut self, norm: &Normalization) {
        self.samples.iter_mut().for_each(|s| norm.apply(&mut s.image));
    }

    /// Statistics over every training image (labeled and unlabeled).
    pub fn fit_normalization(&self) -> Result<Normalization> {
        let train = self
            .labeled
            .iter()
            .chain(&self.unlabeled)
            .map(|id| self.samples[id.index()].image.as_slice());
        Normalization::fit(self.shape, train)
    }
}

/// Mirror across the vertical axis.
pub fn hflip(image: &[f64], shape: ImageShape) -> Vec<f64> {
    let mut out = Vec::with_capacity(image.len());
    for row in image.chunks(shape.width) {
        out.extend(row.iter().rev());
    }
    out
}

/// Random horizontal flip with probability 0.5.
pub fn augment(image: &[f64], shape: ImageShape, rng: &mut impl Rng) -> Vec<f64> {
    if rng.random_bool(0.5) {
        hflip(image, shape)
    } else {
        image.to_vec()
    }
}

/// Moves `k` uniformly chosen unlabeled ids into `D_L` with their true labels.
pub fn seed_initial_pool(pools: &mut SamplePools, k: usize, rng: &mut impl Rng) -> Result<()> {
    if k > pools.unlabeled.len() {
        return Err(invalid(format!(
            "initial pool of {k} exceeds {} available samples",
            pools.unlabeled.len()
        )));
    }
    let mut ids: Vec<SampleId> = pools.unlabeled.iter().copied().collect();
    let (chosen, _) = ids.partial_shuffle(rng, k);
    let picks: Vec<(SampleId, usize)> = chosen
        .iter()
        .map(|&id| (id, pools.truth[id.index()]))
        .collect();
    pools.reveal_all(&picks)
}

/// Parameters of the class-template dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub size: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Largest random translation in pixels along each axis.
    pub max_shift: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            classes: 10,
            train_per_class: 100,
            test_per_class: 50,
            channels: 3,
            size: 16,
            noise: 0.5,
            max_shift: 1,
        }
    }
}

/// Random smooth template per class: a few Gaussian bumps per channel.
pub fn synth_templates(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.size;
    (0..cfg.classes)
        .map(|_| {
            let mut img = vec![0.0; cfg.channels * s * s];
            for ch in 0..cfg.channels {
                for _ in 0..3 {
                    let cy = rng.random_range(0.0..s as f64);
                    let cx = rng.random_range(0.0..s as f64);
                    let width = rng.random_range(1.5..3.5) * s as f64 / 16.0;
                    let amp = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    for y in 0..s {
                        for x in 0..s {
                            let d2 = (y as f64 - cy) * (y as f64 - cy) + (x as f64 - cx) * (x as f64 - cx);
                            img[(ch * s + y) * s + x] += amp * libm::exp(-d2 / (2.0 * width * width));
                        }
                    }
                }
            }
            img
        })
        .collect()
}

fn shifted(img: &[f64], channels: usize, s: usize, dy: isize, dx: isize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for ch in 0..channels {
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = (y as isize - dy, x as isize - dx);
                if (0..s as isize).contains(&sy) && (0..s as isize).contains(&sx) {
                    out[(ch * s + y) * s + x] = img[(ch * s + sy as usize) * s + sx as usize];
                }
            }
        }
    }
    out
}

/// Template + translation + noise images; deterministic for a fixed seed.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(invalid("synthetic dataset needs at least 2 classes"));
    }
    if cfg.size == 0 || cfg.channels == 0 {
        return Err(invalid("synthetic dataset needs a non-empty image shape"));
    }
    let templates = synth_templates(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let s = cfg.size;
    let shift = cfg.max_shift as i64;
    let draw = |class: usize, rng: &mut ChaCha8Rng| {
        let (dy, dx) = (
            rng.random_range(-shift..=shift) as isize,
            rng.random_range(-shift..=shift) as isize,
        );
        let mut img = shifted(&templates[class], cfg.channels, s, dy, dx);
        for v in &mut img {
            let n: f64 = StandardNormal.sample(rng);
            *v += cfg.noise * n;
        }
        (img, class)
    };
    let split = |per_class: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(per_class * cfg.classes);
        for _ in 0..per_class {
            for c in 0..cfg.classes {
                out.push(draw(c, rng));
            }
        }
        out
    };
    let train = split(cfg.train_per_class, &mut rng);
    let test = split(cfg.test_per_class, &mut rng);
    Ok(Dataset {
        shape: ImageShape {
            channels: cfg.channels,
            height: s,
            width: s,
        },
        classes: cfg.classes,
        train,
        test,
    })
}

//! Accuracy, expected calibration error and silhouette scores.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{SampleId, SamplePools};
use crate::error::{invalid, Error, Result};
use crate::models::{predict_rows, GeneratorNet};

/// Default number of equal-width confidence bins.
pub const DEFAULT_ECE_BINS: usize = 15;

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    if preds.len() != labels.len() {
        return Err(invalid("accuracy: predictions and labels differ in length"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean confidence in the bin (0 when empty).
    pub confidence: f64,
    /// Fraction correct in the bin (0 when empty).
    pub accuracy: f64,
}

/// `M` equal-width bins over `[0, 1]`; bin `m` holds `[m/M, (m+1)/M)` and
/// the last bin also holds 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }
}

fn bin_index(conf: f64, m: usize) -> usize {
    let idx = libm::floor(conf * m as f64);
    if idx < 0.0 {
        0
    } else {
        (idx as usize).min(m - 1)
    }
}

/// `Σ_m |B_m|/N · |acc(B_m) − conf(B_m)|`.
pub fn ece(confidences: &[f64], correct: &[bool], m: usize) -> Result<(f64, ReliabilityBins)> {
    if m < 1 {
        return Err(invalid("ece: need at least one bin"));
    }
    if confidences.len() != correct.len() {
        return Err(invalid("ece: confidences and correctness flags differ in length"));
    }
    if confidences.is_empty() {
        return Err(Error::Empty("ece input"));
    }
    if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(invalid("ece: confidences must lie in [0, 1]"));
    }
    let mut count = vec![0usize; m];
    let mut conf_sum = vec![0.0; m];
    let mut hits = vec![0usize; m];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, m);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += usize::from(ok);
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    let bins = (0..m)
        .map(|b| {
            let (confidence, accuracy) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[b] / count[b] as f64, hits[b] as f64 / count[b] as f64)
            };
            if count[b] > 0 {
                total += count[b] as f64 / n * libm::fabs(accuracy - confidence);
            }
            Bin {
                lo: b as f64 / m as f64,
                hi: (b + 1) as f64 / m as f64,
                count: count[b],
                confidence,
                accuracy,
            }
        })
        .collect();
    Ok((total, ReliabilityBins { bins }))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Per-point silhouette `(b − a) / max(a, b)` with Euclidean distance.
/// Points in singleton clusters score 0.
pub fn silhouette_samples(points: &[Vec<f64>], clusters: &[usize]) -> Result<Vec<f64>> {
    if points.len() != clusters.len() {
        return Err(invalid("silhouette: points and labels differ in length"));
    }
    let k = clusters.iter().copied().max().map_or(0, |c| c + 1);
    let mut sizes = vec![0usize; k];
    clusters.iter().for_each(|&c| sizes[c] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(invalid("silhouette: need at least two non-empty clusters"));
    }
    let mut scores = Vec::with_capacity(points.len());
    let mut sums = vec![0.0; k];
    for (i, p) in points.iter().enumerate() {
        let own = clusters[i];
        if sizes[own] == 1 {
            scores.push(0.0);
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[clusters[j]] += distance(p, q);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        scores.push(if denom > 0.0 { (b - a) / denom } else { 0.0 });
    }
    Ok(scores)
}

/// Mean of [`silhouette_samples`].
pub fn silhouette(points: &[Vec<f64>], clusters: &[usize]) -> Result<f64> {
    let s = silhouette_samples(points, clusters)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub ece: f64,
    pub bins: ReliabilityBins,
    pub n_test: usize,
}

/// Per-sample class probabilities and penultimate embeddings.
pub type Outputs = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Generator outputs for `ids`, without augmentation, in chunks of `batch`.
pub fn infer_ids(
    gen: &GeneratorNet,
    pools: &SamplePools,
    ids: &[SampleId],
    batch: usize,
) -> Result<Outputs> {
    let mut probs = Vec::with_capacity(ids.len());
    let mut embeddings = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(batch.max(1)) {
        let out = gen.infer(pools.batch(chunk, None)?)?;
        let k = out.probs.shape()[1];
        probs.extend(out.probs.data().chunks(k).map(<[f64]>::to_vec));
        let d = out.embedding.shape()[1];
        embeddings.extend(out.embedding.data().chunks(d).map(<[f64]>::to_vec));
    }
    Ok((probs, embeddings))
}

/// Test-set accuracy and ECE with `m` bins.
pub fn evaluate(gen: &GeneratorNet, pools: &SamplePools, m: usize) -> Result<EvalReport> {
    let ids: Vec<SampleId> = pools.test().iter().copied().collect();
    if ids.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let (probs, _) = infer_ids(gen, pools, &ids, 256)?;
    let k = gen.classes();
    let flat: Vec<f64> = probs.concat();
    let probs_t = crate::tensor::Tensor::new(vec![ids.len(), k], flat)?;
    let preds = predict_rows(&probs_t);
    let labels: Vec<usize> = ids
        .iter()
        .map(|&id| pools.label(id).ok_or_else(|| invalid("test sample without label")))
        .collect::<Result<_>>()?;
    let acc = accuracy(&preds, &labels)?;
    let conf: Vec<f64> = preds
        .iter()
        .enumerate()
        .map(|(i, &p)| probs[i][p].clamp(0.0, 1.0))
        .collect();
    let correct: Vec<bool> = preds.iter().zip(&labels).map(|(p, y)| p == y).collect();
    let (e, bins) = ece(&conf, &correct, m)?;
    Ok(EvalReport {
        accuracy: acc,
        ece: e,
        bins,
        n_test: ids.len(),
    })
}

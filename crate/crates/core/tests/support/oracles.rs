//! Independent oracles for the loss formulas and the evaluation metrics.

use crtcl_core::eval::{ece, silhouette, silhouette_samples};
use crtcl_core::losses::{critic_loss, cross_entropy, generator_loss, Partition, Reduction, ScoreDistributions};
use crtcl_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub error: f64,
}

fn case(name: impl Into<String>, got: f64, want: f64) -> Case {
    Case {
        name: name.into(),
        error: (got - want).abs(),
    }
}

/// A boolean property expressed as a case: error 0 when it holds.
fn holds(name: impl Into<String>, ok: bool) -> Case {
    Case {
        name: name.into(),
        error: if ok { 0.0 } else { 1.0 },
    }
}

fn tape_ce(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let k = rows[0].len();
    let mut t = Tape::new();
    let z = t.constant(Tensor::new(vec![rows.len(), k], rows.concat()).unwrap());
    let l = cross_entropy(&mut t, z, labels, Reduction::Sum).unwrap();
    t.value(l).item().unwrap()
}

fn tape_critic(incorrect: &[f64], correct: &[f64]) -> f64 {
    let scores: Vec<f64> = incorrect.iter().chain(correct).copied().collect();
    let partition = Partition {
        incorrect: (0..incorrect.len()).collect(),
        correct: (incorrect.len()..scores.len()).collect(),
    };
    let mut t = Tape::new();
    let s = t.constant(Tensor::vector(scores));
    let l = critic_loss(&mut t, s, &partition, false).unwrap();
    t.value(l).item().unwrap()
}

fn tape_generator(scores: &[f64]) -> f64 {
    let mut t = Tape::new();
    let s = t.constant(Tensor::vector(scores.to_vec()));
    let l = generator_loss(&mut t, s, false).unwrap();
    t.value(l).item().unwrap()
}

fn random_distribution(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

pub fn cross_entropy_cases() -> Vec<Case> {
    let mut out = vec![
        case("ce/uniform-k10", tape_ce(&[vec![0.1; 10]], &[3]), 10f64.ln()),
        case("ce/perfect", tape_ce(&[vec![0.0, 1.0, 0.0]], &[1]), 0.0),
        case(
            "ce/hand-b2",
            tape_ce(&[vec![0.7, 0.3], vec![0.2, 0.8]], &[0, 0]),
            -(0.7f64.ln() + 0.2f64.ln()),
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..20 {
        let (b, k) = (rng.random_range(1..8), rng.random_range(2..12));
        let rows: Vec<Vec<f64>> = (0..b).map(|_| random_distribution(&mut rng, k)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let mut want = 0.0;
        for (row, &y) in rows.iter().zip(&labels) {
            want -= row[y].ln();
        }
        out.push(case(format!("ce/random#{i}"), tape_ce(&rows, &labels), want));
    }
    out
}

pub fn critic_loss_cases() -> Vec<Case> {
    let mut out = vec![
        case("critic/hand", tape_critic(&[0.2], &[0.8, 0.5]), -1.1),
        case("critic/one-sided", tape_critic(&[], &[1.0]), -1.0),
        case("critic/cancel", tape_critic(&[0.37], &[0.37]), 0.0),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..20 {
        let n = rng.random_range(1..16);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let wrong: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let mut want = 0.0;
        for (s, &w) in scores.iter().zip(&wrong) {
            want += if w { *s } else { -*s };
        }
        let partition = Partition {
            incorrect: (0..n).filter(|&j| wrong[j]).collect(),
            correct: (0..n).filter(|&j| !wrong[j]).collect(),
        };
        let mut t = Tape::new();
        let sv = t.constant(Tensor::vector(scores.clone()));
        let l = critic_loss(&mut t, sv, &partition, false).unwrap();
        out.push(case(format!("critic/random#{i}"), t.value(l).item().unwrap(), want));
        let dist = ScoreDistributions::split(&scores, &partition);
        out.push(case(format!("critic/split#{i}"), dist.critic_loss().unwrap(), want));
        let swapped = ScoreDistributions {
            correct_scores: dist.incorrect_scores.clone(),
            incorrect_scores: dist.correct_scores.clone(),
        };
        if !partition.is_empty() {
            out.push(case(
                format!("critic/antisymmetry#{i}"),
                swapped.critic_loss().unwrap(),
                -want,
            ));
        }
    }
    out
}

pub fn generator_loss_cases() -> Vec<Case> {
    let mut out = vec![
        case("gen/halves", tape_generator(&[0.5, 0.5]), -1.0),
        case("gen/zeros", tape_generator(&[0.0, 0.0, 0.0]), 0.0),
        case("gen/hand", tape_generator(&[1.0, -2.0, 0.5]), 0.5),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..20 {
        let n = rng.random_range(1..16);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut want = 0.0;
        for s in &scores {
            want -= s;
        }
        out.push(case(format!("gen/random#{i}"), tape_generator(&scores), want));
    }
    out
}

/// Scans each bin's interval explicitly rather than computing indices.
pub fn ece_oracle(conf: &[f64], correct: &[bool], m: usize) -> f64 {
    let n = conf.len() as f64;
    let mut total = 0.0;
    for b in 0..m {
        let lo = b as f64 / m as f64;
        let hi = (b + 1) as f64 / m as f64;
        let last = b == m - 1;
        let members: Vec<usize> = (0..conf.len())
            .filter(|&i| conf[i] >= lo && (conf[i] < hi || (last && conf[i] <= 1.0)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let k = members.len() as f64;
        let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / k;
        let avg = members.iter().map(|&i| conf[i]).sum::<f64>() / k;
        total += k / n * (acc - avg).abs();
    }
    total
}

pub fn ece_cases() -> Vec<Case> {
    let fixture_conf = [0.6, 0.7, 0.9, 0.9];
    let fixture_hit = [true, true, false, false];
    let mut out = vec![
        case("ece/perfect", ece(&[1.0; 5], &[true; 5], 15).unwrap().0, 0.0),
        case("ece/fixture-m2", ece(&fixture_conf, &fixture_hit, 2).unwrap().0, 0.275),
        case("ece/fixture-m4", ece(&fixture_conf, &fixture_hit, 4).unwrap().0, 0.625),
        case(
            "ece/overconfident",
            ece(&[1.0; 4], &[true, false, true, false], 15).unwrap().0,
            0.5,
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for i in 0..20 {
        let n = rng.random_range(1..200);
        let m = if i % 2 == 0 { 15 } else { rng.random_range(1..30) };
        let conf: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.05) { 1.0 } else { rng.random_range(0.0..1.0) })
            .collect();
        let hit: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let (got, bins) = ece(&conf, &hit, m).unwrap();
        out.push(case(format!("ece/random-m{m}#{i}"), got, ece_oracle(&conf, &hit, m)));
        out.push(holds(format!("ece/bin-total#{i}"), bins.total() == n));
        if m == 1 {
            let acc = hit.iter().filter(|&&h| h).count() as f64 / n as f64;
            let mean = conf.iter().sum::<f64>() / n as f64;
            out.push(case(format!("ece/m1#{i}"), got, (acc - mean).abs()));
        }
    }
    out
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Pairwise O(n²) silhouette, singletons scoring 0.
pub fn silhouette_oracle(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let same: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if same.is_empty() {
            continue;
        }
        let a = same.iter().map(|&j| distance(&points[i], &points[j])).sum::<f64>() / same.len() as f64;
        let mut b = f64::INFINITY;
        let mut others: Vec<usize> = labels.iter().copied().filter(|&l| l != labels[i]).collect();
        others.sort_unstable();
        others.dedup();
        for l in others {
            let members: Vec<usize> = (0..n).filter(|&j| labels[j] == l).collect();
            let d = members.iter().map(|&j| distance(&points[i], &points[j])).sum::<f64>() / members.len() as f64;
            b = b.min(d);
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

pub fn silhouette_cases() -> Vec<Case> {
    let tight = vec![vec![0.0, 0.0], vec![0.0, 0.01], vec![100.0, 0.0], vec![100.0, 0.01]];
    let same = vec![vec![1.0, 2.0]; 4];
    let mut out = vec![
        holds("silhouette/separated", silhouette(&tight, &[0, 0, 1, 1]).unwrap() > 0.99),
        case("silhouette/identical", silhouette(&same, &[0, 0, 1, 1]).unwrap(), 0.0),
        holds("silhouette/one-cluster-rejected", silhouette(&same, &[0, 0, 0, 0]).is_err()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for i in 0..10 {
        let n = 20;
        let d = rng.random_range(1..6);
        let k = rng.random_range(2..5);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        labels[0] = 0;
        labels[1] = 1;
        out.push(case(
            format!("silhouette/random#{i}"),
            silhouette(&points, &labels).unwrap(),
            silhouette_oracle(&points, &labels),
        ));
        let per_point = silhouette_samples(&points, &labels).unwrap();
        out.push(holds(
            format!("silhouette/range#{i}"),
            per_point.iter().all(|s| (-1.0..=1.0).contains(s)),
        ));
    }
    out
}

pub fn all() -> Vec<Case> {
    let mut v = cross_entropy_cases();
    v.extend(critic_loss_cases());
    v.extend(generator_loss_cases());
    v.extend(ece_cases());
    v.extend(silhouette_cases());
    v
}

//! CSV tables and JSON manifests written by experiment runs.

use std::collections::BTreeMap;
use std::path::Path;

use crtcl_core::active::{Ablation, CycleReport, Selector};
use crtcl_core::data::SampleId;
use crtcl_core::eval::ReliabilityBins;
use crtcl_core::trainer::TrainLog;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_file;

/// Bumped whenever a column is added, removed or reordered.
pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

pub const TRAIN_LOG_COLUMNS: [&str; 8] = ["cycle", "epoch", "l_ce", "l_cc", "l_g", "train_acc", "lr", "seconds"];
pub const RESULTS_COLUMNS: [&str; 8] = [
    "cycle", "n_labeled", "selector", "ablation", "seed", "test_acc", "ece", "silhouette",
];
pub const RELIABILITY_COLUMNS: [&str; 6] = ["cycle", "bin_lo", "bin_hi", "count", "conf", "acc"];
pub const AGGREGATE_COLUMNS: [&str; 11] = [
    "cycle",
    "n_labeled",
    "selector",
    "ablation",
    "trials",
    "test_acc_mean",
    "test_acc_std",
    "ece_mean",
    "ece_std",
    "silhouette_mean",
    "silhouette_std",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub cycle: usize,
    pub epoch: usize,
    pub l_ce: f64,
    pub l_cc: Option<f64>,
    pub l_g: Option<f64>,
    pub train_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub cycle: usize,
    pub n_labeled: usize,
    pub selector: Selector,
    pub ablation: Ablation,
    pub seed: u64,
    pub test_acc: f64,
    pub ece: f64,
    pub silhouette: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub cycle: usize,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    pub conf: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub cycle: usize,
    pub n_labeled: usize,
    pub selector: Selector,
    pub ablation: Ablation,
    pub trials: usize,
    pub test_acc_mean: f64,
    pub test_acc_std: f64,
    pub ece_mean: f64,
    pub ece_std: f64,
    pub silhouette_mean: Option<f64>,
    pub silhouette_std: Option<f64>,
}

pub fn train_rows(cycle: usize, log: &TrainLog) -> Vec<TrainLogRow> {
    log.records
        .iter()
        .map(|r| TrainLogRow {
            cycle,
            epoch: r.epoch,
            l_ce: r.l_ce,
            l_cc: r.l_cc,
            l_g: r.l_g,
            train_acc: r.train_acc,
            lr: r.lr,
            seconds: r.seconds,
        })
        .collect()
}

pub fn result_row(report: &CycleReport, selector: Selector, ablation: Ablation, seed: u64) -> ResultRow {
    ResultRow {
        cycle: report.cycle,
        n_labeled: report.n_labeled,
        selector,
        ablation,
        seed,
        test_acc: report.eval.accuracy,
        ece: report.eval.ece,
        silhouette: report.silhouette,
    }
}

pub fn reliability_rows(cycle: usize, bins: &ReliabilityBins) -> Vec<ReliabilityRow> {
    bins.bins
        .iter()
        .map(|b| ReliabilityRow {
            cycle,
            bin_lo: b.lo,
            bin_hi: b.hi,
            count: b.count,
            conf: b.confidence,
            acc: b.accuracy,
        })
        .collect()
}

/// Serializes rows with a header line, even when there are no rows.
pub fn csv_string<T: Serialize>(columns: &[&str], rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(columns)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_csv<T: Serialize>(path: &Path, columns: &[&str], rows: &[T]) -> Result<()> {
    write_file(path, csv_string(columns, rows)?.as_bytes())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Sample mean and standard deviation (`n − 1` denominator); the deviation
/// of a single value is 0.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// One row per `(cycle, n_labeled, selector, ablation)` across trials.
/// Silhouette statistics cover the trials where it was defined.
pub fn aggregate(rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(usize, usize, &str, &str), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.cycle, r.n_labeled, r.selector.as_str(), r.ablation.as_str()))
            .or_default()
            .push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let pick = |f: fn(&ResultRow) -> f64| g.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (acc_mean, acc_std) = mean_std(&pick(|r| r.test_acc)).expect("group is non-empty");
            let (ece_mean, ece_std) = mean_std(&pick(|r| r.ece)).expect("group is non-empty");
            let sil: Vec<f64> = g.iter().filter_map(|r| r.silhouette).collect();
            let sil = mean_std(&sil);
            AggregateRow {
                cycle: g[0].cycle,
                n_labeled: g[0].n_labeled,
                selector: g[0].selector,
                ablation: g[0].ablation,
                trials: g.len(),
                test_acc_mean: acc_mean,
                test_acc_std: acc_std,
                ece_mean,
                ece_std,
                silhouette_mean: sil.map(|s| s.0),
                silhouette_std: sil.map(|s| s.1),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSample {
    pub sample_id: SampleId,
    pub score: f64,
}

/// The samples chosen in one cycle, in selection order, with the labels
/// the oracle returned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub cycle: usize,
    pub selector: Selector,
    /// Size of `D_U` when it was ranked.
    pub candidates: usize,
    pub chosen: Vec<RankedSample>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub v: u32,
    pub seed: u64,
    pub cycles: Vec<SelectionRecord>,
}

pub fn selection_record(report: &CycleReport, selector: Selector) -> SelectionRecord {
    let score: BTreeMap<SampleId, f64> = report.selection.ranked.iter().copied().collect();
    SelectionRecord {
        cycle: report.cycle,
        selector,
        candidates: report.selection.ranked.len(),
        chosen: report
            .selection
            .chosen
            .iter()
            .map(|&id| RankedSample {
                sample_id: id,
                score: score.get(&id).copied().unwrap_or(f64::NAN),
            })
            .collect(),
        labels: report.labels.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub index: usize,
    pub seed: u64,
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub v: u32,
    pub crate_version: String,
    pub core_version: String,
    pub csv_schema_version: u32,
    pub csv_columns: BTreeMap<String, Vec<String>>,
    pub config_hash: String,
    pub config: crate::config::ExperimentConfig,
    pub trials: Vec<TrialEntry>,
}

impl RunManifest {
    pub fn new(config: &crate::config::ExperimentConfig, trials: Vec<TrialEntry>) -> Self {
        let cols = |c: &[&str]| c.iter().map(|s| s.to_string()).collect();
        let csv_columns = BTreeMap::from([
            ("train_log.csv".to_string(), cols(&TRAIN_LOG_COLUMNS)),
            ("results.csv".to_string(), cols(&RESULTS_COLUMNS)),
            ("reliability.csv".to_string(), cols(&RELIABILITY_COLUMNS)),
            ("aggregate.csv".to_string(), cols(&AGGREGATE_COLUMNS)),
        ]);
        Self {
            v: MANIFEST_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            core_version: crtcl_core::VERSION.to_string(),
            csv_schema_version: CSV_SCHEMA_VERSION,
            csv_columns,
            config_hash: config.hash(),
            config: config.clone(),
            trials,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

//! Trial orchestration: dataset preparation, the active-learning loop with
//! the simulated oracle, and the files each run leaves behind.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use crtcl_core::active::{labeled_silhouette, ActiveLearner, CycleReport, SimulatedOracle};
use crtcl_core::data::{seed_initial_pool, Dataset, Normalization, SamplePools};
use crtcl_core::eval::{evaluate, EvalReport};
use crtcl_core::trainer::{stream, TrainLog, Trainer};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, OracleMode};
use crate::error::{Error, Result};
use crate::report::{
    aggregate, reliability_rows, result_row, selection_record, train_rows, write_csv, write_json, AggregateRow,
    ResultRow, RunManifest, SelectionManifest, TrialEntry, AGGREGATE_COLUMNS, MANIFEST_VERSION,
    RELIABILITY_COLUMNS, RESULTS_COLUMNS, TRAIN_LOG_COLUMNS,
};

/// Random stream that draws the initial labeled pool.
pub const POOL_STREAM: u64 = 12;

/// Seconds since the first call.
pub fn wall_clock() -> f64 {
    static START: OnceLock<Instant> = OnceLock::new();
    START.get_or_init(Instant::now).elapsed().as_secs_f64()
}

/// Normalised pools with nothing labeled yet.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub pools: SamplePools,
    pub normalization: Normalization,
}

pub fn prepare(ds: Dataset) -> Result<Prepared> {
    let mut pools = SamplePools::from_dataset(ds)?;
    let normalization = pools.fit_normalization()?;
    pools.normalize(&normalization);
    Ok(Prepared { pools, normalization })
}

impl Prepared {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        prepare(cfg.dataset.load()?)
    }

    /// A copy with `k` samples labeled, drawn from the trial's pool stream.
    pub fn seeded(&self, k: usize, seed: u64) -> Result<SamplePools> {
        let mut pools = self.pools.clone();
        if k > pools.train_len() {
            return Err(Error::Config(format!(
                "active.initial_k: {k} exceeds the {} training samples of the dataset",
                pools.train_len()
            )));
        }
        seed_initial_pool(&mut pools, k, &mut stream(seed, POOL_STREAM))?;
        Ok(pools)
    }
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub index: usize,
    pub seed: u64,
    pub dir: PathBuf,
    pub rows: Vec<ResultRow>,
    pub reports: Vec<CycleReport>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out: PathBuf,
    pub trials: Vec<TrialOutcome>,
    pub aggregate: Vec<AggregateRow>,
}

pub fn trial_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("trial-{index}"))
}

fn learner(cfg: &ExperimentConfig, pools: &SamplePools, seed: u64) -> Result<ActiveLearner> {
    let gen_cfg = cfg.model.generator(pools.shape(), pools.classes());
    let learner = ActiveLearner::new(gen_cfg, cfg.train.clone(), cfg.active.clone(), seed)?;
    Ok(if cfg.record_timing {
        learner.with_clock(wall_clock)
    } else {
        learner
    })
}

/// Runs every cycle of trial `index` and writes its directory:
/// `results.csv`, `train_log.csv`, `reliability.csv`, `selection.json` and
/// `checkpoint.json` holding the last cycle's networks.
pub fn run_trial(cfg: &ExperimentConfig, prepared: &Prepared, index: usize) -> Result<TrialOutcome> {
    let seed = cfg.trial_seed(index);
    let al = cfg.active.clone().normalized();
    let mut pools = prepared.seeded(al.initial_k, seed)?;
    let mut learner = learner(cfg, &pools, seed)?;
    let mut reports = Vec::with_capacity(al.cycles);
    for _ in 0..al.cycles {
        reports.push(learner.step(&mut pools, &mut SimulatedOracle)?);
    }

    let dir = trial_dir(&cfg.out, index);
    let rows: Vec<ResultRow> = reports
        .iter()
        .map(|r| result_row(r, al.selector, al.ablation, seed))
        .collect();
    let train: Vec<_> = reports.iter().flat_map(|r| train_rows(r.cycle, &r.log)).collect();
    let bins: Vec<_> = reports
        .iter()
        .flat_map(|r| reliability_rows(r.cycle, &r.eval.bins))
        .collect();
    write_csv(&dir.join("results.csv"), &RESULTS_COLUMNS, &rows)?;
    write_csv(&dir.join("train_log.csv"), &TRAIN_LOG_COLUMNS, &train)?;
    write_csv(&dir.join("reliability.csv"), &RELIABILITY_COLUMNS, &bins)?;
    let selections = SelectionManifest {
        v: MANIFEST_VERSION,
        seed,
        cycles: reports.iter().map(|r| selection_record(r, al.selector)).collect(),
    };
    write_json(&dir.join("selection.json"), &selections)?;
    if let Some((gen, critic)) = learner.models() {
        let last = learner.cycle().saturating_sub(1);
        Checkpoint::new(gen, critic, &prepared.normalization, last, seed).save(&dir.join("checkpoint.json"))?;
    }
    Ok(TrialOutcome {
        index,
        seed,
        dir,
        rows,
        reports,
    })
}

/// All trials of `cfg`, then `aggregate.csv`, `manifest.json` and the
/// effective `config.toml` in the output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    if cfg.oracle == OracleMode::Service {
        return Err(Error::Config(
            "oracle: \"service\" collects labels over HTTP; start it with the `serve` subcommand".into(),
        ));
    }
    let prepared = Prepared::load(cfg)?;
    let trials: Vec<TrialOutcome> = if cfg.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..cfg.trials)
                .map(|i| {
                    let prepared = &prepared;
                    s.spawn(move || run_trial(cfg, prepared, i))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("trial thread panicked"))
                .collect::<Result<_>>()
        })?
    } else {
        (0..cfg.trials)
            .map(|i| run_trial(cfg, &prepared, i))
            .collect::<Result<_>>()?
    };

    let all_rows: Vec<ResultRow> = trials.iter().flat_map(|t| t.rows.clone()).collect();
    let agg = aggregate(&all_rows);
    write_csv(&cfg.out.join("aggregate.csv"), &AGGREGATE_COLUMNS, &agg)?;
    let entries = trials
        .iter()
        .map(|t| TrialEntry {
            index: t.index,
            seed: t.seed,
            dir: format!("trial-{}", t.index),
        })
        .collect();
    write_json(&cfg.out.join("manifest.json"), &RunManifest::new(cfg, entries))?;
    crate::io::write_file(&cfg.out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    Ok(RunSummary {
        out: cfg.out.clone(),
        trials,
        aggregate: agg,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub eval: EvalReport,
    pub silhouette: Option<f64>,
    pub log: TrainLog,
}

/// One training run on an initial pool of `active.initial_k` samples with
/// the losses selected by `active.ablation`. Writes the training log, the
/// reliability table, a one-row results table and a checkpoint to `out`.
pub fn train_once(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let prepared = Prepared::load(cfg)?;
    let seed = cfg.seed;
    let al = cfg.active.clone().normalized();
    let pools = prepared.seeded(al.initial_k, seed)?;
    let mut train_cfg = al.apply_to(&cfg.train);
    train_cfg.seed = seed;
    let gen_cfg = cfg.model.generator(pools.shape(), pools.classes());
    let mut trainer = Trainer::from_seed(gen_cfg, train_cfg)?;
    if cfg.record_timing {
        trainer = trainer.with_clock(wall_clock);
    }
    let log = trainer.fit(&pools)?;
    let (gen, critic) = trainer.into_parts();
    let eval = evaluate(&gen, &pools, al.ece_bins)?;
    let silhouette = labeled_silhouette(&gen, &pools, al.score_batch)?;

    let out = &cfg.out;
    write_csv(&out.join("train_log.csv"), &TRAIN_LOG_COLUMNS, &train_rows(0, &log))?;
    write_csv(&out.join("reliability.csv"), &RELIABILITY_COLUMNS, &reliability_rows(0, &eval.bins))?;
    let row = ResultRow {
        cycle: 0,
        n_labeled: pools.labeled().len(),
        selector: al.selector,
        ablation: al.ablation,
        seed,
        test_acc: eval.accuracy,
        ece: eval.ece,
        silhouette,
    };
    write_csv(&out.join("results.csv"), &RESULTS_COLUMNS, &[row])?;
    Checkpoint::new(&gen, &critic, &prepared.normalization, 0, seed).save(&out.join("checkpoint.json"))?;
    Ok(TrainOutcome { eval, silhouette, log })
}

/// Test-split metrics of a checkpoint on the configured dataset, using the
/// normalisation stored with the checkpoint. Writes `reliability.csv` to
/// `out`.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (gen, _) = ckpt.networks()?;
    let mut pools = SamplePools::from_dataset(cfg.dataset.load()?)?;
    if pools.shape() != gen.config().input || pools.classes() != gen.classes() {
        return Err(Error::Checkpoint(format!(
            "{} expects {:?} images with {} classes, the dataset has {:?} with {}",
            checkpoint.display(),
            gen.config().input,
            gen.classes(),
            pools.shape(),
            pools.classes()
        )));
    }
    if ckpt.normalization.mean.len() != pools.shape().channels {
        return Err(Error::Checkpoint("normalization channel count does not match the dataset".into()));
    }
    pools.normalize(&ckpt.normalization);
    let eval = evaluate(&gen, &pools, cfg.active.ece_bins)?;
    write_csv(
        &cfg.out.join("reliability.csv"),
        &RELIABILITY_COLUMNS,
        &reliability_rows(ckpt.cycle, &eval.bins),
    )?;
    Ok(eval)
}

//! Pool-based active learning driven by the critic.
//!
//! Each cycle retrains, evaluates on the test set, scores `D_U`, selects the
//! `t` samples the critic considers least likely to be classified correctly,
//! asks an [`Oracle`] for their labels and moves them into `D_L`.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SampleId, SamplePools};
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate, infer_ids, silhouette, EvalReport, DEFAULT_ECE_BINS};
use crate::models::{CriticNet, GeneratorConfig, GeneratorNet};
use crate::trainer::{stream, TrainConfig, TrainLog, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Lowest critic score first.
    Critic,
    Random,
    /// Highest predictive entropy first.
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Critic and semi-supervised losses, critic-driven selection.
    Full,
    /// Critic and semi-supervised losses, random selection.
    AuxLossOnly,
    /// Critic trained for scoring only; the generator sees cross-entropy only.
    SelectionOnly,
    /// Plain cross-entropy, no critic.
    Baseline,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::AuxLossOnly => "aux_loss_only",
            Ablation::SelectionOnly => "selection_only",
            Ablation::Baseline => "baseline",
        }
    }
}

impl Selector {
    pub fn as_str(self) -> &'static str {
        match self {
            Selector::Critic => "critic",
            Selector::Random => "random",
            Selector::Entropy => "entropy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ALConfig {
    /// Size `k` of the random initial labeled pool.
    pub initial_k: usize,
    /// Samples `t` labeled per cycle.
    pub budget: usize,
    pub cycles: usize,
    pub selector: Selector,
    pub ablation: Ablation,
    /// Re-initialise both networks every cycle instead of warm-starting.
    pub retrain_from_scratch: bool,
    pub ece_bins: usize,
    /// Batch size for inference-only passes.
    pub score_batch: usize,
}

impl Default for ALConfig {
    fn default() -> Self {
        Self {
            initial_k: 1200,
            budget: 200,
            cycles: 7,
            selector: Selector::Critic,
            ablation: Ablation::Full,
            retrain_from_scratch: true,
            ece_bins: DEFAULT_ECE_BINS,
            score_batch: 256,
        }
    }
}

impl ALConfig {
    /// Applies mode couplings: the auxiliary-loss-only ablation always
    /// selects at random.
    pub fn normalized(mut self) -> Self {
        if self.ablation == Ablation::AuxLossOnly {
            self.selector = Selector::Random;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(invalid("active: budget must be at least 1"));
        }
        if self.cycles == 0 {
            return Err(invalid("active: cycles must be at least 1"));
        }
        if self.ece_bins == 0 {
            return Err(invalid("active: ece_bins must be at least 1"));
        }
        if self.ablation == Ablation::AuxLossOnly && self.selector != Selector::Random {
            return Err(invalid("active: aux_loss_only requires the random selector"));
        }
        if self.ablation == Ablation::Baseline && self.selector == Selector::Critic {
            return Err(invalid("active: the critic selector needs a trained critic"));
        }
        Ok(())
    }

    /// Loss switches implied by the ablation.
    pub fn apply_to(&self, train: &TrainConfig) -> TrainConfig {
        let mut t = train.clone();
        let (critic, semi) = match self.ablation {
            Ablation::Full | Ablation::AuxLossOnly => (true, true),
            Ablation::SelectionOnly => (true, false),
            Ablation::Baseline => (false, false),
        };
        t.use_critic_loss = critic;
        t.use_semi_supervised = semi;
        t
    }
}

/// Candidates in selection order with their scores, and the chosen prefix.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionResult {
    pub ranked: Vec<(SampleId, f64)>,
    pub chosen: Vec<SampleId>,
}

/// Critic score `p_u` for every unlabeled sample, in id order.
pub fn score_unlabeled(
    gen: &GeneratorNet,
    critic: &CriticNet,
    pools: &SamplePools,
    batch: usize,
) -> Result<Vec<(SampleId, f64)>> {
    let ids: Vec<SampleId> = pools.unlabeled().iter().copied().collect();
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(batch.max(1)) {
        let inf = gen.infer(pools.batch(chunk, None)?)?;
        let scores = critic.score(&inf.features)?;
        out.extend(chunk.iter().copied().zip(scores));
    }
    Ok(out)
}

/// The `t` lowest scores, ties broken by ascending id.
pub fn select(scores: &[(SampleId, f64)], t: usize) -> SelectionResult {
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let chosen = ranked.iter().take(t).map(|&(id, _)| id).collect();
    SelectionResult { ranked, chosen }
}

/// Shannon entropy `−Σ z log z` in nats.
pub fn entropy(z: &[f64]) -> f64 {
    -z.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * libm::log(p))
        .sum::<f64>()
}

/// The `t` unlabeled samples with the highest predictive entropy.
pub fn entropy_selector(
    gen: &GeneratorNet,
    pools: &SamplePools,
    t: usize,
    batch: usize,
) -> Result<SelectionResult> {
    let ids: Vec<SampleId> = pools.unlabeled().iter().copied().collect();
    let (probs, _) = infer_ids(gen, pools, &ids, batch)?;
    let mut ranked: Vec<(SampleId, f64)> = ids
        .iter()
        .copied()
        .zip(probs.iter().map(|z| entropy(z)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let chosen = ranked.iter().take(t).map(|&(id, _)| id).collect();
    Ok(SelectionResult { ranked, chosen })
}

/// `t` unlabeled samples drawn uniformly without replacement. Each ranked
/// entry carries its draw position as the score.
pub fn random_selector(pools: &SamplePools, t: usize, rng: &mut ChaCha8Rng) -> SelectionResult {
    let mut ids: Vec<SampleId> = pools.unlabeled().iter().copied().collect();
    ids.shuffle(rng);
    let ranked: Vec<(SampleId, f64)> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i as f64))
        .collect();
    let chosen = ids.into_iter().take(t).collect();
    SelectionResult { ranked, chosen }
}

/// Supplies labels for selected samples.
pub trait Oracle {
    /// One label per id, in order. An `Err` aborts the cycle with the pools
    /// untouched.
    fn label(&mut self, pools: &SamplePools, ids: &[SampleId]) -> core::result::Result<Vec<usize>, String>;
}

/// Reveals the hidden ground truth.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimulatedOracle;

impl Oracle for SimulatedOracle {
    fn label(&mut self, pools: &SamplePools, ids: &[SampleId]) -> core::result::Result<Vec<usize>, String> {
        ids.iter()
            .map(|&id| {
                pools
                    .ground_truth(id)
                    .ok_or_else(|| alloc::format!("no ground truth for sample {id}"))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    /// `|D_L|` the models of this cycle were trained on.
    pub n_labeled: usize,
    pub eval: EvalReport,
    /// Mean silhouette of the updated labeled set under this cycle's
    /// generator; absent with fewer than two classes.
    pub silhouette: Option<f64>,
    pub selection: SelectionResult,
    pub labels: Vec<usize>,
    pub log: TrainLog,
}

/// Stream id for the random selector.
pub const SELECT_STREAM: u64 = 11;

/// Training seed for cycle `cycle` of a trial seeded with `seed`.
pub fn cycle_seed(seed: u64, cycle: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(cycle as u64 + 1)
}

/// Stateful driver of the cycle; a failed cycle can be retried by calling
/// [`ActiveLearner::step`] again.
#[derive(Debug, Clone)]
pub struct ActiveLearner {
    gen_cfg: GeneratorConfig,
    train_cfg: TrainConfig,
    al: ALConfig,
    seed: u64,
    cycle: usize,
    select_rng: ChaCha8Rng,
    models: Option<(GeneratorNet, CriticNet)>,
    clock: Option<fn() -> f64>,
}

impl ActiveLearner {
    pub fn new(gen_cfg: GeneratorConfig, train_cfg: TrainConfig, al: ALConfig, seed: u64) -> Result<Self> {
        let al = al.normalized();
        al.validate()?;
        gen_cfg.validate()?;
        let train_cfg = al.apply_to(&train_cfg);
        train_cfg.validate()?;
        Ok(Self {
            gen_cfg,
            train_cfg,
            al,
            seed,
            cycle: 0,
            select_rng: stream(seed, SELECT_STREAM),
            models: None,
            clock: None,
        })
    }

    pub fn with_clock(mut self, clock: fn() -> f64) -> Self {
        self.clock = Some(clock);
        self
    }

    pub fn cycle(&self) -> usize {
        self.cycle
    }

    pub fn config(&self) -> &ALConfig {
        &self.al
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train_cfg
    }

    /// Models trained in the most recent cycle.
    pub fn models(&self) -> Option<&(GeneratorNet, CriticNet)> {
        self.models.as_ref()
    }

    /// Trains on the current `D_L` and returns the trained networks and log.
    pub fn retrain(&self, pools: &SamplePools) -> Result<(GeneratorNet, CriticNet, TrainLog)> {
        let mut cfg = self.train_cfg.clone();
        cfg.seed = cycle_seed(self.seed, self.cycle);
        let mut trainer = match (&self.models, self.al.retrain_from_scratch) {
            (Some((g, c)), false) => Trainer::new(g.clone(), c.clone(), cfg)?,
            _ => Trainer::from_seed(self.gen_cfg.clone(), cfg)?,
        };
        if let Some(clock) = self.clock {
            trainer = trainer.with_clock(clock);
        }
        let log = trainer.fit(pools)?;
        let (g, c) = trainer.into_parts();
        Ok((g, c, log))
    }

    /// Ranks `D_U` with the configured selector.
    pub fn select(
        &mut self,
        gen: &GeneratorNet,
        critic: &CriticNet,
        pools: &SamplePools,
    ) -> Result<SelectionResult> {
        let t = self.al.budget;
        Ok(match self.al.selector {
            Selector::Critic => select(&score_unlabeled(gen, critic, pools, self.al.score_batch)?, t),
            Selector::Entropy => entropy_selector(gen, pools, t, self.al.score_batch)?,
            Selector::Random => random_selector(pools, t, &mut self.select_rng),
        })
    }

    /// Adopts networks from [`ActiveLearner::retrain`] and moves to the next
    /// cycle. For drivers that collect labels outside [`ActiveLearner::step`].
    pub fn complete_cycle(&mut self, gen: GeneratorNet, critic: CriticNet) {
        self.models = Some((gen, critic));
        self.cycle += 1;
    }

    /// Retrain → evaluate → select → label → update pools.
    pub fn step(&mut self, pools: &mut SamplePools, oracle: &mut dyn Oracle) -> Result<CycleReport> {
        let (gen, critic, log) = self.retrain(pools)?;
        let n_labeled = pools.labeled().len();
        let eval = evaluate(&gen, pools, self.al.ece_bins)?;
        let rng_before = self.select_rng.clone();
        let selection = self.select(&gen, &critic, pools)?;
        let labels = match oracle.label(pools, &selection.chosen) {
            Ok(l) if l.len() == selection.chosen.len() => l,
            Ok(l) => {
                self.select_rng = rng_before;
                return Err(Error::Oracle {
                    cycle: self.cycle,
                    reason: alloc::format!("expected {} labels, got {}", selection.chosen.len(), l.len()),
                });
            }
            Err(reason) => {
                self.select_rng = rng_before;
                return Err(Error::Oracle {
                    cycle: self.cycle,
                    reason,
                });
            }
        };
        let pairs: Vec<(SampleId, usize)> = selection.chosen.iter().copied().zip(labels.iter().copied()).collect();
        pools.reveal_all(&pairs)?;
        pools.check_invariants()?;

        let silhouette = labeled_silhouette(&gen, pools, self.al.score_batch)?;
        let report = CycleReport {
            cycle: self.cycle,
            n_labeled,
            eval,
            silhouette,
            selection,
            labels,
            log,
        };
        self.complete_cycle(gen, critic);
        Ok(report)
    }
}

/// Silhouette of the labeled set's penultimate embeddings grouped by class.
/// High values mean selections sit close to same-class labeled data.
pub fn labeled_silhouette(gen: &GeneratorNet, pools: &SamplePools, batch: usize) -> Result<Option<f64>> {
    let ids: Vec<SampleId> = pools.labeled().iter().copied().collect();
    let labels: Vec<usize> = ids
        .iter()
        .map(|&id| pools.label(id).ok_or(Error::Empty("label of labeled sample")))
        .collect::<Result<_>>()?;
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Ok(None);
    }
    let (_, embeddings) = infer_ids(gen, pools, &ids, batch)?;
    silhouette(&embeddings, &labels).map(Some)
}

/// Runs `al.cycles` cycles from the current pool state.
pub fn run_cycles(
    pools: &mut SamplePools,
    gen_cfg: &GeneratorConfig,
    train_cfg: &TrainConfig,
    al: &ALConfig,
    oracle: &mut dyn Oracle,
    seed: u64,
) -> Result<Vec<CycleReport>> {
    let mut learner = ActiveLearner::new(gen_cfg.clone(), train_cfg.clone(), al.clone(), seed)?;
    (0..learner.config().cycles)
        .map(|_| learner.step(pools, oracle))
        .collect()
}

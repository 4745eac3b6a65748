//! The interleaved generator / critic training loop.
//!
//! Per labeled batch:
//! 1. forward the generator and compute cross-entropy;
//! 2. split the batch into correctly and incorrectly classified samples;
//! 3. score detached features with the critic and form the critic loss;
//! 4. step the generator on the cross-entropy gradient;
//! 5. step the critic on the critic-loss gradient, then clip its weights;
//! 6. before the stop epoch, step the generator on `γ ·` the critic's
//!    assessment of an unlabeled batch, with gradient entering only through
//!    the deepest feature tap.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SampleId, SamplePools};
use crate::error::{invalid, Error, Result};
use crate::losses::{critic_loss, cross_entropy, generator_loss, Partition, Reduction};
use crate::models::{CriticConfig, CriticNet, GeneratorConfig, GeneratorNet};
use crate::optim::{schedule_lr, AdamW, AdamWConfig, SgdMomentum, StepSchedule};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total epochs `E`.
    pub epochs: usize,
    /// The semi-supervised pass runs for epochs `< stop_epoch` (0-based).
    pub stop_epoch: usize,
    /// Generator SGD learning rate.
    pub lr: f64,
    pub momentum: f64,
    /// Critic AdamW settings.
    pub critic: AdamWConfig,
    /// Weight `γ` of the semi-supervised loss.
    pub gamma: f64,
    /// Critic weight-clipping bound `c`.
    pub clip: f64,
    pub batch_size: usize,
    pub schedule: StepSchedule,
    /// Apply the step schedule to the critic as well.
    pub decay_critic: bool,
    pub use_critic_loss: bool,
    pub use_semi_supervised: bool,
    pub log_variant: bool,
    /// Batch reduction shared by the cross-entropy and semi-supervised
    /// losses, so `gamma` stays their relative weight.
    pub reduction: Reduction,
    /// Random horizontal flips on training batches.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            stop_epoch: 130,
            lr: 0.1,
            momentum: 0.9,
            critic: AdamWConfig::default(),
            gamma: 0.04,
            clip: 0.01,
            batch_size: 128,
            schedule: StepSchedule::default(),
            decay_critic: false,
            use_critic_loss: true,
            use_semi_supervised: true,
            log_variant: false,
            reduction: Reduction::Mean,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The full-scale schedule shrunk proportionally to 50 epochs, with a
    /// learning rate suited to the small normalisation-free CNN.
    pub fn desk() -> Self {
        Self {
            epochs: 50,
            lr: 0.01,
            stop_epoch: 33,
            schedule: StepSchedule {
                drop_epoch: 40,
                factor: 0.1,
            },
            ..Self::default()
        }
    }

    /// Plain cross-entropy training: no critic, no semi-supervised pass.
    pub fn plain(mut self) -> Self {
        self.use_critic_loss = false;
        self.use_semi_supervised = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stop_epoch > self.epochs {
            return Err(invalid("train: stop_epoch must not exceed epochs"));
        }
        if !(self.gamma >= 0.0) {
            return Err(invalid("train: gamma must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(invalid("train: batch_size must be at least 1"));
        }
        if !(self.clip > 0.0) {
            return Err(invalid("train: clip must be positive"));
        }
        if self.use_semi_supervised && !self.use_critic_loss {
            return Err(invalid("train: the semi-supervised loss needs a trained critic"));
        }
        Ok(())
    }
}

/// Loss values for one optimisation step on one labeled batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub l_ce: f64,
    pub l_cc: Option<f64>,
    pub l_g: Option<f64>,
    pub correct: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_cc: Option<f64>,
    /// Unweighted semi-supervised loss; absent when the pass did not run.
    pub l_g: Option<f64>,
    pub train_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

/// Independent random streams derived from one seed, so that switching the
/// critic on or off never perturbs the generator's batches or flips.
#[derive(Debug, Clone)]
struct Streams {
    batches: ChaCha8Rng,
    flips: ChaCha8Rng,
    unlabeled: ChaCha8Rng,
}

/// Stream ids of [`ChaCha8Rng`] seeded with the training seed.
pub const BATCH_STREAM: u64 = 1;
pub const FLIP_STREAM: u64 = 2;
pub const UNLABELED_STREAM: u64 = 3;
/// XOR-ed into the training seed to initialise the critic.
pub const CRITIC_SEED_SALT: u64 = 0xc217_1c00;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            batches: stream(seed, BATCH_STREAM),
            flips: stream(seed, FLIP_STREAM),
            unlabeled: stream(seed, UNLABELED_STREAM),
        }
    }
}

fn finite(value: f64, loss: &'static str, epoch: usize, batch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { loss, epoch, batch })
    }
}

/// Owns both networks, their optimisers and the random streams.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub gen: GeneratorNet,
    pub critic: CriticNet,
    cfg: TrainConfig,
    gen_opt: SgdMomentum,
    critic_opt: AdamW,
    streams: Streams,
    clock: Option<fn() -> f64>,
    batch_index: usize,
}

impl Trainer {
    pub fn new(gen: GeneratorNet, critic: CriticNet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let gen_opt = SgdMomentum::new(&gen.params, cfg.lr, cfg.momentum)?;
        let critic_opt = AdamW::new(&critic.params, cfg.critic)?;
        Ok(Self {
            streams: Streams::new(cfg.seed),
            gen,
            critic,
            cfg,
            gen_opt,
            critic_opt,
            clock: None,
            batch_index: 0,
        })
    }

    /// Fresh networks initialised from `cfg.seed`.
    pub fn from_seed(gen_cfg: GeneratorConfig, cfg: TrainConfig) -> Result<Self> {
        let critic_cfg = CriticConfig::for_generator(&gen_cfg, cfg.clip)?;
        let gen = GeneratorNet::new(gen_cfg, cfg.seed)?;
        let critic = CriticNet::new(critic_cfg, cfg.seed ^ CRITIC_SEED_SALT)?;
        Self::new(gen, critic, cfg)
    }

    /// A monotonic seconds counter used to time epochs.
    pub fn with_clock(mut self, clock: fn() -> f64) -> Self {
        self.clock = Some(clock);
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn into_parts(self) -> (GeneratorNet, CriticNet) {
        (self.gen, self.critic)
    }

    pub fn generator_lr(&self, epoch: usize) -> f64 {
        schedule_lr(epoch, self.cfg.lr, &self.cfg.schedule)
    }

    pub fn critic_lr(&self, epoch: usize) -> f64 {
        if self.cfg.decay_critic {
            schedule_lr(epoch, self.cfg.critic.lr, &self.cfg.schedule)
        } else {
            self.cfg.critic.lr
        }
    }

    fn labels(pools: &SamplePools, ids: &[SampleId]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| {
                pools
                    .label(id)
                    .ok_or_else(|| invalid(alloc::format!("sample {id} has no label")))
            })
            .collect()
    }

    /// One pass of the per-batch procedure. `unlabeled` feeds the
    /// semi-supervised step, which runs only when enabled, non-empty and
    /// `epoch < stop_epoch`.
    pub fn train_batch(
        &mut self,
        pools: &SamplePools,
        labeled: &[SampleId],
        unlabeled: Option<&[SampleId]>,
        epoch: usize,
    ) -> Result<BatchStats> {
        let batch_no = self.batch_index;
        self.batch_index += 1;
        let lr = self.generator_lr(epoch);
        let critic_lr = self.critic_lr(epoch);
        let flips = self.cfg.augment.then_some(&mut self.streams.flips);
        let x = pools.batch(labeled, flips)?;
        let y = Self::labels(pools, labeled)?;

        let mut tape = Tape::new();
        let gen_vars = self.gen.bind(&mut tape, true);
        let xv = tape.constant(x);
        let pass = self.gen.forward(&mut tape, &gen_vars, xv)?;
        let ce = cross_entropy(&mut tape, pass.probs, &y, self.cfg.reduction)?;
        let l_ce = finite(tape.value(ce).item()?, "cross_entropy", epoch, batch_no)?;
        let partition = Partition::new(tape.value(pass.probs), &y)?;

        let critic_step: Option<(Var, Vec<Var>)> = if self.cfg.use_critic_loss {
            let detached: Vec<Var> = pass.features.iter().map(|&f| tape.detach(f)).collect();
            let critic_vars = self.critic.bind(&mut tape, true);
            let scores = self.critic.forward(&mut tape, &critic_vars, &detached)?;
            let loss = critic_loss(&mut tape, scores, &partition, self.cfg.log_variant)?;
            Some((loss, critic_vars))
        } else {
            None
        };

        tape.backward(ce)?;
        self.gen.accumulate_grads(&tape, &gen_vars);
        self.gen_opt.step_with_lr(&mut self.gen.params, lr)?;
        self.gen.params.zero_grads();

        let mut l_cc = None;
        if let Some((loss, critic_vars)) = critic_step {
            l_cc = Some(finite(tape.value(loss).item()?, "critic", epoch, batch_no)?);
            tape.zero_grads();
            tape.backward(loss)?;
            self.critic.accumulate_grads(&tape, &critic_vars);
            self.critic_opt.step_with_lr(&mut self.critic.params, critic_lr)?;
            self.critic.params.zero_grads();
            self.critic.clip()?;
        }

        let mut l_g = None;
        let semi = self.cfg.use_semi_supervised && epoch < self.cfg.stop_epoch;
        if let Some(u) = unlabeled.filter(|u| semi && !u.is_empty()) {
            l_g = Some(self.semi_supervised_step(pools, u, lr, epoch, batch_no)?);
        }

        Ok(BatchStats {
            l_ce,
            l_cc,
            l_g,
            correct: partition.correct.len(),
            size: labeled.len(),
        })
    }

    fn semi_supervised_step(
        &mut self,
        pools: &SamplePools,
        ids: &[SampleId],
        lr: f64,
        epoch: usize,
        batch_no: usize,
    ) -> Result<f64> {
        let flips = self.cfg.augment.then_some(&mut self.streams.flips);
        let x = pools.batch(ids, flips)?;
        let mut tape = Tape::new();
        let gen_vars = self.gen.bind(&mut tape, true);
        let critic_vars = self.critic.bind(&mut tape, false);
        let xv = tape.constant(x);
        let pass = self.gen.forward(&mut tape, &gen_vars, xv)?;
        let deepest = pass.features.len() - 1;
        let routed: Vec<Var> = pass
            .features
            .iter()
            .enumerate()
            .map(|(i, &f)| if i == deepest { f } else { tape.detach(f) })
            .collect();
        let scores = self.critic.forward(&mut tape, &critic_vars, &routed)?;
        let mut loss = generator_loss(&mut tape, scores, self.cfg.log_variant)?;
        if self.cfg.reduction == Reduction::Mean {
            loss = tape.scale(loss, 1.0 / ids.len() as f64)?;
        }
        let l_g = finite(tape.value(loss).item()?, "generator", epoch, batch_no)?;
        let weighted = tape.scale(loss, self.cfg.gamma)?;
        tape.backward(weighted)?;
        self.gen.accumulate_grads(&tape, &gen_vars);
        self.gen_opt.step_with_lr(&mut self.gen.params, lr)?;
        self.gen.params.zero_grads();
        Ok(l_g)
    }

    /// One epoch over `D_L` in shuffled batches. Unlabeled batches are drawn
    /// without replacement from a fresh shuffle of `D_U`, wrapping around
    /// (with a reshuffle) if `D_U` runs out first.
    pub fn train_epoch(&mut self, pools: &SamplePools, epoch: usize) -> Result<EpochRecord> {
        let start = self.clock.map(|c| c());
        let mut labeled: Vec<SampleId> = pools.labeled().iter().copied().collect();
        if labeled.is_empty() {
            return Err(Error::Empty("labeled pool"));
        }
        labeled.shuffle(&mut self.streams.batches);
        let semi = self.cfg.use_semi_supervised && epoch < self.cfg.stop_epoch;
        let mut unlabeled: Vec<SampleId> = if semi {
            pools.unlabeled().iter().copied().collect()
        } else {
            Vec::new()
        };
        if !unlabeled.is_empty() {
            unlabeled.shuffle(&mut self.streams.unlabeled);
        }
        let mut cursor = 0;
        let bs = self.cfg.batch_size;

        let (mut ce_sum, mut cc_sum, mut g_sum) = (0.0, 0.0, 0.0);
        let (mut batches, mut cc_n, mut g_n, mut correct) = (0usize, 0usize, 0usize, 0usize);
        for chunk in labeled.chunks(bs) {
            let u_batch: Option<Vec<SampleId>> = (!unlabeled.is_empty()).then(|| {
                let take = bs.min(unlabeled.len());
                if cursor + take > unlabeled.len() {
                    unlabeled.shuffle(&mut self.streams.unlabeled);
                    cursor = 0;
                }
                let out = unlabeled[cursor..cursor + take].to_vec();
                cursor += take;
                out
            });
            let stats = self.train_batch(pools, chunk, u_batch.as_deref(), epoch)?;
            ce_sum += stats.l_ce;
            batches += 1;
            correct += stats.correct;
            if let Some(v) = stats.l_cc {
                cc_sum += v;
                cc_n += 1;
            }
            if let Some(v) = stats.l_g {
                g_sum += v;
                g_n += 1;
            }
        }
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        Ok(EpochRecord {
            epoch,
            l_ce: ce_sum / batches as f64,
            l_cc: mean(cc_sum, cc_n),
            l_g: mean(g_sum, g_n),
            train_acc: correct as f64 / labeled.len() as f64,
            lr: self.generator_lr(epoch),
            seconds: match (self.clock, start) {
                (Some(c), Some(s)) => c() - s,
                _ => 0.0,
            },
        })
    }

    /// Runs every epoch in order.
    pub fn fit(&mut self, pools: &SamplePools) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        for epoch in 0..self.cfg.epochs {
            log.records.push(self.train_epoch(pools, epoch)?);
        }
        Ok(log)
    }
}

/// Trains the given networks on `pools` and returns them with the log.
pub fn fit(
    gen: GeneratorNet,
    critic: CriticNet,
    pools: &SamplePools,
    cfg: TrainConfig,
) -> Result<(GeneratorNet, CriticNet, TrainLog)> {
    let mut trainer = Trainer::new(gen, critic, cfg)?;
    let log = trainer.fit(pools)?;
    let (gen, critic) = trainer.into_parts();
    Ok((gen, critic, log))
}

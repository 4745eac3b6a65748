//! Cross-entropy, the Wasserstein critic loss and the generator's
//! semi-supervised loss.
//!
//! The critic losses use raw critic scores (the Kantorovich–Rubinstein dual
//! form). Passing `log_variant = true` switches both to a sigmoid + log
//! formulation instead.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::predict;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Clamp applied inside the cross-entropy logarithm.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// `−Σ_i log z[i, y_i]` (or its batch mean).
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
    let shape = tape.shape(probs);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: shape.to_vec(),
            right: alloc::vec![labels.len()],
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("cross_entropy batch"));
    }
    let logp = tape.log(probs, LOG_EPS)?;
    let picked = tape.gather(logp, labels)?;
    let total = match reduction {
        Reduction::Sum => tape.sum(picked)?,
        Reduction::Mean => tape.mean(picked)?,
    };
    tape.scale(total, -1.0)
}

/// Batch positions split by whether the argmax prediction equals the label.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Partition {
    pub correct: Vec<usize>,
    pub incorrect: Vec<usize>,
}

impl Partition {
    pub fn new(probs: &Tensor, labels: &[usize]) -> Result<Self> {
        if probs.ndim() != 2 || probs.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "partition",
                left: probs.shape().to_vec(),
                right: alloc::vec![labels.len()],
            });
        }
        let mut out = Self::default();
        for (i, &y) in labels.iter().enumerate() {
            if predict(probs.row(i))? == y {
                out.correct.push(i);
            } else {
                out.incorrect.push(i);
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.correct.len() + self.incorrect.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `+1` for incorrect positions and `−1` for correct ones.
    fn signs(&self) -> Vec<f64> {
        let mut s = alloc::vec![0.0; self.len()];
        self.correct.iter().for_each(|&i| s[i] = -1.0);
        self.incorrect.iter().for_each(|&i| s[i] = 1.0);
        s
    }
}

/// Critic scores split by the partition: incorrect samples play `P_r`,
/// correct samples play `P_g`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreDistributions {
    pub correct_scores: Vec<f64>,
    pub incorrect_scores: Vec<f64>,
}

impl ScoreDistributions {
    pub fn split(scores: &[f64], partition: &Partition) -> Self {
        Self {
            correct_scores: partition.correct.iter().map(|&i| scores[i]).collect(),
            incorrect_scores: partition.incorrect.iter().map(|&i| scores[i]).collect(),
        }
    }

    /// `Σ_I C − Σ_{C_R} C`.
    pub fn critic_loss(&self) -> Result<f64> {
        if self.correct_scores.is_empty() && self.incorrect_scores.is_empty() {
            return Err(Error::Empty("critic_loss batch"));
        }
        Ok(self.incorrect_scores.iter().sum::<f64>() - self.correct_scores.iter().sum::<f64>())
    }

    /// Mean correct score minus mean incorrect score (0 for an empty side).
    pub fn margin(&self) -> f64 {
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        mean(&self.correct_scores) - mean(&self.incorrect_scores)
    }
}

/// Critic loss over a `(B,)` score vector on the tape.
///
/// Wasserstein form: `Σ_{x∈I} C(x) − Σ_{x∈C_R} C(x)`. Log variant:
/// `−Σ_{C_R} log σ(C) − Σ_I log(1 − σ(C))`.
pub fn critic_loss(tape: &mut Tape, scores: Var, partition: &Partition, log_variant: bool) -> Result<Var> {
    let n = tape.shape(scores).iter().product::<usize>();
    if partition.is_empty() {
        return Err(Error::Empty("critic_loss batch"));
    }
    if tape.shape(scores).len() != 1 || n != partition.len() {
        return Err(Error::ShapeMismatch {
            op: "critic_loss",
            left: tape.shape(scores).to_vec(),
            right: alloc::vec![partition.len()],
        });
    }
    let signs = tape.constant(Tensor::vector(partition.signs()));
    if log_variant {
        // σ(−s·C) is σ(C) for correct samples and 1 − σ(C) for incorrect ones.
        let neg = tape.scale(signs, -1.0)?;
        let signed = tape.mul(scores, neg)?;
        let p = tape.sigmoid(signed)?;
        let logp = tape.log(p, LOG_EPS)?;
        let total = tape.sum(logp)?;
        tape.scale(total, -1.0)
    } else {
        let signed = tape.mul(scores, signs)?;
        tape.sum(signed)
    }
}

/// `−Σ C(x)` over an unlabeled batch (log variant: `−Σ log σ(C(x))`).
pub fn generator_loss(tape: &mut Tape, scores: Var, log_variant: bool) -> Result<Var> {
    if tape.shape(scores).len() != 1 {
        return Err(invalid("generator_loss: scores must be a vector"));
    }
    if tape.value(scores).is_empty() {
        return Err(Error::Empty("generator_loss batch"));
    }
    let total = if log_variant {
        let p = tape.sigmoid(scores)?;
        let logp = tape.log(p, LOG_EPS)?;
        tape.sum(logp)?
    } else {
        tape.sum(scores)?
    };
    tape.scale(total, -1.0)
}

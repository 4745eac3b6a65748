//! Trained networks and their preprocessing as versioned JSON. Floats are
//! written in shortest round-trip form, so a save/load cycle is bit-exact.

use std::path::Path;

use crtcl_core::data::Normalization;
use crtcl_core::models::{CriticConfig, CriticNet, GeneratorConfig, GeneratorNet};
use crtcl_core::{Param, ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, write_file};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub v: u32,
    /// Active-learning cycle the networks were trained in.
    pub cycle: usize,
    pub seed: u64,
    pub normalization: Normalization,
    pub generator_config: GeneratorConfig,
    pub critic_config: CriticConfig,
    pub generator: Vec<StoredParam>,
    pub critic: Vec<StoredParam>,
}

fn store(params: &ParamSet) -> Vec<StoredParam> {
    params
        .iter()
        .map(|p| StoredParam {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        })
        .collect()
}

fn restore(stored: &[StoredParam]) -> Result<ParamSet> {
    let mut set = ParamSet::new();
    for p in stored {
        let value = Tensor::new(p.shape.clone(), p.data.clone())
            .map_err(|e| Error::Checkpoint(format!("parameter `{}`: {e}", p.name)))?;
        set.push(Param::new(p.name.clone(), value));
    }
    Ok(set)
}

impl Checkpoint {
    pub fn new(
        gen: &GeneratorNet,
        critic: &CriticNet,
        normalization: &Normalization,
        cycle: usize,
        seed: u64,
    ) -> Self {
        Self {
            v: CHECKPOINT_VERSION,
            cycle,
            seed,
            normalization: normalization.clone(),
            generator_config: gen.config().clone(),
            critic_config: critic.config().clone(),
            generator: store(&gen.params),
            critic: store(&critic.params),
        }
    }

    pub fn networks(&self) -> Result<(GeneratorNet, CriticNet)> {
        if self.v != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.v
            )));
        }
        let gen = GeneratorNet::with_params(self.generator_config.clone(), &restore(&self.generator)?)
            .map_err(|e| Error::Checkpoint(format!("generator: {e}")))?;
        let critic = CriticNet::with_params(self.critic_config.clone(), &restore(&self.critic)?)
            .map_err(|e| Error::Checkpoint(format!("critic: {e}")))?;
        Ok((gen, critic))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

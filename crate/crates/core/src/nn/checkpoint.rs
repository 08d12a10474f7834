//! Policy checkpoints: networks, temperature, step counter, curriculum
//! tolerances and the training RNG position, as versioned JSON.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpFile};
use super::policy::{PolicyParams, SacHyper};
use crate::dynamics::Tolerances;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    /// 32-byte seed, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string; it is a 128-bit counter.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| Error::InvalidInput(format!("checkpoint rng {what} is malformed"));
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad("seed"));
        }
        let mut seed = [0u8; 32];
        for (k, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * k..2 * k + 2], 16).map_err(|_| bad("seed"))?;
        }
        let word_pos: u128 = self.word_pos.parse().map_err(|_| bad("word_pos"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    hyper: SacHyper,
    step: u64,
    tolerances: Tolerances,
    log_temperature: f64,
    actor: MlpFile,
    critic1: MlpFile,
    critic2: MlpFile,
    target1: MlpFile,
    target2: MlpFile,
    #[serde(default)]
    rng: Option<RngState>,
}

/// A trained (or partially trained) policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub hyper: SacHyper,
    /// Environment steps taken so far.
    pub step: u64,
    /// Success tolerances in force when the checkpoint was written.
    pub tolerances: Tolerances,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn to_json_string(&self) -> String {
        let p = &self.params;
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            hyper: self.hyper.clone(),
            step: self.step,
            tolerances: self.tolerances,
            log_temperature: p.log_temperature,
            actor: p.actor.to_file(),
            critic1: p.critic1.to_file(),
            critic2: p.critic2.to_file(),
            target1: p.target1.to_file(),
            target2: p.target2.to_file(),
            rng: self.rng.clone(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    /// Parses and validates a checkpoint against its own hyperparameters.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let f: CheckpointFile = serde_json::from_str(s)?;
        if f.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                f.version
            )));
        }
        f.hyper.validate()?;
        f.tolerances.validate()?;
        if !f.log_temperature.is_finite() {
            return Err(Error::InvalidInput("non-finite log temperature".into()));
        }
        let params = PolicyParams {
            actor: Mlp::from_file(&f.actor)?,
            critic1: Mlp::from_file(&f.critic1)?,
            critic2: Mlp::from_file(&f.critic2)?,
            target1: Mlp::from_file(&f.target1)?,
            target2: Mlp::from_file(&f.target2)?,
            log_temperature: f.log_temperature,
        };
        params.validate_shapes(&f.hyper)?;
        if let Some(r) = &f.rng {
            r.restore()?;
        }
        Ok(Self {
            params,
            hyper: f.hyper,
            step: f.step,
            tolerances: f.tolerances,
            rng: f.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

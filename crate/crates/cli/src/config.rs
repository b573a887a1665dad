//! Experiment configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use steerlab::decoding::DoLaConfig;
use steerlab::model::{InjectionMode, ModelConfig};
use steerlab::tasks::{CorpusConfig, TrainConfig, Vocabulary, WRAPPER_HEAD};

use crate::CliError;

/// Layer × α grid and decoding length for steering runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringConfig {
    pub layers: Vec<usize>,
    pub alphas: Vec<f64>,
    pub mode: InjectionMode,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            layers: (1..=8).collect(),
            alphas: vec![0.0, 1.0, 10.0, 100.0, 1000.0, 3000.0],
            mode: InjectionMode::EveryStep,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Tokens generated per prompt.
    pub max_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_len: 4 }
    }
}

/// Everything one run depends on. The `seed` fields inside `corpus` and `train`
/// are overwritten by the run seed when the config is resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub dola: DoLaConfig,
    pub steering: SteeringConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::toy(),
            corpus: CorpusConfig::default(),
            train: TrainConfig::default(),
            dola: DoLaConfig::default(),
            steering: SteeringConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(one_line(&e.to_string())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the run seed to every seeded section and validates the result.
    pub fn resolve(mut self, seed: Option<u64>, out_dir: Option<PathBuf>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(d) = out_dir {
            self.out_dir = d;
        }
        self.corpus.seed = self.seed;
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.model.validate().map_err(|e| cfg(&e))?;
        self.corpus.validate().map_err(|e| cfg(&e))?;
        self.train.validate().map_err(|e| cfg(&e))?;
        let n = self.model.n_dec_layers;
        self.dola.validate(n).map_err(|e| cfg(&e))?;
        if self.steering.layers.is_empty() || self.steering.alphas.is_empty() {
            return Err(CliError::Config("steering grid needs layers and alphas".into()));
        }
        if let Some(&l) = self.steering.layers.iter().find(|&&l| l == 0 || l > n) {
            return Err(CliError::Config(format!(
                "steering layer {l} outside 1..={n}"
            )));
        }
        if let Some(&a) = self.steering.alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(CliError::Config(format!("alpha {a} must be finite and >= 0")));
        }
        if self.eval.max_len == 0 {
            return Err(CliError::Config("eval.max_len must be positive".into()));
        }
        let vocab = Vocabulary::new(self.corpus.n_content_words, self.corpus.n_ending_words)
            .map_err(|e| cfg(&e))?;
        if vocab.len() > self.model.vocab_size {
            return Err(CliError::Config(format!(
                "corpus uses {} tokens but model.vocab_size is {}",
                vocab.len(),
                self.model.vocab_size
            )));
        }
        let c = &self.corpus;
        let longest = (c.max_prefix_len + WRAPPER_HEAD.len() + 2)
            .max(c.max_prefix_len + c.max_context_len);
        if longest > self.model.max_seq_len {
            return Err(CliError::Config(format!(
                "prompts reach {longest} tokens but model.max_seq_len is {}",
                self.model.max_seq_len
            )));
        }
        if self.eval.max_len + 1 > self.model.max_seq_len {
            return Err(CliError::Config("eval.max_len exceeds model.max_seq_len".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the config without `out_dir`, first 16
    /// hex digits.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value
            .as_object_mut()
            .expect("struct is an object")
            .remove("out_dir");
        let digest = Sha256::digest(serde_json::to_vec(&value).expect("json"));
        hex::encode(&digest[..8])
    }
}

pub(crate) fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

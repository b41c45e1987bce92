use std::path::{Path, PathBuf};

use plab::model::ModelConfig;
use plab::pipeline::{CorpusConfig, PatchConfig};
use plab::trainer::{TrainConfig, MIN_CONTEXTS};
use plab::LabError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything one pipeline run depends on. Every section is optional in the
/// file; missing keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its own seed from it by name.
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub eval: EvalConfig,
    pub patch: PatchConfig,
    pub oracle: OracleConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out contexts per trigger language for the efficacy gate.
    pub n_contexts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_contexts: 250 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub n_examples: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { n_examples: 64 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
            eval: EvalConfig::default(),
            patch: PatchConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
    pub trials: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, LabError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| LabError::InvalidConfig(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| LabError::InvalidConfig(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(o) = &overrides.out {
            cfg.out = o.clone();
        }
        if let Some(k) = overrides.k {
            cfg.patch.k = k;
        }
        if let Some(t) = overrides.trials {
            cfg.patch.trials = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        let bad = |m: String| Err(LabError::InvalidConfig(m));
        if self.corpus.train_passages == 0 || self.corpus.eval_passages == 0 {
            return bad("corpus needs train and eval passages".into());
        }
        if self.eval.n_contexts < MIN_CONTEXTS || self.eval.n_contexts > self.corpus.eval_passages {
            return bad(format!(
                "eval.n_contexts must lie in [{MIN_CONTEXTS}, corpus.eval_passages]"
            ));
        }
        if self.patch.n_examples == 0 || self.patch.n_examples > self.corpus.eval_passages {
            return bad("patch.n_examples must lie in [1, corpus.eval_passages]".into());
        }
        let cells = self.model.n_layers * self.model.n_heads;
        if self.patch.k == 0 || self.patch.k > cells {
            return bad(format!("patch.k must lie in [1, {cells}]"));
        }
        if self.patch.trials < plab::analyzer::MIN_TRIALS {
            return bad(format!("patch.trials must be >= {}", plab::analyzer::MIN_TRIALS));
        }
        if self.oracle.n_examples == 0 {
            return bad("oracle.n_examples must be >= 1".into());
        }
        Ok(())
    }

    /// Canonical TOML; what gets written next to the artifacts.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML with the output directory blanked, so
    /// the same experiment hashes alike wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }
}

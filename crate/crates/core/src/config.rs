//! Run configuration: corpus source, split sizes, loop knobs, backend
//! bindings per role, trainer choice, and evaluation toggles.
//!
//! A config file fully determines a run; [`RunConfig::config_hash`] is the
//! canonical fingerprint persisted with every artifact and checked on
//! resume, so artifacts from different configurations cannot be mixed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendRole;
use crate::store::{self, StoreError};
use crate::testbed::WorldParams;
use crate::traindata::TrainMode;
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("store error: {0}")]
    Store(#[from] StoreError),
    #[error("run_id must be a non-empty name without path separators, got {0:?}")]
    BadRunId(String),
    #[error("no backend bound for role {0}")]
    MissingRole(&'static str),
    #[error("backend binding for role {role} has an empty {field}")]
    EmptyBindingField { role: String, field: &'static str },
    #[error("{field} must be at least {min}, got {got}")]
    TooSmall { field: &'static str, min: usize, got: usize },
    #[error("top_k ({top_k}) cannot exceed samples_per_pair ({samples_per_pair})")]
    TopKTooLarge { top_k: usize, samples_per_pair: usize },
    #[error("temperature {field} must be a finite non-negative number, got {got}")]
    BadTemperature { field: &'static str, got: f64 },
    #[error("the test split needs at least two personas for q_random, got {0}")]
    TestPersonasTooFew(usize),
    #[error("unknown backend role key {0:?} (expected questioner, roleplayer, oracle, base_scorer, judge)")]
    UnknownRole(String),
}

/// Where tasks, personas, and golds come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CorpusConfig {
    /// Load from JSONL files; golds are generated by the oracle when the
    /// path is absent.
    Files { tasks: PathBuf, personas: PathBuf, #[serde(default)] golds: Option<PathBuf> },
    /// Generate the hermetic synthetic world.
    Synthetic(WorldParams),
}

/// Exact split sizes (train A, train B, test); must partition the corpus.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub task_sizes: [usize; 3],
    pub persona_sizes: [usize; 3],
    pub seed: u64,
}

/// Sampling temperatures for each generation site.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Temperatures {
    /// Training-time conversation sampling.
    pub simulation: f64,
    /// Final responses and regularization responses (greedy).
    pub response: f64,
    /// Evaluation-time conversation sampling.
    pub eval_conversation: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Temperatures { simulation: 0.9, response: 0.0, eval_conversation: 0.9 }
    }
}

/// Which trainer executes fine-tuning jobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrainerConfig {
    /// In-process count-based trainer over the synthetic world.
    Hermetic,
    /// Out-of-process trainer speaking the job/status file protocol.
    External {
        #[serde(default = "default_poll_secs")]
        poll_interval_secs: u64,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
}

fn default_poll_secs() -> u64 {
    5
}

fn default_timeout_secs() -> u64 {
    6 * 60 * 60
}

/// Training section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_train_mode")]
    pub mode: TrainMode,
    /// Train each iteration on all datasets so far instead of only the
    /// newest one. Off by default: each iteration retunes the base model on
    /// its own iteration's data.
    #[serde(default)]
    pub accumulate_data: bool,
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub hyperparams: serde_json::Value,
}

fn default_train_mode() -> TrainMode {
    TrainMode::Standard
}

/// Evaluation-time ablations.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Re-run the log-probability evaluation with this alternate roleplayer
    /// binding (keyed like `backends` entries) to measure sensitivity to
    /// the interlocutor.
    pub roleplayer_swap: Option<BackendBinding>,
    /// Also measure win rate with history-blind final responses, isolating
    /// how much of the gain comes from using elicited information.
    pub history_blind_response: bool,
}

/// Evaluation section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub logprob: bool,
    pub winrate: bool,
    /// Conversations sampled per test pair for the win-rate comparison.
    pub samples_per_pair: usize,
    /// When true, the baseline side answers from the bare task context
    /// instead of its own conversations.
    pub bare_baseline: bool,
    pub ablations: AblationConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            logprob: true,
            winrate: true,
            samples_per_pair: 10,
            bare_baseline: false,
            ablations: AblationConfig::default(),
        }
    }
}

/// One backend binding: which implementation (`kind`) serves a role, under
/// which instance id, with optional transport knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendBinding {
    pub backend_id: String,
    /// Implementation selector, e.g. `mock_questioner`, `mock_roleplayer`,
    /// `mock_scorer`, `mock_oracle`, `mock_judge`, or `remote_chat`.
    pub kind: String,
    #[serde(default)]
    pub params: serde_json::Value,
    #[serde(default)]
    pub max_attempts: Option<u32>,
    #[serde(default)]
    pub max_in_flight: Option<usize>,
}

/// The full run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub splits: SplitConfig,
    /// Number of expert-iteration rounds (checkpoints trained).
    pub iterations: u32,
    /// Conversations sampled per (task, persona) pair during training.
    pub samples_per_pair: usize,
    /// Maximum dialogue turns; each sample's budget is uniform in 1..=max.
    pub max_turns: usize,
    /// Trajectories kept per pair at selection.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Normalize selection scores by gold token count.
    #[serde(default)]
    pub length_normalize_scores: bool,
    #[serde(default)]
    pub temperatures: Temperatures,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Role name → binding; all of questioner, roleplayer, oracle,
    /// base_scorer, judge must be present.
    pub backends: BTreeMap<String, BackendBinding>,
    /// Rayon worker threads (0 = library default).
    #[serde(default)]
    pub workers: usize,
    /// Prompt template overrides: template name → file path.
    #[serde(default)]
    pub template_overrides: BTreeMap<String, PathBuf>,
}

fn default_top_k() -> usize {
    1
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let config: RunConfig = store::read_json(path)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        Ok(store::write_json_atomic(path, self)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.run_id.trim().is_empty() || self.run_id.contains('/') || self.run_id.contains('\\') {
            return Err(ConfigError::BadRunId(self.run_id.clone()));
        }
        if self.iterations < 1 {
            return Err(ConfigError::TooSmall { field: "iterations", min: 1, got: self.iterations as usize });
        }
        if self.samples_per_pair < 1 {
            return Err(ConfigError::TooSmall { field: "samples_per_pair", min: 1, got: self.samples_per_pair });
        }
        if self.max_turns < 1 {
            return Err(ConfigError::TooSmall { field: "max_turns", min: 1, got: self.max_turns });
        }
        if self.top_k < 1 {
            return Err(ConfigError::TooSmall { field: "top_k", min: 1, got: self.top_k });
        }
        if self.top_k > self.samples_per_pair {
            return Err(ConfigError::TopKTooLarge { top_k: self.top_k, samples_per_pair: self.samples_per_pair });
        }
        if self.eval.samples_per_pair < 1 {
            return Err(ConfigError::TooSmall { field: "eval.samples_per_pair", min: 1, got: self.eval.samples_per_pair });
        }
        for (field, value) in [
            ("simulation", self.temperatures.simulation),
            ("response", self.temperatures.response),
            ("eval_conversation", self.temperatures.eval_conversation),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(ConfigError::BadTemperature { field, got: value });
            }
        }
        if self.splits.persona_sizes[2] < 2 {
            return Err(ConfigError::TestPersonasTooFew(self.splits.persona_sizes[2]));
        }
        for key in self.backends.keys() {
            if BackendRole::ALL.iter().all(|role| role.as_str() != key) {
                return Err(ConfigError::UnknownRole(key.clone()));
            }
        }
        for role in BackendRole::ALL {
            match self.backends.get(role.as_str()) {
                None => return Err(ConfigError::MissingRole(role.as_str())),
                Some(binding) => {
                    if binding.backend_id.trim().is_empty() {
                        return Err(ConfigError::EmptyBindingField { role: role.as_str().into(), field: "backend_id" });
                    }
                    if binding.kind.trim().is_empty() {
                        return Err(ConfigError::EmptyBindingField { role: role.as_str().into(), field: "kind" });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn binding(&self, role: BackendRole) -> &BackendBinding {
        self.backends.get(role.as_str()).expect("validated config binds every role")
    }

    /// Canonical fingerprint of the whole configuration.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        sha256_hex(canonical.as_bytes())
    }

    /// A ready-to-run hermetic configuration over the synthetic world:
    /// mock backends for every role, the in-process trainer, and desk-scale
    /// sizes (30 tasks, 20 personas, split [12, 12, 6] / [8, 8, 4]).
    pub fn hermetic(run_id: impl Into<String>, seed: u64) -> RunConfig {
        let mock = |backend_id: &str, kind: &str| BackendBinding {
            backend_id: backend_id.to_string(),
            kind: kind.to_string(),
            params: serde_json::Value::Null,
            max_attempts: None,
            max_in_flight: None,
        };
        let mut backends = BTreeMap::new();
        backends.insert("questioner".to_string(), mock("mock-questioner", "mock_questioner"));
        backends.insert("roleplayer".to_string(), mock("mock-roleplayer", "mock_roleplayer"));
        backends.insert("oracle".to_string(), mock("mock-oracle", "mock_oracle"));
        backends.insert("base_scorer".to_string(), mock("mock-scorer", "mock_scorer"));
        backends.insert("judge".to_string(), mock("mock-judge", "mock_judge"));
        RunConfig {
            run_id: run_id.into(),
            seed,
            corpus: CorpusConfig::Synthetic(WorldParams { seed, ..WorldParams::default() }),
            splits: SplitConfig { task_sizes: [12, 12, 6], persona_sizes: [8, 8, 4], seed },
            iterations: 2,
            samples_per_pair: 10,
            max_turns: 3,
            top_k: 1,
            length_normalize_scores: false,
            temperatures: Temperatures::default(),
            train: TrainConfig {
                mode: TrainMode::Standard,
                accumulate_data: false,
                trainer: TrainerConfig::Hermetic,
                hyperparams: serde_json::Value::Null,
            },
            eval: EvalConfig::default(),
            backends,
            workers: 0,
            template_overrides: BTreeMap::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_hermetic_config_validates_and_hashes_stably() {
        let config = RunConfig::hermetic("demo", 7);
        config.validate().unwrap();
        let h1 = config.config_hash();
        assert_eq!(h1, config.config_hash());
        assert_eq!(h1.len(), 64);
        let mut other = config.clone();
        other.samples_per_pair = 9;
        assert_ne!(h1, other.config_hash(), "any knob change must change the hash");
    }

    #[test]
    fn validation_rejects_inconsistent_configs() {
        let mut config = RunConfig::hermetic("demo", 7);
        config.top_k = 11;
        assert!(matches!(config.validate(), Err(ConfigError::TopKTooLarge { .. })));

        let mut config = RunConfig::hermetic("demo", 7);
        config.backends.remove("judge");
        assert!(matches!(config.validate(), Err(ConfigError::MissingRole("judge"))));

        let mut config = RunConfig::hermetic("demo", 7);
        config.backends.insert("scorer".to_string(), config.backends["judge"].clone());
        assert!(matches!(config.validate(), Err(ConfigError::UnknownRole(_))));

        let mut config = RunConfig::hermetic("demo", 7);
        config.splits.persona_sizes = [9, 9, 1];
        assert!(matches!(config.validate(), Err(ConfigError::TestPersonasTooFew(1))));

        let mut config = RunConfig::hermetic("bad/name", 7);
        assert!(matches!(config.validate(), Err(ConfigError::BadRunId(_))));
        config.run_id = "ok".into();
        config.temperatures.simulation = f64::NAN;
        assert!(matches!(config.validate(), Err(ConfigError::BadTemperature { .. })));
    }

    #[test]
    fn configs_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let config = RunConfig::hermetic("demo", 7);
        config.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(config.config_hash(), loaded.config_hash());

        // Unknown fields in config files are rejected rather than ignored.
        let mut raw: serde_json::Value = store::read_json(&path).unwrap();
        raw["typo_field"] = serde_json::json!(1);
        store::write_json_atomic(&path, &raw).unwrap();
        assert!(RunConfig::load(&path).is_err());
    }
}

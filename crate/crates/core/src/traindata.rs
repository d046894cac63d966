//! Fine-tuning data construction and the trainer contract.
//!
//! Each selected trajectory becomes one training example: the questioner's
//! system prompt, the dialogue turns, a final user message repeating the
//! task, and the final response. Loss masking is positional — `train_on`
//! is true exactly on the questioner's own outputs (its questions and the
//! final response) and false on the system prompt and every roleplayer
//! answer, so the policy never trains on text it did not produce.
//!
//! Three dataset modes cover the training variants: `standard` appends the
//! previous policy's greedy response (response regularization),
//! `no_regularization` drops the response segment entirely, and
//! `gold_response` appends the oracle's gold answer instead.
//!
//! Training itself happens behind the [`Trainer`] trait: the hermetic
//! trainer folds datasets into mock-policy counts, while
//! [`ExternalTrainer`] hands a job descriptor to an out-of-process tuning
//! service and polls its status file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Role;
use crate::dialogue::Turn;
use crate::store::{self, StoreError};
use crate::template::{fill, TemplateError, TemplateSet};

/// Which response segment the exported examples end with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Dialogue plus the previous policy's greedy response.
    Standard,
    /// Dialogue only; the ablation that forgets how to answer.
    NoRegularization,
    /// Dialogue plus the gold response.
    GoldResponse,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Standard => "standard",
            TrainMode::NoRegularization => "no_regularization",
            TrainMode::GoldResponse => "gold_response",
        }
    }
}

/// One chat message with its loss mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMessage {
    pub role: Role,
    pub content: String,
    pub train_on: bool,
}

/// Provenance carried on every exported example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub task_id: String,
    pub persona_id: String,
    pub iteration: u32,
    pub mode: TrainMode,
    pub turn_budget: usize,
}

/// One exported fine-tuning example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub messages: Vec<TrainingMessage>,
    pub meta: ExampleMeta,
}

#[derive(Debug, Error)]
pub enum TrainDataError {
    #[error("template error: {0}")]
    Template(#[from] TemplateError),
    #[error("store error: {0}")]
    Store(#[from] StoreError),
    #[error("mode {mode} requires a final response but none was provided")]
    MissingResponse { mode: &'static str },
    #[error("mode no_regularization must not carry a final response")]
    UnexpectedResponse,
    #[error("refusing to export an empty dataset")]
    EmptyDataset,
    #[error("trainer reported failure: {message}")]
    TrainerFailed { message: String },
    #[error("trainer did not finish within {0:?}")]
    TrainerTimeout(Duration),
    #[error("trainer reported done without a model id")]
    MissingModelId,
}

/// Builds one loss-masked example from a selected conversation.
#[allow(clippy::too_many_arguments)]
pub fn build_training_example(
    templates: &TemplateSet,
    persona_name: &str,
    task_text: &str,
    task_id: &str,
    persona_id: &str,
    turns: &[Turn],
    turn_budget: usize,
    iteration: u32,
    mode: TrainMode,
    final_response: Option<&str>,
) -> Result<TrainingExample, TrainDataError> {
    match (mode, final_response) {
        (TrainMode::NoRegularization, Some(_)) => return Err(TrainDataError::UnexpectedResponse),
        (TrainMode::Standard, None) | (TrainMode::GoldResponse, None) => {
            return Err(TrainDataError::MissingResponse { mode: mode.as_str() })
        }
        _ => {}
    }

    let system = fill(
        "questioner_system",
        &templates.questioner_system,
        &[("name", persona_name), ("task", task_text)],
    )?;
    let mut messages = vec![TrainingMessage { role: Role::System, content: system, train_on: false }];
    for turn in turns {
        messages.push(TrainingMessage { role: Role::Assistant, content: turn.question.clone(), train_on: true });
        messages.push(TrainingMessage { role: Role::User, content: turn.answer.clone(), train_on: false });
    }
    if let Some(response) = final_response {
        messages.push(TrainingMessage { role: Role::User, content: task_text.to_string(), train_on: false });
        messages.push(TrainingMessage { role: Role::Assistant, content: response.to_string(), train_on: true });
    }

    Ok(TrainingExample {
        messages,
        meta: ExampleMeta {
            task_id: task_id.to_string(),
            persona_id: persona_id.to_string(),
            iteration,
            mode,
            turn_budget,
        },
    })
}

/// The masking invariant every exported example satisfies: the loss covers
/// assistant messages (the policy's own outputs) and nothing else.
pub fn mask_is_sound(example: &TrainingExample) -> bool {
    example.messages.iter().all(|m| m.train_on == (m.role == Role::Assistant))
}

/// Sidecar describing an exported dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub iteration: u32,
    /// Every dataset file the next training job should consume (earlier
    /// iterations first when accumulation is on). Recorded relative to the
    /// run directory so runs stay relocatable and two runs of the same
    /// config produce identical manifests.
    pub paths: Vec<PathBuf>,
    /// Example counts for the file exported at this iteration.
    pub examples: usize,
    pub by_mode: BTreeMap<String, usize>,
    pub by_turn_budget: BTreeMap<String, usize>,
}

/// Writes the dataset JSONL and its manifest. The dataset is written at
/// `dataset_path` but recorded in the manifest as `recorded_dataset_path`
/// (the run-relative form); `prior_paths` lists recorded paths of datasets
/// from earlier iterations to include in the training job (accumulation).
pub fn export_dataset(
    dataset_path: &Path,
    manifest_path: &Path,
    recorded_dataset_path: &Path,
    iteration: u32,
    examples: &[TrainingExample],
    prior_paths: &[PathBuf],
) -> Result<DatasetManifest, TrainDataError> {
    if examples.is_empty() {
        return Err(TrainDataError::EmptyDataset);
    }
    for example in examples {
        debug_assert!(mask_is_sound(example), "attempted to export an unsoundly masked example");
    }
    store::write_jsonl(dataset_path, examples)?;

    let mut by_mode: BTreeMap<String, usize> = BTreeMap::new();
    let mut by_turn_budget: BTreeMap<String, usize> = BTreeMap::new();
    for example in examples {
        *by_mode.entry(example.meta.mode.as_str().to_string()).or_default() += 1;
        *by_turn_budget.entry(example.meta.turn_budget.to_string()).or_default() += 1;
    }
    let mut paths: Vec<PathBuf> = prior_paths.to_vec();
    paths.push(recorded_dataset_path.to_path_buf());
    let manifest = DatasetManifest { iteration, paths, examples: examples.len(), by_mode, by_turn_budget };
    store::write_json_atomic(manifest_path, &manifest)?;
    Ok(manifest)
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrainingExample>, TrainDataError> {
    Ok(store::read_jsonl(path)?)
}

/// Reference to a questioner checkpoint. `base` is the frozen starting
/// policy; `file:<path>` points at a locally persisted snapshot; anything
/// else is an opaque id owned by an external trainer/backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRef(pub String);

impl ModelRef {
    pub fn base() -> Self {
        ModelRef("base".to_string())
    }

    pub fn is_base(&self) -> bool {
        self.0 == "base"
    }

    pub fn file(path: &Path) -> Self {
        ModelRef(format!("file:{}", path.display()))
    }

    pub fn as_file_path(&self) -> Option<PathBuf> {
        self.0.strip_prefix("file:").map(PathBuf::from)
    }
}

impl std::fmt::Display for ModelRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// One fine-tuning job. Training always starts from `base_model` — the
/// pipeline passes the original frozen policy every iteration rather than
/// the previous checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerJob {
    pub base_model: ModelRef,
    pub dataset_paths: Vec<PathBuf>,
    pub output_model_id: String,
    pub output_dir: PathBuf,
    pub hyperparams: serde_json::Value,
}

pub trait Trainer: Send + Sync {
    /// Runs (or dispatches) the job and returns a reference to the trained
    /// model.
    fn train(&self, job: &TrainerJob) -> Result<ModelRef, TrainDataError>;
}

/// Status file contract for out-of-process trainers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerStatus {
    pub state: TrainerState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerState {
    Pending,
    Done,
    Failed,
}

/// Dispatches jobs to an external fine-tuning service: writes
/// `trainer_job.json` into the job's output directory and polls
/// `trainer_status.json` until the service reports done or failed.
pub struct ExternalTrainer {
    pub poll_interval: Duration,
    pub timeout: Duration,
}

impl Default for ExternalTrainer {
    fn default() -> Self {
        ExternalTrainer { poll_interval: Duration::from_secs(5), timeout: Duration::from_secs(6 * 60 * 60) }
    }
}

pub const TRAINER_JOB_FILE: &str = "trainer_job.json";
pub const TRAINER_STATUS_FILE: &str = "trainer_status.json";

impl Trainer for ExternalTrainer {
    fn train(&self, job: &TrainerJob) -> Result<ModelRef, TrainDataError> {
        std::fs::create_dir_all(&job.output_dir).map_err(|source| StoreError::Io {
            path: job.output_dir.display().to_string(),
            source,
        })?;
        let job_path = job.output_dir.join(TRAINER_JOB_FILE);
        store::write_json_atomic(&job_path, job)?;
        let status_path = job.output_dir.join(TRAINER_STATUS_FILE);

        let started = Instant::now();
        loop {
            if status_path.exists() {
                let status: TrainerStatus = store::read_json(&status_path)?;
                match status.state {
                    TrainerState::Pending => {}
                    TrainerState::Done => {
                        let model_id = status.model_id.ok_or(TrainDataError::MissingModelId)?;
                        return Ok(ModelRef(model_id));
                    }
                    TrainerState::Failed => {
                        return Err(TrainDataError::TrainerFailed {
                            message: status.message.unwrap_or_else(|| "no message".to_string()),
                        })
                    }
                }
            }
            if started.elapsed() >= self.timeout {
                return Err(TrainDataError::TrainerTimeout(self.timeout));
            }
            std::thread::sleep(self.poll_interval);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turns() -> Vec<Turn> {
        vec![
            Turn { question: "q1?".into(), answer: "a1.".into() },
            Turn { question: "q2?".into(), answer: "a2.".into() },
        ]
    }

    fn example(mode: TrainMode, response: Option<&str>) -> TrainingExample {
        build_training_example(
            &TemplateSet::builtin(),
            "User3",
            "pick a plan",
            "t1",
            "p1",
            &turns(),
            2,
            1,
            mode,
            response,
        )
        .unwrap()
    }

    #[test]
    fn standard_example_masks_exactly_the_policy_outputs() {
        let ex = example(TrainMode::Standard, Some("final response"));
        assert!(mask_is_sound(&ex));
        let layout: Vec<(Role, bool)> = ex.messages.iter().map(|m| (m.role, m.train_on)).collect();
        assert_eq!(
            layout,
            vec![
                (Role::System, false),
                (Role::Assistant, true),  // q1
                (Role::User, false),      // a1
                (Role::Assistant, true),  // q2
                (Role::User, false),      // a2
                (Role::User, false),      // task repeat
                (Role::Assistant, true),  // final response
            ]
        );
        assert_eq!(ex.messages[5].content, "pick a plan");
        assert_eq!(ex.messages[6].content, "final response");
        assert!(ex.messages[0].content.contains("User3"));
    }

    #[test]
    fn no_regularization_drops_the_response_segment() {
        let ex = example(TrainMode::NoRegularization, None);
        assert!(mask_is_sound(&ex));
        assert_eq!(ex.messages.len(), 5); // system + 2 × (q, a)
        assert_eq!(ex.messages.last().unwrap().role, Role::User);
        // Mode/response consistency is enforced.
        assert!(matches!(
            build_training_example(
                &TemplateSet::builtin(),
                "n",
                "t",
                "t1",
                "p1",
                &turns(),
                2,
                1,
                TrainMode::NoRegularization,
                Some("r")
            ),
            Err(TrainDataError::UnexpectedResponse)
        ));
        assert!(matches!(
            build_training_example(
                &TemplateSet::builtin(),
                "n",
                "t",
                "t1",
                "p1",
                &turns(),
                2,
                1,
                TrainMode::Standard,
                None
            ),
            Err(TrainDataError::MissingResponse { .. })
        ));
    }

    #[test]
    fn serialized_examples_use_the_documented_field_names() {
        let ex = example(TrainMode::GoldResponse, Some("gold text"));
        let value = serde_json::to_value(&ex).unwrap();
        let first = &value["messages"][0];
        assert_eq!(first["role"], "system");
        assert_eq!(first["train_on"], false);
        assert!(first["content"].is_string());
        assert_eq!(value["meta"]["mode"], "gold_response");
        assert_eq!(value["meta"]["task_id"], "t1");
        assert_eq!(value["meta"]["iteration"], 1);
    }

    #[test]
    fn export_writes_dataset_and_manifest_with_counts() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = dir.path().join("dataset.jsonl");
        let manifest_path = dir.path().join("manifest.json");
        let examples = vec![
            example(TrainMode::Standard, Some("r1")),
            example(TrainMode::Standard, Some("r2")),
            example(TrainMode::GoldResponse, Some("g")),
        ];
        let manifest =
            export_dataset(&dataset, &manifest_path, Path::new("dataset.jsonl"), 1, &examples, &[]).unwrap();
        assert_eq!(manifest.examples, 3);
        assert_eq!(manifest.by_mode["standard"], 2);
        assert_eq!(manifest.by_mode["gold_response"], 1);
        assert_eq!(manifest.by_turn_budget["2"], 3);
        // The manifest records the run-relative path, not the write path.
        assert_eq!(manifest.paths, vec![PathBuf::from("dataset.jsonl")]);
        let back = read_dataset(&dataset).unwrap();
        assert_eq!(back, examples);

        // Accumulation prepends prior recorded paths.
        let second = dir.path().join("dataset2.jsonl");
        let manifest2 = export_dataset(
            &second,
            &manifest_path,
            Path::new("dataset2.jsonl"),
            2,
            &examples[..1],
            &[PathBuf::from("dataset.jsonl")],
        )
        .unwrap();
        assert_eq!(manifest2.paths, vec![PathBuf::from("dataset.jsonl"), PathBuf::from("dataset2.jsonl")]);

        let empty = dir.path().join("empty.jsonl");
        assert!(matches!(
            export_dataset(&empty, &manifest_path, Path::new("empty.jsonl"), 1, &[], &[]),
            Err(TrainDataError::EmptyDataset)
        ));
    }

    #[test]
    fn model_refs_round_trip() {
        assert!(ModelRef::base().is_base());
        let file = ModelRef::file(Path::new("/tmp/model.json"));
        assert_eq!(file.as_file_path().unwrap(), PathBuf::from("/tmp/model.json"));
        assert!(ModelRef("ft:gpt-x".into()).as_file_path().is_none());
        assert!(!ModelRef("ft:gpt-x".into()).is_base());
    }

    #[test]
    fn external_trainer_honors_the_status_file_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let job = TrainerJob {
            base_model: ModelRef::base(),
            dataset_paths: vec![dir.path().join("d.jsonl")],
            output_model_id: "m1".into(),
            output_dir: dir.path().to_path_buf(),
            hyperparams: serde_json::json!({"epochs": 1}),
        };
        let trainer = ExternalTrainer { poll_interval: Duration::from_millis(5), timeout: Duration::from_secs(5) };

        // A worker thread plays the external service: sees the job file,
        // reports pending, then done.
        let status_path = dir.path().join(TRAINER_STATUS_FILE);
        let job_path = dir.path().join(TRAINER_JOB_FILE);
        let worker = std::thread::spawn({
            let status_path = status_path.clone();
            let job_path = job_path.clone();
            move || {
                while !job_path.exists() {
                    std::thread::sleep(Duration::from_millis(2));
                }
                let written: TrainerJob = store::read_json(&job_path).unwrap();
                assert_eq!(written.output_model_id, "m1");
                store::write_json_atomic(
                    &status_path,
                    &TrainerStatus { state: TrainerState::Pending, model_id: None, message: None },
                )
                .unwrap();
                std::thread::sleep(Duration::from_millis(20));
                store::write_json_atomic(
                    &status_path,
                    &TrainerStatus { state: TrainerState::Done, model_id: Some("ft:m1".into()), message: None },
                )
                .unwrap();
            }
        });
        let model = trainer.train(&job).unwrap();
        worker.join().unwrap();
        assert_eq!(model, ModelRef("ft:m1".into()));

        // Failure status surfaces as an error.
        store::write_json_atomic(
            &status_path,
            &TrainerStatus { state: TrainerState::Failed, model_id: None, message: Some("oom".into()) },
        )
        .unwrap();
        assert!(matches!(trainer.train(&job), Err(TrainDataError::TrainerFailed { message }) if message == "oom"));

        // Timeout when nobody answers.
        let lonely = tempfile::tempdir().unwrap();
        let job2 = TrainerJob { output_dir: lonely.path().to_path_buf(), ..job };
        let impatient = ExternalTrainer { poll_interval: Duration::from_millis(5), timeout: Duration::from_millis(30) };
        assert!(matches!(impatient.train(&job2), Err(TrainDataError::TrainerTimeout(_))));
    }
}

//! Conversation simulation between a questioner policy and a persona
//! roleplayer.
//!
//! Each conversation is a fixed number of (question, answer) turns; the
//! budget is drawn uniformly from `1..=max_turns` per sample so training
//! data covers every dialogue length. The questioner never sees the persona
//! description — only the user's name and the task — while the roleplayer
//! is prompted with the full persona and the rendered conversation so far,
//! ending with the pending question.
//!
//! Failures are atomic at the sample level: if any generation inside a
//! conversation fails, that whole sample is discarded and recorded, and the
//! batch only errors if some (task, persona) pair ends up with zero
//! successful samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendClient, BackendError, GenerationRequest, Message};
use crate::corpus::{Corpus, Pair, Persona, Task};
use crate::template::{fill, TemplateError, TemplateSet};
use crate::util::derive_seed;

/// One question/answer exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: String,
}

/// A completed simulated conversation for one (task, persona, sample) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub task_id: String,
    pub persona_id: String,
    pub sample_index: usize,
    pub turn_budget: usize,
    pub turns: Vec<Turn>,
    pub seed: u64,
    pub temperature: f64,
    pub questioner_backend_id: String,
    pub roleplayer_backend_id: String,
}

/// A sample discarded because some generation inside it failed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailedSample {
    pub task_id: String,
    pub persona_id: String,
    pub sample_index: usize,
    /// Which side failed: "question" or "answer", with the turn index.
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Error)]
pub enum DialogueError {
    #[error("template error: {0}")]
    Template(#[from] TemplateError),
    #[error("backend failure for {task_id}/{persona_id} sample {sample_index} at {stage}: {source}")]
    Backend {
        task_id: String,
        persona_id: String,
        sample_index: usize,
        stage: String,
        #[source]
        source: BackendError,
    },
    #[error("pair {task_id}/{persona_id}: all {attempts} samples failed; first error: {first_error}")]
    PairExhausted {
        task_id: String,
        persona_id: String,
        attempts: usize,
        first_error: String,
    },
    #[error("unknown task or persona in pair {task_id}/{persona_id}")]
    UnknownPair { task_id: String, persona_id: String },
}

/// Uniform draw from `1..=max_turns`.
pub fn sample_turn_budget(rng: &mut ChaCha8Rng, max_turns: usize) -> usize {
    assert!(max_turns >= 1, "max_turns must be at least 1");
    rng.gen_range(1..=max_turns)
}

/// Renders the conversation so far for inclusion in roleplayer prompts,
/// optionally ending with a pending (unanswered) question.
pub fn render_conversation(turns: &[Turn], pending_question: Option<&str>) -> String {
    let mut parts = Vec::new();
    for turn in turns {
        parts.push(format!("Assistant: {}", turn.question));
        parts.push(format!("You: {}", turn.answer));
    }
    if let Some(q) = pending_question {
        parts.push(format!("Assistant: {q}"));
    }
    parts.join("\n\n")
}

/// Prompt for the questioner's next question: system instructions carrying
/// the user's name and the task, then the dialogue so far with the
/// questioner's own questions as assistant turns and the roleplayer's
/// answers as user turns. The persona description is never included.
pub fn assemble_questioner_prompt(
    templates: &TemplateSet,
    persona_name: &str,
    task_text: &str,
    turns: &[Turn],
) -> Result<Vec<Message>, TemplateError> {
    let system = fill(
        "questioner_system",
        &templates.questioner_system,
        &[("name", persona_name), ("task", task_text)],
    )?;
    let mut messages = vec![Message::system(system)];
    for turn in turns {
        messages.push(Message::assistant(turn.question.clone()));
        messages.push(Message::user(turn.answer.clone()));
    }
    Ok(messages)
}

/// Prompt for the roleplayer's answer: system instructions carrying the
/// full persona, then a user message with the task and the rendered
/// conversation ending at the pending question.
pub fn assemble_roleplayer_prompt(
    templates: &TemplateSet,
    persona_text: &str,
    task_text: &str,
    turns: &[Turn],
    pending_question: &str,
) -> Result<Vec<Message>, TemplateError> {
    let system = fill("roleplayer_system", &templates.roleplayer_system, &[("persona", persona_text)])?;
    let conversation = render_conversation(turns, Some(pending_question));
    let user = fill(
        "roleplayer_user",
        &templates.roleplayer_user,
        &[("task", task_text), ("conversation", &conversation)],
    )?;
    Ok(vec![Message::system(system), Message::user(user)])
}

/// Simulates one conversation of exactly `turn_budget` turns. Fails
/// atomically: any backend error aborts the whole conversation.
#[allow(clippy::too_many_arguments)]
pub fn simulate_conversation(
    questioner: &BackendClient,
    roleplayer: &BackendClient,
    templates: &TemplateSet,
    task: &Task,
    persona: &Persona,
    sample_index: usize,
    turn_budget: usize,
    temperature: f64,
    seed: u64,
    request_prefix: &str,
) -> Result<Conversation, DialogueError> {
    let mut turns: Vec<Turn> = Vec::with_capacity(turn_budget);
    for t in 0..turn_budget {
        let messages = assemble_questioner_prompt(templates, &persona.name, &task.text, &turns)?;
        let request = GenerationRequest::new(messages)
            .with_temperature(temperature)
            .with_seed(derive_seed(seed, &["question", &t.to_string()]));
        let question = questioner
            .generate(&format!("{request_prefix}:q{t}"), &request)
            .map_err(|source| DialogueError::Backend {
                task_id: task.id.clone(),
                persona_id: persona.id.clone(),
                sample_index,
                stage: format!("question[{t}]"),
                source,
            })?;

        let messages = assemble_roleplayer_prompt(templates, &persona.text, &task.text, &turns, &question)?;
        let request = GenerationRequest::new(messages)
            .with_temperature(temperature)
            .with_seed(derive_seed(seed, &["answer", &t.to_string()]));
        let answer = roleplayer
            .generate(&format!("{request_prefix}:a{t}"), &request)
            .map_err(|source| DialogueError::Backend {
                task_id: task.id.clone(),
                persona_id: persona.id.clone(),
                sample_index,
                stage: format!("answer[{t}]"),
                source,
            })?;

        turns.push(Turn { question, answer });
    }
    Ok(Conversation {
        task_id: task.id.clone(),
        persona_id: persona.id.clone(),
        sample_index,
        turn_budget,
        turns,
        seed,
        temperature,
        questioner_backend_id: questioner.id().to_string(),
        roleplayer_backend_id: roleplayer.id().to_string(),
    })
}

/// Batch simulation knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationParams {
    pub samples_per_pair: usize,
    pub max_turns: usize,
    pub temperature: f64,
}

/// Successful conversations plus the samples discarded along the way.
#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub conversations: Vec<Conversation>,
    pub failures: Vec<FailedSample>,
}

/// Simulates `samples_per_pair` conversations for every pair, in parallel,
/// with seeds derived from `(root_seed, domain, iteration, pair, sample)` so
/// the output is reproducible regardless of scheduling. Errors if any pair
/// ends with zero successful samples.
#[allow(clippy::too_many_arguments)]
pub fn simulate_batch(
    questioner: &BackendClient,
    roleplayer: &BackendClient,
    templates: &TemplateSet,
    corpus: &Corpus,
    pairs: &[Pair],
    params: &SimulationParams,
    root_seed: u64,
    domain: &str,
    iteration: u32,
) -> Result<SimulationOutput, DialogueError> {
    struct Job<'a> {
        task: &'a Task,
        persona: &'a Persona,
        sample_index: usize,
        seed: u64,
        request_prefix: String,
    }

    let mut jobs = Vec::with_capacity(pairs.len() * params.samples_per_pair);
    for pair in pairs {
        let task = corpus.task(&pair.task_id).ok_or_else(|| DialogueError::UnknownPair {
            task_id: pair.task_id.clone(),
            persona_id: pair.persona_id.clone(),
        })?;
        let persona = corpus.persona(&pair.persona_id).ok_or_else(|| DialogueError::UnknownPair {
            task_id: pair.task_id.clone(),
            persona_id: pair.persona_id.clone(),
        })?;
        for sample_index in 0..params.samples_per_pair {
            let seed = derive_seed(
                root_seed,
                &[domain, &iteration.to_string(), &pair.task_id, &pair.persona_id, &sample_index.to_string()],
            );
            let request_prefix =
                format!("{domain}:i{iteration}:{}:{}:s{sample_index}", pair.task_id, pair.persona_id);
            jobs.push(Job { task, persona, sample_index, seed, request_prefix });
        }
    }

    let results: Vec<Result<Conversation, FailedSample>> = jobs
        .par_iter()
        .map(|job| {
            let mut budget_rng = ChaCha8Rng::seed_from_u64(derive_seed(job.seed, &["budget"]));
            let turn_budget = sample_turn_budget(&mut budget_rng, params.max_turns);
            simulate_conversation(
                questioner,
                roleplayer,
                templates,
                job.task,
                job.persona,
                job.sample_index,
                turn_budget,
                params.temperature,
                job.seed,
                &job.request_prefix,
            )
            .map_err(|err| {
                let stage = match &err {
                    DialogueError::Backend { stage, .. } => stage.clone(),
                    _ => "assemble".to_string(),
                };
                FailedSample {
                    task_id: job.task.id.clone(),
                    persona_id: job.persona.id.clone(),
                    sample_index: job.sample_index,
                    stage,
                    error: err.to_string(),
                }
            })
        })
        .collect();

    let mut conversations = Vec::new();
    let mut failures = Vec::new();
    for result in results {
        match result {
            Ok(conversation) => conversations.push(conversation),
            Err(failure) => failures.push(failure),
        }
    }

    for pair in pairs {
        let successes = conversations
            .iter()
            .filter(|c| c.task_id == pair.task_id && c.persona_id == pair.persona_id)
            .count();
        if successes == 0 {
            let first_error = failures
                .iter()
                .find(|f| f.task_id == pair.task_id && f.persona_id == pair.persona_id)
                .map(|f| f.error.clone())
                .unwrap_or_else(|| "no samples attempted".to_string());
            return Err(DialogueError::PairExhausted {
                task_id: pair.task_id.clone(),
                persona_id: pair.persona_id.clone(),
                attempts: params.samples_per_pair,
                first_error,
            });
        }
    }

    Ok(SimulationOutput { conversations, failures })
}

//! Trajectory scoring and best-of-n selection.
//!
//! Every simulated conversation is scored by how likely the frozen scorer
//! finds the pair's gold response when conditioned on that conversation.
//! The scoring context is exactly the prompt a response-tuned policy sees:
//! a first user message carrying the user's name and the task, the dialogue
//! turns (questions as assistant messages, answers as user messages), and a
//! final user message repeating the task. The gold response is scored as
//! the assistant continuation of that context.
//!
//! Selection keeps the top-k trajectories per (task, persona) pair by
//! score, breaking ties toward the lowest sample index so reruns pick the
//! same winner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendClient, BackendError, GenerationRequest, Message, ScoreRequest};
use crate::corpus::Corpus;
use crate::dialogue::{Conversation, Turn};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("backend failure while scoring {task_id}/{persona_id} sample {sample_index}: {source}")]
    Backend {
        task_id: String,
        persona_id: String,
        sample_index: usize,
        #[source]
        source: BackendError,
    },
    #[error("missing gold response for {task_id}/{persona_id}")]
    MissingGold { task_id: String, persona_id: String },
    #[error("unknown persona {persona_id}")]
    UnknownPersona { persona_id: String },
    #[error("unknown task {task_id}")]
    UnknownTask { task_id: String },
    #[error("non-finite score for {task_id}/{persona_id} sample {sample_index}")]
    NonFiniteScore { task_id: String, persona_id: String, sample_index: usize },
    #[error("top_k must be at least 1")]
    InvalidTopK,
    #[error("no scored trajectories to select from")]
    Empty,
}

/// The context under which the gold response is scored (and under which
/// final responses are generated): name + task, the turns, then the task
/// again as the final user message.
pub fn build_response_context(persona_name: &str, task_text: &str, turns: &[Turn]) -> Vec<Message> {
    let mut messages = vec![Message::user(format!("My name is {persona_name}.\n\n{task_text}"))];
    for turn in turns {
        messages.push(Message::assistant(turn.question.clone()));
        messages.push(Message::user(turn.answer.clone()));
    }
    messages.push(Message::user(task_text.to_string()));
    messages
}

/// A conversation plus its gold-response score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrajectory {
    pub task_id: String,
    pub persona_id: String,
    pub sample_index: usize,
    pub turn_budget: usize,
    /// Selection score: the summed gold log-probability, or the per-token
    /// mean when length normalization is on.
    pub score: f64,
    pub sum_logprob: f64,
    pub token_count: usize,
    pub scorer_backend_id: String,
}

/// Scores one conversation against the pair's gold response.
pub fn score_conversation(
    scorer: &BackendClient,
    conversation: &Conversation,
    persona_name: &str,
    task_text: &str,
    gold_text: &str,
    length_normalize: bool,
    request_id: &str,
) -> Result<ScoredTrajectory, SelectionError> {
    let context = build_response_context(persona_name, task_text, &conversation.turns);
    let request = ScoreRequest { messages: context, continuation: gold_text.to_string() };
    let result = scorer.score_continuation(request_id, &request).map_err(|source| SelectionError::Backend {
        task_id: conversation.task_id.clone(),
        persona_id: conversation.persona_id.clone(),
        sample_index: conversation.sample_index,
        source,
    })?;
    let sum = result.sum();
    let score = if length_normalize { result.mean() } else { sum };
    if !score.is_finite() {
        return Err(SelectionError::NonFiniteScore {
            task_id: conversation.task_id.clone(),
            persona_id: conversation.persona_id.clone(),
            sample_index: conversation.sample_index,
        });
    }
    Ok(ScoredTrajectory {
        task_id: conversation.task_id.clone(),
        persona_id: conversation.persona_id.clone(),
        sample_index: conversation.sample_index,
        turn_budget: conversation.turn_budget,
        score,
        sum_logprob: sum,
        token_count: result.token_count,
        scorer_backend_id: scorer.id().to_string(),
    })
}

/// Scores a whole batch in parallel with deterministic request ids.
pub fn score_batch(
    scorer: &BackendClient,
    corpus: &Corpus,
    conversations: &[Conversation],
    length_normalize: bool,
    domain: &str,
    iteration: u32,
) -> Result<Vec<ScoredTrajectory>, SelectionError> {
    conversations
        .par_iter()
        .map(|conversation| {
            let persona = corpus
                .persona(&conversation.persona_id)
                .ok_or_else(|| SelectionError::UnknownPersona { persona_id: conversation.persona_id.clone() })?;
            let task = corpus
                .task(&conversation.task_id)
                .ok_or_else(|| SelectionError::UnknownTask { task_id: conversation.task_id.clone() })?;
            let gold = corpus.gold(&conversation.task_id, &conversation.persona_id).ok_or_else(|| {
                SelectionError::MissingGold {
                    task_id: conversation.task_id.clone(),
                    persona_id: conversation.persona_id.clone(),
                }
            })?;
            let request_id = format!(
                "{domain}:i{iteration}:score:{}:{}:s{}",
                conversation.task_id, conversation.persona_id, conversation.sample_index
            );
            score_conversation(scorer, conversation, &persona.name, &task.text, &gold.text, length_normalize, &request_id)
        })
        .collect()
}

/// The per-pair winners of best-of-n selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub task_id: String,
    pub persona_id: String,
    /// Winning sample indices, best first, up to top_k.
    pub sample_indices: Vec<usize>,
    pub best_score: f64,
    /// Number of scored candidates the winner was chosen from.
    pub candidates: usize,
}

/// Keeps the top-k trajectories per pair (argmax for k = 1). Ties break to
/// the lowest sample index; pairs are emitted in lexicographic order.
pub fn select_best(scored: &[ScoredTrajectory], top_k: usize) -> Result<Vec<Selection>, SelectionError> {
    if top_k == 0 {
        return Err(SelectionError::InvalidTopK);
    }
    if scored.is_empty() {
        return Err(SelectionError::Empty);
    }
    let mut groups: std::collections::BTreeMap<(String, String), Vec<&ScoredTrajectory>> =
        std::collections::BTreeMap::new();
    for trajectory in scored {
        groups
            .entry((trajectory.task_id.clone(), trajectory.persona_id.clone()))
            .or_default()
            .push(trajectory);
    }
    Ok(groups
        .into_iter()
        .map(|((task_id, persona_id), mut candidates)| {
            candidates.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .expect("scores are finite")
                    .then(a.sample_index.cmp(&b.sample_index))
            });
            let winners: Vec<usize> = candidates.iter().take(top_k).map(|t| t.sample_index).collect();
            Selection {
                task_id,
                persona_id,
                best_score: candidates[0].score,
                sample_indices: winners,
                candidates: candidates.len(),
            }
        })
        .collect())
}

/// Samples the regularization response: the previous policy's greedy
/// (temperature 0) answer to the selected conversation's response context.
pub fn sample_regularization_response(
    responder: &BackendClient,
    conversation: &Conversation,
    persona_name: &str,
    task_text: &str,
    request_id: &str,
) -> Result<String, SelectionError> {
    let messages = build_response_context(persona_name, task_text, &conversation.turns);
    let request = GenerationRequest::new(messages)
        .with_temperature(0.0)
        .with_seed(derive_seed(conversation.seed, &["regularization"]));
    responder.generate(request_id, &request).map_err(|source| SelectionError::Backend {
        task_id: conversation.task_id.clone(),
        persona_id: conversation.persona_id.clone(),
        sample_index: conversation.sample_index,
        source,
    })
}

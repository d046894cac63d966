//! Evaluation suite: controlled log-probability comparisons and judged
//! head-to-head win rates.
//!
//! The log-probability evaluation scores each test pair's gold response
//! under four contexts:
//!
//! * `negative_control` — the task alone (no information about the user);
//! * `positive_control` — the full persona plus the task (everything the
//!   oracle saw);
//! * `q_experimental` — the candidate policy's own conversation with that
//!   persona, in the response-context shape;
//! * `q_random` — a conversation for the same task with a uniformly drawn
//!   *different* test persona, which controls for generic question effects.
//!
//! A useful questioner sits between the controls: above `negative_control`
//! (its questions elicited something) and above `q_random` (what it
//! elicited is specific to the right persona).
//!
//! Win rates compare final responses from a candidate and a baseline
//! policy on the same conversation cell, shown to a judge in a random
//! order. The verdict must be a bare `A` or `B` on the last non-empty
//! line (edge punctuation and quotes tolerated); anything else is a parse
//! failure, and judge refusals are recorded as refusals — both are
//! excluded from the win-rate denominator.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendClient, BackendError, GenerationRequest, Message, ScoreRequest};
use crate::corpus::{Corpus, Pair};
use crate::dialogue::Conversation;
use crate::selection::build_response_context;
use crate::template::{fill, TemplateError, TemplateSet};
use crate::util::{binomial_sem, derive_seed, mean, sem};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("template error: {0}")]
    Template(#[from] TemplateError),
    #[error("backend failure during {stage} for {task_id}/{persona_id}: {source}")]
    Backend {
        stage: String,
        task_id: String,
        persona_id: String,
        #[source]
        source: BackendError,
    },
    #[error("no conversation available for {task_id}/{persona_id}")]
    MissingConversation { task_id: String, persona_id: String },
    #[error("q_random needs at least two distinct test personas")]
    InsufficientPersonas,
    #[error("missing gold response for {task_id}/{persona_id}")]
    MissingGold { task_id: String, persona_id: String },
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("unknown persona {0}")]
    UnknownPersona(String),
    #[error("no judged comparisons (all refusals or parse failures)")]
    NoJudgedRecords,
}

/// The four scoring conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogprobCondition {
    NegativeControl,
    PositiveControl,
    QExperimental,
    QRandom,
}

impl LogprobCondition {
    pub const ALL: [LogprobCondition; 4] = [
        LogprobCondition::NegativeControl,
        LogprobCondition::PositiveControl,
        LogprobCondition::QExperimental,
        LogprobCondition::QRandom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LogprobCondition::NegativeControl => "negative_control",
            LogprobCondition::PositiveControl => "positive_control",
            LogprobCondition::QExperimental => "q_experimental",
            LogprobCondition::QRandom => "q_random",
        }
    }
}

/// Context under which the gold response is scored for one condition.
pub fn build_condition_context(
    condition: LogprobCondition,
    persona_name: &str,
    persona_text: &str,
    task_text: &str,
    conversation: Option<&Conversation>,
) -> Vec<Message> {
    match condition {
        LogprobCondition::NegativeControl => vec![Message::user(task_text.to_string())],
        LogprobCondition::PositiveControl => {
            vec![Message::user(format!("{persona_text}\n\n{task_text}"))]
        }
        LogprobCondition::QExperimental | LogprobCondition::QRandom => {
            let conversation = conversation.expect("conversation conditions require a conversation");
            build_response_context(persona_name, task_text, &conversation.turns)
        }
    }
}

/// One scored (pair, condition) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobEvalItem {
    pub iteration: u32,
    pub condition: LogprobCondition,
    pub task_id: String,
    pub persona_id: String,
    /// Which persona's conversation supplied the context. Equals
    /// `persona_id` for `q_experimental`, necessarily differs for
    /// `q_random`, and is absent for the controls.
    pub conversation_persona_id: Option<String>,
    pub sum_logprob: f64,
    pub token_count: usize,
}

/// Per-condition mean of summed gold log-probabilities over test pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobSummary {
    pub iteration: u32,
    pub condition: LogprobCondition,
    pub n: usize,
    pub mean: f64,
    pub sem: f64,
}

/// Scores every test pair under all four conditions. `conversations` must
/// contain at least one conversation per test pair (the lowest sample index
/// is used); q_random draws its donor persona uniformly (seeded) from the
/// other test personas of the same grid.
pub fn run_logprob_eval(
    scorer: &BackendClient,
    corpus: &Corpus,
    test_pairs: &[Pair],
    conversations: &[Conversation],
    iteration: u32,
    seed: u64,
) -> Result<Vec<LogprobEvalItem>, EvalError> {
    let mut by_pair: HashMap<(&str, &str), &Conversation> = HashMap::new();
    for conversation in conversations {
        let key = (conversation.task_id.as_str(), conversation.persona_id.as_str());
        let slot = by_pair.entry(key).or_insert(conversation);
        if conversation.sample_index < slot.sample_index {
            *slot = conversation;
        }
    }
    let personas: Vec<&str> = {
        let unique: std::collections::BTreeSet<&str> = test_pairs.iter().map(|p| p.persona_id.as_str()).collect();
        unique.into_iter().collect()
    };
    if personas.len() < 2 {
        return Err(EvalError::InsufficientPersonas);
    }

    let items: Result<Vec<Vec<LogprobEvalItem>>, EvalError> = test_pairs
        .par_iter()
        .map(|pair| {
            let task = corpus.task(&pair.task_id).ok_or_else(|| EvalError::UnknownTask(pair.task_id.clone()))?;
            let persona =
                corpus.persona(&pair.persona_id).ok_or_else(|| EvalError::UnknownPersona(pair.persona_id.clone()))?;
            let gold = corpus.gold(&pair.task_id, &pair.persona_id).ok_or_else(|| EvalError::MissingGold {
                task_id: pair.task_id.clone(),
                persona_id: pair.persona_id.clone(),
            })?;
            let own = *by_pair.get(&(pair.task_id.as_str(), pair.persona_id.as_str())).ok_or_else(|| {
                EvalError::MissingConversation { task_id: pair.task_id.clone(), persona_id: pair.persona_id.clone() }
            })?;

            // Seeded draw of a different persona whose conversation on the
            // same task stands in as the uninformative control.
            let others: Vec<&str> = personas.iter().copied().filter(|p| *p != pair.persona_id.as_str()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &["q_random", &iteration.to_string(), &pair.task_id, &pair.persona_id],
            ));
            let donor_id = others[rng.gen_range(0..others.len())];
            let donor = *by_pair.get(&(pair.task_id.as_str(), donor_id)).ok_or_else(|| {
                EvalError::MissingConversation { task_id: pair.task_id.clone(), persona_id: donor_id.to_string() }
            })?;

            let mut out = Vec::with_capacity(LogprobCondition::ALL.len());
            for condition in LogprobCondition::ALL {
                let (conversation, conversation_persona_id) = match condition {
                    LogprobCondition::QExperimental => (Some(own), Some(pair.persona_id.clone())),
                    LogprobCondition::QRandom => (Some(donor), Some(donor_id.to_string())),
                    _ => (None, None),
                };
                let context =
                    build_condition_context(condition, &persona.name, &persona.text, &task.text, conversation);
                let request = ScoreRequest { messages: context, continuation: gold.text.clone() };
                let request_id = format!(
                    "eval:i{iteration}:lp:{}:{}:{}",
                    condition.as_str(),
                    pair.task_id,
                    pair.persona_id
                );
                let result =
                    scorer.score_continuation(&request_id, &request).map_err(|source| EvalError::Backend {
                        stage: format!("logprob:{}", condition.as_str()),
                        task_id: pair.task_id.clone(),
                        persona_id: pair.persona_id.clone(),
                        source,
                    })?;
                out.push(LogprobEvalItem {
                    iteration,
                    condition,
                    task_id: pair.task_id.clone(),
                    persona_id: pair.persona_id.clone(),
                    conversation_persona_id,
                    sum_logprob: result.sum(),
                    token_count: result.token_count,
                });
            }
            Ok(out)
        })
        .collect();

    Ok(items?.into_iter().flatten().collect())
}

/// Per-condition summaries in declaration order.
pub fn summarize_logprobs(iteration: u32, items: &[LogprobEvalItem]) -> Vec<LogprobSummary> {
    LogprobCondition::ALL
        .iter()
        .map(|&condition| {
            let values: Vec<f64> =
                items.iter().filter(|i| i.condition == condition).map(|i| i.sum_logprob).collect();
            LogprobSummary { iteration, condition, n: values.len(), mean: mean(&values), sem: sem(&values) }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Judged win rates
// ---------------------------------------------------------------------------

/// Outcome of one judged comparison, from the candidate's perspective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeOutcome {
    CandidateWin,
    BaselineWin,
    Refusal,
    ParseFailure,
}

/// One judged comparison record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRecord {
    pub iteration: u32,
    pub task_id: String,
    pub persona_id: String,
    pub sample_index: usize,
    pub turn_budget: usize,
    /// True when the candidate's response was shown as Response A.
    pub candidate_first: bool,
    pub outcome: JudgeOutcome,
    /// The judge's raw reply (empty for refusals), kept for audits.
    pub judge_raw: String,
    pub candidate_model: String,
    pub baseline_model: String,
}

/// Extracts the verdict: the last non-empty line, stripped of surrounding
/// punctuation and quotes, must be exactly `A` or `B`.
pub fn parse_verdict(raw: &str) -> Option<char> {
    let line = raw.lines().rev().find(|l| !l.trim().is_empty())?;
    let stripped = line.trim().trim_matches(|c: char| !c.is_ascii_alphanumeric());
    match stripped {
        "A" => Some('A'),
        "B" => Some('B'),
        _ => None,
    }
}

/// A final response produced for one conversation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub task_id: String,
    pub persona_id: String,
    pub sample_index: usize,
    pub turn_budget: usize,
    pub response: String,
    pub model: String,
}

/// Generates the greedy final response for one conversation.
pub fn generate_final_response(
    responder: &BackendClient,
    conversation: &Conversation,
    persona_name: &str,
    task_text: &str,
    model: &str,
    request_id: &str,
) -> Result<ResponseRecord, EvalError> {
    let messages = build_response_context(persona_name, task_text, &conversation.turns);
    let request = GenerationRequest::new(messages)
        .with_temperature(0.0)
        .with_seed(derive_seed(conversation.seed, &["final_response"]));
    let response = responder.generate(request_id, &request).map_err(|source| EvalError::Backend {
        stage: "final_response".into(),
        task_id: conversation.task_id.clone(),
        persona_id: conversation.persona_id.clone(),
        source,
    })?;
    Ok(ResponseRecord {
        task_id: conversation.task_id.clone(),
        persona_id: conversation.persona_id.clone(),
        sample_index: conversation.sample_index,
        turn_budget: conversation.turn_budget,
        response,
        model: model.to_string(),
    })
}

/// Generates greedy final responses for a whole batch of conversations.
pub fn generate_final_responses(
    responder: &BackendClient,
    corpus: &Corpus,
    conversations: &[Conversation],
    model: &str,
    domain: &str,
    iteration: u32,
) -> Result<Vec<ResponseRecord>, EvalError> {
    conversations
        .par_iter()
        .map(|conversation| {
            let task =
                corpus.task(&conversation.task_id).ok_or_else(|| EvalError::UnknownTask(conversation.task_id.clone()))?;
            let persona = corpus
                .persona(&conversation.persona_id)
                .ok_or_else(|| EvalError::UnknownPersona(conversation.persona_id.clone()))?;
            let request_id = format!(
                "{domain}:i{iteration}:resp:{}:{}:s{}",
                conversation.task_id, conversation.persona_id, conversation.sample_index
            );
            generate_final_response(responder, conversation, &persona.name, &task.text, model, &request_id)
        })
        .collect()
}

/// Judges one candidate/baseline response pair. The presentation order is a
/// fair coin from `coin_seed`; a judge refusal becomes a `Refusal` record
/// rather than an error.
#[allow(clippy::too_many_arguments)]
pub fn judge_pair(
    judge: &BackendClient,
    templates: &TemplateSet,
    persona_text: &str,
    task_text: &str,
    candidate: &ResponseRecord,
    baseline: &ResponseRecord,
    iteration: u32,
    coin_seed: u64,
    request_id: &str,
) -> Result<JudgeRecord, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(coin_seed);
    let candidate_first = rng.gen::<bool>();
    let (response_a, response_b) = if candidate_first {
        (candidate.response.as_str(), baseline.response.as_str())
    } else {
        (baseline.response.as_str(), candidate.response.as_str())
    };
    let system = fill("judge_system", &templates.judge_system, &[])?;
    let user = fill(
        "judge_user",
        &templates.judge_user,
        &[
            ("background", persona_text),
            ("query", task_text),
            ("response_a", response_a),
            ("response_b", response_b),
        ],
    )?;
    let request = GenerationRequest::new(vec![Message::system(system), Message::user(user)])
        .with_temperature(0.0)
        .with_seed(derive_seed(coin_seed, &["judge"]));

    let mut record = JudgeRecord {
        iteration,
        task_id: candidate.task_id.clone(),
        persona_id: candidate.persona_id.clone(),
        sample_index: candidate.sample_index,
        turn_budget: candidate.turn_budget,
        candidate_first,
        outcome: JudgeOutcome::ParseFailure,
        judge_raw: String::new(),
        candidate_model: candidate.model.clone(),
        baseline_model: baseline.model.clone(),
    };
    match judge.generate(request_id, &request) {
        Ok(raw) => {
            record.outcome = match parse_verdict(&raw) {
                Some('A') => {
                    if candidate_first {
                        JudgeOutcome::CandidateWin
                    } else {
                        JudgeOutcome::BaselineWin
                    }
                }
                Some('B') => {
                    if candidate_first {
                        JudgeOutcome::BaselineWin
                    } else {
                        JudgeOutcome::CandidateWin
                    }
                }
                _ => JudgeOutcome::ParseFailure,
            };
            record.judge_raw = raw;
            Ok(record)
        }
        Err(err) if err.is_refusal() => {
            record.outcome = JudgeOutcome::Refusal;
            Ok(record)
        }
        Err(source) => Err(EvalError::Backend {
            stage: "judge".into(),
            task_id: candidate.task_id.clone(),
            persona_id: candidate.persona_id.clone(),
            source,
        }),
    }
}

/// Judges every matching (task, persona, sample) cell of two response sets.
#[allow(clippy::too_many_arguments)]
pub fn judge_response_sets(
    judge: &BackendClient,
    templates: &TemplateSet,
    corpus: &Corpus,
    candidates: &[ResponseRecord],
    baselines: &[ResponseRecord],
    iteration: u32,
    seed: u64,
) -> Result<Vec<JudgeRecord>, EvalError> {
    let baseline_by_key: HashMap<(&str, &str, usize), &ResponseRecord> =
        baselines.iter().map(|r| ((r.task_id.as_str(), r.persona_id.as_str(), r.sample_index), r)).collect();
    let pairs: Vec<(&ResponseRecord, &ResponseRecord)> = candidates
        .iter()
        .filter_map(|candidate| {
            baseline_by_key
                .get(&(candidate.task_id.as_str(), candidate.persona_id.as_str(), candidate.sample_index))
                .map(|baseline| (candidate, *baseline))
        })
        .collect();

    pairs
        .par_iter()
        .map(|(candidate, baseline)| {
            let task = corpus
                .task(&candidate.task_id)
                .ok_or_else(|| EvalError::UnknownTask(candidate.task_id.clone()))?;
            let persona = corpus
                .persona(&candidate.persona_id)
                .ok_or_else(|| EvalError::UnknownPersona(candidate.persona_id.clone()))?;
            let coin_seed = derive_seed(
                seed,
                &[
                    "judge",
                    &iteration.to_string(),
                    &candidate.task_id,
                    &candidate.persona_id,
                    &candidate.sample_index.to_string(),
                ],
            );
            let request_id = format!(
                "eval:i{iteration}:judge:{}:{}:s{}",
                candidate.task_id, candidate.persona_id, candidate.sample_index
            );
            judge_pair(
                judge,
                templates,
                &persona.text,
                &task.text,
                candidate,
                baseline,
                iteration,
                coin_seed,
                &request_id,
            )
        })
        .collect()
}

/// Aggregated win rate with refusals and parse failures excluded from the
/// denominator but reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateReport {
    pub iteration: u32,
    pub candidate_model: String,
    pub baseline_model: String,
    pub wins: usize,
    pub losses: usize,
    pub refusals: usize,
    pub parse_failures: usize,
    /// wins + losses.
    pub judged: usize,
    pub win_rate: f64,
    pub sem: f64,
    /// Win rate split by the candidate conversation's turn budget.
    pub by_turn_budget: BTreeMap<String, BudgetWinRate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetWinRate {
    pub wins: usize,
    pub judged: usize,
    pub win_rate: f64,
}

pub fn aggregate_win_rate(iteration: u32, records: &[JudgeRecord]) -> Result<WinRateReport, EvalError> {
    let mut wins = 0usize;
    let mut losses = 0usize;
    let mut refusals = 0usize;
    let mut parse_failures = 0usize;
    let mut budget_tallies: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for record in records {
        match record.outcome {
            JudgeOutcome::CandidateWin => {
                wins += 1;
                let entry = budget_tallies.entry(record.turn_budget.to_string()).or_default();
                entry.0 += 1;
                entry.1 += 1;
            }
            JudgeOutcome::BaselineWin => {
                losses += 1;
                budget_tallies.entry(record.turn_budget.to_string()).or_default().1 += 1;
            }
            JudgeOutcome::Refusal => refusals += 1,
            JudgeOutcome::ParseFailure => parse_failures += 1,
        }
    }
    let judged = wins + losses;
    if judged == 0 {
        return Err(EvalError::NoJudgedRecords);
    }
    let win_rate = wins as f64 / judged as f64;
    let models: HashSet<(&str, &str)> =
        records.iter().map(|r| (r.candidate_model.as_str(), r.baseline_model.as_str())).collect();
    debug_assert!(models.len() <= 1, "one report aggregates one model matchup");
    let (candidate_model, baseline_model) = records
        .first()
        .map(|r| (r.candidate_model.clone(), r.baseline_model.clone()))
        .unwrap_or_default();
    Ok(WinRateReport {
        iteration,
        candidate_model,
        baseline_model,
        wins,
        losses,
        refusals,
        parse_failures,
        judged,
        win_rate,
        sem: binomial_sem(win_rate, judged),
        by_turn_budget: budget_tallies
            .into_iter()
            .map(|(budget, (w, j))| (budget, BudgetWinRate { wins: w, judged: j, win_rate: w as f64 / j as f64 }))
            .collect(),
    })
}

//! Hermetic synthetic testbed: a fully-specified world of attributes, value
//! tokens, personas, and tasks, plus deterministic mock backends for every
//! pipeline role.
//!
//! The point of the testbed is that every quantity the pipeline optimizes is
//! computable in closed form. Personas assign one value token per attribute;
//! each task cares about exactly one attribute; the gold answer for a
//! (task, persona) pair contains the persona's value token for that
//! attribute. The mock scorer prices each gold token by a published
//! conditional table, so the benefit of eliciting the right value during a
//! conversation is exactly `ln(p_hi) - ln(p_lo)` per gold value token —
//! which is what the closed-form oracle tests assert.
//!
//! The mock questioner is genuinely trainable: it keeps Laplace-smoothed
//! template counts per task-attribute context plus a "respond" behavior
//! weight. Training on exported datasets moves those counts (only through
//! `train_on = true` content), so a full expert-iteration loop exhibits the
//! qualitative dynamics of the real system — including the failure mode
//! where a policy fine-tuned without response regularization deflects with
//! yet another question when asked to finally answer.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, GenerationRequest, Role, ScoreRequest, ScoreResult};
use crate::corpus::{Persona, Task};
use crate::util::derive_seed;

/// Default conditional-table probabilities for the mock scorer.
pub const DEFAULT_P_HI: f64 = 0.9;
pub const DEFAULT_P_LO: f64 = 0.2;
pub const DEFAULT_P_OTHER: f64 = 0.5;

/// Shape of a synthetic world; the world is a pure function of these values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldParams {
    pub attributes: usize,
    pub values_per_attribute: usize,
    pub personas: usize,
    pub tasks: usize,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams { attributes: 3, values_per_attribute: 4, personas: 20, tasks: 30, seed: 0 }
    }
}

/// A synthetic persona: one value index per attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldPersona {
    pub id: String,
    pub name: String,
    /// `values[a]` is the index of this persona's value for attribute `a`.
    pub values: Vec<usize>,
}

/// A synthetic task caring about exactly one attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldTask {
    pub id: String,
    pub attribute: usize,
    pub text: String,
}

/// The generated world. Value tokens are unique across attributes by
/// construction (`v<attr>_<idx>`), so token containment identifies both the
/// attribute and the value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub params: WorldParams,
    pub attributes: Vec<String>,
    /// `values[a][i]` is the i-th value token of attribute `a`.
    pub values: Vec<Vec<String>>,
    pub personas: Vec<WorldPersona>,
    pub tasks: Vec<WorldTask>,
    #[serde(skip)]
    value_attr: HashMap<String, usize>,
}

/// Whitespace tokenization with punctuation trimmed from token edges.
/// Underscores and alphanumerics are token characters, so value tokens like
/// `v2_1` survive adjacent punctuation. All mock containment checks and the
/// closed-form oracles share this exact rule.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !(c.is_ascii_alphanumeric() || c == '_')))
        .filter(|t| !t.is_empty())
        .collect()
}

/// Generates the world for the given parameters. Deterministic: the same
/// params always yield the same personas and tasks.
pub fn gen_world(params: WorldParams) -> SyntheticWorld {
    assert!(params.attributes >= 1, "world needs at least one attribute");
    assert!(params.values_per_attribute >= 2, "attributes need at least two values");
    let attributes: Vec<String> = (0..params.attributes).map(|a| format!("attr{a}")).collect();
    let values: Vec<Vec<String>> = (0..params.attributes)
        .map(|a| (0..params.values_per_attribute).map(|v| format!("v{a}_{v}")).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, &["world", "personas"]));
    let personas: Vec<WorldPersona> = (0..params.personas)
        .map(|j| {
            let assignment: Vec<usize> =
                (0..params.attributes).map(|_| rng.gen_range(0..params.values_per_attribute)).collect();
            WorldPersona { id: format!("p{j:02}"), name: format!("User{j}"), values: assignment }
        })
        .collect();

    let tasks: Vec<WorldTask> = (0..params.tasks)
        .map(|i| {
            let attribute = i % params.attributes;
            WorldTask {
                id: format!("t{i:02}"),
                attribute,
                text: format!(
                    "Task {i}: I want a recommendation that fits my {} preferences. What would you suggest?",
                    attributes[attribute]
                ),
            }
        })
        .collect();

    let mut world = SyntheticWorld { params, attributes, values, personas, tasks, value_attr: HashMap::new() };
    world.rebuild_index();
    world
}

impl SyntheticWorld {
    fn rebuild_index(&mut self) {
        self.value_attr = self
            .values
            .iter()
            .enumerate()
            .flat_map(|(a, vals)| vals.iter().map(move |v| (v.clone(), a)))
            .collect();
    }

    /// Restores the derived index after deserialization.
    pub fn reindex(mut self) -> Self {
        self.rebuild_index();
        self
    }

    pub fn is_value_token(&self, token: &str) -> bool {
        self.value_attr.contains_key(token)
    }

    pub fn attribute_of_value(&self, token: &str) -> Option<usize> {
        self.value_attr.get(token).copied()
    }

    /// The unique attribute mentioned in `text`, if any (token-exact match).
    pub fn attribute_in_text(&self, text: &str) -> Option<usize> {
        let tokens = tokenize(text);
        self.attributes
            .iter()
            .position(|attr| tokens.iter().any(|t| t == attr))
    }

    /// Free-text self-description embedding every assignment.
    pub fn persona_text(&self, persona: &WorldPersona) -> String {
        let mut parts = vec![format!("I am {}.", persona.name)];
        for (a, &v) in persona.values.iter().enumerate() {
            parts.push(format!("My {} is {} .", self.attributes[a], self.values[a][v]));
        }
        parts.join(" ")
    }

    /// Question template `t` (one per attribute, plus the final irrelevant
    /// template at index `attributes.len()`).
    pub fn question_text(&self, template: usize) -> String {
        if template < self.attributes.len() {
            format!(
                "Could you tell me about your {} preferences and what usually works for you?",
                self.attributes[template]
            )
        } else {
            "Before we get into details, how has your week been going overall?".to_string()
        }
    }

    pub fn template_count(&self) -> usize {
        self.attributes.len() + 1
    }

    /// Index of the irrelevant template.
    pub fn irrelevant_template(&self) -> usize {
        self.attributes.len()
    }

    /// Which template a question string is (exact match after trimming).
    pub fn template_of_question(&self, question: &str) -> Option<usize> {
        let q = question.trim();
        (0..self.template_count()).find(|&t| self.question_text(t) == q)
    }

    /// A tailored answer mentioning `value` exactly once — the shape shared
    /// by gold responses and the mock policy's informed responses.
    pub fn response_phrase(&self, attribute: usize, value: &str) -> String {
        format!(
            "Here is a plan built around your {} preference {} so it should fit you well.",
            self.attributes[attribute], value
        )
    }

    /// Fallback response containing no value tokens.
    pub fn generic_response(&self) -> String {
        "Here is a general plan that works for most people, without any personal tailoring.".to_string()
    }

    /// The oracle's gold answer for a (task, persona) pair.
    pub fn gold_text(&self, task: &WorldTask, persona: &WorldPersona) -> String {
        let value = &self.values[task.attribute][persona.values[task.attribute]];
        self.response_phrase(task.attribute, value)
    }

    /// In-character reveal of the persona's value for `attribute`.
    pub fn reveal_answer(&self, attribute: usize, persona: &WorldPersona) -> String {
        let value = &self.values[attribute][persona.values[attribute]];
        format!("When it comes to {} I usually go with {} these days.", self.attributes[attribute], value)
    }

    /// Filler answer containing no value or attribute tokens.
    pub fn filler_answer(&self) -> String {
        "Honestly, nothing specific comes to mind that seems worth adding right now.".to_string()
    }

    /// Corpus records for this world (gold responses come from the oracle
    /// backend so their provenance is recorded like any other run).
    pub fn corpus_tasks(&self) -> Vec<Task> {
        self.tasks.iter().map(|t| Task { id: t.id.clone(), text: t.text.clone() }).collect()
    }

    pub fn corpus_personas(&self) -> Vec<Persona> {
        self.personas
            .iter()
            .map(|p| Persona { id: p.id.clone(), name: p.name.clone(), text: self.persona_text(p) })
            .collect()
    }

    pub fn find_task(&self, id: &str) -> Option<&WorldTask> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn find_persona(&self, id: &str) -> Option<&WorldPersona> {
        self.personas.iter().find(|p| p.id == id)
    }

    /// Persona assignments recoverable from free text (used by mocks that
    /// only see rendered prompts): every value token found, by attribute.
    pub fn assignments_in_text(&self, text: &str) -> HashMap<usize, String> {
        let mut found = HashMap::new();
        for token in tokenize(text) {
            if let Some(attr) = self.attribute_of_value(token) {
                found.entry(attr).or_insert_with(|| token.to_string());
            }
        }
        found
    }
}

// ---------------------------------------------------------------------------
// Trainable mock questioner
// ---------------------------------------------------------------------------

/// Trainable state of the mock questioner: Laplace-smoothed question-template
/// counts per task-attribute context, plus one "respond" behavior count that
/// competes with asking when the prompt requests a final answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockQuestionerPolicy {
    /// `counts[ctx][t]`: observed template `t` under task-attribute `ctx`.
    pub counts: Vec<Vec<f64>>,
    /// Observed final responses (any trained message that is not a question
    /// template).
    pub respond_count: f64,
}

impl MockQuestionerPolicy {
    /// The untrained policy: all counts zero, i.e. uniform over templates.
    pub fn uniform(world: &SyntheticWorld) -> Self {
        MockQuestionerPolicy {
            counts: vec![vec![0.0; world.template_count()]; world.attributes.len()],
            respond_count: 0.0,
        }
    }

    /// Laplace-smoothed weights for a context (always strictly positive).
    pub fn template_weights(&self, ctx: usize) -> Vec<f64> {
        self.counts[ctx].iter().map(|c| c + 1.0).collect()
    }

    /// P(template | ctx) under the smoothed categorical.
    pub fn question_prob(&self, ctx: usize, template: usize) -> f64 {
        let weights = self.template_weights(ctx);
        weights[template] / weights.iter().sum::<f64>()
    }

    /// Probability mass on the context's own (relevant) attribute template.
    pub fn relevant_mass(&self, ctx: usize) -> f64 {
        self.question_prob(ctx, ctx)
    }

    pub fn observe_question(&mut self, ctx: usize, template: usize) {
        self.counts[ctx][template] += 1.0;
    }

    pub fn observe_response(&mut self) {
        self.respond_count += 1.0;
    }

    /// Whether a response-shaped prompt gets an actual response (true) or a
    /// deflecting question (false). Ties favor responding, so the untrained
    /// policy answers; a policy trained on questions alone stops answering.
    pub fn responds_when_asked(&self, ctx: usize) -> bool {
        let max_q = self.template_weights(ctx).into_iter().fold(f64::MIN, f64::max);
        self.respond_count + 1.0 >= max_q
    }
}

/// Serialized trained policy plus the world it belongs to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub world_params: WorldParams,
    pub policy: MockQuestionerPolicy,
}

impl PolicySnapshot {
    pub fn save(&self, path: &Path) -> Result<(), crate::store::StoreError> {
        crate::store::write_json_atomic(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, crate::store::StoreError> {
        crate::store::read_json(path)
    }
}

/// Greedy argmax with lowest-index tie-break.
fn argmax_lowest(weights: &[f64]) -> usize {
    let mut best = 0;
    for (i, &w) in weights.iter().enumerate().skip(1) {
        if w > weights[best] {
            best = i;
        }
    }
    best
}

/// Categorical draw over strictly positive weights; temperature reshapes the
/// distribution as `w^(1/tau)` and `tau = 0` is argmax with lowest-index
/// tie-break.
pub fn sample_template(rng: &mut ChaCha8Rng, weights: &[f64], temperature: f64) -> usize {
    debug_assert!(weights.iter().all(|w| *w > 0.0), "weights must be strictly positive");
    if temperature <= 0.0 {
        return argmax_lowest(weights);
    }
    let shaped: Vec<f64> = weights.iter().map(|w| w.powf(1.0 / temperature)).collect();
    let total: f64 = shaped.iter().sum();
    let draw: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in shaped.iter().enumerate() {
        acc += w;
        if draw < acc {
            return i;
        }
    }
    shaped.len() - 1
}

/// The mock questioner as a backend. Prompt shape selects the behavior:
/// prompts with a system message are elicitation prompts (ask a question);
/// system-less prompts are response prompts (answer, using whatever value
/// tokens the conversation revealed).
pub struct MockQuestionerBackend {
    id: String,
    world: Arc<SyntheticWorld>,
    policy: MockQuestionerPolicy,
    /// When set, responses ignore conversation history (models a base
    /// responder that never learned to exploit elicited information).
    history_blind: bool,
}

impl MockQuestionerBackend {
    pub fn new(id: impl Into<String>, world: Arc<SyntheticWorld>, policy: MockQuestionerPolicy) -> Self {
        MockQuestionerBackend { id: id.into(), world, policy, history_blind: false }
    }

    pub fn with_history_blind(mut self, history_blind: bool) -> Self {
        self.history_blind = history_blind;
        self
    }

    pub fn policy(&self) -> &MockQuestionerPolicy {
        &self.policy
    }

    fn context_for_question(&self, request: &GenerationRequest) -> Result<usize, BackendError> {
        let system = request
            .messages
            .iter()
            .find(|m| m.role == Role::System)
            .ok_or_else(|| BackendError::InvalidRequest { message: "elicitation prompt has no system message".into() })?;
        self.world.attribute_in_text(&system.content).ok_or_else(|| BackendError::InvalidRequest {
            message: "elicitation prompt mentions no known attribute".into(),
        })
    }

    fn context_for_response(&self, request: &GenerationRequest) -> Result<usize, BackendError> {
        let first_user = request
            .messages
            .iter()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| BackendError::InvalidRequest { message: "response prompt has no user message".into() })?;
        self.world.attribute_in_text(&first_user.content).ok_or_else(|| BackendError::InvalidRequest {
            message: "response prompt mentions no known attribute".into(),
        })
    }

    fn answer_response_prompt(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let ctx = self.context_for_response(request)?;
        if !self.policy.responds_when_asked(ctx) {
            // Deflection: the policy has been trained so hard on questions
            // that it asks another one instead of answering.
            let weights = self.policy.template_weights(ctx);
            return Ok(self.world.question_text(argmax_lowest(&weights)));
        }
        if self.history_blind {
            return Ok(self.world.generic_response());
        }
        for message in &request.messages {
            for token in tokenize(&message.content) {
                if self.world.attribute_of_value(token) == Some(ctx) {
                    return Ok(self.world.response_phrase(ctx, token));
                }
            }
        }
        Ok(self.world.generic_response())
    }
}

impl Backend for MockQuestionerBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        request.validate()?;
        let has_system = request.messages.iter().any(|m| m.role == Role::System);
        if !has_system {
            return self.answer_response_prompt(request);
        }
        let ctx = self.context_for_question(request)?;
        let weights = self.policy.template_weights(ctx);
        let seed = request.seed.unwrap_or_else(|| {
            // Deterministic fallback: derive from the prompt itself.
            derive_seed(0, &["mock-questioner", &request.messages.last().map(|m| m.content.clone()).unwrap_or_default()])
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let template = sample_template(&mut rng, &weights, request.temperature);
        Ok(self.world.question_text(template))
    }
}

// ---------------------------------------------------------------------------
// Scripted roleplayer
// ---------------------------------------------------------------------------

/// Answers an attribute question with the persona's value token (subject to
/// `reveal`), anything else with a filler sentence containing no value
/// tokens.
pub fn mock_roleplayer_answer(
    world: &SyntheticWorld,
    persona: &WorldPersona,
    question: &str,
    reveal: bool,
) -> String {
    match world.attribute_in_text(question) {
        Some(attr) if reveal => world.reveal_answer(attr, persona),
        _ => world.filler_answer(),
    }
}

/// The scripted roleplayer as a backend. The persona is recovered from the
/// value tokens embedded in the system prompt (the rendered persona text);
/// the pending question is the text after the final "Assistant:" marker.
pub struct MockRoleplayerBackend {
    id: String,
    world: Arc<SyntheticWorld>,
    /// Probability of actually revealing the asked-about value; 1.0 is the
    /// faithful roleplayer, lower values model a vaguer interlocutor.
    reveal_prob: f64,
    coin_salt: u64,
}

impl MockRoleplayerBackend {
    pub fn new(id: impl Into<String>, world: Arc<SyntheticWorld>) -> Self {
        MockRoleplayerBackend { id: id.into(), world, reveal_prob: 1.0, coin_salt: 0 }
    }

    pub fn with_reveal_prob(mut self, reveal_prob: f64, coin_salt: u64) -> Self {
        self.reveal_prob = reveal_prob;
        self.coin_salt = coin_salt;
        self
    }
}

impl Backend for MockRoleplayerBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        request.validate()?;
        let system = request
            .messages
            .iter()
            .find(|m| m.role == Role::System)
            .ok_or_else(|| BackendError::InvalidRequest { message: "roleplayer prompt has no system message".into() })?;
        let assignments = self.world.assignments_in_text(&system.content);
        if assignments.is_empty() {
            return Err(BackendError::InvalidRequest {
                message: "roleplayer system prompt embeds no persona value tokens".into(),
            });
        }
        let last_user = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| BackendError::InvalidRequest { message: "roleplayer prompt has no user message".into() })?;
        let question = last_user
            .content
            .rsplit("Assistant:")
            .next()
            .unwrap_or("")
            .trim();
        if question.is_empty() {
            return Err(BackendError::InvalidRequest {
                message: "roleplayer prompt does not end with a pending question".into(),
            });
        }

        let reveal = if self.reveal_prob >= 1.0 {
            true
        } else {
            let seed = request.seed.unwrap_or_else(|| derive_seed(0, &["mock-roleplayer", question]));
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.coin_salt);
            rng.gen::<f64>() < self.reveal_prob
        };

        let answer = match self.world.attribute_in_text(question) {
            Some(attr) if reveal => match assignments.get(&attr) {
                Some(value) => format!(
                    "When it comes to {} I usually go with {} these days.",
                    self.world.attributes[attr], value
                ),
                None => self.world.filler_answer(),
            },
            _ => self.world.filler_answer(),
        };
        Ok(answer)
    }
}

// ---------------------------------------------------------------------------
// Table-driven scorer
// ---------------------------------------------------------------------------

/// Scores a continuation token-by-token from a published conditional table:
/// a value token costs `ln(p_hi)` when it also appears in the context and
/// `ln(p_lo)` when it does not; every other token costs `ln(p_other)`.
/// All probabilities are in (0, 1), so every table entry is negative.
pub struct MockScorerBackend {
    id: String,
    world: Arc<SyntheticWorld>,
    pub p_hi: f64,
    pub p_lo: f64,
    pub p_other: f64,
}

impl MockScorerBackend {
    pub fn new(id: impl Into<String>, world: Arc<SyntheticWorld>) -> Self {
        MockScorerBackend {
            id: id.into(),
            world,
            p_hi: DEFAULT_P_HI,
            p_lo: DEFAULT_P_LO,
            p_other: DEFAULT_P_OTHER,
        }
    }

    pub fn with_table(mut self, p_hi: f64, p_lo: f64, p_other: f64) -> Self {
        assert!(0.0 < p_lo && p_lo < p_hi && p_hi < 1.0, "table requires 0 < p_lo < p_hi < 1");
        assert!(0.0 < p_other && p_other < 1.0);
        self.p_hi = p_hi;
        self.p_lo = p_lo;
        self.p_other = p_other;
        self
    }

    /// The guaranteed score advantage of a context containing a gold value
    /// token over one that does not, per occurrence in the gold text.
    pub fn separation_gap(&self) -> f64 {
        self.p_hi.ln() - self.p_lo.ln()
    }
}

impl Backend for MockScorerBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, _request: &GenerationRequest) -> Result<String, BackendError> {
        Err(BackendError::InvalidRequest { message: format!("backend {} only scores", self.id) })
    }

    fn score_continuation(&self, request: &ScoreRequest) -> Result<ScoreResult, BackendError> {
        request.validate()?;
        let mut context_tokens: std::collections::HashSet<&str> = std::collections::HashSet::new();
        for message in &request.messages {
            context_tokens.extend(tokenize(&message.content));
        }
        let logprobs: Vec<f64> = tokenize(&request.continuation)
            .into_iter()
            .map(|token| {
                if self.world.is_value_token(token) {
                    if context_tokens.contains(token) {
                        self.p_hi.ln()
                    } else {
                        self.p_lo.ln()
                    }
                } else {
                    self.p_other.ln()
                }
            })
            .collect();
        debug_assert!(logprobs.iter().all(|lp| *lp <= 0.0), "proper probabilities only");
        Ok(ScoreResult::new(logprobs))
    }
}

// ---------------------------------------------------------------------------
// Oracle and judge
// ---------------------------------------------------------------------------

/// Deterministic gold-response oracle. Given a gold-construction prompt
/// (persona embedded in the system message, task in the user message) it
/// emits the world's gold answer. Given a persona-generation prompt it
/// synthesizes a fresh persona description from the request seed.
pub struct MockOracleBackend {
    id: String,
    world: Arc<SyntheticWorld>,
}

impl MockOracleBackend {
    pub fn new(id: impl Into<String>, world: Arc<SyntheticWorld>) -> Self {
        MockOracleBackend { id: id.into(), world }
    }
}

impl Backend for MockOracleBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        request.validate()?;
        let user = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| BackendError::InvalidRequest { message: "oracle prompt has no user message".into() })?;

        // Persona-generation few-shot prompt: synthesize a novel persona.
        if user.content.contains("Example persona:") {
            let seed = request.seed.unwrap_or_else(|| derive_seed(1, &["mock-oracle", &user.content]));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let assignment: Vec<usize> = (0..self.world.params.attributes)
                .map(|_| rng.gen_range(0..self.world.params.values_per_attribute))
                .collect();
            let persona = WorldPersona {
                id: String::new(),
                name: format!("Gen{}", rng.gen_range(0..100_000)),
                values: assignment,
            };
            return Ok(self.world.persona_text(&persona));
        }

        // Gold-construction prompt: persona in the system message, task in
        // the user message.
        let system = request
            .messages
            .iter()
            .find(|m| m.role == Role::System)
            .ok_or_else(|| BackendError::InvalidRequest { message: "gold prompt has no system message".into() })?;
        let assignments = self.world.assignments_in_text(&system.content);
        let attr = self.world.attribute_in_text(&user.content).ok_or_else(|| BackendError::InvalidRequest {
            message: "gold prompt task mentions no known attribute".into(),
        })?;
        let value = assignments.get(&attr).ok_or_else(|| BackendError::InvalidRequest {
            message: "gold prompt persona does not assign the task's attribute".into(),
        })?;
        Ok(self.world.response_phrase(attr, value))
    }
}

/// Deterministic judge: prefers the response that contains the user's value
/// token for the task's attribute; breaks ties with a seeded fair coin. The
/// reply mimics the judge protocol (reasoning first, bare letter last), so
/// verdict parsing is exercised end to end.
pub struct MockJudgeBackend {
    id: String,
    world: Arc<SyntheticWorld>,
}

impl MockJudgeBackend {
    pub fn new(id: impl Into<String>, world: Arc<SyntheticWorld>) -> Self {
        MockJudgeBackend { id: id.into(), world }
    }
}

fn section<'a>(text: &'a str, header: &str, next_headers: &[&str]) -> Option<&'a str> {
    let start = text.find(header)? + header.len();
    let rest = &text[start..];
    let end = next_headers.iter().filter_map(|h| rest.find(h)).min().unwrap_or(rest.len());
    Some(rest[..end].trim())
}

impl Backend for MockJudgeBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        request.validate()?;
        let user = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| BackendError::InvalidRequest { message: "judge prompt has no user message".into() })?;
        let text = &user.content;
        let background = section(text, "User background:", &["User task:", "Response A:", "Response B:"])
            .ok_or_else(|| BackendError::InvalidRequest { message: "judge prompt lacks a background section".into() })?;
        let task = section(text, "User task:", &["Response A:", "Response B:"])
            .ok_or_else(|| BackendError::InvalidRequest { message: "judge prompt lacks a task section".into() })?;
        let response_a = section(text, "Response A:", &["Response B:"])
            .ok_or_else(|| BackendError::InvalidRequest { message: "judge prompt lacks response A".into() })?;
        let response_b = section(text, "Response B:", &["Which response"])
            .ok_or_else(|| BackendError::InvalidRequest { message: "judge prompt lacks response B".into() })?;

        let attr = self.world.attribute_in_text(task).ok_or_else(|| BackendError::InvalidRequest {
            message: "judge prompt task mentions no known attribute".into(),
        })?;
        let wanted = self.world.assignments_in_text(background).get(&attr).cloned().ok_or_else(|| {
            BackendError::InvalidRequest { message: "judge prompt background assigns no value for the task attribute".into() }
        })?;

        let a_hits = tokenize(response_a).iter().any(|t| *t == wanted);
        let b_hits = tokenize(response_b).iter().any(|t| *t == wanted);
        let letter = match (a_hits, b_hits) {
            (true, false) => "A",
            (false, true) => "B",
            _ => {
                let seed = request.seed.unwrap_or_else(|| derive_seed(2, &["mock-judge", text]));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                if rng.gen::<bool>() {
                    "A"
                } else {
                    "B"
                }
            }
        };
        Ok(format!(
            "Comparison: I checked which response actually uses what this user said matters to them.\n{letter}"
        ))
    }
}

// ---------------------------------------------------------------------------
// Hermetic trainer
// ---------------------------------------------------------------------------

/// Count-based trainer for the mock questioner. Folds every `train_on`
/// message of the job's datasets into a fresh copy of the base policy:
/// recognized question templates increment the matching per-context
/// template count, any other trained content increments the respond count.
/// Masked (`train_on = false`) content — the system prompt and every
/// roleplayer answer — never touches the counts, so value tokens revealed
/// by the roleplayer cannot leak into question behavior.
pub struct MockTrainer {
    world: Arc<SyntheticWorld>,
}

impl MockTrainer {
    pub fn new(world: Arc<SyntheticWorld>) -> Self {
        MockTrainer { world }
    }

    fn resolve_base(&self, model: &crate::traindata::ModelRef) -> Result<MockQuestionerPolicy, crate::traindata::TrainDataError> {
        if model.is_base() {
            return Ok(MockQuestionerPolicy::uniform(&self.world));
        }
        let path = model.as_file_path().ok_or_else(|| crate::traindata::TrainDataError::TrainerFailed {
            message: format!("hermetic trainer cannot start from model {model}"),
        })?;
        let snapshot = PolicySnapshot::load(&path)?;
        Ok(snapshot.policy)
    }
}

impl crate::traindata::Trainer for MockTrainer {
    fn train(&self, job: &crate::traindata::TrainerJob) -> Result<crate::traindata::ModelRef, crate::traindata::TrainDataError> {
        let mut policy = self.resolve_base(&job.base_model)?;
        let mut trained_messages = 0usize;
        for path in &job.dataset_paths {
            for example in crate::traindata::read_dataset(path)? {
                let system = example
                    .messages
                    .iter()
                    .find(|m| m.role == Role::System)
                    .map(|m| m.content.as_str())
                    .unwrap_or("");
                let ctx = self.world.attribute_in_text(system).ok_or_else(|| {
                    crate::traindata::TrainDataError::TrainerFailed {
                        message: format!(
                            "example {}/{} has no recognizable task attribute in its system prompt",
                            example.meta.task_id, example.meta.persona_id
                        ),
                    }
                })?;
                for message in &example.messages {
                    if !message.train_on {
                        continue;
                    }
                    trained_messages += 1;
                    match self.world.template_of_question(&message.content) {
                        Some(template) => policy.observe_question(ctx, template),
                        None => policy.observe_response(),
                    }
                }
            }
        }
        if trained_messages == 0 {
            return Err(crate::traindata::TrainDataError::TrainerFailed {
                message: "datasets contained no trainable content".to_string(),
            });
        }
        std::fs::create_dir_all(&job.output_dir).map_err(|source| crate::store::StoreError::Io {
            path: job.output_dir.display().to_string(),
            source,
        })?;
        let out = job.output_dir.join(format!("{}.json", job.output_model_id));
        PolicySnapshot { world_params: self.world.params, policy }.save(&out)?;
        Ok(crate::traindata::ModelRef::file(&out))
    }
}

// ---------------------------------------------------------------------------
// Hand-checkable unigram scorer
// ---------------------------------------------------------------------------

/// Minimal scorer with an explicit per-token probability table; useful where
/// a test wants log-probs checkable by hand. Tokens are whitespace-split
/// (no punctuation trimming — the table is explicit).
pub struct UnigramScorer {
    id: String,
    probs: HashMap<String, f64>,
}

impl UnigramScorer {
    pub fn new(id: impl Into<String>, entries: &[(&str, f64)]) -> Self {
        let probs = entries.iter().map(|(t, p)| ((*t).to_string(), *p)).collect();
        UnigramScorer { id: id.into(), probs }
    }
}

impl Backend for UnigramScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, _request: &GenerationRequest) -> Result<String, BackendError> {
        Err(BackendError::InvalidRequest { message: format!("backend {} only scores", self.id) })
    }

    fn score_continuation(&self, request: &ScoreRequest) -> Result<ScoreResult, BackendError> {
        request.validate()?;
        let mut logprobs = Vec::new();
        for token in request.continuation.split_whitespace() {
            let p = self.probs.get(token).ok_or_else(|| BackendError::InvalidRequest {
                message: format!("token {token:?} is not in the unigram table"),
            })?;
            logprobs.push(p.ln());
        }
        Ok(ScoreResult::new(logprobs))
    }
}

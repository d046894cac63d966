//! Corpus growth: persona generation by few-shot prompting and gold
//! response construction.
//!
//! Personas are generated iteratively: each attempt shows the oracle two
//! distinct exemplars drawn from the growing pool (seed personas plus
//! everything accepted so far) and asks for one new persona. Candidates are
//! rejected when they duplicate the pool or hit the blocklist
//! (case-insensitive, whitespace-trimmed). Refusals are tolerated up to a
//! configured rate; an attempt cap bounds the whole process.
//!
//! Gold responses are the oracle's greedy answers given the *full* persona
//! before the task — the privileged completions that scoring and evaluation
//! treat as ground truth. Each record carries the oracle backend id so
//! downstream artifacts are traceable to their source.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendClient, BackendError, GenerationRequest, Message};
use crate::corpus::{Corpus, GoldResponse, Pair, Persona};
use crate::template::{fill, TemplateError, TemplateSet};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("template error: {0}")]
    Template(#[from] TemplateError),
    #[error("backend failure during {stage}: {source}")]
    Backend {
        stage: String,
        #[source]
        source: BackendError,
    },
    #[error("persona generation needs at least two seed personas, got {0}")]
    NotEnoughSeeds(usize),
    #[error("refusal rate {refusals}/{attempts} exceeded the configured maximum {max_rate}")]
    RefusalRateExceeded { refusals: usize, attempts: usize, max_rate: f64 },
    #[error("persona generation stalled: {accepted}/{requested} accepted after {attempts} attempts")]
    AttemptsExhausted { accepted: usize, requested: usize, attempts: usize },
    #[error("unknown task or persona in pair {task_id}/{persona_id}")]
    UnknownPair { task_id: String, persona_id: String },
}

/// Persona generation knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonaGenConfig {
    /// How many new personas to accept.
    pub count: usize,
    pub temperature: f64,
    /// Total generation attempts before giving up.
    pub max_attempts: usize,
    /// Maximum tolerated refusals / attempts (checked once a handful of
    /// attempts have accumulated).
    pub max_refusal_rate: f64,
}

impl PersonaGenConfig {
    pub fn for_count(count: usize) -> Self {
        PersonaGenConfig { count, temperature: 1.0, max_attempts: count.saturating_mul(5).max(10), max_refusal_rate: 0.25 }
    }
}

/// Best-effort name extraction from a persona self-description: the word
/// following a leading "I am"/"My name is". Falls back to `None` when the
/// text has another shape.
pub fn extract_persona_name(text: &str) -> Option<String> {
    for marker in ["My name is ", "I am ", "I'm "] {
        if let Some(idx) = text.find(marker) {
            let rest = &text[idx + marker.len()..];
            let word: String = rest
                .chars()
                .take_while(|c| c.is_ascii_alphanumeric() || *c == '_' || *c == '-')
                .collect();
            if !word.is_empty() {
                return Some(word);
            }
        }
    }
    None
}

fn normalized(text: &str) -> String {
    text.trim().to_lowercase()
}

/// Generates `config.count` new personas by few-shot prompting the oracle.
/// Returned personas get sequential ids (`gen-p000`, ...) after the offset.
pub fn generate_personas(
    oracle: &BackendClient,
    templates: &TemplateSet,
    seeds: &[String],
    blocklist: &[String],
    config: &PersonaGenConfig,
    root_seed: u64,
    id_offset: usize,
) -> Result<Vec<Persona>, DatagenError> {
    if seeds.len() < 2 {
        return Err(DatagenError::NotEnoughSeeds(seeds.len()));
    }
    let mut pool: Vec<String> = seeds.to_vec();
    let mut rejected: std::collections::HashSet<String> =
        blocklist.iter().map(|b| normalized(b)).collect();
    for seed in seeds {
        rejected.insert(normalized(seed));
    }

    let mut accepted: Vec<String> = Vec::with_capacity(config.count);
    let mut attempts = 0usize;
    let mut refusals = 0usize;
    while accepted.len() < config.count && attempts < config.max_attempts {
        attempts += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(root_seed, &["persona_gen", &attempts.to_string()]));
        let first = rng.gen_range(0..pool.len());
        let mut second = rng.gen_range(0..pool.len() - 1);
        if second >= first {
            second += 1;
        }
        let system = fill("persona_system", &templates.persona_system, &[])?;
        let user = fill(
            "persona_user",
            &templates.persona_user,
            &[("exemplar_1", pool[first].as_str()), ("exemplar_2", pool[second].as_str())],
        )?;
        let request = GenerationRequest::new(vec![Message::system(system), Message::user(user)])
            .with_temperature(config.temperature)
            .with_seed(derive_seed(root_seed, &["persona_gen_sample", &attempts.to_string()]));
        match oracle.generate(&format!("datagen:persona:a{attempts}"), &request) {
            Ok(text) => {
                let text = text.trim().to_string();
                if text.is_empty() || rejected.contains(&normalized(&text)) {
                    continue;
                }
                rejected.insert(normalized(&text));
                pool.push(text.clone());
                accepted.push(text);
            }
            Err(err) if err.is_refusal() => {
                refusals += 1;
                if attempts >= 4 && (refusals as f64 / attempts as f64) > config.max_refusal_rate {
                    return Err(DatagenError::RefusalRateExceeded {
                        refusals,
                        attempts,
                        max_rate: config.max_refusal_rate,
                    });
                }
            }
            Err(source) => return Err(DatagenError::Backend { stage: "persona_gen".into(), source }),
        }
    }
    if accepted.len() < config.count {
        return Err(DatagenError::AttemptsExhausted {
            accepted: accepted.len(),
            requested: config.count,
            attempts,
        });
    }

    Ok(accepted
        .into_iter()
        .enumerate()
        .map(|(i, text)| {
            let id = format!("gen-p{:03}", id_offset + i);
            let name = extract_persona_name(&text).unwrap_or_else(|| format!("Persona{}", id_offset + i));
            Persona { id, name, text }
        })
        .collect())
}

/// Generates the gold response for every pair: the oracle's greedy answer
/// with the full persona in view before the task.
pub fn generate_gold_responses(
    oracle: &BackendClient,
    templates: &TemplateSet,
    corpus: &Corpus,
    pairs: &[Pair],
    root_seed: u64,
) -> Result<Vec<GoldResponse>, DatagenError> {
    pairs
        .par_iter()
        .map(|pair| {
            let task = corpus.task(&pair.task_id).ok_or_else(|| DatagenError::UnknownPair {
                task_id: pair.task_id.clone(),
                persona_id: pair.persona_id.clone(),
            })?;
            let persona = corpus.persona(&pair.persona_id).ok_or_else(|| DatagenError::UnknownPair {
                task_id: pair.task_id.clone(),
                persona_id: pair.persona_id.clone(),
            })?;
            let system = fill("gold_system", &templates.gold_system, &[("persona", persona.text.as_str())])?;
            let user = fill("gold_user", &templates.gold_user, &[("task", task.text.as_str())])?;
            let request = GenerationRequest::new(vec![Message::system(system), Message::user(user)])
                .with_temperature(0.0)
                .with_seed(derive_seed(root_seed, &["gold", &pair.task_id, &pair.persona_id]));
            let text = oracle
                .generate(&format!("datagen:gold:{}:{}", pair.task_id, pair.persona_id), &request)
                .map_err(|source| DatagenError::Backend {
                    stage: format!("gold:{}:{}", pair.task_id, pair.persona_id),
                    source,
                })?;
            Ok(GoldResponse {
                task_id: pair.task_id.clone(),
                persona_id: pair.persona_id.clone(),
                text,
                oracle_backend_id: oracle.id().to_string(),
            })
        })
        .collect()
}

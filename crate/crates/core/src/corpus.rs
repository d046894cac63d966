//! Task / persona / gold-response corpus: loading, validation, deterministic
//! splits, and the per-iteration training-pair schedule.
//!
//! The corpus is stored as three JSONL files. Splits are produced by a seeded
//! permutation followed by slicing, so a split plan is a pure function of
//! (ids, sizes, seed) and can be re-derived or audited at any time. Training
//! alternates between the two train splits: odd iterations draw from split A,
//! even iterations from split B, which keeps consecutive fine-tunes from
//! re-fitting the exact conversations selected one iteration earlier.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{self, StoreError};
use crate::util::seeded_permutation;

/// A user request the assistant must eventually answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub text: String,
}

/// A simulated user: display name plus a free-text self-description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub id: String,
    pub name: String,
    pub text: String,
}

/// The oracle's persona-tailored answer for one (task, persona) pair; the
/// target whose log-probability drives trajectory selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldResponse {
    pub task_id: String,
    pub persona_id: String,
    pub text: String,
    /// Which backend produced this gold answer (provenance).
    pub oracle_backend_id: String,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Store(#[from] StoreError),

    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },

    #[error("{kind} {id:?} has empty text")]
    EmptyText { kind: &'static str, id: String },

    #[error("gold response references unknown {kind} {id:?}")]
    UnknownReference { kind: &'static str, id: String },

    #[error("duplicate gold response for task {task_id:?} persona {persona_id:?}")]
    DuplicateGold { task_id: String, persona_id: String },

    #[error("no gold response for task {task_id:?} persona {persona_id:?}")]
    MissingGold { task_id: String, persona_id: String },

    #[error("{kind} split sizes {sizes:?} must sum to the corpus size {total}")]
    SplitSizeMismatch { kind: &'static str, sizes: [usize; 3], total: usize },

    #[error("iteration must be >= 1 (got {0})")]
    InvalidIteration(u32),
}

/// In-memory corpus with id lookups. Vectors preserve file order, which is
/// what the seeded split permutation is applied to.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub tasks: Vec<Task>,
    pub personas: Vec<Persona>,
    pub golds: Vec<GoldResponse>,
    task_index: HashMap<String, usize>,
    persona_index: HashMap<String, usize>,
    gold_index: HashMap<(String, String), usize>,
}

impl Corpus {
    /// Builds and validates a corpus from already-parsed records.
    pub fn from_records(
        tasks: Vec<Task>,
        personas: Vec<Persona>,
        golds: Vec<GoldResponse>,
    ) -> Result<Self, CorpusError> {
        let mut corpus = Corpus { tasks, personas, golds, ..Default::default() };
        for (i, t) in corpus.tasks.iter().enumerate() {
            if t.text.trim().is_empty() {
                return Err(CorpusError::EmptyText { kind: "task", id: t.id.clone() });
            }
            if corpus.task_index.insert(t.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId { kind: "task", id: t.id.clone() });
            }
        }
        for (i, p) in corpus.personas.iter().enumerate() {
            if p.text.trim().is_empty() || p.name.trim().is_empty() {
                return Err(CorpusError::EmptyText { kind: "persona", id: p.id.clone() });
            }
            if corpus.persona_index.insert(p.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId { kind: "persona", id: p.id.clone() });
            }
        }
        for (i, g) in corpus.golds.iter().enumerate() {
            if !corpus.task_index.contains_key(&g.task_id) {
                return Err(CorpusError::UnknownReference { kind: "task", id: g.task_id.clone() });
            }
            if !corpus.persona_index.contains_key(&g.persona_id) {
                return Err(CorpusError::UnknownReference { kind: "persona", id: g.persona_id.clone() });
            }
            if g.text.trim().is_empty() {
                return Err(CorpusError::EmptyText {
                    kind: "gold response",
                    id: format!("{}/{}", g.task_id, g.persona_id),
                });
            }
            let key = (g.task_id.clone(), g.persona_id.clone());
            if corpus.gold_index.insert(key, i).is_some() {
                return Err(CorpusError::DuplicateGold {
                    task_id: g.task_id.clone(),
                    persona_id: g.persona_id.clone(),
                });
            }
        }
        Ok(corpus)
    }

    /// Loads the three JSONL files and validates cross-references.
    pub fn load(tasks_path: &Path, personas_path: &Path, golds_path: &Path) -> Result<Self, CorpusError> {
        let tasks = store::read_jsonl(tasks_path)?;
        let personas = store::read_jsonl(personas_path)?;
        let golds = store::read_jsonl(golds_path)?;
        Corpus::from_records(tasks, personas, golds)
    }

    pub fn save(
        &self,
        tasks_path: &Path,
        personas_path: &Path,
        golds_path: &Path,
    ) -> Result<(), CorpusError> {
        store::write_jsonl(tasks_path, &self.tasks)?;
        store::write_jsonl(personas_path, &self.personas)?;
        store::write_jsonl(golds_path, &self.golds)?;
        Ok(())
    }

    pub fn task(&self, id: &str) -> Option<&Task> {
        self.task_index.get(id).map(|&i| &self.tasks[i])
    }

    pub fn persona(&self, id: &str) -> Option<&Persona> {
        self.persona_index.get(id).map(|&i| &self.personas[i])
    }

    pub fn gold(&self, task_id: &str, persona_id: &str) -> Option<&GoldResponse> {
        self.gold_index
            .get(&(task_id.to_string(), persona_id.to_string()))
            .map(|&i| &self.golds[i])
    }

    /// Like [`Corpus::gold`] but with a typed error for pipeline use.
    pub fn require_gold(&self, task_id: &str, persona_id: &str) -> Result<&GoldResponse, CorpusError> {
        self.gold(task_id, persona_id).ok_or_else(|| CorpusError::MissingGold {
            task_id: task_id.to_string(),
            persona_id: persona_id.to_string(),
        })
    }
}

/// Ids of one three-way split (train A / train B / held-out test).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub a: Vec<String>,
    pub b: Vec<String>,
    pub test: Vec<String>,
}

impl SplitIds {
    fn from_order(order: Vec<String>, sizes: [usize; 3]) -> Self {
        let mut iter = order.into_iter();
        let a: Vec<String> = iter.by_ref().take(sizes[0]).collect();
        let b: Vec<String> = iter.by_ref().take(sizes[1]).collect();
        let test: Vec<String> = iter.collect();
        SplitIds { a, b, test }
    }
}

/// Deterministic split assignment for tasks and personas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub tasks: SplitIds,
    pub personas: SplitIds,
}

/// One (task, persona) training or evaluation pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub task_id: String,
    pub persona_id: String,
}

/// Shuffles ids with a seeded permutation and slices into (A, B, test).
/// Sizes must partition the corpus exactly; a silent remainder would leak
/// items out of every split.
pub fn make_splits(
    corpus: &Corpus,
    task_sizes: [usize; 3],
    persona_sizes: [usize; 3],
    seed: u64,
) -> Result<SplitPlan, CorpusError> {
    if task_sizes.iter().sum::<usize>() != corpus.tasks.len() {
        return Err(CorpusError::SplitSizeMismatch {
            kind: "task",
            sizes: task_sizes,
            total: corpus.tasks.len(),
        });
    }
    if persona_sizes.iter().sum::<usize>() != corpus.personas.len() {
        return Err(CorpusError::SplitSizeMismatch {
            kind: "persona",
            sizes: persona_sizes,
            total: corpus.personas.len(),
        });
    }
    // Domain-separate the two shuffles so task and persona orders are
    // independent even with equal counts.
    let task_perm = seeded_permutation(corpus.tasks.len(), seed.wrapping_mul(2).wrapping_add(1));
    let persona_perm = seeded_permutation(corpus.personas.len(), seed.wrapping_mul(2).wrapping_add(2));
    let task_order: Vec<String> = task_perm.into_iter().map(|i| corpus.tasks[i].id.clone()).collect();
    let persona_order: Vec<String> =
        persona_perm.into_iter().map(|i| corpus.personas[i].id.clone()).collect();
    Ok(SplitPlan {
        seed,
        tasks: SplitIds::from_order(task_order, task_sizes),
        personas: SplitIds::from_order(persona_order, persona_sizes),
    })
}

fn cross_product(tasks: &[String], personas: &[String]) -> Vec<Pair> {
    let mut pairs: Vec<Pair> = tasks
        .iter()
        .flat_map(|t| {
            personas
                .iter()
                .map(move |p| Pair { task_id: t.clone(), persona_id: p.clone() })
        })
        .collect();
    pairs.sort_by(|x, y| (&x.task_id, &x.persona_id).cmp(&(&y.task_id, &y.persona_id)));
    pairs
}

/// The (task, persona) pairs trained on at iteration `eta` (1-based): odd
/// iterations use split A, even iterations split B. Pairs are ordered
/// lexicographically by (task_id, persona_id) so every consumer sees the
/// same schedule.
pub fn training_pairs_for_iteration(plan: &SplitPlan, eta: u32) -> Result<Vec<Pair>, CorpusError> {
    if eta == 0 {
        return Err(CorpusError::InvalidIteration(eta));
    }
    let (tasks, personas) = if eta % 2 == 1 {
        (&plan.tasks.a, &plan.personas.a)
    } else {
        (&plan.tasks.b, &plan.personas.b)
    };
    Ok(cross_product(tasks, personas))
}

/// All held-out evaluation pairs, lexicographically ordered.
pub fn test_pairs(plan: &SplitPlan) -> Vec<Pair> {
    cross_product(&plan.tasks.test, &plan.personas.test)
}

/// Total number of (task, persona, gold) triples the corpus schedule covers:
/// both train splits plus the test split.
pub fn triple_count(plan: &SplitPlan) -> usize {
    plan.tasks.a.len() * plan.personas.a.len()
        + plan.tasks.b.len() * plan.personas.b.len()
        + plan.tasks.test.len() * plan.personas.test.len()
}

/// True iff the two id sets in each split family are pairwise disjoint and
/// their union covers the corpus exactly. Used by validation and tests.
pub fn splits_partition_corpus(corpus: &Corpus, plan: &SplitPlan) -> bool {
    fn partitions(ids: &SplitIds, all: &HashSet<&str>) -> bool {
        let mut seen: HashSet<&str> = HashSet::new();
        for id in ids.a.iter().chain(&ids.b).chain(&ids.test) {
            if !seen.insert(id.as_str()) {
                return false;
            }
        }
        seen.len() == all.len() && seen.iter().all(|id| all.contains(id))
    }
    let all_tasks: HashSet<&str> = corpus.tasks.iter().map(|t| t.id.as_str()).collect();
    let all_personas: HashSet<&str> = corpus.personas.iter().map(|p| p.id.as_str()).collect();
    partitions(&plan.tasks, &all_tasks) && partitions(&plan.personas, &all_personas)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_corpus(n_tasks: usize, n_personas: usize) -> Corpus {
        let tasks = (0..n_tasks)
            .map(|i| Task { id: format!("t{i}"), text: format!("task {i}") })
            .collect();
        let personas = (0..n_personas)
            .map(|i| Persona {
                id: format!("p{i}"),
                name: format!("P{i}"),
                text: format!("persona {i}"),
            })
            .collect();
        Corpus::from_records(tasks, personas, vec![]).unwrap()
    }

    #[test]
    fn duplicate_and_empty_records_are_rejected() {
        let dup = Corpus::from_records(
            vec![
                Task { id: "t0".into(), text: "a".into() },
                Task { id: "t0".into(), text: "b".into() },
            ],
            vec![],
            vec![],
        );
        assert!(matches!(dup, Err(CorpusError::DuplicateId { kind: "task", .. })));

        let empty = Corpus::from_records(vec![Task { id: "t0".into(), text: "  ".into() }], vec![], vec![]);
        assert!(matches!(empty, Err(CorpusError::EmptyText { .. })));
    }

    #[test]
    fn gold_references_are_validated() {
        let bad = Corpus::from_records(
            vec![Task { id: "t0".into(), text: "x".into() }],
            vec![Persona { id: "p0".into(), name: "P".into(), text: "y".into() }],
            vec![GoldResponse {
                task_id: "t9".into(),
                persona_id: "p0".into(),
                text: "g".into(),
                oracle_backend_id: "oracle".into(),
            }],
        );
        assert!(matches!(bad, Err(CorpusError::UnknownReference { kind: "task", .. })));
    }

    // Golden values for the seeded permutation are pinned in util.rs; this
    // freezes the slice boundaries on top of it.
    #[test]
    fn make_splits_is_deterministic_and_seed_sensitive() {
        let corpus = tiny_corpus(10, 10);
        let plan1 = make_splits(&corpus, [4, 4, 2], [4, 4, 2], 7).unwrap();
        let plan2 = make_splits(&corpus, [4, 4, 2], [4, 4, 2], 7).unwrap();
        assert_eq!(plan1, plan2);
        let plan3 = make_splits(&corpus, [4, 4, 2], [4, 4, 2], 8).unwrap();
        assert_ne!(plan1, plan3);
        assert!(splits_partition_corpus(&corpus, &plan1));
        assert!(splits_partition_corpus(&corpus, &plan3));
    }

    #[test]
    fn split_sizes_must_partition_exactly() {
        let corpus = tiny_corpus(10, 10);
        assert!(matches!(
            make_splits(&corpus, [4, 4, 4], [4, 4, 2], 7),
            Err(CorpusError::SplitSizeMismatch { kind: "task", .. })
        ));
        assert!(matches!(
            make_splits(&corpus, [4, 4, 2], [1, 1, 1], 7),
            Err(CorpusError::SplitSizeMismatch { kind: "persona", .. })
        ));
    }

    #[test]
    fn iteration_parity_alternates_between_train_splits() {
        let corpus = tiny_corpus(6, 4);
        let plan = make_splits(&corpus, [2, 2, 2], [1, 2, 1], 3).unwrap();
        let it1 = training_pairs_for_iteration(&plan, 1).unwrap();
        let it2 = training_pairs_for_iteration(&plan, 2).unwrap();
        let it3 = training_pairs_for_iteration(&plan, 3).unwrap();
        assert_eq!(it1.len(), 2, "2 A-tasks x 1 A-persona");
        assert_eq!(it2.len(), 4, "2 B-tasks x 2 B-personas");
        assert_eq!(it1, it3, "odd iterations reuse split A");
        assert_ne!(it1, it2);
        for p in &it1 {
            assert!(plan.tasks.a.contains(&p.task_id));
            assert!(plan.personas.a.contains(&p.persona_id));
        }
        for p in &it2 {
            assert!(plan.tasks.b.contains(&p.task_id));
            assert!(plan.personas.b.contains(&p.persona_id));
        }
        assert!(matches!(training_pairs_for_iteration(&plan, 0), Err(CorpusError::InvalidIteration(0))));
    }

    #[test]
    fn pair_order_is_lexicographic() {
        let corpus = tiny_corpus(4, 4);
        let plan = make_splits(&corpus, [2, 1, 1], [2, 1, 1], 9).unwrap();
        let pairs = training_pairs_for_iteration(&plan, 1).unwrap();
        let mut sorted = pairs.clone();
        sorted.sort_by(|x, y| (&x.task_id, &x.persona_id).cmp(&(&y.task_id, &y.persona_id)));
        assert_eq!(pairs, sorted);
    }

    // Mirrors the production-scale schedule: 550 tasks and 110 personas split
    // (250/250/50) x (50/50/10) cover 25,500 triples.
    #[test]
    fn production_scale_triple_count() {
        let corpus = tiny_corpus(550, 110);
        let plan = make_splits(&corpus, [250, 250, 50], [50, 50, 10], 1).unwrap();
        assert_eq!(triple_count(&plan), 25_500);
        assert_eq!(training_pairs_for_iteration(&plan, 1).unwrap().len(), 12_500);
        assert_eq!(training_pairs_for_iteration(&plan, 2).unwrap().len(), 12_500);
        assert_eq!(test_pairs(&plan).len(), 500);
    }

    #[test]
    fn corpus_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus::from_records(
            vec![Task { id: "t0".into(), text: "x".into() }],
            vec![Persona { id: "p0".into(), name: "Pat".into(), text: "y".into() }],
            vec![GoldResponse {
                task_id: "t0".into(),
                persona_id: "p0".into(),
                text: "g".into(),
                oracle_backend_id: "oracle-1".into(),
            }],
        )
        .unwrap();
        let (t, p, g) = (
            dir.path().join("tasks.jsonl"),
            dir.path().join("personas.jsonl"),
            dir.path().join("golds.jsonl"),
        );
        corpus.save(&t, &p, &g).unwrap();
        let back = Corpus::load(&t, &p, &g).unwrap();
        assert_eq!(back.tasks, corpus.tasks);
        assert_eq!(back.personas, corpus.personas);
        assert_eq!(back.golds, corpus.golds);
        assert_eq!(back.gold("t0", "p0").unwrap().text, "g");
        assert!(back.require_gold("t0", "p1").is_err());
    }
}

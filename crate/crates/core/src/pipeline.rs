//! Run orchestration: the expert-iteration loop as a resumable phase
//! machine.
//!
//! A run executes a fixed sequence of steps, each reading its inputs from
//! and writing its outputs to the run directory:
//!
//! ```text
//! (0, setup)      corpus, gold responses, split plan
//! (0, baseline)   frozen-policy eval conversations, baseline responses,
//!                 iteration-0 log-prob eval and self-comparison win rate
//! (n, simulate)   training conversations for iteration n's split
//! (n, score)      gold log-probability of every trajectory
//! (n, select)     best-of-n winners per pair
//! (n, export)     regularization responses + loss-masked dataset
//! (n, train)      fine-tune from the ORIGINAL base on this data
//! (n, evaluate)   log-prob conditions + judged win rate vs baseline
//! (0, report)     CSV reports and the run summary
//! ```
//!
//! `state.json` records the next step and is written atomically after each
//! completed step, so an interrupted run resumes exactly where it stopped.
//! Every artifact is stamped with the config hash; resuming under a
//! different configuration is an error. All randomness is derived from the
//! config seed, so a resumed run produces byte-identical artifacts to an
//! uninterrupted one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendClient, BackendError, BackendRole, RetryPolicy};
use crate::config::{AblationConfig, BackendBinding, ConfigError, CorpusConfig, RunConfig, TrainerConfig};
use crate::corpus::{
    make_splits, splits_partition_corpus, test_pairs, training_pairs_for_iteration, Corpus, CorpusError, Pair,
    SplitPlan,
};
use crate::datagen::{generate_gold_responses, DatagenError};
use crate::dialogue::{simulate_batch, Conversation, DialogueError, SimulationParams};
use crate::evals::{
    aggregate_win_rate, generate_final_responses, judge_response_sets, run_logprob_eval, summarize_logprobs,
    EvalError, LogprobSummary, ResponseRecord, WinRateReport,
};
use crate::report::{render_summary_table, write_logprob_csv, write_winrate_csv};
use crate::selection::{sample_regularization_response, score_batch, select_best, SelectionError, Selection};
use crate::store::{self, RunLock, RunPaths, RunStore, StoreError};
use crate::template::{TemplateError, TemplateSet};
use crate::testbed::{
    gen_world, MockJudgeBackend, MockOracleBackend, MockQuestionerBackend, MockQuestionerPolicy,
    MockRoleplayerBackend, MockScorerBackend, MockTrainer, PolicySnapshot, SyntheticWorld,
};
use crate::traindata::{
    build_training_example, export_dataset, DatasetManifest, ExternalTrainer, ModelRef, TrainDataError, TrainMode,
    Trainer, TrainerJob,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("store error: {0}")]
    Store(#[from] StoreError),
    #[error("corpus error: {0}")]
    Corpus(#[from] CorpusError),
    #[error("template error: {0}")]
    Template(#[from] TemplateError),
    #[error("datagen error: {0}")]
    Datagen(#[from] DatagenError),
    #[error("dialogue error: {0}")]
    Dialogue(#[from] DialogueError),
    #[error("selection error: {0}")]
    Selection(#[from] SelectionError),
    #[error("training-data error: {0}")]
    TrainData(#[from] TrainDataError),
    #[error("eval error: {0}")]
    Eval(#[from] EvalError),
    #[error("backend error: {0}")]
    Backend(#[from] BackendError),
    #[error("backend kind {kind:?} is not available in this provider{hint}")]
    UnsupportedKind { kind: String, hint: String },
    #[error("backend kind {kind:?} needs a synthetic world (the corpus is not synthetic)")]
    WorldRequired { kind: String },
    #[error("model {model} was trained for a different synthetic world")]
    ModelWorldMismatch { model: String },
    #[error("cannot resume: run directory was created with config hash {found}, current config hashes to {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("invalid backend params for {kind}: {source}")]
    BadBackendParams {
        kind: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("baseline responses are missing; the baseline step must run before iteration evals")]
    MissingBaseline,
    #[error("no model recorded for iteration {0}; earlier steps must run first")]
    MissingModel(u32),
}

// ---------------------------------------------------------------------------
// Backend provider
// ---------------------------------------------------------------------------

/// Everything a provider may need to construct backends.
pub struct ProviderContext {
    /// Present when the corpus is synthetic.
    pub world: Option<Arc<SyntheticWorld>>,
    /// Run directory; relative `file:` model paths resolve against it.
    pub run_root: PathBuf,
}

/// Artifacts record `file:` model refs and dataset paths relative to the
/// run directory, which keeps runs relocatable and byte-reproducible; these
/// two map between the recorded and the on-disk form.
fn resolve_run_path(root: &Path, path: &Path) -> PathBuf {
    if path.is_relative() {
        root.join(path)
    } else {
        path.to_path_buf()
    }
}

fn relativize_run_path(root: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(root).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

fn relativize_model_ref(root: &Path, model: ModelRef) -> ModelRef {
    match model.as_file_path() {
        Some(path) => ModelRef::file(&relativize_run_path(root, &path)),
        None => model,
    }
}

/// Builds backend clients from config bindings. The core provider covers
/// the hermetic kinds; embedders layer providers that add remote kinds.
pub trait BackendProvider: Send + Sync {
    fn make(
        &self,
        ctx: &ProviderContext,
        role: BackendRole,
        binding: &BackendBinding,
        model: &ModelRef,
    ) -> Result<BackendClient, PipelineError>;
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct QuestionerParams {
    history_blind: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RoleplayerParams {
    reveal_prob: f64,
    coin_salt: u64,
}

impl Default for RoleplayerParams {
    fn default() -> Self {
        RoleplayerParams { reveal_prob: 1.0, coin_salt: 0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ScorerParams {
    p_hi: f64,
    p_lo: f64,
    p_other: f64,
}

impl Default for ScorerParams {
    fn default() -> Self {
        ScorerParams {
            p_hi: crate::testbed::DEFAULT_P_HI,
            p_lo: crate::testbed::DEFAULT_P_LO,
            p_other: crate::testbed::DEFAULT_P_OTHER,
        }
    }
}

fn parse_params<T: serde::de::DeserializeOwned + Default>(
    kind: &str,
    params: &serde_json::Value,
) -> Result<T, PipelineError> {
    if params.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(params.clone())
        .map_err(|source| PipelineError::BadBackendParams { kind: kind.to_string(), source })
}

/// Provider for the hermetic mock kinds. Anything else — in particular
/// remote, network-backed kinds — is rejected, which is what keeps library
/// runs offline by construction.
pub struct HermeticProvider;

impl HermeticProvider {
    fn world(ctx: &ProviderContext, kind: &str) -> Result<Arc<SyntheticWorld>, PipelineError> {
        ctx.world.clone().ok_or_else(|| PipelineError::WorldRequired { kind: kind.to_string() })
    }

    fn questioner_policy(
        ctx: &ProviderContext,
        world: &SyntheticWorld,
        model: &ModelRef,
    ) -> Result<MockQuestionerPolicy, PipelineError> {
        if model.is_base() {
            return Ok(MockQuestionerPolicy::uniform(world));
        }
        let path = model.as_file_path().ok_or_else(|| PipelineError::UnsupportedKind {
            kind: format!("model {model}"),
            hint: " (the hermetic questioner only loads base or file: models)".to_string(),
        })?;
        let snapshot = PolicySnapshot::load(&resolve_run_path(&ctx.run_root, &path))?;
        if snapshot.world_params != world.params {
            return Err(PipelineError::ModelWorldMismatch { model: model.to_string() });
        }
        Ok(snapshot.policy)
    }
}

impl BackendProvider for HermeticProvider {
    fn make(
        &self,
        ctx: &ProviderContext,
        _role: BackendRole,
        binding: &BackendBinding,
        model: &ModelRef,
    ) -> Result<BackendClient, PipelineError> {
        let backend: Arc<dyn Backend> = match binding.kind.as_str() {
            "mock_questioner" => {
                let world = Self::world(ctx, &binding.kind)?;
                let params: QuestionerParams = parse_params(&binding.kind, &binding.params)?;
                let policy = Self::questioner_policy(ctx, &world, model)?;
                Arc::new(
                    MockQuestionerBackend::new(binding.backend_id.clone(), world, policy)
                        .with_history_blind(params.history_blind),
                )
            }
            "mock_roleplayer" => {
                let world = Self::world(ctx, &binding.kind)?;
                let params: RoleplayerParams = parse_params(&binding.kind, &binding.params)?;
                Arc::new(
                    MockRoleplayerBackend::new(binding.backend_id.clone(), world)
                        .with_reveal_prob(params.reveal_prob, params.coin_salt),
                )
            }
            "mock_scorer" => {
                let world = Self::world(ctx, &binding.kind)?;
                let params: ScorerParams = parse_params(&binding.kind, &binding.params)?;
                Arc::new(
                    MockScorerBackend::new(binding.backend_id.clone(), world)
                        .with_table(params.p_hi, params.p_lo, params.p_other),
                )
            }
            "mock_oracle" => {
                let world = Self::world(ctx, &binding.kind)?;
                Arc::new(MockOracleBackend::new(binding.backend_id.clone(), world))
            }
            "mock_judge" => {
                let world = Self::world(ctx, &binding.kind)?;
                Arc::new(MockJudgeBackend::new(binding.backend_id.clone(), world))
            }
            other => {
                return Err(PipelineError::UnsupportedKind {
                    kind: other.to_string(),
                    hint: " (hermetic runs permit only mock_* kinds; remote kinds need the CLI's provider)"
                        .to_string(),
                })
            }
        };
        let retry = RetryPolicy {
            max_attempts: binding.max_attempts.unwrap_or(4),
            ..RetryPolicy::default()
        };
        Ok(BackendClient::new(backend, retry, binding.max_in_flight.unwrap_or(32)))
    }
}

// ---------------------------------------------------------------------------
// Phase machine
// ---------------------------------------------------------------------------

/// Steps of a run. Iteration-scoped phases carry their iteration in
/// [`RunState::iteration`]; the others run with iteration 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Setup,
    Baseline,
    Simulate,
    Score,
    Select,
    Export,
    Train,
    Evaluate,
    Report,
    Done,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Setup => "setup",
            Phase::Baseline => "baseline",
            Phase::Simulate => "simulate",
            Phase::Score => "score",
            Phase::Select => "select",
            Phase::Export => "export",
            Phase::Train => "train",
            Phase::Evaluate => "evaluate",
            Phase::Report => "report",
            Phase::Done => "done",
        }
    }
}

/// Total order of steps, for resume/rewind comparisons.
pub fn step_index(iteration: u32, phase: Phase, total_iterations: u32) -> usize {
    let iter_offset = |eta: u32, slot: usize| 2 + (eta as usize - 1) * 6 + slot;
    match phase {
        Phase::Setup => 0,
        Phase::Baseline => 1,
        Phase::Simulate => iter_offset(iteration, 0),
        Phase::Score => iter_offset(iteration, 1),
        Phase::Select => iter_offset(iteration, 2),
        Phase::Export => iter_offset(iteration, 3),
        Phase::Train => iter_offset(iteration, 4),
        Phase::Evaluate => iter_offset(iteration, 5),
        Phase::Report => 2 + total_iterations as usize * 6,
        Phase::Done => 3 + total_iterations as usize * 6,
    }
}

fn advance(iteration: u32, phase: Phase, total_iterations: u32) -> (u32, Phase) {
    match phase {
        Phase::Setup => (0, Phase::Baseline),
        Phase::Baseline => {
            if total_iterations >= 1 {
                (1, Phase::Simulate)
            } else {
                (0, Phase::Report)
            }
        }
        Phase::Simulate => (iteration, Phase::Score),
        Phase::Score => (iteration, Phase::Select),
        Phase::Select => (iteration, Phase::Export),
        Phase::Export => (iteration, Phase::Train),
        Phase::Train => (iteration, Phase::Evaluate),
        Phase::Evaluate => {
            if iteration < total_iterations {
                (iteration + 1, Phase::Simulate)
            } else {
                (0, Phase::Report)
            }
        }
        Phase::Report => (0, Phase::Done),
        Phase::Done => (0, Phase::Done),
    }
}

/// Persistent run state: the next step to execute plus the model registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub config_hash: String,
    /// Iteration of the next step (0 for setup/baseline/report/done).
    pub iteration: u32,
    /// The next step to execute.
    pub phase: Phase,
    /// Iteration (as a decimal string key) → model reference.
    pub models: BTreeMap<String, String>,
    pub completed: bool,
}

impl RunState {
    fn fresh(run_id: &str, config_hash: &str) -> Self {
        RunState {
            run_id: run_id.to_string(),
            config_hash: config_hash.to_string(),
            iteration: 0,
            phase: Phase::Setup,
            models: BTreeMap::new(),
            completed: false,
        }
    }

    pub fn model_for(&self, iteration: u32) -> Result<ModelRef, PipelineError> {
        self.models
            .get(&iteration.to_string())
            .map(|m| ModelRef(m.clone()))
            .ok_or(PipelineError::MissingModel(iteration))
    }
}

/// Runner knobs. `halt_after` stops the run right after the given step
/// completes (for stepwise CLI commands and resume tests); `rewind_to`
/// moves a finished or advanced run back so the given step re-executes.
#[derive(Debug, Clone, Default)]
pub struct RunnerOptions {
    pub halt_after: Option<(u32, Phase)>,
    pub rewind_to: Option<(u32, Phase)>,
    pub quiet: bool,
}

/// What a run produced (so far).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config_hash: String,
    pub completed: bool,
    pub iterations: u32,
    pub models: BTreeMap<String, String>,
    pub logprob_summaries: Vec<LogprobSummary>,
    pub winrate_reports: Vec<WinRateReport>,
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

struct Ctx<'a> {
    config: &'a RunConfig,
    paths: RunPaths,
    run_store: RunStore,
    provider: &'a dyn BackendProvider,
    provider_ctx: ProviderContext,
    templates: TemplateSet,
    corpus: Option<Corpus>,
    plan: Option<SplitPlan>,
    state: RunState,
    options: &'a RunnerOptions,
}

impl<'a> Ctx<'a> {
    fn say(&self, message: String) {
        if !self.options.quiet {
            println!("{message}");
        }
    }

    fn corpus(&self) -> &Corpus {
        self.corpus.as_ref().expect("corpus loaded before iteration phases")
    }

    fn plan(&self) -> &SplitPlan {
        self.plan.as_ref().expect("split plan loaded before iteration phases")
    }

    fn client(&self, role: BackendRole, model: &ModelRef) -> Result<BackendClient, PipelineError> {
        self.provider.make(&self.provider_ctx, role, self.config.binding(role), model)
    }

    fn frozen(&self, role: BackendRole) -> Result<BackendClient, PipelineError> {
        self.client(role, &ModelRef::base())
    }

    fn save_state(&self) -> Result<(), StoreError> {
        store::write_json_atomic(&self.paths.state(), &self.state)
    }
}

/// Executes (or resumes) a run. The run directory is
/// `runs_root/<run_id>`; an existing directory is resumed after a config
/// hash check.
pub fn run_pipeline(
    config: &RunConfig,
    runs_root: &Path,
    provider: &dyn BackendProvider,
    options: &RunnerOptions,
) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    if config.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .expect("worker pool construction");
        pool.install(|| run_pipeline_inner(config, runs_root, provider, options))
    } else {
        run_pipeline_inner(config, runs_root, provider, options)
    }
}

fn run_pipeline_inner(
    config: &RunConfig,
    runs_root: &Path,
    provider: &dyn BackendProvider,
    options: &RunnerOptions,
) -> Result<RunSummary, PipelineError> {
    let run_dir = runs_root.join(&config.run_id);
    std::fs::create_dir_all(&run_dir)
        .map_err(|source| StoreError::Io { path: run_dir.display().to_string(), source })?;
    let paths = RunPaths::new(&run_dir);
    let _lock = RunLock::acquire(&paths)?;

    let config_hash = config.config_hash();
    let state = if paths.state().exists() {
        let state: RunState = store::read_json(&paths.state())?;
        if state.config_hash != config_hash {
            return Err(PipelineError::ConfigMismatch { expected: config_hash, found: state.config_hash });
        }
        state
    } else {
        config.save(&paths.config())?;
        RunState::fresh(&config.run_id, &config_hash)
    };

    let world = match &config.corpus {
        CorpusConfig::Synthetic(params) => Some(Arc::new(gen_world(*params))),
        CorpusConfig::Files { .. } => None,
    };

    let overrides: BTreeMap<String, String> = config
        .template_overrides
        .iter()
        .map(|(name, path)| (name.clone(), path.display().to_string()))
        .collect();
    let templates = TemplateSet::builtin().with_overrides(&overrides)?;

    let mut ctx = Ctx {
        config,
        run_store: RunStore::new(paths.clone(), &config.run_id, &config_hash),
        paths,
        provider,
        provider_ctx: ProviderContext { world, run_root: run_dir.clone() },
        templates,
        corpus: None,
        plan: None,
        state,
        options,
    };

    // Apply a rewind before resuming.
    if let Some((iteration, phase)) = options.rewind_to {
        let target = step_index(iteration, phase, config.iterations);
        let current = step_index(ctx.state.iteration, ctx.state.phase, config.iterations);
        if target < current {
            ctx.state.iteration = iteration;
            ctx.state.phase = phase;
            ctx.state.completed = false;
            ctx.save_state()?;
        }
    }

    // Phases after setup need the corpus and split plan on hand.
    if !(ctx.state.phase == Phase::Setup) {
        ctx.corpus =
            Some(Corpus::load(&ctx.paths.corpus_tasks(), &ctx.paths.corpus_personas(), &ctx.paths.corpus_golds())?);
        ctx.plan = Some(store::read_json(&ctx.paths.split_plan())?);
    }

    while ctx.state.phase != Phase::Done {
        let (iteration, phase) = (ctx.state.iteration, ctx.state.phase);
        ctx.say(format!("[{}] iteration {iteration}: running", phase.as_str()));
        match phase {
            Phase::Setup => phase_setup(&mut ctx)?,
            Phase::Baseline => phase_baseline(&mut ctx)?,
            Phase::Simulate => phase_simulate(&mut ctx, iteration)?,
            Phase::Score => phase_score(&mut ctx, iteration)?,
            Phase::Select => phase_select(&mut ctx, iteration)?,
            Phase::Export => phase_export(&mut ctx, iteration)?,
            Phase::Train => phase_train(&mut ctx, iteration)?,
            Phase::Evaluate => phase_evaluate(&mut ctx, iteration)?,
            Phase::Report => phase_report(&mut ctx)?,
            Phase::Done => unreachable!("loop exits at done"),
        }
        let (next_iteration, next_phase) = advance(iteration, phase, config.iterations);
        ctx.state.iteration = next_iteration;
        ctx.state.phase = next_phase;
        ctx.state.completed = next_phase == Phase::Done;
        ctx.save_state()?;
        if options.halt_after == Some((iteration, phase)) {
            ctx.say(format!("[{}] iteration {iteration}: halting as requested", phase.as_str()));
            break;
        }
    }

    load_summary(&ctx)
}

fn load_summary(ctx: &Ctx) -> Result<RunSummary, PipelineError> {
    let mut logprob_summaries = Vec::new();
    let mut winrate_reports = Vec::new();
    for eta in 0..=ctx.config.iterations {
        let summary_path = ctx.paths.logprob_summary(eta);
        if summary_path.exists() {
            let summaries: Vec<LogprobSummary> = store::read_json(&summary_path)?;
            logprob_summaries.extend(summaries);
        }
        let report_path = ctx.paths.winrate_report(eta);
        if report_path.exists() {
            winrate_reports.push(store::read_json::<WinRateReport>(&report_path)?);
        }
    }
    Ok(RunSummary {
        run_id: ctx.state.run_id.clone(),
        config_hash: ctx.state.config_hash.clone(),
        completed: ctx.state.completed,
        iterations: ctx.config.iterations,
        models: ctx.state.models.clone(),
        logprob_summaries,
        winrate_reports,
    })
}

// ---------------------------------------------------------------------------
// Phases
// ---------------------------------------------------------------------------

/// Every (task, persona) grid that needs a gold response: both training
/// splits and the test split.
fn gold_pairs(plan: &SplitPlan) -> Vec<Pair> {
    let mut pairs = Vec::new();
    for (tasks, personas) in [
        (&plan.tasks.a, &plan.personas.a),
        (&plan.tasks.b, &plan.personas.b),
        (&plan.tasks.test, &plan.personas.test),
    ] {
        for task_id in tasks {
            for persona_id in personas {
                pairs.push(Pair { task_id: task_id.clone(), persona_id: persona_id.clone() });
            }
        }
    }
    pairs
}

fn phase_setup(ctx: &mut Ctx) -> Result<(), PipelineError> {
    let (tasks, personas, provided_golds) = match &ctx.config.corpus {
        CorpusConfig::Synthetic(_) => {
            let world = ctx.provider_ctx.world.as_ref().expect("synthetic corpus implies a world");
            (world.corpus_tasks(), world.corpus_personas(), None)
        }
        CorpusConfig::Files { tasks, personas, golds } => {
            let tasks = store::read_jsonl(tasks)?;
            let personas = store::read_jsonl(personas)?;
            let golds = golds.as_ref().map(|p| store::read_jsonl(p)).transpose()?;
            (tasks, personas, golds)
        }
    };

    let base = Corpus::from_records(tasks, personas, Vec::new())?;
    let plan = make_splits(&base, ctx.config.splits.task_sizes, ctx.config.splits.persona_sizes, ctx.config.splits.seed)?;
    debug_assert!(splits_partition_corpus(&base, &plan));
    let needed = gold_pairs(&plan);

    let golds = match provided_golds {
        Some(golds) => golds,
        None => {
            ctx.say(format!("[setup] generating {} gold responses via the oracle", needed.len()));
            let oracle = ctx.frozen(BackendRole::Oracle)?;
            generate_gold_responses(&oracle, &ctx.templates, &base, &needed, ctx.config.seed)?
        }
    };
    let corpus = Corpus::from_records(base.tasks.clone(), base.personas.clone(), golds)?;
    for pair in &needed {
        corpus.require_gold(&pair.task_id, &pair.persona_id)?;
    }

    corpus.save(&ctx.paths.corpus_tasks(), &ctx.paths.corpus_personas(), &ctx.paths.corpus_golds())?;
    store::write_json_atomic(&ctx.paths.split_plan(), &plan)?;
    ctx.say(format!(
        "[setup] corpus ready: {} tasks, {} personas, {} golds",
        corpus.tasks.len(),
        corpus.personas.len(),
        corpus.golds.len()
    ));
    ctx.corpus = Some(corpus);
    ctx.plan = Some(plan);
    Ok(())
}

fn eval_sim_params(config: &RunConfig) -> SimulationParams {
    SimulationParams {
        samples_per_pair: config.eval.samples_per_pair,
        max_turns: config.max_turns,
        temperature: config.temperatures.eval_conversation,
    }
}

fn phase_baseline(ctx: &mut Ctx) -> Result<(), PipelineError> {
    let questioner = ctx.frozen(BackendRole::Questioner)?;
    let roleplayer = ctx.frozen(BackendRole::Roleplayer)?;
    let pairs = test_pairs(ctx.plan());
    let params = eval_sim_params(ctx.config);

    // The frozen policy's own evaluation conversations (iteration 0).
    let eval_out = simulate_batch(
        &questioner,
        &roleplayer,
        &ctx.templates,
        ctx.corpus(),
        &pairs,
        &params,
        ctx.config.seed,
        "eval",
        0,
    )?;
    ctx.run_store.write_stamped(&ctx.paths.conversations(0, "eval"), 0, &eval_out.conversations)?;
    ctx.run_store.write_stamped(&ctx.paths.conversations(0, "failed_samples"), 0, &eval_out.failures)?;

    // Independent conversations for the standing baseline side.
    let baseline_out = simulate_batch(
        &questioner,
        &roleplayer,
        &ctx.templates,
        ctx.corpus(),
        &pairs,
        &params,
        ctx.config.seed,
        "baseline",
        0,
    )?;
    ctx.run_store.write_stamped(&ctx.paths.conversations(0, "baseline"), 0, &baseline_out.conversations)?;

    let baseline_conversations: Vec<Conversation> = if ctx.config.eval.bare_baseline {
        baseline_out
            .conversations
            .iter()
            .map(|c| {
                let mut bare = c.clone();
                bare.turns.clear();
                bare
            })
            .collect()
    } else {
        baseline_out.conversations.clone()
    };
    let baseline_responses = generate_final_responses(
        &questioner,
        ctx.corpus(),
        &baseline_conversations,
        "base",
        "baseline",
        0,
    )?;
    ctx.run_store.write_stamped(&ctx.paths.baseline_responses(), 0, &baseline_responses)?;
    ctx.state.models.insert("0".to_string(), "base".to_string());

    // Iteration-0 evaluation: where the frozen policy starts.
    evaluate_iteration(ctx, 0, &eval_out.conversations, &questioner, "base")?;
    Ok(())
}

fn phase_simulate(ctx: &mut Ctx, eta: u32) -> Result<(), PipelineError> {
    let previous = ctx.state.model_for(eta - 1)?;
    let questioner = ctx.client(BackendRole::Questioner, &previous)?;
    let roleplayer = ctx.frozen(BackendRole::Roleplayer)?;
    let pairs = training_pairs_for_iteration(ctx.plan(), eta)?;
    let params = SimulationParams {
        samples_per_pair: ctx.config.samples_per_pair,
        max_turns: ctx.config.max_turns,
        temperature: ctx.config.temperatures.simulation,
    };
    let out = simulate_batch(
        &questioner,
        &roleplayer,
        &ctx.templates,
        ctx.corpus(),
        &pairs,
        &params,
        ctx.config.seed,
        "sim",
        eta,
    )?;
    ctx.say(format!(
        "[simulate] iteration {eta}: {} conversations over {} pairs ({} failed samples)",
        out.conversations.len(),
        pairs.len(),
        out.failures.len()
    ));
    ctx.run_store.write_stamped(&ctx.paths.conversations(eta, "train"), eta, &out.conversations)?;
    ctx.run_store.write_stamped(&ctx.paths.conversations(eta, "failed_samples"), eta, &out.failures)?;
    Ok(())
}

fn phase_score(ctx: &mut Ctx, eta: u32) -> Result<(), PipelineError> {
    let conversations: Vec<Conversation> = ctx.run_store.read_stamped(&ctx.paths.conversations(eta, "train"))?;
    let scorer = ctx.frozen(BackendRole::BaseScorer)?;
    let scored = score_batch(
        &scorer,
        ctx.corpus(),
        &conversations,
        ctx.config.length_normalize_scores,
        "sim",
        eta,
    )?;
    ctx.run_store.write_stamped(&ctx.paths.scores(eta, "train"), eta, &scored)?;
    Ok(())
}

fn phase_select(ctx: &mut Ctx, eta: u32) -> Result<(), PipelineError> {
    let scored = ctx.run_store.read_stamped(&ctx.paths.scores(eta, "train"))?;
    let selections = select_best(&scored, ctx.config.top_k)?;
    ctx.say(format!("[select] iteration {eta}: kept {} winners", selections.len()));
    ctx.run_store.write_stamped(&ctx.paths.selections(eta, "train"), eta, &selections)?;
    Ok(())
}

fn phase_export(ctx: &mut Ctx, eta: u32) -> Result<(), PipelineError> {
    use rayon::prelude::*;

    let conversations: Vec<Conversation> = ctx.run_store.read_stamped(&ctx.paths.conversations(eta, "train"))?;
    let selections: Vec<Selection> = ctx.run_store.read_stamped(&ctx.paths.selections(eta, "train"))?;
    let by_key: std::collections::HashMap<(&str, &str, usize), &Conversation> = conversations
        .iter()
        .map(|c| ((c.task_id.as_str(), c.persona_id.as_str(), c.sample_index), c))
        .collect();

    let winners: Vec<&Conversation> = selections
        .iter()
        .flat_map(|s| {
            s.sample_indices
                .iter()
                .map(|idx| *by_key.get(&(s.task_id.as_str(), s.persona_id.as_str(), *idx)).expect("selection points at a stored conversation"))
        })
        .collect();

    let mode = ctx.config.train.mode;
    let previous = ctx.state.model_for(eta - 1)?;
    let responder = ctx.client(BackendRole::Questioner, &previous)?;

    // The response segment, per mode: the previous policy's greedy answer,
    // the gold, or nothing.
    let responses: Vec<Option<String>> = winners
        .par_iter()
        .map(|conversation| -> Result<Option<String>, PipelineError> {
            match mode {
                TrainMode::NoRegularization => Ok(None),
                TrainMode::GoldResponse => Ok(Some(
                    ctx.corpus().require_gold(&conversation.task_id, &conversation.persona_id)?.text.clone(),
                )),
                TrainMode::Standard => {
                    let persona = ctx
                        .corpus()
                        .persona(&conversation.persona_id)
                        .ok_or_else(|| EvalError::UnknownPersona(conversation.persona_id.clone()))
                        .map_err(PipelineError::Eval)?;
                    let task = ctx
                        .corpus()
                        .task(&conversation.task_id)
                        .ok_or_else(|| EvalError::UnknownTask(conversation.task_id.clone()))
                        .map_err(PipelineError::Eval)?;
                    let request_id = format!(
                        "export:i{eta}:reg:{}:{}:s{}",
                        conversation.task_id, conversation.persona_id, conversation.sample_index
                    );
                    Ok(Some(sample_regularization_response(
                        &responder,
                        conversation,
                        &persona.name,
                        &task.text,
                        &request_id,
                    )?))
                }
            }
        })
        .collect::<Result<_, _>>()?;

    let examples = winners
        .iter()
        .zip(&responses)
        .map(|(conversation, response)| {
            let persona = ctx.corpus().persona(&conversation.persona_id).expect("scored conversations have personas");
            let task = ctx.corpus().task(&conversation.task_id).expect("scored conversations have tasks");
            build_training_example(
                &ctx.templates,
                &persona.name,
                &task.text,
                &task.id,
                &persona.id,
                &conversation.turns,
                conversation.turn_budget,
                eta,
                mode,
                response.as_deref(),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;

    let prior_paths = if ctx.config.train.accumulate_data && eta > 1 {
        let previous_manifest: DatasetManifest = store::read_json(&ctx.paths.dataset_manifest(eta - 1))?;
        previous_manifest.paths
    } else {
        Vec::new()
    };
    let dataset_path = ctx.paths.dataset(eta);
    let manifest = export_dataset(
        &dataset_path,
        &ctx.paths.dataset_manifest(eta),
        &relativize_run_path(ctx.paths.root(), &dataset_path),
        eta,
        &examples,
        &prior_paths,
    )?;
    ctx.say(format!(
        "[export] iteration {eta}: {} examples ({} dataset files for training)",
        manifest.examples,
        manifest.paths.len()
    ));
    Ok(())
}

fn phase_train(ctx: &mut Ctx, eta: u32) -> Result<(), PipelineError> {
    let manifest: DatasetManifest = store::read_json(&ctx.paths.dataset_manifest(eta))?;
    let job = TrainerJob {
        // Every iteration fine-tunes the ORIGINAL frozen policy on the new
        // data, not the previous checkpoint.
        base_model: ModelRef::base(),
        dataset_paths: manifest.paths.iter().map(|p| resolve_run_path(ctx.paths.root(), p)).collect(),
        output_model_id: format!("{}-iter{eta}", ctx.config.run_id),
        output_dir: ctx.paths.export_dir(eta),
        hyperparams: ctx.config.train.hyperparams.clone(),
    };
    let trainer: Box<dyn Trainer> = match &ctx.config.train.trainer {
        TrainerConfig::Hermetic => {
            let world = ctx
                .provider_ctx
                .world
                .clone()
                .ok_or_else(|| PipelineError::WorldRequired { kind: "hermetic trainer".to_string() })?;
            Box::new(MockTrainer::new(world))
        }
        TrainerConfig::External { poll_interval_secs, timeout_secs } => Box::new(ExternalTrainer {
            poll_interval: Duration::from_secs(*poll_interval_secs),
            timeout: Duration::from_secs(*timeout_secs),
        }),
    };
    let model = relativize_model_ref(ctx.paths.root(), trainer.train(&job)?);
    ctx.say(format!("[train] iteration {eta}: model {model}"));
    ctx.state.models.insert(eta.to_string(), model.0);
    Ok(())
}

fn phase_evaluate(ctx: &mut Ctx, eta: u32) -> Result<(), PipelineError> {
    let model = ctx.state.model_for(eta)?;
    let questioner = ctx.client(BackendRole::Questioner, &model)?;
    let roleplayer = ctx.frozen(BackendRole::Roleplayer)?;
    let pairs = test_pairs(ctx.plan());
    let out = simulate_batch(
        &questioner,
        &roleplayer,
        &ctx.templates,
        ctx.corpus(),
        &pairs,
        &eval_sim_params(ctx.config),
        ctx.config.seed,
        "eval",
        eta,
    )?;
    ctx.run_store.write_stamped(&ctx.paths.conversations(eta, "eval"), eta, &out.conversations)?;
    evaluate_iteration(ctx, eta, &out.conversations, &questioner, &model.0)
}

/// Log-prob conditions, win rate, and ablations for one checkpoint's eval
/// conversations. Shared by the baseline step (iteration 0) and every
/// trained iteration.
fn evaluate_iteration(
    ctx: &mut Ctx,
    eta: u32,
    eval_conversations: &[Conversation],
    questioner: &BackendClient,
    model_name: &str,
) -> Result<(), PipelineError> {
    let pairs = test_pairs(ctx.plan());

    if ctx.config.eval.logprob {
        let scorer = ctx.frozen(BackendRole::BaseScorer)?;
        let items = run_logprob_eval(&scorer, ctx.corpus(), &pairs, eval_conversations, eta, ctx.config.seed)?;
        let summaries = summarize_logprobs(eta, &items);
        ctx.run_store.write_stamped(&ctx.paths.logprob_items(eta), eta, &items)?;
        store::write_json_atomic(&ctx.paths.logprob_summary(eta), &summaries)?;
        for summary in &summaries {
            ctx.say(format!(
                "[evaluate] iteration {eta}: {:<17} mean {:.3} +/- {:.3} (n={})",
                summary.condition.as_str(),
                summary.mean,
                summary.sem,
                summary.n
            ));
        }
    }

    if ctx.config.eval.winrate {
        let judge = ctx.frozen(BackendRole::Judge)?;
        let candidates =
            generate_final_responses(questioner, ctx.corpus(), eval_conversations, model_name, "eval", eta)?;
        ctx.run_store.write_stamped(&ctx.paths.eval_dir(eta).join("candidate_responses.jsonl"), eta, &candidates)?;
        if !ctx.paths.baseline_responses().exists() {
            return Err(PipelineError::MissingBaseline);
        }
        let baselines: Vec<ResponseRecord> = ctx.run_store.read_stamped(&ctx.paths.baseline_responses())?;
        let records = judge_response_sets(&judge, &ctx.templates, ctx.corpus(), &candidates, &baselines, eta, ctx.config.seed)?;
        let report = aggregate_win_rate(eta, &records)?;
        ctx.run_store.write_stamped(&ctx.paths.winrate_records(eta), eta, &records)?;
        store::write_json_atomic(&ctx.paths.winrate_report(eta), &report)?;
        ctx.say(format!(
            "[evaluate] iteration {eta}: win rate {:.3} +/- {:.3} ({} judged, {} refused, {} unparsed)",
            report.win_rate, report.sem, report.judged, report.refusals, report.parse_failures
        ));

        run_ablations(ctx, eta, eval_conversations, &baselines, &ctx.config.eval.ablations)?;
    }
    Ok(())
}

fn with_param(binding: &BackendBinding, key: &str, value: serde_json::Value) -> BackendBinding {
    let mut params = match &binding.params {
        serde_json::Value::Object(map) => map.clone(),
        _ => serde_json::Map::new(),
    };
    params.insert(key.to_string(), value);
    BackendBinding { params: serde_json::Value::Object(params), ..binding.clone() }
}

fn run_ablations(
    ctx: &Ctx,
    eta: u32,
    eval_conversations: &[Conversation],
    baselines: &[ResponseRecord],
    ablations: &AblationConfig,
) -> Result<(), PipelineError> {
    // History-blind responses: same conversations, but the final response
    // ignores the dialogue. Measures how much of the win rate comes from
    // actually using elicited information.
    if ablations.history_blind_response {
        let model = ctx.state.model_for(eta)?;
        let binding = with_param(ctx.config.binding(BackendRole::Questioner), "history_blind", serde_json::json!(true));
        let blind = ctx.provider.make(&ctx.provider_ctx, BackendRole::Questioner, &binding, &model)?;
        let candidates = generate_final_responses(
            &blind,
            ctx.corpus(),
            eval_conversations,
            &format!("{}:history_blind", model.0),
            "eval_blind",
            eta,
        )?;
        let judge = ctx.frozen(BackendRole::Judge)?;
        let records =
            judge_response_sets(&judge, &ctx.templates, ctx.corpus(), &candidates, baselines, eta, ctx.config.seed)?;
        let report = aggregate_win_rate(eta, &records)?;
        store::write_json_atomic(&ctx.paths.ablation_report(eta, "history_blind_response"), &report)?;
        ctx.say(format!(
            "[evaluate] iteration {eta}: history-blind win rate {:.3} ({} judged)",
            report.win_rate, report.judged
        ));
    }

    // Roleplayer swap: fresh conversations with a different interlocutor,
    // then the log-prob conditions again.
    if let Some(swap_binding) = &ablations.roleplayer_swap {
        let model = ctx.state.model_for(eta)?;
        let questioner = ctx.client(BackendRole::Questioner, &model)?;
        let swapped = ctx.provider.make(&ctx.provider_ctx, BackendRole::Roleplayer, swap_binding, &ModelRef::base())?;
        let pairs = test_pairs(ctx.plan());
        let out = simulate_batch(
            &questioner,
            &swapped,
            &ctx.templates,
            ctx.corpus(),
            &pairs,
            &eval_sim_params(ctx.config),
            ctx.config.seed,
            "eval_swap",
            eta,
        )?;
        let scorer = ctx.frozen(BackendRole::BaseScorer)?;
        let items = run_logprob_eval(&scorer, ctx.corpus(), &pairs, &out.conversations, eta, ctx.config.seed)?;
        let summaries = summarize_logprobs(eta, &items);
        store::write_json_atomic(&ctx.paths.ablation_report(eta, "roleplayer_swap"), &summaries)?;
    }
    Ok(())
}

fn phase_report(ctx: &mut Ctx) -> Result<(), PipelineError> {
    let summary = load_summary(ctx)?;
    write_logprob_csv(&ctx.paths.report_dir().join("logprob.csv"), &summary.logprob_summaries)?;
    write_winrate_csv(&ctx.paths.report_dir().join("winrate.csv"), &summary.winrate_reports)?;
    store::write_json_atomic(&ctx.paths.summary(), &summary)?;
    if !ctx.options.quiet {
        println!("{}", render_summary_table(&summary.logprob_summaries, &summary.winrate_reports));
    }
    Ok(())
}

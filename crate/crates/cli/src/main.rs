//! `elicit` — command-line driver for the expert-iteration pipeline.
//!
//! Every run lives in `<runs-root>/<run_id>` and is driven by a JSON
//! configuration. `elicit run` executes (or resumes) the whole loop; the
//! step subcommands (`setup`, `baseline`, `simulate`, ..., `report`)
//! execute the pipeline up to and including the named step, reusing any
//! step that already completed, so they double as resume points and as a
//! way to inspect intermediate artifacts. `--force` rewinds a run to the
//! named step and re-executes from there.
//!
//! Backends are chosen by each binding's `kind`: the `mock_*` kinds run
//! the in-process synthetic testbed (fully offline), and `remote_chat`
//! talks to an OpenAI-compatible chat-completions service. API keys are
//! taken from the environment variable named by the binding's
//! `api_key_env` — secrets never live in config files.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use elicit_core::backend::{BackendClient, BackendRole, RetryPolicy};
use elicit_core::config::{BackendBinding, CorpusConfig, RunConfig};
use elicit_core::corpus::Persona;
use elicit_core::datagen::{generate_personas, PersonaGenConfig};
use elicit_core::pipeline::{
    run_pipeline, BackendProvider, HermeticProvider, Phase, PipelineError, ProviderContext, RunnerOptions,
};
use elicit_core::store;
use elicit_core::template::TemplateSet;
use elicit_core::testbed::gen_world;
use elicit_core::traindata::ModelRef;
use elicit_remote::{RemoteBackend, RemoteParams};

/// Provider for full runs: `remote_chat` bindings get an HTTP backend,
/// everything else falls through to the hermetic mock provider.
struct CliProvider;

impl BackendProvider for CliProvider {
    fn make(
        &self,
        ctx: &ProviderContext,
        role: BackendRole,
        binding: &BackendBinding,
        model: &ModelRef,
    ) -> Result<BackendClient, PipelineError> {
        if binding.kind != "remote_chat" {
            return HermeticProvider.make(ctx, role, binding, model);
        }
        let mut params: RemoteParams = serde_json::from_value(binding.params.clone())
            .map_err(|source| PipelineError::BadBackendParams { kind: binding.kind.clone(), source })?;
        if !model.is_base() {
            if model.as_file_path().is_some() {
                return Err(PipelineError::UnsupportedKind {
                    kind: binding.kind.clone(),
                    hint: format!(
                        " (remote backends cannot serve local snapshot {model}; use an external trainer \
                         that registers checkpoints with the service)"
                    ),
                });
            }
            // Trained checkpoints override the binding's model name.
            params.model = model.to_string();
        }
        let backend = RemoteBackend::new(binding.backend_id.clone(), params).map_err(PipelineError::Backend)?;
        let retry = RetryPolicy { max_attempts: binding.max_attempts.unwrap_or(4), ..RetryPolicy::default() };
        Ok(BackendClient::new(Arc::new(backend), retry, binding.max_in_flight.unwrap_or(32)))
    }
}

#[derive(Parser)]
#[command(
    name = "elicit",
    version,
    about = "Trains question-asking dialogue policies by expert iteration",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Directory holding run directories (one per run id).
    #[arg(long, default_value = "runs")]
    runs_root: PathBuf,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct StepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Re-execute this step even if the run already advanced past it
    /// (everything after it re-runs too).
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct IterStepArgs {
    #[command(flatten)]
    step: StepArgs,
    /// Expert-iteration round (1-based).
    #[arg(long, short = 'i')]
    iteration: u32,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration file and print its canonical hash.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write and/or run a self-contained synthetic-world configuration.
    Hermetic {
        /// Run identifier (also the run directory name).
        #[arg(long)]
        run_id: String,
        /// Root seed; every artifact is a pure function of config+seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the number of expert-iteration rounds.
        #[arg(long)]
        iterations: Option<u32>,
        #[arg(long, default_value = "runs")]
        runs_root: PathBuf,
        /// Also write the generated configuration here.
        #[arg(long)]
        write_config: Option<PathBuf>,
        /// Only write the configuration; do not run.
        #[arg(long)]
        no_run: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Execute a full run (resumes if the run directory exists).
    Run(RunArgs),
    /// Build the corpus, splits, and gold responses.
    Setup(StepArgs),
    /// Evaluate the frozen starting policy and pin the baseline responses.
    Baseline(StepArgs),
    /// Sample training conversations for one iteration.
    Simulate(IterStepArgs),
    /// Score trajectories by gold-response log-probability.
    Score(IterStepArgs),
    /// Keep the best trajectories per (task, persona) pair.
    Select(IterStepArgs),
    /// Build the loss-masked fine-tuning dataset.
    Export(IterStepArgs),
    /// Train the iteration's checkpoint from the base policy.
    Train(IterStepArgs),
    /// Run log-prob and win-rate evaluations for one iteration.
    Eval(IterStepArgs),
    /// Write CSV reports and the run summary.
    Report(StepArgs),
    /// Corpus-building utilities.
    Datagen {
        #[command(subcommand)]
        command: DatagenCommand,
    },
}

#[derive(Subcommand)]
enum DatagenCommand {
    /// Grow the persona pool by few-shot prompting the oracle backend.
    Personas {
        /// Run configuration (supplies the oracle binding and templates).
        #[arg(long)]
        config: PathBuf,
        /// JSONL of existing personas used as few-shot exemplars (at least
        /// two).
        #[arg(long)]
        seeds: PathBuf,
        /// Optional JSONL of personas whose texts must not be duplicated.
        #[arg(long)]
        blocklist: Option<PathBuf>,
        /// How many new personas to accept.
        #[arg(long)]
        count: usize,
        /// Where to write the generated personas (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Numbering offset for generated ids (gen-pNNN).
        #[arg(long, default_value_t = 0)]
        id_offset: usize,
        /// Generation temperature.
        #[arg(long)]
        temperature: Option<f64>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => {
            let config = RunConfig::load(&config).context("configuration is invalid")?;
            println!("ok {} {}", config.run_id, config.config_hash());
            Ok(())
        }
        Command::Hermetic { run_id, seed, iterations, runs_root, write_config, no_run, quiet } => {
            let mut config = RunConfig::hermetic(&run_id, seed);
            if let Some(n) = iterations {
                config.iterations = n;
            }
            config.validate()?;
            if let Some(path) = &write_config {
                config.save(path)?;
                if !quiet {
                    println!("wrote configuration to {}", path.display());
                }
            }
            if no_run {
                return Ok(());
            }
            let args = RunArgs { config: PathBuf::new(), runs_root, quiet };
            execute_loaded(config, &args, None, None)
        }
        Command::Run(args) => execute(&args, None, None),
        Command::Setup(step) => execute_step(&step, 0, Phase::Setup),
        Command::Baseline(step) => execute_step(&step, 0, Phase::Baseline),
        Command::Simulate(s) => execute_step(&s.step, s.iteration, Phase::Simulate),
        Command::Score(s) => execute_step(&s.step, s.iteration, Phase::Score),
        Command::Select(s) => execute_step(&s.step, s.iteration, Phase::Select),
        Command::Export(s) => execute_step(&s.step, s.iteration, Phase::Export),
        Command::Train(s) => execute_step(&s.step, s.iteration, Phase::Train),
        Command::Eval(s) => execute_step(&s.step, s.iteration, Phase::Evaluate),
        Command::Report(step) => execute_step(&step, 0, Phase::Report),
        Command::Datagen { command } => datagen(command),
    }
}

fn execute_step(step: &StepArgs, iteration: u32, phase: Phase) -> Result<()> {
    let rewind = if step.force { Some((iteration, phase)) } else { None };
    execute(&step.run, Some((iteration, phase)), rewind)
}

fn execute(
    args: &RunArgs,
    halt_after: Option<(u32, Phase)>,
    rewind_to: Option<(u32, Phase)>,
) -> Result<()> {
    let config = RunConfig::load(&args.config)
        .with_context(|| format!("failed to load configuration {}", args.config.display()))?;
    execute_loaded(config, args, halt_after, rewind_to)
}

fn execute_loaded(
    config: RunConfig,
    args: &RunArgs,
    halt_after: Option<(u32, Phase)>,
    rewind_to: Option<(u32, Phase)>,
) -> Result<()> {
    let options = RunnerOptions { halt_after, rewind_to, quiet: args.quiet };
    let summary = run_pipeline(&config, &args.runs_root, &CliProvider, &options)?;
    if !args.quiet {
        let state = if summary.completed { "completed" } else { "halted" };
        println!(
            "run {} {} ({} trained checkpoint{})",
            summary.run_id,
            state,
            summary.models.len().saturating_sub(1),
            if summary.models.len() == 2 { "" } else { "s" }
        );
    }
    Ok(())
}

fn datagen(command: DatagenCommand) -> Result<()> {
    match command {
        DatagenCommand::Personas { config, seeds, blocklist, count, out, id_offset, temperature } => {
            let config = RunConfig::load(&config)?;
            let world = match &config.corpus {
                CorpusConfig::Synthetic(params) => Some(Arc::new(gen_world(*params))),
                CorpusConfig::Files { .. } => None,
            };
            let ctx = ProviderContext { world, run_root: PathBuf::new() };
            let oracle =
                CliProvider.make(&ctx, BackendRole::Oracle, config.binding(BackendRole::Oracle), &ModelRef::base())?;
            let overrides: std::collections::BTreeMap<String, String> = config
                .template_overrides
                .iter()
                .map(|(name, path)| (name.clone(), path.display().to_string()))
                .collect();
            let templates = TemplateSet::builtin().with_overrides(&overrides)?;

            let seed_personas: Vec<Persona> = store::read_jsonl(&seeds)
                .with_context(|| format!("failed to read seed personas {}", seeds.display()))?;
            let seed_texts: Vec<String> = seed_personas.iter().map(|p| p.text.clone()).collect();
            let block_texts: Vec<String> = match &blocklist {
                Some(path) => {
                    let personas: Vec<Persona> = store::read_jsonl(path)
                        .with_context(|| format!("failed to read blocklist {}", path.display()))?;
                    personas.into_iter().map(|p| p.text).collect()
                }
                None => Vec::new(),
            };
            let mut gen_config = PersonaGenConfig::for_count(count);
            if let Some(t) = temperature {
                gen_config.temperature = t;
            }
            let personas =
                generate_personas(&oracle, &templates, &seed_texts, &block_texts, &gen_config, config.seed, id_offset)?;
            store::write_jsonl(&out, &personas)?;
            println!("wrote {} personas to {}", personas.len(), out.display());
            Ok(())
        }
    }
}

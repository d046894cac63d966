//! Acceptance gate: one test per acceptance criterion, numbered in the order
//! they were agreed. Each test prints exactly one summary line of the form
//!
//! ```text
//! acceptance NN <name>: PASS — <evidence>
//! ```
//!
//! (or `SKIP` for the two criteria that are statements of scope / optional
//! live checks). Failures panic with a matching `FAIL` line. Run with
//! `cargo test -p elicit-cli --test acceptance -- --nocapture` to see the
//! lines for passing criteria too.
//!
//! Criteria 04, 05, 06, and 08 share a battery of twenty seeded hermetic
//! runs (and twenty paired no-regularization runs) built once per process.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use elicit_core::backend::{Backend, BackendClient, Role, ScoreRequest};
use elicit_core::config::RunConfig;
use elicit_core::corpus::{
    make_splits, splits_partition_corpus, test_pairs, training_pairs_for_iteration, triple_count,
    Corpus, Persona, Task,
};
use elicit_core::dialogue::sample_turn_budget;
use elicit_core::evals::{
    judge_pair, parse_verdict, JudgeOutcome, JudgeRecord, LogprobCondition, LogprobSummary,
    ResponseRecord, WinRateReport,
};
use elicit_core::pipeline::{
    run_pipeline, HermeticProvider, Phase, RunState, RunSummary, RunnerOptions,
};
use elicit_core::selection::{build_response_context, select_best, ScoredTrajectory};
use elicit_core::store::{self, RunPaths, RunStore};
use elicit_core::template::TemplateSet;
use elicit_core::testbed::{
    gen_world, tokenize, MockJudgeBackend, MockScorerBackend, WorldParams,
};
use elicit_core::traindata::{
    mask_is_sound, TrainMode, TrainerState, TrainerStatus, TrainingExample, TRAINER_JOB_FILE,
    TRAINER_STATUS_FILE,
};
use elicit_core::util::derive_seed;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Shared hermetic battery
// ---------------------------------------------------------------------------

const BATTERY_RUNS: usize = 20;
const BATTERY_BASE_SEED: u64 = 1000;

struct Battery {
    /// Keeps the run directories alive for criteria that read artifacts.
    _dir: tempfile::TempDir,
    standard_roots: Vec<PathBuf>,
    no_reg_roots: Vec<PathBuf>,
    standard: Vec<RunSummary>,
    no_reg: Vec<RunSummary>,
    /// Wall time of the twenty standard runs.
    standard_secs: f64,
}

/// Twenty standard-mode hermetic runs (stock desk-scale configuration:
/// 3-attribute world, 2 iterations, 10 samples per pair, 3-turn budget) and
/// twenty no-regularization runs paired by seed, built once per process.
fn battery() -> &'static Battery {
    static CELL: OnceLock<Battery> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().expect("battery tempdir");
        let runs_root = dir.path().join("runs");
        let options = RunnerOptions { quiet: true, ..RunnerOptions::default() };

        let started = Instant::now();
        let mut standard = Vec::new();
        let mut standard_roots = Vec::new();
        for i in 0..BATTERY_RUNS {
            let config = RunConfig::hermetic(format!("std{i:02}"), BATTERY_BASE_SEED + i as u64);
            let summary = run_pipeline(&config, &runs_root, &HermeticProvider, &options)
                .expect("standard battery run");
            standard_roots.push(runs_root.join(&config.run_id));
            standard.push(summary);
        }
        let standard_secs = started.elapsed().as_secs_f64();

        let mut no_reg = Vec::new();
        let mut no_reg_roots = Vec::new();
        for i in 0..BATTERY_RUNS {
            let mut config =
                RunConfig::hermetic(format!("noreg{i:02}"), BATTERY_BASE_SEED + i as u64);
            config.iterations = 1;
            config.train.mode = TrainMode::NoRegularization;
            let summary = run_pipeline(&config, &runs_root, &HermeticProvider, &options)
                .expect("no-regularization battery run");
            no_reg_roots.push(runs_root.join(&config.run_id));
            no_reg.push(summary);
        }

        Battery { _dir: dir, standard_roots, no_reg_roots, standard, no_reg, standard_secs }
    })
}

fn lp_mean(summary: &RunSummary, eta: u32, condition: LogprobCondition) -> f64 {
    summary
        .logprob_summaries
        .iter()
        .find(|s| s.iteration == eta && s.condition == condition)
        .unwrap_or_else(|| {
            panic!("{}: no log-prob summary for iteration {eta}", summary.run_id)
        })
        .mean
}

fn winrate_at(summary: &RunSummary, eta: u32) -> &WinRateReport {
    summary
        .winrate_reports
        .iter()
        .find(|r| r.iteration == eta)
        .unwrap_or_else(|| panic!("{}: no win-rate report for iteration {eta}", summary.run_id))
}

fn pass(number: u8, name: &str, evidence: String) {
    println!("acceptance {number:02} {name}: PASS — {evidence}");
}

fn skip(number: u8, name: &str, reason: String) {
    println!("acceptance {number:02} {name}: SKIP — {reason}");
}

macro_rules! check {
    ($cond:expr, $number:expr, $name:expr, $($detail:tt)+) => {
        assert!(
            $cond,
            "acceptance {:02} {}: FAIL — {}",
            $number,
            $name,
            format!($($detail)+)
        );
    };
}

// ---------------------------------------------------------------------------
// 01 — scope statement
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_full_scale_numbers_are_out_of_scope() {
    // The published headline effect sizes come from GPT-4-class oracles and
    // 7B-parameter fine-tuning; a desk-scale hermetic battery cannot and
    // does not reproduce them. Criteria 02–10 substitute property checks
    // that pin the mechanisms those numbers depend on.
    skip(
        1,
        "full-scale reference numbers",
        "not reproducible at desk scale by design; criteria 02-10 check the mechanisms instead"
            .to_string(),
    );
}

// ---------------------------------------------------------------------------
// 02 — selection equals exhaustive argmax
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_selection_matches_exhaustive_argmax() {
    const N: u8 = 2;
    const NAME: &str = "selection oracle equivalence";
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(2, &["acceptance", "selection"]));
    let started = Instant::now();
    let mut agreements = 0usize;
    for case in 0..1000 {
        let size = rng.gen_range(1..=10);
        // Quantized scores force frequent exact ties; shuffled sample
        // indices decouple vector order from the documented tie-break.
        let mut indices: Vec<usize> = (0..size).collect();
        indices.shuffle(&mut rng);
        let scored: Vec<ScoredTrajectory> = indices
            .iter()
            .map(|&sample_index| {
                let score = f64::from(rng.gen_range(-60i32..0)) * 0.5;
                ScoredTrajectory {
                    task_id: "t".into(),
                    persona_id: "p".into(),
                    sample_index,
                    turn_budget: 1,
                    score,
                    sum_logprob: score,
                    token_count: 12,
                    scorer_backend_id: "scorer".into(),
                }
            })
            .collect();

        // Exhaustive reference: maximum score, ties to the lowest sample index.
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for t in &scored {
            if t.score > best.0 || (t.score == best.0 && t.sample_index < best.1) {
                best = (t.score, t.sample_index);
            }
        }

        let selections = select_best(&scored, 1).expect("non-empty score set");
        check!(selections.len() == 1, N, NAME, "case {case}: expected one pair group");
        let selection = &selections[0];
        check!(
            selection.sample_indices == vec![best.1] && selection.best_score == best.0,
            N,
            NAME,
            "case {case}: select_best chose sample {:?} at {}, exhaustive max is sample {} at {}",
            selection.sample_indices,
            selection.best_score,
            best.1,
            best.0
        );
        agreements += 1;
    }
    let elapsed = started.elapsed();
    check!(elapsed.as_secs_f64() < 1.0, N, NAME, "took {elapsed:?}, budget is 1 s");
    pass(N, NAME, format!("{agreements}/1000 randomized score sets agree with exhaustive argmax ({elapsed:?})"));
}

// ---------------------------------------------------------------------------
// 03 — scoring matches an independent closed form
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_mock_scores_match_closed_form() {
    const N: u8 = 3;
    const NAME: &str = "scoring exactness";
    let world = Arc::new(gen_world(WorldParams::default()));
    let scorer = MockScorerBackend::new("scorer", Arc::clone(&world));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(3, &["acceptance", "scoring"]));
    let started = Instant::now();
    let mut worst = 0.0f64;
    for case in 0..100 {
        let task = &world.tasks[rng.gen_range(0..world.tasks.len())];
        let persona = &world.personas[rng.gen_range(0..world.personas.len())];
        let turns: Vec<elicit_core::dialogue::Turn> = (0..rng.gen_range(0..=3))
            .map(|_| {
                let question = world.question_text(rng.gen_range(0..world.template_count()));
                let answer = if rng.gen_bool(0.5) {
                    world.reveal_answer(rng.gen_range(0..world.attributes.len()), persona)
                } else {
                    world.filler_answer()
                };
                elicit_core::dialogue::Turn { question, answer }
            })
            .collect();
        let context = build_response_context(&persona.name, &task.text, &turns);
        let gold = world.gold_text(task, persona);

        // Independent closed form: a value token scores p_hi if any context
        // message mentions it and p_lo otherwise; every other token scores
        // p_other.
        let context_tokens: std::collections::HashSet<&str> =
            context.iter().flat_map(|m| tokenize(&m.content)).collect();
        let expected: f64 = tokenize(&gold)
            .into_iter()
            .map(|token| {
                if world.is_value_token(token) {
                    if context_tokens.contains(token) {
                        scorer.p_hi.ln()
                    } else {
                        scorer.p_lo.ln()
                    }
                } else {
                    scorer.p_other.ln()
                }
            })
            .sum();

        let request = ScoreRequest { messages: context, continuation: gold };
        let got = scorer.score_continuation(&request).expect("mock scoring").sum();
        let error = (got - expected).abs();
        worst = worst.max(error);
        check!(
            error <= 1e-9,
            N,
            NAME,
            "case {case}: scorer returned {got}, closed form gives {expected} (|Δ| = {error})"
        );
    }
    let elapsed = started.elapsed();
    check!(elapsed.as_secs_f64() < 1.0, N, NAME, "took {elapsed:?}, budget is 1 s");
    pass(N, NAME, format!("100/100 cases within 1e-9 of the closed form (worst |Δ| = {worst:.2e}, {elapsed:?})"));
}

// ---------------------------------------------------------------------------
// 04 — exported masks are sound and mode-shaped
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_exported_masks_are_sound_and_mode_shaped() {
    const N: u8 = 4;
    const NAME: &str = "mask soundness";
    let battery = battery();

    let mut examples_checked = 0usize;
    let mut questions = 0usize;
    let mut answers = 0usize;

    let mut audit = |dataset: &Path, expected_mode: TrainMode| {
        let examples: Vec<TrainingExample> =
            store::read_jsonl(dataset).expect("battery dataset parses");
        check!(!examples.is_empty(), N, NAME, "{} is empty", dataset.display());
        for example in &examples {
            check!(
                mask_is_sound(example),
                N,
                NAME,
                "{}: loss mask covers a non-assistant message (or misses an assistant one)",
                dataset.display()
            );
            for message in &example.messages {
                match message.role {
                    Role::Assistant => {
                        check!(message.train_on, N, NAME, "assistant message with train_on=false");
                        questions += 1;
                    }
                    _ => {
                        check!(!message.train_on, N, NAME, "non-assistant message with train_on=true");
                        if message.role == Role::User {
                            answers += 1;
                        }
                    }
                }
            }
            check!(
                example.meta.mode == expected_mode,
                N,
                NAME,
                "{}: example tagged {:?}, run mode is {:?}",
                dataset.display(),
                example.meta.mode,
                expected_mode
            );
            let last = example.messages.last().expect("non-empty example");
            match expected_mode {
                // Standard examples end with the task repeated and the
                // regularization response under loss.
                TrainMode::Standard | TrainMode::GoldResponse => {
                    check!(
                        last.role == Role::Assistant && last.train_on,
                        N,
                        NAME,
                        "{}: response-bearing mode must end with a trained assistant response",
                        dataset.display()
                    );
                    let second_last = &example.messages[example.messages.len() - 2];
                    check!(
                        second_last.role == Role::User && !second_last.train_on,
                        N,
                        NAME,
                        "response must be preceded by the untrained task repeat"
                    );
                }
                // No-regularization examples stop at the last roleplayer answer.
                TrainMode::NoRegularization => {
                    check!(
                        last.role == Role::User,
                        N,
                        NAME,
                        "{}: no-regularization examples must not carry a final response",
                        dataset.display()
                    );
                }
            }
            examples_checked += 1;
        }
    };

    let standard_paths = RunPaths::new(&battery.standard_roots[0]);
    audit(&standard_paths.dataset(1), TrainMode::Standard);
    audit(&standard_paths.dataset(2), TrainMode::Standard);
    let no_reg_paths = RunPaths::new(&battery.no_reg_roots[0]);
    audit(&no_reg_paths.dataset(1), TrainMode::NoRegularization);

    pass(
        N,
        NAME,
        format!(
            "{examples_checked} exported examples audited: {questions} question/response messages \
             all under loss, {answers} roleplayer/task messages all masked out"
        ),
    );
}

// ---------------------------------------------------------------------------
// 05 — training raises held-out gold log-prob
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_training_raises_heldout_gold_logprob() {
    const N: u8 = 5;
    const NAME: &str = "held-out elicitation gain";
    let battery = battery();

    let mut improved = 0usize;
    let mut beats_random = 0usize;
    let mut gains = Vec::new();
    for summary in &battery.standard {
        let q0 = lp_mean(summary, 0, LogprobCondition::QExperimental);
        let q1 = lp_mean(summary, 1, LogprobCondition::QExperimental);
        gains.push(q1 - q0);
        if q1 > q0 {
            improved += 1;
        }
        let beats = (1..=summary.iterations).all(|eta| {
            lp_mean(summary, eta, LogprobCondition::QExperimental)
                > lp_mean(summary, eta, LogprobCondition::QRandom)
        });
        if beats {
            beats_random += 1;
        }
    }
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;

    check!(
        improved >= 18,
        N,
        NAME,
        "trained-policy gold log-prob rose from iteration 0 to 1 in only {improved}/{BATTERY_RUNS} runs (need ≥ 18)"
    );
    check!(
        beats_random >= 18,
        N,
        NAME,
        "own-conversation beat donor-conversation scores at every trained iteration in only {beats_random}/{BATTERY_RUNS} runs (need ≥ 18)"
    );
    check!(
        battery.standard_secs < 300.0,
        N,
        NAME,
        "the twenty standard runs took {:.1} s, budget is 300 s",
        battery.standard_secs
    );
    pass(
        N,
        NAME,
        format!(
            "gold log-prob rose η0→η1 in {improved}/{BATTERY_RUNS} runs (mean gain {mean_gain:+.3} nats), \
             beat the shuffled-persona control at every trained iteration in {beats_random}/{BATTERY_RUNS}; \
             battery took {:.1} s",
            battery.standard_secs
        ),
    );
}

// ---------------------------------------------------------------------------
// 06 — win rate beats the baseline and needs regularization
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_win_rate_beats_baseline_and_needs_regularization() {
    const N: u8 = 6;
    const NAME: &str = "judged win rate";
    let battery = battery();

    let mut wins = 0usize;
    let mut judged = 0usize;
    for summary in &battery.standard {
        let report = winrate_at(summary, 1);
        wins += report.wins;
        judged += report.judged;
    }
    let rate = wins as f64 / judged as f64;
    let sem = (rate * (1.0 - rate) / judged as f64).sqrt();
    let lower_bound = rate - 1.96 * sem;
    check!(
        lower_bound > 0.5,
        N,
        NAME,
        "pooled win rate at iteration 1 is {rate:.3} over {judged} judged pairs; \
         95% lower bound {lower_bound:.3} must exceed 0.5"
    );

    let mut regularization_helps = 0usize;
    for (standard, no_reg) in battery.standard.iter().zip(&battery.no_reg) {
        if winrate_at(no_reg, 1).win_rate < winrate_at(standard, 1).win_rate {
            regularization_helps += 1;
        }
    }
    check!(
        regularization_helps >= 16,
        N,
        NAME,
        "no-regularization win rate was strictly lower than standard in only \
         {regularization_helps}/{BATTERY_RUNS} seed-paired runs (need ≥ 16)"
    );

    pass(
        N,
        NAME,
        format!(
            "iteration-1 win rate {rate:.3} (n={judged}, 95% lower bound {lower_bound:.3} > 0.5); \
             dropping response regularization lowered it in {regularization_helps}/{BATTERY_RUNS} paired runs"
        ),
    );
}

// ---------------------------------------------------------------------------
// 07 — turn budgets are uniform
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_turn_budgets_are_uniform() {
    const N: u8 = 7;
    const NAME: &str = "turn-budget uniformity";
    const DRAWS: usize = 10_000;
    // 0.999 quantile of the chi-square distribution with 2 degrees of freedom.
    const LIMIT: f64 = 13.815510557964274;

    let mut counts = [0usize; 3];
    for i in 0..DRAWS {
        let key = i.to_string();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(7, &["acceptance", "budget", &key]));
        let budget = sample_turn_budget(&mut rng, 3);
        check!((1..=3).contains(&budget), N, NAME, "draw {i} produced budget {budget}, expected 1..=3");
        counts[budget - 1] += 1;
    }
    let expected = DRAWS as f64 / 3.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    check!(
        chi2 < LIMIT,
        N,
        NAME,
        "chi-square over {DRAWS} draws is {chi2:.3} (counts {counts:?}), 0.999 quantile for 2 d.o.f. is {LIMIT}"
    );
    pass(N, NAME, format!("counts {counts:?} over {DRAWS} draws, chi-square {chi2:.3} < {LIMIT}"));
}

// ---------------------------------------------------------------------------
// 08 — judge order is fair and the verdict mapping is order-proof
// ---------------------------------------------------------------------------

/// First seed at or after `start` whose presentation coin lands on `want`.
fn coin_seed_with(want: bool, start: u64) -> u64 {
    (start..)
        .find(|&seed| ChaCha8Rng::seed_from_u64(seed).gen::<bool>() == want)
        .expect("a fair coin lands on both sides")
}

#[test]
fn criterion_08_judge_order_is_fair_and_mapping_consistent() {
    const N: u8 = 8;
    const NAME: &str = "judge-order fairness";
    let world = Arc::new(gen_world(WorldParams::default()));
    let judge = BackendClient::with_defaults(Arc::new(MockJudgeBackend::new(
        "judge",
        Arc::clone(&world),
    )));
    let templates = TemplateSet::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(8, &["acceptance", "judge"]));

    let record_for = |scenario: usize,
                      coin_seed: u64,
                      task: &elicit_core::testbed::WorldTask,
                      persona: &elicit_core::testbed::WorldPersona,
                      candidate_text: &str,
                      baseline_text: &str|
     -> JudgeRecord {
        let make = |response: &str, model: &str| ResponseRecord {
            task_id: task.id.clone(),
            persona_id: persona.id.clone(),
            sample_index: 0,
            turn_budget: 1,
            response: response.to_string(),
            model: model.to_string(),
        };
        judge_pair(
            &judge,
            &templates,
            &world.persona_text(persona),
            &task.text,
            &make(candidate_text, "candidate"),
            &make(baseline_text, "baseline"),
            1,
            coin_seed,
            &format!("acceptance:judge:{scenario}:{coin_seed}"),
        )
        .expect("mock judging")
    };

    // (a) Fairness + verdict mapping over 1,000 records with natural coin
    // seeds. The mapping re-derivation is independent of judge_pair's
    // internals: verdict 'A' must mean "first-presented response wins".
    let mut candidate_first = 0usize;
    for i in 0..1000 {
        let task = world.tasks[rng.gen_range(0..world.tasks.len())].clone();
        let persona = world.personas[rng.gen_range(0..world.personas.len())].clone();
        let tailored = world.gold_text(&task, &persona);
        let generic = world.generic_response();
        let candidate_text = if rng.gen_bool(0.5) { tailored.clone() } else { generic.clone() };
        let baseline_text = if rng.gen_bool(0.5) { tailored } else { generic };
        let coin_seed = derive_seed(8, &["acceptance", "coin", &i.to_string()]);
        let record = record_for(i, coin_seed, &task, &persona, &candidate_text, &baseline_text);
        if record.candidate_first {
            candidate_first += 1;
        }
        let expected_outcome = match parse_verdict(&record.judge_raw) {
            Some('A') if record.candidate_first => JudgeOutcome::CandidateWin,
            Some('A') => JudgeOutcome::BaselineWin,
            Some('B') if record.candidate_first => JudgeOutcome::BaselineWin,
            Some('B') => JudgeOutcome::CandidateWin,
            _ => JudgeOutcome::ParseFailure,
        };
        check!(
            record.outcome == expected_outcome,
            N,
            NAME,
            "record {i}: verdict {:?} with candidate_first={} mapped to {:?}, expected {:?}",
            record.judge_raw,
            record.candidate_first,
            record.outcome,
            expected_outcome
        );
    }
    let rate = candidate_first as f64 / 1000.0;
    check!(
        (rate - 0.5).abs() <= 0.047,
        N,
        NAME,
        "candidate-first rate over 1000 records is {rate:.3}, tolerance is 0.5 ± 0.047"
    );

    // (b) Order-flip behavior: judging the same decisive pair under both
    // presentation orders must reach the same semantic outcome.
    let mut flips_checked = 0usize;
    for i in 0..250 {
        let task = world.tasks[rng.gen_range(0..world.tasks.len())].clone();
        let persona = world.personas[rng.gen_range(0..world.personas.len())].clone();
        let tailored = world.gold_text(&task, &persona);
        let generic = world.generic_response();
        let candidate_wins = rng.gen_bool(0.5);
        let (candidate_text, baseline_text) =
            if candidate_wins { (tailored.clone(), generic.clone()) } else { (generic, tailored) };
        let base = derive_seed(8, &["acceptance", "flip", &i.to_string()]);
        let seed_first = coin_seed_with(true, base);
        let seed_second = coin_seed_with(false, base);
        let first = record_for(i, seed_first, &task, &persona, &candidate_text, &baseline_text);
        let second = record_for(i, seed_second, &task, &persona, &candidate_text, &baseline_text);
        check!(
            first.candidate_first && !second.candidate_first,
            N,
            NAME,
            "flip pair {i}: seeds did not produce opposite presentation orders"
        );
        let expected =
            if candidate_wins { JudgeOutcome::CandidateWin } else { JudgeOutcome::BaselineWin };
        check!(
            first.outcome == expected && second.outcome == expected,
            N,
            NAME,
            "flip pair {i}: outcomes {:?}/{:?} under opposite orders, expected {:?} from ground truth",
            first.outcome,
            second.outcome,
            expected
        );
        flips_checked += 1;
    }

    pass(
        N,
        NAME,
        format!(
            "candidate-first rate {rate:.3} over 1000 records (tolerance ±0.047); verdict mapping \
             re-derived on all 1000; {flips_checked}/250 decisive pairs kept their outcome under both orders"
        ),
    );
}

// ---------------------------------------------------------------------------
// 09 — runs are byte-reproducible and resumable
// ---------------------------------------------------------------------------

/// Every file under `root`, keyed by `/`-joined relative path.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("readable run directory") {
            let path = entry.expect("directory entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("path under root")
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect::<Vec<_>>()
                    .join("/");
                out.insert(rel, std::fs::read(&path).expect("readable artifact"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn diff_trees(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut diffs = Vec::new();
    for key in a.keys().chain(b.keys()) {
        match (a.get(key), b.get(key)) {
            (Some(x), Some(y)) if x == y => {}
            (Some(_), Some(_)) => diffs.push(format!("{key} differs")),
            (Some(_), None) => diffs.push(format!("{key} only in first")),
            (None, Some(_)) => diffs.push(format!("{key} only in second")),
            (None, None) => unreachable!(),
        }
    }
    diffs.dedup();
    diffs
}

#[test]
fn criterion_09_runs_are_reproducible_and_resumable() {
    const N: u8 = 9;
    const NAME: &str = "determinism and resumption";
    let dir = tempfile::tempdir().expect("tempdir");
    let mut config = RunConfig::hermetic("repro", 77);
    config.iterations = 1;
    config.samples_per_pair = 6;
    config.eval.samples_per_pair = 4;
    let quiet = RunnerOptions { quiet: true, ..RunnerOptions::default() };

    run_pipeline(&config, &dir.path().join("a"), &HermeticProvider, &quiet).expect("first run");
    run_pipeline(&config, &dir.path().join("b"), &HermeticProvider, &quiet).expect("second run");
    let tree_a = tree(&dir.path().join("a/repro"));
    let tree_b = tree(&dir.path().join("b/repro"));
    check!(tree_a.len() >= 20, N, NAME, "expected a full artifact tree, found {} files", tree_a.len());
    let diffs = diff_trees(&tree_a, &tree_b);
    check!(
        diffs.is_empty(),
        N,
        NAME,
        "independent runs of one config diverged: {}",
        diffs.join(", ")
    );

    // Halt immediately after training (simulating a kill between phases),
    // then resume with a fresh invocation; the final tree must match an
    // uninterrupted run byte for byte.
    let halted = RunnerOptions {
        halt_after: Some((1, Phase::Train)),
        quiet: true,
        ..RunnerOptions::default()
    };
    run_pipeline(&config, &dir.path().join("c"), &HermeticProvider, &halted).expect("halted run");
    run_pipeline(&config, &dir.path().join("c"), &HermeticProvider, &quiet).expect("resumed run");
    let tree_c = tree(&dir.path().join("c/repro"));
    let resume_diffs = diff_trees(&tree_a, &tree_c);
    check!(
        resume_diffs.is_empty(),
        N,
        NAME,
        "halt-and-resume diverged from the uninterrupted run: {}",
        resume_diffs.join(", ")
    );

    pass(
        N,
        NAME,
        format!(
            "{} artifacts byte-identical across independent runs; halt-after-train + resume \
             reproduced the same tree",
            tree_a.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 10 — splits partition the corpus and the schedule arithmetic holds
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_splits_partition_and_schedule_arithmetic_holds() {
    const N: u8 = 10;
    const NAME: &str = "split integrity";

    // Desk scale: the stock hermetic world.
    let world = gen_world(WorldParams::default());
    let corpus = Corpus::from_records(world.corpus_tasks(), world.corpus_personas(), Vec::new())
        .expect("world corpus");
    let plan = make_splits(&corpus, [12, 12, 6], [8, 8, 4], 5).expect("desk-scale splits");
    check!(splits_partition_corpus(&corpus, &plan), N, NAME, "desk-scale splits must partition the corpus");

    let in_split = |ids: &[String], id: &str| ids.iter().any(|x| x == id);
    let odd = training_pairs_for_iteration(&plan, 1).expect("iteration 1 pairs");
    let even = training_pairs_for_iteration(&plan, 2).expect("iteration 2 pairs");
    let third = training_pairs_for_iteration(&plan, 3).expect("iteration 3 pairs");
    check!(odd.len() == 12 * 8 && even.len() == 12 * 8, N, NAME, "training grids must be 96 pairs");
    check!(
        odd.iter().all(|p| in_split(&plan.tasks.a, &p.task_id) && in_split(&plan.personas.a, &p.persona_id)),
        N,
        NAME,
        "odd iterations must train on split A only"
    );
    check!(
        even.iter().all(|p| in_split(&plan.tasks.b, &p.task_id) && in_split(&plan.personas.b, &p.persona_id)),
        N,
        NAME,
        "even iterations must train on split B only"
    );
    check!(third == odd, N, NAME, "iteration 3 must alternate back to split A");
    let held_out = test_pairs(&plan);
    check!(
        held_out.len() == 6 * 4
            && held_out
                .iter()
                .all(|p| in_split(&plan.tasks.test, &p.task_id) && in_split(&plan.personas.test, &p.persona_id)),
        N,
        NAME,
        "held-out grid must be the 24 test-split pairs"
    );

    // Production scale: 550 tasks × 110 personas split (250, 250, 50) /
    // (50, 50, 10) yields 12,500 training pairs per parity and 500 held-out
    // pairs — 25,500 scheduled triples.
    let tasks: Vec<Task> = (0..550)
        .map(|i| Task { id: format!("t{i:03}"), text: format!("Production task {i}") })
        .collect();
    let personas: Vec<Persona> = (0..110)
        .map(|i| Persona {
            id: format!("p{i:03}"),
            name: format!("Persona{i}"),
            text: format!("Production persona {i}"),
        })
        .collect();
    let production = Corpus::from_records(tasks, personas, Vec::new()).expect("production corpus");
    let production_plan =
        make_splits(&production, [250, 250, 50], [50, 50, 10], 11).expect("production splits");
    check!(
        splits_partition_corpus(&production, &production_plan),
        N,
        NAME,
        "production splits must partition the corpus"
    );
    let triples = triple_count(&production_plan);
    check!(triples == 25_500, N, NAME, "expected 25,500 scheduled triples, got {triples}");
    let train_1 = training_pairs_for_iteration(&production_plan, 1).expect("pairs").len();
    let train_2 = training_pairs_for_iteration(&production_plan, 2).expect("pairs").len();
    let test_n = test_pairs(&production_plan).len();
    check!(
        train_1 == 12_500 && train_2 == 12_500 && test_n == 500,
        N,
        NAME,
        "expected 12,500/12,500/500 pairs, got {train_1}/{train_2}/{test_n}"
    );

    pass(
        N,
        NAME,
        format!(
            "splits disjoint and complete at both scales; parity alternates A/B/A; \
             production schedule covers {triples} triples (12,500 + 12,500 + 500)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 11 — optional live smoke against a remote endpoint
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_remote_smoke_run() {
    const N: u8 = 11;
    const NAME: &str = "remote-backend smoke";
    let (base_url, model) = match (
        std::env::var("ELICIT_REMOTE_BASE_URL"),
        std::env::var("ELICIT_REMOTE_MODEL"),
    ) {
        (Ok(url), Ok(model)) => (url, model),
        _ => {
            skip(
                N,
                NAME,
                "set ELICIT_REMOTE_BASE_URL and ELICIT_REMOTE_MODEL (and optionally \
                 ELICIT_REMOTE_API_KEY_ENV) to run a live smoke against a chat-completions endpoint"
                    .to_string(),
            );
            return;
        }
    };

    let dir = tempfile::tempdir().expect("tempdir");
    let corpus_dir = dir.path().join("corpus");
    let tasks: Vec<Task> = [
        "I need a weeknight dinner plan. What should I cook?",
        "Recommend a book for my upcoming vacation.",
        "Help me pick a weekend exercise routine.",
        "Suggest a gift for a close friend's birthday.",
        "Plan a Saturday outing in my city.",
    ]
    .iter()
    .enumerate()
    .map(|(i, text)| Task { id: format!("t{i}"), text: (*text).to_string() })
    .collect();
    let personas: Vec<Persona> = [
        ("Avery", "I am vegetarian, love mystery novels, and prefer quiet evenings."),
        ("Blake", "I train for marathons and enjoy science fiction."),
        ("Casey", "I have two young kids and very little free time."),
        ("Devon", "I am learning to cook and enjoy live music."),
        ("Emery", "I work night shifts and like calm, low-key activities."),
        ("Finley", "I am an avid hiker who reads history books."),
    ]
    .iter()
    .enumerate()
    .map(|(i, (name, text))| Persona {
        id: format!("p{i}"),
        name: (*name).to_string(),
        text: (*text).to_string(),
    })
    .collect();
    store::write_jsonl(&corpus_dir.join("tasks.jsonl"), &tasks).expect("write tasks");
    store::write_jsonl(&corpus_dir.join("personas.jsonl"), &personas).expect("write personas");

    let mut params = serde_json::json!({
        "base_url": base_url,
        "model": model,
        "default_max_tokens": 300,
    });
    if let Ok(key_env) = std::env::var("ELICIT_REMOTE_API_KEY_ENV") {
        params["api_key_env"] = serde_json::Value::String(key_env);
    }

    let mut config = RunConfig::hermetic("smoke", 17);
    config.corpus = elicit_core::config::CorpusConfig::Files {
        tasks: corpus_dir.join("tasks.jsonl"),
        personas: corpus_dir.join("personas.jsonl"),
        golds: None,
    };
    config.splits = elicit_core::config::SplitConfig {
        task_sizes: [2, 2, 1],
        persona_sizes: [2, 2, 2],
        seed: 17,
    };
    config.iterations = 1;
    config.samples_per_pair = 2;
    config.max_turns = 2;
    config.eval.samples_per_pair = 1;
    config.train.trainer =
        elicit_core::config::TrainerConfig::External { poll_interval_secs: 1, timeout_secs: 300 };
    config.workers = 4;
    for binding in config.backends.values_mut() {
        binding.kind = "remote_chat".to_string();
        binding.params = params.clone();
    }
    let config_path = dir.path().join("smoke.json");
    config.save(&config_path).expect("write smoke config");

    // Stand in for the operator's fine-tuning service: acknowledge the job
    // file and hand back the same remote model (the smoke checks phase and
    // artifact plumbing, not learning).
    let runs_root = dir.path().join("runs");
    let export_dir = runs_root.join("smoke/iter1/export");
    let trainer_model = model.clone();
    let watcher = std::thread::spawn(move || {
        let job_path = export_dir.join(TRAINER_JOB_FILE);
        for _ in 0..600 {
            if job_path.exists() {
                let status = TrainerStatus {
                    state: TrainerState::Done,
                    model_id: Some(trainer_model),
                    message: None,
                };
                store::write_json_atomic(&export_dir.join(TRAINER_STATUS_FILE), &status)
                    .expect("write trainer status");
                return;
            }
            std::thread::sleep(std::time::Duration::from_millis(500));
        }
    });

    let output = std::process::Command::new(env!("CARGO_BIN_EXE_elicit"))
        .args(["run", "--config"])
        .arg(&config_path)
        .arg("--runs-root")
        .arg(&runs_root)
        .output()
        .expect("spawn elicit run");
    watcher.join().expect("trainer watcher");
    check!(
        output.status.success(),
        N,
        NAME,
        "elicit run failed:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );

    // Schema validation: every artifact parses back into its declared type.
    let paths = RunPaths::new(runs_root.join("smoke"));
    let state: RunState = store::read_json(&paths.state()).expect("state parses");
    check!(state.completed, N, NAME, "run state must be marked completed");
    let summary: RunSummary = store::read_json(&paths.summary()).expect("summary parses");
    check!(
        summary.completed && summary.models.contains_key("1"),
        N,
        NAME,
        "summary must record the trained checkpoint"
    );
    Corpus::load(&paths.corpus_tasks(), &paths.corpus_personas(), &paths.corpus_golds())
        .expect("persisted corpus (with generated golds) loads");
    let dataset: Vec<TrainingExample> = store::read_jsonl(&paths.dataset(1)).expect("dataset parses");
    check!(
        !dataset.is_empty() && dataset.iter().all(mask_is_sound),
        N,
        NAME,
        "exported dataset must be non-empty and soundly masked"
    );
    let store_handle = RunStore::new(paths.clone(), "smoke", summary.config_hash.clone());
    let records: Vec<JudgeRecord> =
        store_handle.read_stamped(&paths.winrate_records(1)).expect("judge records parse");
    check!(!records.is_empty(), N, NAME, "judge records must exist");
    let summaries: Vec<LogprobSummary> =
        store::read_json(&paths.logprob_summary(1)).expect("log-prob summary parses");
    check!(summaries.len() == 4, N, NAME, "expected all four scoring conditions");
    let _report: WinRateReport = store::read_json(&paths.winrate_report(1)).expect("win-rate report parses");

    pass(
        N,
        NAME,
        format!(
            "5-task live smoke completed every phase against {base_url} with model {model}; \
             {} training examples and {} judge records parsed back cleanly (no numeric claims)",
            dataset.len(),
            records.len()
        ),
    );
}

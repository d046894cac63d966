//! Run reports: CSV exports and a plain-text summary table.
//!
//! The report phase collects the per-iteration evaluation artifacts into
//! two flat CSV files (`report/logprob.csv`, `report/winrate.csv`) and a
//! human-readable table. Values are written exactly as serialized
//! elsewhere, so reports are as reproducible as the artifacts they
//! summarize.

use std::fmt::Write as _;
use std::path::Path;

use crate::evals::{LogprobSummary, WinRateReport};
use crate::store::StoreError;

/// Writes the per-condition log-probability summaries as CSV.
pub fn write_logprob_csv(path: &Path, summaries: &[LogprobSummary]) -> Result<(), StoreError> {
    let mut out = String::from("iteration,condition,n,mean_sum_logprob,sem\n");
    for s in summaries {
        writeln!(out, "{},{},{},{},{}", s.iteration, s.condition.as_str(), s.n, s.mean, s.sem)
            .expect("string write");
    }
    write_text(path, &out)
}

/// Writes the per-iteration win-rate reports as CSV.
pub fn write_winrate_csv(path: &Path, reports: &[WinRateReport]) -> Result<(), StoreError> {
    let mut out = String::from(
        "iteration,candidate_model,baseline_model,wins,losses,refusals,parse_failures,judged,win_rate,sem\n",
    );
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.candidate_model,
            r.baseline_model,
            r.wins,
            r.losses,
            r.refusals,
            r.parse_failures,
            r.judged,
            r.win_rate,
            r.sem
        )
        .expect("string write");
    }
    write_text(path, &out)
}

fn write_text(path: &Path, content: &str) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|source| StoreError::Io { path: parent.display().to_string(), source })?;
    }
    std::fs::write(path, content).map_err(|source| StoreError::Io { path: path.display().to_string(), source })
}

/// Renders the run's headline numbers as a fixed-width table.
pub fn render_summary_table(summaries: &[LogprobSummary], reports: &[WinRateReport]) -> String {
    let mut out = String::new();
    out.push_str("gold log-probability by condition (mean over test pairs +/- SEM)\n");
    out.push_str("  iter  condition          n      mean      sem\n");
    for s in summaries {
        writeln!(out, "  {:>4}  {:<17} {:>3}  {:>8.3}  {:>7.3}", s.iteration, s.condition.as_str(), s.n, s.mean, s.sem)
            .expect("string write");
    }
    if !reports.is_empty() {
        out.push_str("\njudged win rate vs baseline\n");
        out.push_str("  iter  wins  losses  refus  parse  judged  win_rate    sem\n");
        for r in reports {
            writeln!(
                out,
                "  {:>4}  {:>4}  {:>6}  {:>5}  {:>5}  {:>6}  {:>8.3}  {:>5.3}",
                r.iteration, r.wins, r.losses, r.refusals, r.parse_failures, r.judged, r.win_rate, r.sem
            )
            .expect("string write");
        }
    }
    out
}

//! Accuracy and iteration statistics over a question set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reasoner::{AnswerLoop, AnswerTrace, IterationOutcome, MemoryBank, RoundTimings};
use crate::types::Question;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStat {
    pub round: u32,
    /// Questions whose loop ended in this round.
    pub count: usize,
    pub share: f64,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    /// `correct / total`; unparseable and failed questions count as incorrect.
    pub accuracy: f64,
    /// Loops that ended without an extractable answer.
    pub unparseable: usize,
    /// Questions aborted by a backend or pipeline error. Not part of `rounds`.
    pub failures: usize,
    pub rounds: Vec<RoundStat>,
    pub mean_retrieval_calls: f64,
}

/// Outcome of one question, successful or not.
#[derive(Clone, Debug)]
pub struct QuestionResult {
    pub trace: AnswerTrace,
    pub failed: bool,
}

fn failed_trace(q: &Question, err: &Error) -> AnswerTrace {
    let partial = match err {
        Error::Pipeline { partial: Some(v), .. } => serde_json::from_value::<AnswerTrace>(v.clone()).ok(),
        _ => None,
    };
    let mut t = partial.unwrap_or_else(|| AnswerTrace {
        question_id: q.question_id.clone(),
        final_label: None,
        gold_label: q.gold_label.clone(),
        correct: false,
        rounds_used: 0,
        retrieval_calls: 0,
        rounds: Vec::new(),
        memory: MemoryBank::new(),
        error: None,
        timings: Vec::new(),
    });
    t.correct = false;
    t.final_label = None;
    t.error = Some(err.to_string());
    t
}

/// Runs every question on at most `workers` threads; results are sorted by question_id.
pub fn run_questions(lp: &AnswerLoop<'_>, questions: &[Question], workers: usize) -> Result<Vec<QuestionResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let mut out: Vec<QuestionResult> = pool.install(|| {
        questions
            .par_iter()
            .map(|q| match lp.run(q) {
                Ok(trace) => QuestionResult { trace, failed: false },
                Err(e) => {
                    log::warn!("question {} failed: {e}", q.question_id);
                    QuestionResult {
                        trace: failed_trace(q, &e),
                        failed: true,
                    }
                }
            })
            .collect()
    });
    out.sort_by(|a, b| a.trace.question_id.cmp(&b.trace.question_id));
    Ok(out)
}

pub fn summarize(results: &[QuestionResult], max_iterations: u32) -> EvalReport {
    let total = results.len();
    let mut rounds: Vec<RoundStat> = (1..=max_iterations)
        .map(|r| RoundStat {
            round: r,
            ..Default::default()
        })
        .collect();
    let mut report = EvalReport {
        total,
        ..Default::default()
    };
    let mut calls = 0u64;
    for r in results {
        calls += r.trace.retrieval_calls as u64;
        if r.failed {
            report.failures += 1;
            continue;
        }
        if r.trace.correct {
            report.correct += 1;
        }
        if matches!(
            r.trace.rounds.last().map(|t| &t.outcome),
            Some(IterationOutcome::Unparseable { .. }) | Some(IterationOutcome::Refine { .. })
        ) {
            report.unparseable += 1;
        }
        if let Some(stat) = rounds.get_mut(r.trace.rounds_used.saturating_sub(1) as usize) {
            stat.count += 1;
            if r.trace.correct {
                stat.correct += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let answered = total - report.failures;
    for s in &mut rounds {
        s.share = ratio(s.count, answered);
        s.accuracy = ratio(s.correct, s.count);
    }
    report.accuracy = ratio(report.correct, total);
    report.rounds = rounds;
    report.mean_retrieval_calls = if total == 0 { 0.0 } else { calls as f64 / total as f64 };
    report
}

/// Human-readable report.
pub fn format_report(r: &EvalReport) -> String {
    let mut s = format!(
        "questions: {}\ncorrect: {}\naccuracy: {:.1}%\nunparseable: {}\nbackend failures: {}\nmean retrieval calls: {:.2}\n",
        r.total,
        r.correct,
        100.0 * r.accuracy,
        r.unparseable,
        r.failures,
        r.mean_retrieval_calls
    );
    s.push_str("iteration distribution:");
    for (i, st) in r.rounds.iter().enumerate() {
        let sep = if i == 0 { " " } else { ", " };
        s.push_str(&format!("{sep}R{} {:.1}%", st.round, 100.0 * st.share));
    }
    s.push('\n');
    s.push_str("round  count  share    accuracy\n");
    for st in &r.rounds {
        s.push_str(&format!(
            "R{:<5} {:>5}  {:>6.1}%  {:>7.1}%\n",
            st.round,
            st.count,
            100.0 * st.share,
            100.0 * st.accuracy
        ));
    }
    s
}

/// Traces as JSON-lines (timings are not serialized).
pub fn traces_jsonl(results: &[QuestionResult]) -> Result<String> {
    let traces: Vec<&AnswerTrace> = results.iter().map(|r| &r.trace).collect();
    crate::store::to_jsonl(&traces)
}

/// Per-round timing rows, kept apart from the deterministic trace log.
#[derive(Clone, Debug, Serialize)]
pub struct TimingRow<'a> {
    pub question_id: &'a str,
    pub round: usize,
    #[serde(flatten)]
    pub timings: &'a RoundTimings,
}

pub fn timings_jsonl(results: &[QuestionResult]) -> Result<String> {
    let rows: Vec<TimingRow> = results
        .iter()
        .flat_map(|r| {
            r.trace.timings.iter().enumerate().map(|(i, t)| TimingRow {
                question_id: &r.trace.question_id,
                round: i + 1,
                timings: t,
            })
        })
        .collect();
    crate::store::to_jsonl(&rows)
}

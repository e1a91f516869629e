//! Iterative reasoning loop with a round-stamped memory bank.
//!
//! Each round shows the reasoner the question, its options, the memory bank,
//! the top summaries and page images of the current retrieval. The reply is
//! either an answer, a refined query with notes (which triggers a fresh
//! Stage-1 + Stage-2 retrieval), or unparseable. The loop stops at an answer
//! or at `max_iterations`; the last round's prompt carries a directive that an
//! answer must be given.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::coarse::Stage1Timings;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::filter::FilterStats;
use crate::gateway::{ModelBackend, PromptRequest, RoleMessage};
use crate::kmeans::{fnv1a, splitmix64};
use crate::types::{normalize, Matrix, Question, QueryTokens};

/// Reasoner prompt. Placeholders: `{question}`, `{options}`, `{memory_section}`,
/// `{summaries}`, `{iteration}`, `{max_iterations}`, `{force_msg}`.
pub const REASONER_PROMPT_TEMPLATE: &str = "You are a medical QA expert. Answer the multiple-choice question based on the provided document pages. Question: {question}. Options: {options}. {memory_section}. Retrieved page summaries: {summaries}. (The actual page images are also provided for your reference.) Instructions: If you have enough information to answer, output your answer inside <answer> tags with a brief justification. If you need more information, output a refined search query inside <query_update> tags and summarize your current findings inside <notes> tags. This is iteration {iteration}/{max_iterations}. {force_msg}.";

/// Appended on the final iteration.
pub const FORCE_DIRECTIVE: &str =
    "This is the final iteration: you MUST output your final answer inside <answer> tags now, even if the evidence is incomplete";

pub const EMPTY_MEMORY: &str = "Memory bank: (no prior findings)";

/// Answer extraction pattern, applied to the first match.
pub const ANSWER_PATTERN: &str = r"<answer>\s*([A-Da-d]|yes|no|maybe)\b";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: u32,
    pub notes: String,
}

/// Per-question state carried across rounds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub iteration: u32,
    pub key_findings: Vec<String>,
    pub reasoning_history: Vec<HistoryEntry>,
}

impl Default for MemoryBank {
    fn default() -> Self {
        Self {
            iteration: 1,
            key_findings: Vec::new(),
            reasoning_history: Vec::new(),
        }
    }
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.key_findings.is_empty() && self.reasoning_history.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("memory serializes")
    }

    /// Checks the prefix rule and the history shape.
    pub fn validate(&self, max_iterations: u32) -> Result<()> {
        static PREFIX: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
        let prefix = PREFIX.get_or_init(|| Regex::new(r"^\[Round (\d+)\] ").unwrap());
        if self.iteration == 0 || self.iteration > max_iterations {
            return Err(Error::InvalidInput(format!(
                "memory iteration {} outside 1..={max_iterations}",
                self.iteration
            )));
        }
        for f in &self.key_findings {
            let k: u32 = prefix
                .captures(f)
                .and_then(|c| c[1].parse().ok())
                .ok_or_else(|| Error::InvalidInput(format!("finding lacks round prefix: {f}")))?;
            if k == 0 || k > self.iteration {
                return Err(Error::InvalidInput(format!("finding from future round: {f}")));
            }
        }
        if self
            .reasoning_history
            .windows(2)
            .any(|w| w[0].iteration >= w[1].iteration)
        {
            return Err(Error::InvalidInput("reasoning history not strictly increasing".into()));
        }
        Ok(())
    }
}

/// Appends a round's notes: each non-empty line becomes a `[Round k] ` finding.
pub fn update_memory(bank: &MemoryBank, round: u32, notes: &str) -> Result<MemoryBank> {
    if round != bank.iteration {
        return Err(Error::RoundMismatch {
            expected: bank.iteration,
            got: round,
        });
    }
    let mut next = bank.clone();
    next.key_findings.extend(
        notes
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| format!("[Round {round}] {l}")),
    );
    next.reasoning_history.push(HistoryEntry {
        iteration: round,
        notes: notes.to_string(),
    });
    next.iteration += 1;
    Ok(next)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IterationOutcome {
    Answer { label: String, justification: String },
    Refine { query: String, notes: String },
    Unparseable { raw: String },
}

fn answer_regex() -> &'static Regex {
    static R: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    R.get_or_init(|| Regex::new(ANSWER_PATTERN).unwrap())
}

fn normalize_label(raw: &str) -> String {
    if raw.len() == 1 {
        raw.to_ascii_uppercase()
    } else {
        raw.to_string()
    }
}

/// Applies the answer pattern; letters come back uppercase.
pub fn extract_answer(text: &str) -> Option<String> {
    answer_regex()
        .captures(text)
        .map(|c| normalize_label(&c[1]))
}

fn span<'t>(text: &'t str, tag: &str) -> Option<&'t str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = text[start..].find(&close).map_or(text.len(), |e| start + e);
    Some(text[start..end].trim())
}

/// Classifies a reasoner reply. An answer wins over a query update.
pub fn parse_outcome(response: &str) -> IterationOutcome {
    if let Some(c) = answer_regex().captures(response) {
        let m = c.get(0).expect("whole match");
        let rest = response[m.end()..].trim_start();
        let rest = rest.strip_prefix("</answer>").unwrap_or(rest).trim();
        return IterationOutcome::Answer {
            label: normalize_label(&c[1]),
            justification: rest.to_string(),
        };
    }
    if let Some(q) = span(response, "query_update").filter(|q| !q.is_empty()) {
        return IterationOutcome::Refine {
            query: q.to_string(),
            notes: span(response, "notes").unwrap_or("").to_string(),
        };
    }
    IterationOutcome::Unparseable {
        raw: response.to_string(),
    }
}

/// A page shown to the reasoner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedPage {
    pub page_id: String,
    pub summary: String,
    pub image_ref: String,
}

/// Fills the reasoner template for one round.
#[allow(clippy::too_many_arguments)]
pub fn render_reasoner_prompt(
    template: &str,
    question: &Question,
    memory: &MemoryBank,
    pages: &[RetrievedPage],
    iteration: u32,
    cfg: &PipelineConfig,
    accepts_images: bool,
) -> PromptRequest {
    let options = question
        .options
        .iter()
        .map(|(k, v)| format!("{k}) {v}"))
        .collect::<Vec<_>>()
        .join("; ");
    let memory_section = if memory.is_empty() {
        EMPTY_MEMORY.to_string()
    } else {
        format!("Memory bank: {}", memory.to_json())
    };
    let mut summaries = String::from("\n");
    for (i, p) in pages.iter().take(cfg.summaries_per_round).enumerate() {
        let s = p.summary.split_whitespace().collect::<Vec<_>>().join(" ");
        summaries.push_str(&format!("[{}] {}\n", i + 1, if s.is_empty() { "(no summary)" } else { &s }));
    }
    let force = if iteration >= cfg.max_iterations {
        FORCE_DIRECTIVE
    } else {
        ""
    };
    let mut text = template
        .replace("{question}", question.stem.trim())
        .replace("{options}", &options)
        .replace("{memory_section}", &memory_section)
        .replace("{summaries}", &summaries)
        .replace("{iteration}", &iteration.to_string())
        .replace("{max_iterations}", &cfg.max_iterations.to_string());
    text = if force.is_empty() {
        text.replace(" {force_msg}.", "").replace("{force_msg}", "")
    } else {
        text.replace("{force_msg}", force)
    };
    let images = if accepts_images {
        pages
            .iter()
            .take(cfg.images_per_round)
            .map(|p| p.image_ref.clone())
            .collect()
    } else {
        Vec::new()
    };
    PromptRequest {
        messages: vec![RoleMessage {
            role: "user".into(),
            text,
            images,
        }],
        temperature: cfg.reasoner_temperature,
        max_new_tokens: cfg.reasoner_max_new_tokens,
        model_tag: cfg.reasoner_model.clone(),
    }
}

/// Maps query text to token vectors.
pub trait QueryEncoder: Send + Sync {
    fn encode(&self, text: &str) -> Result<QueryTokens>;
}

/// Deterministic synthetic encoder: one token per distinct lowercase word,
/// each a seeded Gaussian direction derived from the word.
#[derive(Clone, Debug)]
pub struct HashEncoder {
    pub dim: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

impl HashEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            max_tokens: 32,
            seed,
        }
    }

    fn word_vector(&self, word: &str) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ fnv1a(word.as_bytes())));
        let mut v: Vec<f32> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut v);
        v
    }
}

impl QueryEncoder for HashEncoder {
    fn encode(&self, text: &str) -> Result<QueryTokens> {
        let mut words: Vec<String> = Vec::new();
        for w in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
        {
            if !words.contains(&w) {
                words.push(w);
            }
            if words.len() == self.max_tokens {
                break;
            }
        }
        if words.is_empty() {
            words.push(text.to_string());
        }
        let rows: Vec<Vec<f32>> = words.iter().map(|w| self.word_vector(w)).collect();
        QueryTokens::new(Matrix::from_rows(&rows)?)
    }
}

/// Exact-text lookup of precomputed embeddings, with an optional fallback.
pub struct LookupEncoder {
    table: HashMap<String, QueryTokens>,
    fallback: Option<Box<dyn QueryEncoder>>,
}

impl LookupEncoder {
    pub fn new(table: HashMap<String, QueryTokens>) -> Self {
        Self {
            table,
            fallback: None,
        }
    }

    pub fn with_fallback(mut self, f: Box<dyn QueryEncoder>) -> Self {
        self.fallback = Some(f);
        self
    }
}

impl QueryEncoder for LookupEncoder {
    fn encode(&self, text: &str) -> Result<QueryTokens> {
        if let Some(q) = self.table.get(text) {
            return Ok(q.clone());
        }
        match &self.fallback {
            Some(f) => f.encode(text),
            None => Err(Error::InvalidInput(format!("no embedding for query text: {text}"))),
        }
    }
}

/// Output of one Stage-1 + Stage-2 retrieval.
#[derive(Clone, Debug, Default)]
pub struct Retrieval {
    /// Filtered pages in final rank order.
    pub pages: Vec<RetrievedPage>,
    pub stage1_timings: Stage1Timings,
    pub filter_stats: FilterStats,
}

/// A Stage-1 + Stage-2 retrieval handle.
pub trait RetrievalPipeline: Sync {
    fn retrieve(&self, question: &Question, query: &QueryTokens) -> Result<Retrieval>;
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTimings {
    pub stage1: Stage1Timings,
    pub filter_ms: f64,
    pub reasoner_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: u32,
    /// Text of the query whose retrieval this round saw.
    pub query: String,
    /// Whether this round ran a fresh retrieval.
    pub retrieved: bool,
    pub image_pages: Vec<String>,
    pub summary_pages: Vec<String>,
    pub forced: bool,
    pub prompt_digest: String,
    pub outcome: IterationOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerTrace {
    pub question_id: String,
    pub final_label: Option<String>,
    pub gold_label: Option<String>,
    pub correct: bool,
    pub rounds_used: u32,
    pub retrieval_calls: u32,
    pub rounds: Vec<RoundTrace>,
    pub memory: MemoryBank,
    /// Set when the loop aborted on a retrieval or backend error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Wall-clock data; kept out of the serialized trace so traces stay reproducible.
    #[serde(skip)]
    pub timings: Vec<RoundTimings>,
}

/// Runs the reasoning loop for one question.
pub struct AnswerLoop<'a> {
    pub retrieval: &'a dyn RetrievalPipeline,
    pub reasoner: &'a dyn ModelBackend,
    pub encoder: &'a dyn QueryEncoder,
    pub cfg: &'a PipelineConfig,
    pub template: &'a str,
}

impl<'a> AnswerLoop<'a> {
    pub fn new(
        retrieval: &'a dyn RetrievalPipeline,
        reasoner: &'a dyn ModelBackend,
        encoder: &'a dyn QueryEncoder,
        cfg: &'a PipelineConfig,
    ) -> Self {
        Self {
            retrieval,
            reasoner,
            encoder,
            cfg,
            template: REASONER_PROMPT_TEMPLATE,
        }
    }

    /// Runs to completion. On error the partial trace is returned inside
    /// [`Error::Pipeline`].
    pub fn run(&self, question: &Question) -> Result<AnswerTrace> {
        let mut trace = AnswerTrace {
            question_id: question.question_id.clone(),
            final_label: None,
            gold_label: question.gold_label.clone(),
            correct: false,
            rounds_used: 0,
            retrieval_calls: 0,
            rounds: Vec::new(),
            memory: MemoryBank::new(),
            error: None,
            timings: Vec::new(),
        };
        match self.drive(question, &mut trace) {
            Ok(()) => Ok(trace),
            Err(e) => {
                trace.error = Some(e.to_string());
                Err(Error::Pipeline {
                    message: format!("question {}: {e}", question.question_id),
                    partial: Some(serde_json::to_value(&trace)?),
                })
            }
        }
    }

    fn retrieve(&self, question: &Question, text: &str, trace: &mut AnswerTrace) -> Result<Retrieval> {
        let q = self.encoder.encode(text)?;
        trace.retrieval_calls += 1;
        self.retrieval.retrieve(question, &q)
    }

    fn drive(&self, question: &Question, trace: &mut AnswerTrace) -> Result<()> {
        let max = self.cfg.max_iterations;
        let mut query_text = question.stem.clone();
        let mut retrieval = self.retrieve(question, &query_text, trace)?;
        let mut fresh = true;

        for round in 1..=max {
            let request = render_reasoner_prompt(
                self.template,
                question,
                &trace.memory,
                &retrieval.pages,
                round,
                self.cfg,
                self.reasoner.accepts_images(),
            );
            let forced = round == max;
            let start = Instant::now();
            let response = self.reasoner.complete(&request)?;
            let reasoner_ms = start.elapsed().as_secs_f64() * 1e3;
            let outcome = parse_outcome(&response);

            trace.rounds_used = round;
            trace.timings.push(RoundTimings {
                stage1: if fresh { retrieval.stage1_timings } else { Stage1Timings::default() },
                filter_ms: if fresh { retrieval.filter_stats.elapsed_ms } else { 0.0 },
                reasoner_ms,
            });
            trace.rounds.push(RoundTrace {
                round,
                query: query_text.clone(),
                retrieved: fresh,
                image_pages: retrieval
                    .pages
                    .iter()
                    .take(self.cfg.images_per_round)
                    .map(|p| p.page_id.clone())
                    .collect(),
                summary_pages: retrieval
                    .pages
                    .iter()
                    .take(self.cfg.summaries_per_round)
                    .map(|p| p.page_id.clone())
                    .collect(),
                forced,
                prompt_digest: request.digest(),
                outcome: outcome.clone(),
            });

            match outcome {
                IterationOutcome::Answer { label, .. } => {
                    trace.correct = trace.gold_label.as_deref() == Some(label.as_str());
                    trace.final_label = Some(label);
                    return Ok(());
                }
                _ if round == max => return Ok(()),
                IterationOutcome::Refine { query, notes } => {
                    trace.memory = update_memory(&trace.memory, round, &notes)?;
                    query_text = query;
                    retrieval = self.retrieve(question, &query_text, trace)?;
                    fresh = true;
                }
                IterationOutcome::Unparseable { .. } => {
                    trace.memory = update_memory(&trace.memory, round, "")?;
                    fresh = false;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexMap;

    #[test]
    fn answer_extraction_examples() {
        assert_eq!(extract_answer("<answer>B</answer> because…").as_deref(), Some("B"));
        assert_eq!(extract_answer("The answer is B"), None);
        assert_eq!(
            extract_answer("<answer> maybe — evidence weak").as_deref(),
            Some("maybe")
        );
        assert_eq!(extract_answer("<answer>c</answer>").as_deref(), Some("C"));
        assert_eq!(extract_answer("<answer>Bx</answer>"), None);
        assert_eq!(extract_answer("<answer>A</answer><answer>B</answer>").as_deref(), Some("A"));
    }

    #[test]
    fn outcome_precedence_and_refine() {
        let r = parse_outcome(
            "<query_update>retinal toxicity screening</query_update><notes>dosing covered; toxicity missing</notes>",
        );
        assert_eq!(
            r,
            IterationOutcome::Refine {
                query: "retinal toxicity screening".into(),
                notes: "dosing covered; toxicity missing".into()
            }
        );
        assert!(matches!(
            parse_outcome("<answer>A</answer><query_update>x</query_update>"),
            IterationOutcome::Answer { ref label, .. } if label == "A"
        ));
        assert!(matches!(parse_outcome(""), IterationOutcome::Unparseable { .. }));
        assert!(matches!(
            parse_outcome("<query_update>  </query_update>"),
            IterationOutcome::Unparseable { .. }
        ));
    }

    #[test]
    fn justification_follows_the_tag() {
        match parse_outcome("<answer>D</answer> retinal toxicity") {
            IterationOutcome::Answer { justification, .. } => {
                assert_eq!(justification, "retinal toxicity")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn memory_update_rules() {
        let bank = MemoryBank::new();
        let b1 = update_memory(&bank, 1, "").unwrap();
        assert!(b1.key_findings.is_empty());
        assert_eq!(b1.reasoning_history, vec![HistoryEntry { iteration: 1, notes: String::new() }]);
        let b2 = update_memory(&b1, 2, "A\n\nB").unwrap();
        assert_eq!(b2.key_findings, vec!["[Round 2] A", "[Round 2] B"]);
        assert!(matches!(update_memory(&b2, 2, "x"), Err(Error::RoundMismatch { .. })));
        let b3 = update_memory(&b2, 3, "C").unwrap();
        assert_eq!(b3.reasoning_history.len(), 3);
        assert!(b3.reasoning_history.windows(2).all(|w| w[0].iteration < w[1].iteration));
        assert_eq!(&b3.key_findings[..2], &b2.key_findings[..]);
    }

    #[test]
    fn memory_json_field_names() {
        let b = update_memory(&MemoryBank::new(), 1, "fact").unwrap();
        let v: serde_json::Value = serde_json::from_str(&b.to_json()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, vec!["iteration", "key_findings", "reasoning_history"]);
        assert_eq!(v["reasoning_history"][0]["iteration"], 1);
        assert_eq!(v["key_findings"][0], "[Round 1] fact");
    }

    fn question() -> Question {
        Question {
            question_id: "q1".into(),
            stem: "Which side effect [q1]?".into(),
            options: IndexMap::from([("A".into(), "Rash".into()), ("B".into(), "Retinal toxicity".into())]),
            gold_label: Some("B".into()),
        }
    }

    fn pages(n: usize) -> Vec<RetrievedPage> {
        (0..n)
            .map(|i| RetrievedPage {
                page_id: format!("p{i:03}"),
                summary: format!("summary {i}"),
                image_ref: format!("img/{i}.png"),
            })
            .collect()
    }

    #[test]
    fn final_iteration_carries_force_directive() {
        let cfg = PipelineConfig::default();
        let r = render_reasoner_prompt(REASONER_PROMPT_TEMPLATE, &question(), &MemoryBank::new(), &pages(5), 3, &cfg, false);
        let t = r.text();
        assert!(t.contains("iteration 3/3"));
        assert!(t.contains(FORCE_DIRECTIVE));
        let r1 = render_reasoner_prompt(REASONER_PROMPT_TEMPLATE, &question(), &MemoryBank::new(), &pages(5), 1, &cfg, false);
        let t1 = r1.text();
        assert!(t1.contains(EMPTY_MEMORY));
        assert!(!t1.contains("MUST"));
        assert!(t1.ends_with("This is iteration 1/3."), "{t1}");
        assert_eq!(r1.temperature, 0.1);
        assert_eq!(r1.max_new_tokens, 2048);
    }

    #[test]
    fn top_ten_images_and_twenty_summaries() {
        let cfg = PipelineConfig::default();
        let r = render_reasoner_prompt(REASONER_PROMPT_TEMPLATE, &question(), &MemoryBank::new(), &pages(100), 1, &cfg, true);
        let imgs = &r.messages[0].images;
        assert_eq!(imgs.len(), 10);
        assert_eq!(imgs[0], "img/0.png");
        assert_eq!(imgs[9], "img/9.png");
        let t = r.text();
        assert!(t.contains("[20] summary 19"));
        assert!(!t.contains("[21]"));
        let no_img = render_reasoner_prompt(REASONER_PROMPT_TEMPLATE, &question(), &MemoryBank::new(), &pages(100), 1, &cfg, false);
        assert!(no_img.messages[0].images.is_empty());
    }

    #[test]
    fn hash_encoder_is_deterministic_and_unit() {
        let e = HashEncoder::new(16, 42);
        let a = e.encode("retinal toxicity screening").unwrap();
        let b = e.encode("Retinal, toxicity screening!").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.m(), 3);
        assert!(e.encode("").is_ok());
    }

    #[test]
    fn lookup_encoder_falls_back() {
        let h = HashEncoder::new(8, 1);
        let known = h.encode("other").unwrap();
        let enc = LookupEncoder::new(HashMap::from([("x".to_string(), known.clone())]));
        assert_eq!(enc.encode("x").unwrap(), known);
        assert!(enc.encode("y").is_err());
        let enc = enc.with_fallback(Box::new(h.clone()));
        assert_eq!(enc.encode("y").unwrap(), h.encode("y").unwrap());
    }
}

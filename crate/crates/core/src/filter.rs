//! Stage-2 MapReduce relevance filter over page summaries.
//!
//! Stage-1 candidates are dealt into shards of at most `B` summaries. Each
//! map call asks the ranker for the `map_target_k` most relevant pages of its
//! shard; the survivors are pooled in (shard, map rank) order and a single
//! reduce call picks the final `N2`.
//!
//! Shards are interleaved by Stage-1 rank (candidate `i` goes to shard
//! `i mod num_shards`) so every shard sees a comparable slice of the ranking.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::gateway::{ModelBackend, PromptRequest};
use crate::types::Question;

/// Default filter prompt. Placeholders: `{target_k}`, `{question}`, `{summaries}`.
pub const FILTER_PROMPT_TEMPLATE: &str = "You are a medical document retrieval expert. Given a medical question and candidate page summaries, select the {target_k} most relevant pages. Question: {question}. Candidate page summaries: {summaries}. Select the {target_k} most relevant pages by listing their numbers in order of relevance (most relevant first). Output ONLY the page numbers inside <selected_pages> tags.";

pub const EMPTY_SUMMARY: &str = "(no summary)";

/// A Stage-1 candidate entering the filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterCandidate {
    /// 1-based Stage-1 rank.
    pub rank: usize,
    pub page_id: String,
    pub summary: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    pub shard_index: usize,
    pub members: Vec<FilterCandidate>,
}

/// How a page reached the final set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub page_id: String,
    pub stage1_rank: usize,
    pub shard_index: usize,
    /// 1-based position in the shard's map output.
    pub map_rank: usize,
    /// 1-based position in the reduce output.
    pub reduce_rank: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub map_calls: usize,
    pub reduce_calls: usize,
    pub shard_sizes: Vec<usize>,
    pub survivors_per_shard: Vec<usize>,
    pub map_fallbacks: Vec<usize>,
    pub reduce_fallback: bool,
    #[serde(skip)]
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilteredSet {
    pub pages: Vec<String>,
    pub provenance: Vec<Provenance>,
    pub stats: FilterStats,
}

/// Splits candidates into `ceil(len / b)` shards, interleaved or contiguous by rank.
pub fn shard_candidates(candidates: &[FilterCandidate], b: usize, interleaved: bool) -> Vec<Shard> {
    if candidates.is_empty() || b == 0 {
        return Vec::new();
    }
    let num = candidates.len().div_ceil(b);
    let mut shards: Vec<Shard> = (0..num)
        .map(|i| Shard {
            shard_index: i,
            members: Vec::new(),
        })
        .collect();
    for (i, c) in candidates.iter().enumerate() {
        let s = if interleaved { i % num } else { i / b };
        shards[s].members.push(c.clone());
    }
    shards
}

fn clean_summary(s: &str) -> String {
    let flat = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.is_empty() {
        EMPTY_SUMMARY.to_string()
    } else {
        flat
    }
}

/// Instantiates the filter template for a pool of candidates, numbered from 1.
pub fn render_filter_prompt(
    template: &str,
    question: &Question,
    pool: &[FilterCandidate],
    target_k: usize,
) -> String {
    let mut summaries = String::from("\n");
    for (i, c) in pool.iter().enumerate() {
        summaries.push_str(&format!("[{}] {}\n", i + 1, clean_summary(&c.summary)));
    }
    template
        .replace("{target_k}", &target_k.to_string())
        .replace("{question}", question.stem.trim())
        .replace("{summaries}", &summaries)
}

/// Extracts 1-based pool indices from the first `<selected_pages>` span.
///
/// Out-of-range values and repeats are dropped; the list is cut at `target_k`.
pub fn parse_selected_pages(response: &str, pool_size: usize, target_k: usize) -> Result<Vec<usize>> {
    static SPAN: std::sync::OnceLock<(Regex, Regex)> = std::sync::OnceLock::new();
    let (span, num) = SPAN.get_or_init(|| {
        (
            Regex::new(r"(?s)<selected_pages>(.*?)</selected_pages>").unwrap(),
            Regex::new(r"\d+").unwrap(),
        )
    });
    let inner = span
        .captures(response)
        .ok_or_else(|| Error::ParseFailure("no <selected_pages> span".into()))?;
    let mut out = Vec::new();
    for m in num.find_iter(&inner[1]) {
        let Ok(v) = m.as_str().parse::<usize>() else {
            continue;
        };
        if v == 0 || v > pool_size || out.contains(&v) {
            continue;
        }
        out.push(v);
        if out.len() == target_k {
            break;
        }
    }
    if out.is_empty() {
        return Err(Error::ParseFailure("no valid page numbers".into()));
    }
    Ok(out)
}

/// Runs the map and reduce phases.
pub struct Stage2Filter<'a> {
    pub ranker: &'a dyn ModelBackend,
    pub cfg: &'a PipelineConfig,
    pub template: &'a str,
}

struct MapOutput {
    survivors: Vec<(usize, FilterCandidate)>,
    fallback: bool,
}

impl<'a> Stage2Filter<'a> {
    pub fn new(ranker: &'a dyn ModelBackend, cfg: &'a PipelineConfig) -> Self {
        Self {
            ranker,
            cfg,
            template: FILTER_PROMPT_TEMPLATE,
        }
    }

    fn request(&self, prompt: String) -> PromptRequest {
        PromptRequest::user(
            prompt,
            self.cfg.filter_temperature,
            self.cfg.filter_max_new_tokens,
            &self.cfg.filter_model,
        )
    }

    fn run_map(&self, question: &Question, shard: &Shard) -> Result<MapOutput> {
        let target = self.cfg.map_target_k.min(shard.members.len());
        let prompt = render_filter_prompt(self.template, question, &shard.members, target);
        let response = self.ranker.complete(&self.request(prompt))?;
        Ok(match parse_selected_pages(&response, shard.members.len(), target) {
            Ok(sel) => MapOutput {
                survivors: sel
                    .into_iter()
                    .enumerate()
                    .map(|(r, i)| (r + 1, shard.members[i - 1].clone()))
                    .collect(),
                fallback: false,
            },
            Err(e) => {
                log::warn!("map shard {} unparseable ({e}); keeping Stage-1 order", shard.shard_index);
                MapOutput {
                    survivors: shard
                        .members
                        .iter()
                        .take(target)
                        .enumerate()
                        .map(|(r, c)| (r + 1, c.clone()))
                        .collect(),
                    fallback: true,
                }
            }
        })
    }

    /// Filters Stage-1 candidates down to at most `N2` pages.
    pub fn run(&self, question: &Question, candidates: &[FilterCandidate]) -> Result<FilteredSet> {
        if candidates.is_empty() {
            return Err(Error::Empty("stage-1 candidates"));
        }
        let start = Instant::now();
        let shards = shard_candidates(candidates, self.cfg.shard_size, self.cfg.interleaved_sharding);
        let outputs: Vec<Mutex<Option<Result<MapOutput>>>> =
            shards.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.cfg.map_concurrency.min(shards.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= shards.len() {
                        break;
                    }
                    let out = self.run_map(question, &shards[i]);
                    *outputs[i].lock().expect("map slot") = Some(out);
                });
            }
        });

        let mut stats = FilterStats {
            map_calls: shards.len(),
            shard_sizes: shards.iter().map(|s| s.members.len()).collect(),
            ..Default::default()
        };
        // Pool in shard order, independent of completion order.
        let mut pool: Vec<(usize, usize, FilterCandidate)> = Vec::new();
        let mut failure = None;
        for (i, slot) in outputs.into_iter().enumerate() {
            match slot.into_inner().expect("map slot").expect("every shard ran") {
                Ok(out) => {
                    stats.survivors_per_shard.push(out.survivors.len());
                    if out.fallback {
                        stats.map_fallbacks.push(i);
                    }
                    pool.extend(out.survivors.into_iter().map(|(r, c)| (i, r, c)));
                }
                Err(e) => {
                    stats.survivors_per_shard.push(0);
                    failure.get_or_insert((i, e));
                }
            }
        }
        if let Some((i, e)) = failure {
            let partial: Vec<_> = pool
                .iter()
                .map(|(s, r, c)| serde_json::json!({"page_id": c.page_id, "shard_index": s, "map_rank": r}))
                .collect();
            return Err(Error::Pipeline {
                message: format!("map call for shard {i} failed: {e}"),
                partial: Some(serde_json::json!({ "map_survivors": partial, "stats": stats })),
            });
        }

        let pool_candidates: Vec<FilterCandidate> = pool.iter().map(|(_, _, c)| c.clone()).collect();
        let target = self.cfg.stage2_cutoff.min(pool.len());
        let prompt = render_filter_prompt(self.template, question, &pool_candidates, target);
        stats.reduce_calls = 1;
        let response = self.ranker.complete(&self.request(prompt)).map_err(|e| Error::Pipeline {
            message: format!("reduce call failed: {e}"),
            partial: Some(serde_json::json!({ "map_survivors": pool_candidates, "stats": stats })),
        })?;
        let order: Vec<usize> = match parse_selected_pages(&response, pool.len(), target) {
            Ok(sel) => sel.into_iter().map(|i| i - 1).collect(),
            Err(e) => {
                log::warn!("reduce unparseable ({e}); keeping Stage-1 order");
                stats.reduce_fallback = true;
                let mut by_rank: Vec<usize> = (0..pool.len()).collect();
                by_rank.sort_by_key(|i| pool[*i].2.rank);
                by_rank.truncate(target);
                by_rank
            }
        };

        let provenance: Vec<Provenance> = order
            .iter()
            .enumerate()
            .map(|(r, &i)| {
                let (shard_index, map_rank, c) = &pool[i];
                Provenance {
                    page_id: c.page_id.clone(),
                    stage1_rank: c.rank,
                    shard_index: *shard_index,
                    map_rank: *map_rank,
                    reduce_rank: r + 1,
                }
            })
            .collect();
        stats.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(FilteredSet {
            pages: provenance.iter().map(|p| p.page_id.clone()).collect(),
            provenance,
            stats,
        })
    }
}

/// Convenience wrapper with the default template.
pub fn stage2_filter(
    question: &Question,
    candidates: &[FilterCandidate],
    ranker: &dyn ModelBackend,
    cfg: &PipelineConfig,
) -> Result<FilteredSet> {
    Stage2Filter::new(ranker, cfg).run(question, candidates)
}

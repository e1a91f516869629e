//! Property tests for pipeline invariants.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU32, Ordering};

use folio::coarse::{build_centroid_index, stage1_search, Stage1Params};
use folio::eval::{summarize, QuestionResult};
use folio::filter::{shard_candidates, FilterCandidate, Stage2Filter};
use folio::gateway::{KeyRankerBackend, Matcher, ScriptEntry, ScriptedBackend};
use folio::ingest::{dedup_pages, generate_synthetic_corpus, SyntheticCorpus, SyntheticSpec};
use folio::projection::fit_projection;
use folio::reasoner::{
    update_memory, AnswerLoop, HashEncoder, MemoryBank, Retrieval, RetrievalPipeline, RetrievedPage,
};
use folio::scoring::{exact_top_k, two_way_score};
use folio::{Matrix, PageRecord, PipelineConfig, QueryTokens, Question};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_rows(seed: u64, rows: usize, dim: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::new(rows, dim, data).unwrap()
}

fn query(seed: u64, m: usize, dim: usize) -> QueryTokens {
    QueryTokens::from_unnormalized(random_rows(seed, m, dim)).unwrap()
}

fn unit_page(seed: u64, n: usize, dim: usize) -> Matrix {
    query(seed, n, dim).matrix().clone()
}

fn small_corpus(pages: usize, seed: u64) -> SyntheticCorpus {
    generate_synthetic_corpus(
        &SyntheticSpec {
            num_pages: pages,
            patches_per_page: 12,
            dim: 16,
            num_queries: 20,
            tokens_per_query: 6,
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

fn question(id: &str) -> Question {
    Question {
        question_id: id.into(),
        stem: format!("Question [{id}] about dosing?"),
        options: [("A", "a"), ("B", "b"), ("C", "c"), ("D", "d")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
        gold_label: Some("A".into()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn question_and_memory_serde_roundtrip(seed in any::<u64>(), notes in proptest::collection::vec("[a-z\"\u{e9} \n]{0,20}", 0..4)) {
        let q = question(&format!("q{seed}"));
        let back: Question = serde_json::from_str(&serde_json::to_string(&q).unwrap()).unwrap();
        prop_assert_eq!(back, q);
        let mut bank = MemoryBank::new();
        for (i, n) in notes.iter().enumerate() {
            bank = update_memory(&bank, i as u32 + 1, n).unwrap();
        }
        let back: MemoryBank = serde_json::from_str(&bank.to_json()).unwrap();
        prop_assert_eq!(back, bank);
    }

    #[test]
    fn config_toml_roundtrip(n1 in 100usize..3000, b in 1usize..400, iters in 1u32..6, seed in 0..=i64::MAX as u64) {
        let cfg = PipelineConfig { stage1_cutoff: n1, shard_size: b, max_iterations: iters, seed, ..Default::default() };
        prop_assert_eq!(PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        let wide = PipelineConfig { seed: i64::MAX as u64 + 1, ..PipelineConfig::default() };
        prop_assert!(wide.validate().is_err());
    }

    #[test]
    fn projected_rows_are_unit_or_flagged(seed in any::<u64>(), target in 1usize..6, dup in 0usize..4) {
        let mut m = random_rows(seed, 40, 8);
        // Rows equal to the sample mean project to zero.
        let mean: Vec<f32> = (0..8).map(|j| m.iter_rows().map(|r| r[j]).sum::<f32>() / 40.0).collect();
        for i in 0..dup {
            m.row_mut(i).copy_from_slice(&mean);
        }
        let model = fit_projection(&m, target, 40, seed).unwrap();
        let out = model.apply(&m).unwrap();
        prop_assert_eq!(out.vectors.dim(), target);
        let flagged: HashSet<usize> = out.degenerate.iter().copied().collect();
        for (i, row) in out.vectors.iter_rows().enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt();
            if flagged.contains(&i) {
                prop_assert!(row.iter().all(|x| *x == 0.0));
            } else {
                prop_assert!((norm - 1.0).abs() < 1e-4, "row {} norm {}", i, norm);
            }
        }
        let model2 = folio::projection::ProjectionModel::from_bytes(&model.to_bytes()).unwrap();
        prop_assert_eq!(model2, model);
    }

    #[test]
    fn score_invariant_to_duplication_and_order(seed in any::<u64>(), m in 1usize..8, n in 1usize..12, dim in 2usize..10) {
        let q = query(seed, m, dim);
        let page = unit_page(seed ^ 0x5eed, n, dim);
        let base = two_way_score(&q, page.view()).unwrap();
        prop_assert!(base.total.abs() <= 2.0 + 1e-5);

        let doubled: Vec<&[f32]> = page.iter_rows().chain(page.iter_rows()).collect();
        let doubled = Matrix::from_rows(&doubled).unwrap();
        let d = two_way_score(&q, doubled.view()).unwrap();
        prop_assert!((d.total - base.total).abs() < 1e-9);

        let mut reversed: Vec<&[f32]> = page.iter_rows().collect();
        reversed.reverse();
        let r = two_way_score(&q, Matrix::from_rows(&reversed).unwrap().view()).unwrap();
        prop_assert!((r.total - base.total).abs() < 1e-9);

        let qq: Vec<&[f32]> = q.matrix().iter_rows().chain(q.matrix().iter_rows()).collect();
        let qq = QueryTokens::new(Matrix::from_rows(&qq).unwrap()).unwrap();
        prop_assert!((two_way_score(&qq, page.view()).unwrap().total - base.total).abs() < 1e-9);
    }

    #[test]
    fn memory_grows_monotonically(notes in proptest::collection::vec("[a-z \n]{0,30}", 1..5)) {
        let mut bank = MemoryBank::new();
        for (i, text) in notes.iter().enumerate() {
            let round = i as u32 + 1;
            let next = update_memory(&bank, round, text).unwrap();
            prop_assert_eq!(next.iteration, bank.iteration + 1);
            prop_assert!(next.key_findings.starts_with(&bank.key_findings));
            prop_assert!(next.reasoning_history.starts_with(&bank.reasoning_history));
            prop_assert_eq!(next.reasoning_history.len(), bank.reasoning_history.len() + 1);
            let prefix = format!("[Round {round}] ");
            prop_assert!(next.key_findings[bank.key_findings.len()..].iter().all(|f| f.starts_with(&prefix)));
            prop_assert!(next.validate(10).is_ok());
            prop_assert!(update_memory(&next, round, text).is_err());
            bank = next;
        }
    }

    #[test]
    fn shards_partition_candidates(n in 1usize..700, b in 1usize..300, interleaved in any::<bool>()) {
        let cands: Vec<FilterCandidate> = (0..n)
            .map(|i| FilterCandidate { rank: i + 1, page_id: format!("c{i}"), summary: String::new() })
            .collect();
        let shards = shard_candidates(&cands, b, interleaved);
        prop_assert_eq!(shards.len(), n.div_ceil(b));
        let mut seen: Vec<usize> = shards.iter().flat_map(|s| s.members.iter().map(|c| c.rank)).collect();
        prop_assert!(shards.iter().all(|s| !s.members.is_empty() && s.members.len() <= b));
        seen.sort_unstable();
        prop_assert_eq!(seen, (1..=n).collect::<Vec<_>>());
    }
}

fn keyed(n: usize, key: impl Fn(usize) -> f64) -> Vec<FilterCandidate> {
    (0..n)
        .map(|i| FilterCandidate {
            rank: i + 1,
            page_id: format!("c{i:04}"),
            summary: format!("candidate {i}. relevance-key={:.6}", key(i)),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn filter_conserves_and_records(seed in any::<u64>(), n in 1usize..900, b in 20usize..300, k in 1usize..40) {
        let cfg = PipelineConfig { shard_size: b, map_target_k: k, stage1_cutoff: 2000, stage2_cutoff: 50, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let cands = keyed(n, |i| keys[i]);
        let ranker = KeyRankerBackend::new();
        let out = Stage2Filter::new(&ranker, &cfg).run(&question("q0001"), &cands).unwrap();
        let input: HashSet<&str> = cands.iter().map(|c| c.page_id.as_str()).collect();
        let unique: HashSet<&str> = out.pages.iter().map(String::as_str).collect();
        prop_assert_eq!(unique.len(), out.pages.len());
        prop_assert!(unique.is_subset(&input));
        prop_assert!(out.pages.len() <= cfg.stage2_cutoff);
        prop_assert_eq!(out.provenance.len(), out.pages.len());
        prop_assert_eq!(out.stats.shard_sizes.iter().sum::<usize>(), n);
        prop_assert!(out.stats.survivors_per_shard.iter().all(|&s| s <= k));
        prop_assert_eq!(ranker.transcript().len(), out.stats.map_calls + out.stats.reduce_calls);
    }

    #[test]
    fn interleaving_recall_not_below_contiguous(seed in any::<u64>(), spread in 0.0f64..50.0) {
        // Keys follow Stage-1 rank up to a bounded perturbation.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys: Vec<f64> = (0..2000).map(|i| 1.0 - (i as f64 + rng.random_range(-spread..=spread)) / 4000.0).collect();
        let cands = keyed(2000, |i| keys[i]);
        let mut order: Vec<usize> = (0..2000).collect();
        order.sort_by(|a, b| keys[*b].partial_cmp(&keys[*a]).unwrap());
        let truth: HashSet<String> = order[..100].iter().map(|i| format!("c{i:04}")).collect();
        let recall = |interleaved: bool| {
            let cfg = PipelineConfig { interleaved_sharding: interleaved, ..Default::default() };
            let out = Stage2Filter::new(&KeyRankerBackend::new(), &cfg).run(&question("q0002"), &cands).unwrap();
            out.pages.iter().filter(|p| truth.contains(*p)).count()
        };
        let (inter, contig) = (recall(true), recall(false));
        prop_assert!(inter >= contig, "interleaved {} < contiguous {}", inter, contig);
        prop_assert_eq!(inter, 100);
    }

    #[test]
    fn dedup_is_idempotent_and_keeps_first(seed in any::<u64>(), n in 1usize..30, copies in 0usize..6) {
        let mut pages: Vec<PageRecord> = (0..n)
            .map(|i| PageRecord {
                page_id: format!("p{i:03}"),
                article_id: "a".into(),
                patches: unit_page(seed.wrapping_add(i as u64), 4, 6),
                summary: String::new(),
                image_ref: None,
            })
            .collect();
        for c in 0..copies {
            let mut dup = pages[c % n].clone();
            dup.page_id = format!("p{:03}", 900 + c);
            pages.push(dup);
        }
        let (kept, report) = dedup_pages(pages.clone(), 0.97).unwrap();
        prop_assert_eq!(kept.len() + report.dropped.len(), pages.len());
        prop_assert!(report.dropped.iter().all(|d| d.kept_id < d.dropped_id && d.cosine > 0.97));
        let kept_ids: HashSet<&str> = kept.iter().map(|p| p.page_id.as_str()).collect();
        prop_assert!(report.dropped.iter().all(|d| kept_ids.contains(d.kept_id.as_str())));
        for c in 0..copies {
            let id = format!("p{:03}", 900 + c);
            prop_assert!(!kept_ids.contains(id.as_str()));
        }
        let (again, second) = dedup_pages(kept.clone(), 0.97).unwrap();
        prop_assert!(second.dropped.is_empty());
        prop_assert_eq!(again, kept);
    }
}

#[test]
fn top_k_order_agrees_with_pairwise_scores() {
    let c = small_corpus(300, 3);
    for q in c.queries.iter().take(5) {
        let ranked = exact_top_k(&q.tokens, &c.pages, 300).unwrap();
        for w in ranked.windows(2) {
            assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].page_id < w[1].page_id));
        }
        for r in ranked.iter().step_by(37) {
            let page = c.pages.iter().find(|p| p.page_id == r.page_id).unwrap();
            assert_eq!(r.score, two_way_score(&q.tokens, page.patches.view()).unwrap().total);
        }
    }
}

fn overlaps(c: &SyntheticCorpus, pages: &[PageRecord], idx: &folio::coarse::CentroidAnnIndex, n1: usize, r: usize, probe_k: usize) -> Vec<usize> {
    c.queries
        .iter()
        .map(|q| {
            let truth: HashSet<String> = exact_top_k(&q.tokens, pages, n1).unwrap().into_iter().map(|p| p.page_id).collect();
            let got = stage1_search(&q.tokens, pages, idx, Stage1Params { n1, r, probe_k }).unwrap();
            got.ranked.iter().filter(|p| truth.contains(&p.page_id)).count()
        })
        .collect()
}

#[test]
fn overlap_monotone_in_shortlist_size() {
    let c = small_corpus(1200, 9);
    let mut pages = c.pages.clone();
    pages.sort_by(|a, b| a.page_id.cmp(&b.page_id));
    let cfg = PipelineConfig { embed_dim: 16, ..Default::default() };
    let (_, idx) = build_centroid_index(&pages, &cfg).unwrap();
    let n1 = 30;
    let rs = [30, 60, 120, 240, 480, 1200];
    assert!(c.queries.len() >= 20);

    // Exhaustive probing fixes coarse scores, so shortlists nest and each query is monotone.
    let full: Vec<Vec<usize>> = rs.iter().map(|&r| overlaps(&c, &pages, &idx, n1, r, idx.len())).collect();
    for w in full.windows(2) {
        assert!(w[0].iter().zip(&w[1]).all(|(a, b)| a <= b), "{full:?}");
    }
    assert!(full.last().unwrap().iter().all(|&h| h == n1));

    let mean = |r: usize| overlaps(&c, &pages, &idx, n1, r, cfg.probe_k).iter().sum::<usize>();
    let means: Vec<usize> = rs.iter().map(|&r| mean(r)).collect();
    assert!(means.windows(2).all(|w| w[0] <= w[1]), "{means:?}");
}

#[test]
fn fine_counter_matches_shortlist_patches() {
    let c = small_corpus(500, 4);
    let mut pages = c.pages.clone();
    pages.sort_by(|a, b| a.page_id.cmp(&b.page_id));
    let cfg = PipelineConfig { embed_dim: 16, ..Default::default() };
    let (_, idx) = build_centroid_index(&pages, &cfg).unwrap();
    let patches = |id: &str| pages.iter().find(|p| p.page_id == id).unwrap().n_patches();
    let all: usize = pages.iter().map(|p| p.n_patches()).sum();
    for q in &c.queries {
        let m = q.tokens.m();
        // With R = N1 the ranked list is the shortlist.
        for r in [10, 100] {
            let res = stage1_search(&q.tokens, &pages, &idx, Stage1Params { n1: r, r, probe_k: 8 }).unwrap();
            assert_eq!(res.counters.shortlist_len, r);
            let want: usize = res.ranked.iter().map(|p| m * patches(&p.page_id)).sum();
            assert_eq!(res.counters.fine_dot_products, want as u64);
        }
        let res = stage1_search(&q.tokens, &pages, &idx, Stage1Params { n1: 10, r: pages.len(), probe_k: 8 }).unwrap();
        assert_eq!(res.counters.fine_dot_products, (m * all) as u64);
    }
}

struct Fixed {
    calls: AtomicU32,
}

impl RetrievalPipeline for Fixed {
    fn retrieve(&self, _q: &Question, _t: &QueryTokens) -> folio::Result<Retrieval> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(Retrieval {
            pages: (0..8)
                .map(|i| RetrievedPage {
                    page_id: format!("p{n}_{i}"),
                    summary: format!("summary {i}"),
                    image_ref: format!("img/{i}.png"),
                })
                .collect(),
            ..Default::default()
        })
    }
}

const RESPONSES: [&str; 3] = [
    "<answer>A</answer> because",
    "<query_update>narrower</query_update><notes>seen x</notes>",
    "nothing useful",
];

fn scripted(plan: &[usize]) -> ScriptedBackend {
    let entries = plan
        .iter()
        .enumerate()
        .map(|(r, &k)| ScriptEntry {
            matcher: Matcher::Substring(format!("iteration {}/", r + 1)),
            response: RESPONSES[k].into(),
        })
        .collect();
    ScriptedBackend::new(entries, "")
}

fn run(plan: &[usize], cap: u32, qid: &str) -> (folio::reasoner::AnswerTrace, usize) {
    let cfg = PipelineConfig { max_iterations: cap, ..Default::default() };
    let backend = scripted(plan);
    let retrieval = Fixed { calls: AtomicU32::new(0) };
    let enc = HashEncoder::new(8, 1);
    let trace = AnswerLoop::new(&retrieval, &backend, &enc, &cfg).run(&question(qid)).unwrap();
    (trace, backend.transcript().len())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loop_transcript_and_cap_prefix(plan in proptest::collection::vec(0usize..3, 3)) {
        let (t3, sent3) = run(&plan, 3, "q0003");
        prop_assert_eq!(sent3 as u32, t3.rounds_used);
        prop_assert!(t3.rounds_used <= 3);
        let (t2, sent2) = run(&plan, 2, "q0003");
        prop_assert_eq!(sent2 as u32, t2.rounds_used);
        // Rounds before the lower cap's final round see identical inputs and outputs.
        for (a, b) in t2.rounds.iter().zip(&t3.rounds).take(1) {
            prop_assert_eq!(&a.query, &b.query);
            prop_assert_eq!(a.retrieved, b.retrieved);
            prop_assert_eq!(&a.image_pages, &b.image_pages);
            prop_assert_eq!(&a.summary_pages, &b.summary_pages);
            prop_assert_eq!(&a.outcome, &b.outcome);
        }
        if t2.rounds_used == 2 {
            prop_assert_eq!(&t2.rounds[1].query, &t3.rounds[1].query);
            prop_assert_eq!(&t2.rounds[1].image_pages, &t3.rounds[1].image_pages);
        }
        if t3.rounds_used == 1 {
            prop_assert_eq!(&t2.final_label, &t3.final_label);
            prop_assert_eq!(t2.retrieval_calls, t3.retrieval_calls);
            prop_assert_eq!(&t2.memory, &t3.memory);
        }
    }

    #[test]
    fn eval_metrics_are_consistent(plans in proptest::collection::vec((proptest::collection::vec(0usize..3, 3), any::<bool>()), 1..12)) {
        let results: Vec<QuestionResult> = plans
            .iter()
            .enumerate()
            .map(|(i, (plan, failed))| QuestionResult { trace: run(plan, 3, &format!("q{i:04}")).0, failed: *failed })
            .collect();
        let rep = summarize(&results, 3);
        prop_assert_eq!(rep.total, results.len());
        prop_assert_eq!(rep.rounds.iter().map(|r| r.count).sum::<usize>() + rep.failures, rep.total);
        prop_assert_eq!(rep.rounds.iter().map(|r| r.correct).sum::<usize>(), rep.correct);
        prop_assert!((rep.accuracy - rep.correct as f64 / rep.total as f64).abs() < 1e-12);
        prop_assert!(rep.correct + rep.unparseable + rep.failures <= rep.total);
        if rep.failures < rep.total {
            prop_assert!((rep.rounds.iter().map(|r| r.share).sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for (p, r) in plans.iter().zip(&results) {
            let want_rounds = p.0.iter().position(|&k| k == 0).map_or(3, |i| i + 1);
            prop_assert_eq!(r.trace.rounds_used as usize, want_rounds);
        }
    }
}

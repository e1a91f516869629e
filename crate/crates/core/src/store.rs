//! On-disk formats: corpus directories, index directories and JSON-lines files.
//!
//! A corpus directory holds `pages.jsonl` plus `patches.bin`, and optionally
//! `questions.jsonl`, `queries.jsonl` and `ground_truth.jsonl`. An index
//! directory adds `centroids.bin`, `ann.bin`, an optional `projection.bin`,
//! an optional `dedup_report.jsonl`, and a `manifest.json` written last.
//! Binary blobs are f32 little-endian, row-major.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coarse::{build_all_centroids, CentroidAnnIndex, CentroidSet};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::ingest::{dedup_pages, DedupReport, GroundTruth, SyntheticCorpus, SyntheticQuery};
use crate::kmeans::splitmix64;
use crate::projection::{fit_projection, ProjectionModel};
use crate::types::{Matrix, PageRecord, Question};

pub const PAGES_FILE: &str = "pages.jsonl";
pub const PATCHES_FILE: &str = "patches.bin";
pub const CENTROIDS_FILE: &str = "centroids.bin";
pub const ANN_FILE: &str = "ann.bin";
pub const PROJECTION_FILE: &str = "projection.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEDUP_FILE: &str = "dedup_report.jsonl";
pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";

const INDEX_FORMAT: &str = "folio-index";
const INDEX_VERSION: u32 = 1;

/// Reads one JSON value per non-blank line; errors carry `path:line`.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(item)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_file(path, to_jsonl(items)?.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))
}

pub fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32s_at(blob: &[u8], offset: u64, len: u64, what: &str) -> Result<Vec<f32>> {
    let (o, l) = (offset as usize, len as usize);
    if l % 4 != 0 || o.checked_add(l).is_none_or(|end| end > blob.len()) {
        return Err(Error::InvalidInput(format!(
            "{what}: range {o}+{l} outside blob of {} bytes",
            blob.len()
        )));
    }
    Ok(blob[o..o + l]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// One line of `pages.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageMeta {
    pub page_id: String,
    pub article_id: String,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub n_patches: usize,
    pub dim: usize,
    /// Byte range into `patches.bin`.
    pub patch_offset: u64,
    pub patch_len: u64,
    /// Byte range into `centroids.bin` and per-centroid member counts (index dirs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid_offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid_len: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid_weights: Option<Vec<u32>>,
}

fn page_blobs(pages: &[PageRecord], sets: Option<&[CentroidSet]>) -> (Vec<PageMeta>, Vec<u8>, Vec<u8>) {
    let mut metas = Vec::with_capacity(pages.len());
    let mut patches = Vec::new();
    let mut cents = Vec::new();
    for (i, p) in pages.iter().enumerate() {
        let pb = f32_bytes(p.patches.as_slice());
        let mut meta = PageMeta {
            page_id: p.page_id.clone(),
            article_id: p.article_id.clone(),
            summary: p.summary.clone(),
            image_ref: p.image_ref.clone(),
            n_patches: p.n_patches(),
            dim: p.patches.dim(),
            patch_offset: patches.len() as u64,
            patch_len: pb.len() as u64,
            centroid_offset: None,
            centroid_len: None,
            centroid_weights: None,
        };
        patches.extend_from_slice(&pb);
        if let Some(sets) = sets {
            let cb = f32_bytes(sets[i].centroids.as_slice());
            meta.centroid_offset = Some(cents.len() as u64);
            meta.centroid_len = Some(cb.len() as u64);
            meta.centroid_weights = Some(sets[i].weights.clone());
            cents.extend_from_slice(&cb);
        }
        metas.push(meta);
    }
    (metas, patches, cents)
}

fn load_pages(metas: &[PageMeta], patches: &[u8], path: &Path) -> Result<Vec<PageRecord>> {
    metas
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let data = f32s_at(patches, m.patch_offset, m.patch_len, &m.page_id)?;
            let patches = Matrix::new(m.n_patches, m.dim, data).map_err(|e| Error::Format {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok(PageRecord {
                page_id: m.page_id.clone(),
                article_id: m.article_id.clone(),
                patches,
                summary: m.summary.clone(),
                image_ref: m.image_ref.clone(),
            })
        })
        .collect()
}

/// Writes pages (and any optional companions) as a corpus directory.
pub fn write_corpus_dir(
    dir: &Path,
    pages: &[PageRecord],
    questions: &[Question],
    queries: &[SyntheticQuery],
    ground_truth: &[GroundTruth],
) -> Result<()> {
    ensure_dir(dir)?;
    let (metas, patches, _) = page_blobs(pages, None);
    write_file(&dir.join(PATCHES_FILE), &patches)?;
    write_jsonl(&dir.join(PAGES_FILE), &metas)?;
    if !questions.is_empty() {
        write_jsonl(&dir.join(QUESTIONS_FILE), questions)?;
    }
    if !queries.is_empty() {
        write_jsonl(&dir.join(QUERIES_FILE), queries)?;
    }
    if !ground_truth.is_empty() {
        write_jsonl(&dir.join(GROUND_TRUTH_FILE), ground_truth)?;
    }
    Ok(())
}

pub fn write_synthetic(dir: &Path, corpus: &SyntheticCorpus) -> Result<()> {
    write_corpus_dir(dir, &corpus.pages, &corpus.questions, &corpus.queries, &corpus.ground_truth)
}

/// Reads `pages.jsonl` + `patches.bin` from a corpus or index directory.
pub fn read_corpus_pages(dir: &Path) -> Result<Vec<PageRecord>> {
    let pages_path = dir.join(PAGES_FILE);
    let metas: Vec<PageMeta> = read_jsonl(&pages_path)?;
    let blob = read_file(&dir.join(PATCHES_FILE))?;
    load_pages(&metas, &blob, &pages_path)
}

pub fn read_questions(path: &Path) -> Result<Vec<Question>> {
    let qs: Vec<Question> = read_jsonl(path)?;
    for (i, q) in qs.iter().enumerate() {
        q.validate().map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
    }
    Ok(qs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub num_pages: usize,
    pub num_patches: usize,
    pub num_centroids: usize,
    pub dim: usize,
    pub source_dim: usize,
    pub projected: bool,
    /// Patch rows dropped because their projection vanished.
    pub degenerate_patches: usize,
    pub dedup_dropped: usize,
    pub ann_nlist: usize,
    pub config: PipelineConfig,
    pub files: BTreeMap<String, FileEntry>,
}

/// What happened while building an index.
#[derive(Clone, Debug, Default)]
pub struct BuildReport {
    pub dedup: Option<DedupReport>,
    pub degenerate_patches: usize,
}

/// A loaded or freshly built index. `pages[i]` is page `i` of `ann`.
#[derive(Clone, Debug)]
pub struct PageIndex {
    pub config: PipelineConfig,
    pub pages: Vec<PageRecord>,
    pub centroids: Vec<CentroidSet>,
    pub ann: CentroidAnnIndex,
    pub projection: Option<ProjectionModel>,
    pub source_dim: usize,
    pub report: BuildReport,
}

/// Gathers up to `max` patch rows uniformly across the corpus.
fn sample_patches(pages: &[PageRecord], max: usize, seed: u64) -> Result<Matrix> {
    let total: usize = pages.iter().map(PageRecord::n_patches).sum();
    let dim = pages.first().ok_or(Error::Empty("corpus"))?.patches.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5052_4f4a));
    let mut picks = rand::seq::index::sample(&mut rng, total, max.min(total)).into_vec();
    picks.sort_unstable();
    let mut out = Matrix::zeros(0, dim);
    let (mut page, mut base) = (0usize, 0usize);
    for g in picks {
        while g >= base + pages[page].n_patches() {
            base += pages[page].n_patches();
            page += 1;
        }
        out.push_row(pages[page].patches.row(g - base))?;
    }
    Ok(out)
}

impl PageIndex {
    /// Builds an index: optional dedup, PCA when the source dimension exceeds
    /// `embed_dim`, per-page centroids and the ANN lists.
    pub fn build(pages: Vec<PageRecord>, cfg: &PipelineConfig, dedup: bool) -> Result<Self> {
        let cfg = cfg.clone().validate()?;
        let mut pages = pages;
        pages.sort_by(|a, b| a.page_id.cmp(&b.page_id));
        let first = pages.first().ok_or(Error::Empty("corpus"))?;
        let source_dim = first.patches.dim();
        let mut seen = std::collections::HashSet::new();
        for p in &pages {
            if p.patches.dim() != source_dim {
                return Err(Error::DimensionMismatch {
                    expected: source_dim,
                    actual: p.patches.dim(),
                });
            }
            if p.patches.is_empty() {
                return Err(Error::InvalidInput(format!("page {} has no patches", p.page_id)));
            }
            if p.patches.as_slice().iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("page {} has non-finite values", p.page_id)));
            }
            if !seen.insert(p.page_id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate page_id {}", p.page_id)));
            }
        }
        drop(seen);
        if source_dim < cfg.embed_dim {
            return Err(Error::DimensionMismatch {
                expected: cfg.embed_dim,
                actual: source_dim,
            });
        }

        let mut report = BuildReport::default();
        if dedup {
            let (kept, r) = dedup_pages(pages, cfg.dedup_threshold)?;
            pages = kept;
            report.dedup = Some(r);
        }

        let projection = if source_dim > cfg.embed_dim {
            let sample = sample_patches(&pages, cfg.projection_sample, cfg.seed)?;
            let model = fit_projection(&sample, cfg.embed_dim, cfg.projection_sample, cfg.seed)?;
            let projected: Vec<Result<(Matrix, usize)>> = pages
                .par_iter()
                .map(|p| {
                    let out = model.apply(&p.patches)?;
                    if out.degenerate.is_empty() {
                        return Ok((out.vectors, 0));
                    }
                    let mut kept = Matrix::zeros(0, cfg.embed_dim);
                    for (i, row) in out.vectors.iter_rows().enumerate() {
                        if out.degenerate.binary_search(&i).is_err() {
                            kept.push_row(row)?;
                        }
                    }
                    if kept.is_empty() {
                        return Err(Error::Degenerate(format!("every patch of page {} projects to zero", p.page_id)));
                    }
                    Ok((kept, out.degenerate.len()))
                })
                .collect();
            for (p, r) in pages.iter_mut().zip(projected) {
                let (m, d) = r?;
                p.patches = m;
                report.degenerate_patches += d;
            }
            Some(model)
        } else {
            None
        };
        for p in &pages {
            p.validate()?;
        }

        let centroids = build_all_centroids(&pages, &cfg)?;
        let ann = CentroidAnnIndex::build(&centroids, &cfg)?;
        Ok(Self {
            config: cfg,
            pages,
            centroids,
            ann,
            projection,
            source_dim,
            report,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.pages.iter().map(PageRecord::n_patches).sum()
    }

    pub fn num_centroids(&self) -> usize {
        self.ann.len()
    }

    /// Writes every blob, then `manifest.json` with sizes and digests.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        ensure_dir(dir)?;
        let (metas, patches, cents) = page_blobs(&self.pages, Some(&self.centroids));
        let mut blobs: Vec<(&str, Vec<u8>)> = vec![
            (PATCHES_FILE, patches),
            (CENTROIDS_FILE, cents),
            (ANN_FILE, self.ann.ann_to_bytes()),
            (PAGES_FILE, to_jsonl(&metas)?.into_bytes()),
        ];
        if let Some(p) = &self.projection {
            blobs.push((PROJECTION_FILE, p.to_bytes()));
        }
        if let Some(r) = &self.report.dedup {
            blobs.push((DEDUP_FILE, to_jsonl(&r.dropped)?.into_bytes()));
        }
        let mut files = BTreeMap::new();
        for (name, bytes) in &blobs {
            write_file(&dir.join(name), bytes)?;
            files.insert(
                name.to_string(),
                FileEntry {
                    bytes: bytes.len() as u64,
                    sha256: hex::encode(Sha256::digest(bytes)),
                },
            );
        }
        let manifest = Manifest {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            num_pages: self.pages.len(),
            num_patches: self.num_patches(),
            num_centroids: self.num_centroids(),
            dim: self.ann.dim(),
            source_dim: self.source_dim,
            projected: self.projection.is_some(),
            degenerate_patches: self.report.degenerate_patches,
            dedup_dropped: self.report.dedup.as_ref().map_or(0, |r| r.dropped.len()),
            ann_nlist: self.ann.nlist(),
            config: self.config.clone(),
            files,
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        write_file(&dir.join(MANIFEST_FILE), json.as_bytes())?;
        Ok(manifest)
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = read_file(&path)?;
        let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if m.format != INDEX_FORMAT || m.version != INDEX_VERSION {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported index format {} v{}",
                path.display(),
                m.format,
                m.version
            )));
        }
        Ok(m)
    }

    /// Loads an index directory. Blob sizes are checked against the manifest.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let load = |name: &str| -> Result<Vec<u8>> {
            let bytes = read_file(&dir.join(name))?;
            if let Some(entry) = manifest.files.get(name) {
                if entry.bytes != bytes.len() as u64 {
                    return Err(Error::InvalidInput(format!(
                        "{}: size {} differs from manifest {}",
                        dir.join(name).display(),
                        bytes.len(),
                        entry.bytes
                    )));
                }
            }
            Ok(bytes)
        };
        let pages_path = dir.join(PAGES_FILE);
        let metas: Vec<PageMeta> = read_jsonl(&pages_path)?;
        let patches = load(PATCHES_FILE)?;
        let cents = load(CENTROIDS_FILE)?;
        let pages = load_pages(&metas, &patches, &pages_path)?;
        let centroids = metas
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let missing = || Error::Format {
                    path: pages_path.display().to_string(),
                    line: i + 1,
                    message: "missing centroid fields".into(),
                };
                let weights = m.centroid_weights.clone().ok_or_else(missing)?;
                let data = f32s_at(
                    &cents,
                    m.centroid_offset.ok_or_else(missing)?,
                    m.centroid_len.ok_or_else(missing)?,
                    &m.page_id,
                )?;
                Ok(CentroidSet {
                    page_id: m.page_id.clone(),
                    centroids: Matrix::new(weights.len(), m.dim, data)?,
                    weights,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ann = CentroidAnnIndex::from_parts(&centroids, &load(ANN_FILE)?, manifest.config.exact_flat)?;
        let projection = if manifest.projected {
            Some(ProjectionModel::from_bytes(&load(PROJECTION_FILE)?)?)
        } else {
            None
        };
        if pages.len() != manifest.num_pages {
            return Err(Error::InvalidInput(format!(
                "{}: {} pages listed, manifest says {}",
                pages_path.display(),
                pages.len(),
                manifest.num_pages
            )));
        }
        Ok(Self {
            config: manifest.config,
            pages,
            centroids,
            ann,
            projection,
            source_dim: manifest.source_dim,
            report: BuildReport {
                dedup: None,
                degenerate_patches: manifest.degenerate_patches,
            },
        })
    }

    pub fn page_position(&self, page_id: &str) -> Option<usize> {
        self.pages
            .binary_search_by(|p| p.page_id.as_str().cmp(page_id))
            .ok()
    }
}

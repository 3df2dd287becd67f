//! Synthetic visual documents with planted evidence regions, and the
//! line-delimited record files they are persisted in.
//!
//! A document is a `grid_rows × grid_cols` grid of patches, each carrying a
//! short bag of token ids. A few rectangular evidence regions carry tokens
//! from the *evidence* part of the vocabulary; everything else is background
//! drawn from the *distractor* part, with a configurable share of evidence
//! tokens sprinkled in so that lexical overlap alone is not a reliable
//! retrieval signal. Queries are built from one region of their positive
//! document.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRIPLETS_FILE: &str = "triplets.jsonl";

/// Axis-aligned pixel box `[x1, y1, x2, y2]`, top-left inclusive,
/// bottom-right exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BoundingBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl From<[u32; 4]> for BoundingBox {
    fn from([x1, y1, x2, y2]: [u32; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BoundingBox> for [u32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoundingBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self::new(0, 0, width, height)
    }

    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        if self.x1 < self.x2 && self.y1 < self.y2 && self.x2 <= width && self.y2 <= height {
            Ok(())
        } else {
            Err(Error::InvalidBox {
                x1: self.x1 as i64,
                y1: self.y1 as i64,
                x2: self.x2 as i64,
                y2: self.y2 as i64,
                width,
                height,
            })
        }
    }

    fn is_proper(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn area(&self) -> u64 {
        (self.x2.saturating_sub(self.x1) as u64) * (self.y2.saturating_sub(self.y1) as u64)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let w = self.x2.min(other.x2).saturating_sub(self.x1.max(other.x1)) as u64;
        let h = self.y2.min(other.y2).saturating_sub(self.y1.max(other.y1)) as u64;
        w * h
    }
}

/// Intersection-over-union of two boxes.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_proper() {
            return Err(Error::InvalidBox {
                x1: bx.x1 as i64,
                y1: bx.y1 as i64,
                x2: bx.x2 as i64,
                y2: bx.y2 as i64,
                width: u32::MAX,
                height: u32::MAX,
            });
        }
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceRegion {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// Distinct evidence token ids planted in this region, ascending.
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticDocument {
    pub doc_id: String,
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub patch_tokens: Vec<Vec<u32>>,
    pub evidence_regions: Vec<EvidenceRegion>,
    pub image_width: u32,
    pub image_height: u32,
}

impl SyntheticDocument {
    pub fn patch_count(&self) -> usize {
        (self.grid_rows * self.grid_cols) as usize
    }

    pub fn patch_width(&self) -> u32 {
        self.image_width / self.grid_cols
    }

    pub fn patch_height(&self) -> u32 {
        self.image_height / self.grid_rows
    }

    /// Checks the type invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Corpus(format!("{}: {m}", self.doc_id)));
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return bad("empty grid".into());
        }
        if self.image_width % self.grid_cols != 0 || self.image_height % self.grid_rows != 0 {
            return bad("image size is not a multiple of the grid".into());
        }
        if self.patch_tokens.len() != self.patch_count() {
            return bad(format!(
                "{} patches for a {}x{} grid",
                self.patch_tokens.len(),
                self.grid_rows,
                self.grid_cols
            ));
        }
        if self.patch_tokens.iter().any(|p| p.is_empty()) {
            return bad("patch without tokens".into());
        }
        for region in &self.evidence_regions {
            region.bbox.validate(self.image_width, self.image_height)?;
            if region.tokens.is_empty() {
                return bad("evidence region without tokens".into());
            }
        }
        Ok(())
    }

    /// Patch indices whose tokens include no planted region.
    pub fn background_patches(&self) -> Result<BTreeSet<usize>> {
        let mut all: BTreeSet<usize> = (0..self.patch_count()).collect();
        for region in &self.evidence_regions {
            for p in rasterize_box(&region.bbox, self)? {
                all.remove(&p);
            }
        }
        Ok(all)
    }

    /// Distinct tokens in first-appearance (row-major) order.
    pub fn distinct_tokens(&self) -> Vec<u32> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for patch in &self.patch_tokens {
            for &t in patch {
                if seen.insert(t) {
                    out.push(t);
                }
            }
        }
        out
    }
}

/// Row-major indices of patches covered at least half by `bbox`.
pub fn rasterize_box(bbox: &BoundingBox, doc: &SyntheticDocument) -> Result<BTreeSet<usize>> {
    bbox.validate(doc.image_width, doc.image_height)?;
    let pw = doc.patch_width();
    let ph = doc.patch_height();
    let patch_area = pw as u64 * ph as u64;
    let r0 = bbox.y1 / ph;
    let r1 = bbox.y2.div_ceil(ph).min(doc.grid_rows);
    let c0 = bbox.x1 / pw;
    let c1 = bbox.x2.div_ceil(pw).min(doc.grid_cols);
    let mut out = BTreeSet::new();
    for r in r0..r1 {
        for c in c0..c1 {
            let cell = BoundingBox::new(c * pw, r * ph, (c + 1) * pw, (r + 1) * ph);
            if 2 * bbox.intersection_area(&cell) >= patch_area {
                out.insert((r * doc.grid_cols + c) as usize);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub token_ids: Vec<u32>,
    pub positive_doc_id: String,
    pub target_region_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionSource {
    RegionReasoning,
    WholePage,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTriplet")]
pub struct TripletRecord {
    pub query_id: String,
    pub doc_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description_tokens: Option<Vec<u32>>,
    pub source: DescriptionSource,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTriplet {
    query_id: String,
    doc_id: String,
    #[serde(default)]
    description_tokens: Option<Vec<u32>>,
    source: DescriptionSource,
}

impl TryFrom<RawTriplet> for TripletRecord {
    type Error = String;
    fn try_from(raw: RawTriplet) -> std::result::Result<Self, String> {
        match (&raw.description_tokens, raw.source) {
            (None, DescriptionSource::None) => {}
            (Some(t), s) if s != DescriptionSource::None && !t.is_empty() => {}
            (Some(_), DescriptionSource::None) => {
                return Err("source=none but description_tokens present".into())
            }
            (Some(_), _) => return Err("description_tokens is empty".into()),
            (None, _) => return Err("description_tokens missing for a described triplet".into()),
        }
        Ok(TripletRecord {
            query_id: raw.query_id,
            doc_id: raw.doc_id,
            description_tokens: raw.description_tokens,
            source: raw.source,
        })
    }
}

impl TripletRecord {
    pub fn undescribed(query_id: impl Into<String>, doc_id: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            doc_id: doc_id.into(),
            description_tokens: None,
            source: DescriptionSource::None,
        }
    }
}

/// Generation parameters for a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusManifest {
    pub seed: u64,
    pub vocab_size: u32,
    /// Ids `[0, evidence_vocab_size)` are evidence tokens; the rest are
    /// distractors.
    pub evidence_vocab_size: u32,
    pub doc_count: u32,
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub patch_size: u32,
    pub tokens_per_patch: u32,
    pub region_count_min: u32,
    pub region_count_max: u32,
    /// Region side length in patches.
    pub region_size_min: u32,
    pub region_size_max: u32,
    pub evidence_set_min: u32,
    pub evidence_set_max: u32,
    /// Probability that a background token is drawn from the evidence
    /// vocabulary instead of the distractor vocabulary.
    pub distractor_overlap_rate: f64,
    /// Probability that a non-anchor evidence slot is replaced by a
    /// distractor token.
    pub noise_rate: f64,
    pub train_query_count: u32,
    pub eval_query_count: u32,
    pub query_evidence_tokens: u32,
    pub query_distractor_tokens: u32,
}

impl Default for CorpusManifest {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 512,
            evidence_vocab_size: 384,
            doc_count: 2000,
            grid_rows: 12,
            grid_cols: 12,
            patch_size: 28,
            tokens_per_patch: 4,
            region_count_min: 1,
            region_count_max: 3,
            region_size_min: 2,
            region_size_max: 4,
            evidence_set_min: 4,
            evidence_set_max: 8,
            distractor_overlap_rate: 0.3,
            noise_rate: 0.1,
            train_query_count: 1000,
            eval_query_count: 200,
            query_evidence_tokens: 3,
            query_distractor_tokens: 2,
        }
    }
}

impl CorpusManifest {
    pub fn image_width(&self) -> u32 {
        self.grid_cols * self.patch_size
    }

    pub fn image_height(&self) -> u32 {
        self.grid_rows * self.patch_size
    }

    pub fn query_count(&self) -> u32 {
        self.train_query_count + self.eval_query_count
    }

    pub fn distractor_range(&self) -> std::ops::Range<u32> {
        self.evidence_vocab_size..self.vocab_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("evidence_vocab_size", self.evidence_vocab_size),
            ("doc_count", self.doc_count),
            ("grid_rows", self.grid_rows),
            ("grid_cols", self.grid_cols),
            ("patch_size", self.patch_size),
            ("tokens_per_patch", self.tokens_per_patch),
            ("region_count_min", self.region_count_min),
            ("region_size_min", self.region_size_min),
            ("evidence_set_min", self.evidence_set_min),
            ("query_evidence_tokens", self.query_evidence_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.evidence_vocab_size >= self.vocab_size {
            return Err(Error::invalid(
                "evidence_vocab_size must leave room for distractor tokens",
            ));
        }
        for (name, r) in [
            ("distractor_overlap_rate", self.distractor_overlap_rate),
            ("noise_rate", self.noise_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.region_count_min > self.region_count_max
            || self.region_size_min > self.region_size_max
            || self.evidence_set_min > self.evidence_set_max
        {
            return Err(Error::invalid("range minimum exceeds maximum"));
        }
        if self.region_size_max > self.grid_rows || self.region_size_max > self.grid_cols {
            return Err(Error::invalid(format!(
                "region size {} exceeds the {}x{} grid",
                self.region_size_max, self.grid_rows, self.grid_cols
            )));
        }
        if self.evidence_set_max > self.evidence_vocab_size {
            return Err(Error::invalid("evidence set larger than evidence vocabulary"));
        }
        if self.evidence_set_max > self.region_size_min.pow(2) * self.tokens_per_patch {
            return Err(Error::invalid(
                "smallest region cannot hold the largest evidence set",
            ));
        }
        if self.query_count() == 0 || self.query_count() > self.doc_count {
            return Err(Error::invalid(
                "query count must be positive and at most doc_count (one query per positive)",
            ));
        }
        Ok(())
    }
}

/// Documents plus queries, with an id index.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub documents: Vec<SyntheticDocument>,
    pub queries: Vec<QueryRecord>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(
        manifest: CorpusManifest,
        documents: Vec<SyntheticDocument>,
        queries: Vec<QueryRecord>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(documents.len());
        for (i, d) in documents.iter().enumerate() {
            if index.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::Corpus(format!("duplicate doc_id {}", d.doc_id)));
            }
        }
        for q in &queries {
            let Some(&di) = index.get(&q.positive_doc_id) else {
                return Err(Error::Corpus(format!(
                    "query {} references unknown document {}",
                    q.query_id, q.positive_doc_id
                )));
            };
            if q.token_ids.is_empty() {
                return Err(Error::Corpus(format!("query {} has no tokens", q.query_id)));
            }
            if q.target_region_index >= documents[di].evidence_regions.len() {
                return Err(Error::Corpus(format!(
                    "query {} targets a missing region",
                    q.query_id
                )));
            }
        }
        Ok(Self {
            manifest,
            documents,
            queries,
            index,
        })
    }

    pub fn document(&self, doc_id: &str) -> Option<&SyntheticDocument> {
        self.index.get(doc_id).map(|&i| &self.documents[i])
    }

    pub fn doc_index(&self, doc_id: &str) -> Option<usize> {
        self.index.get(doc_id).copied()
    }

    pub fn train_queries(&self) -> &[QueryRecord] {
        let n = (self.manifest.train_query_count as usize).min(self.queries.len());
        &self.queries[..n]
    }

    pub fn eval_queries(&self) -> &[QueryRecord] {
        let n = (self.manifest.train_query_count as usize).min(self.queries.len());
        &self.queries[n..]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
        write_records(&dir.join(DOCUMENTS_FILE), &self.documents)?;
        write_records(&dir.join(QUERIES_FILE), &self.queries)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CorpusManifest = serde_json::from_str(&text)?;
        let documents: Vec<SyntheticDocument> = read_records(&dir.join(DOCUMENTS_FILE))?;
        for d in &documents {
            d.validate()?;
        }
        let queries = read_records(&dir.join(QUERIES_FILE))?;
        Self::new(manifest, documents, queries)
    }
}

pub fn doc_id(index: usize) -> String {
    format!("d{index:05}")
}

pub fn query_id(index: usize) -> String {
    format!("q{index:05}")
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates documents and queries deterministically from `manifest`.
///
/// Document `i` uses RNG stream `i + 1`; queries use stream 0.
pub fn generate_corpus(manifest: &CorpusManifest) -> Result<Corpus> {
    manifest.validate()?;
    let documents: Vec<SyntheticDocument> = (0..manifest.doc_count as usize)
        .into_par_iter()
        .map(|i| generate_document(manifest, i))
        .collect();
    let queries = generate_queries(manifest, &documents);
    Corpus::new(manifest.clone(), documents, queries)
}

fn generate_document(m: &CorpusManifest, index: usize) -> SyntheticDocument {
    let mut rng = stream_rng(m.seed, index as u64 + 1);
    let rows = m.grid_rows;
    let cols = m.grid_cols;
    let n_regions = rng.gen_range(m.region_count_min..=m.region_count_max);

    // Non-overlapping rectangles in patch units: (r0, c0, h, w)
    let mut occupied = vec![false; (rows * cols) as usize];
    let mut rects: Vec<(u32, u32, u32, u32)> = Vec::new();
    for _ in 0..n_regions {
        for _attempt in 0..64 {
            let h = rng.gen_range(m.region_size_min..=m.region_size_max);
            let w = rng.gen_range(m.region_size_min..=m.region_size_max);
            let r0 = rng.gen_range(0..=rows - h);
            let c0 = rng.gen_range(0..=cols - w);
            let clash = (r0..r0 + h)
                .any(|r| (c0..c0 + w).any(|c| occupied[(r * cols + c) as usize]));
            if clash {
                continue;
            }
            for r in r0..r0 + h {
                for c in c0..c0 + w {
                    occupied[(r * cols + c) as usize] = true;
                }
            }
            rects.push((r0, c0, h, w));
            break;
        }
    }

    let distractor = |rng: &mut ChaCha8Rng| rng.gen_range(m.evidence_vocab_size..m.vocab_size);
    let tpp = m.tokens_per_patch as usize;
    let mut patch_tokens: Vec<Vec<u32>> = vec![Vec::new(); (rows * cols) as usize];
    let mut regions = Vec::with_capacity(rects.len());
    for &(r0, c0, h, w) in &rects {
        let set_size = rng.gen_range(m.evidence_set_min..=m.evidence_set_max) as usize;
        let mut pool: Vec<u32> = (0..m.evidence_vocab_size).collect();
        let (chosen, _) = pool.partial_shuffle(&mut rng, set_size);
        let mut tokens = chosen.to_vec();
        tokens.sort_unstable();

        let mut slot = 0usize;
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                let patch = &mut patch_tokens[(r * cols + c) as usize];
                for _ in 0..tpp {
                    // The first |set| slots anchor every evidence token at
                    // least once; only the remainder is subject to noise.
                    let tok = if slot < tokens.len() {
                        tokens[slot]
                    } else if rng.gen_bool(m.noise_rate) {
                        distractor(&mut rng)
                    } else {
                        tokens[rng.gen_range(0..tokens.len() as u32) as usize]
                    };
                    patch.push(tok);
                    slot += 1;
                }
            }
        }
        let ps = m.patch_size;
        regions.push(EvidenceRegion {
            bbox: BoundingBox::new(c0 * ps, r0 * ps, (c0 + w) * ps, (r0 + h) * ps),
            tokens,
        });
    }

    for (p, patch) in patch_tokens.iter_mut().enumerate() {
        if occupied[p] {
            continue;
        }
        for _ in 0..tpp {
            let tok = if rng.gen_bool(m.distractor_overlap_rate) {
                rng.gen_range(0..m.evidence_vocab_size)
            } else {
                distractor(&mut rng)
            };
            patch.push(tok);
        }
    }

    SyntheticDocument {
        doc_id: doc_id(index),
        grid_rows: rows,
        grid_cols: cols,
        patch_tokens,
        evidence_regions: regions,
        image_width: m.image_width(),
        image_height: m.image_height(),
    }
}

fn generate_queries(m: &CorpusManifest, documents: &[SyntheticDocument]) -> Vec<QueryRecord> {
    let mut rng = stream_rng(m.seed, 0);
    let mut positives: Vec<u32> = (0..documents.len() as u32).collect();
    positives.shuffle(&mut rng);
    positives
        .into_iter()
        .take(m.query_count() as usize)
        .enumerate()
        .map(|(qi, di)| {
            let doc = &documents[di as usize];
            let region_index = rng.gen_range(0..doc.evidence_regions.len() as u32) as usize;
            let region = &doc.evidence_regions[region_index];
            let take = (m.query_evidence_tokens as usize).min(region.tokens.len());
            let mut pool = region.tokens.clone();
            let (picked, _) = pool.partial_shuffle(&mut rng, take);
            let mut token_ids = picked.to_vec();
            for _ in 0..m.query_distractor_tokens {
                token_ids.push(rng.gen_range(m.evidence_vocab_size..m.vocab_size));
            }
            token_ids.shuffle(&mut rng);
            QueryRecord {
                query_id: query_id(qi),
                token_ids,
                positive_doc_id: doc.doc_id.clone(),
                target_region_index: region_index,
            }
        })
        .collect()
}

/// Writes one JSON record per line.
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a line-delimited record file; blank lines are skipped.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_doc(rows: u32, cols: u32, ps: u32) -> SyntheticDocument {
        SyntheticDocument {
            doc_id: "d0".into(),
            grid_rows: rows,
            grid_cols: cols,
            patch_tokens: vec![vec![0]; (rows * cols) as usize],
            evidence_regions: vec![],
            image_width: cols * ps,
            image_height: rows * ps,
        }
    }

    fn small_manifest() -> CorpusManifest {
        CorpusManifest {
            doc_count: 60,
            train_query_count: 40,
            eval_query_count: 10,
            ..CorpusManifest::default()
        }
    }

    #[test]
    fn rasterize_hand_cases() {
        let doc = grid_doc(12, 12, 28);
        let full = rasterize_box(&BoundingBox::full(336, 336), &doc).unwrap();
        assert_eq!(full.len(), 144);
        assert_eq!(full, (0..144).collect());
        let one = rasterize_box(&BoundingBox::new(0, 0, 28, 28), &doc).unwrap();
        assert_eq!(one, BTreeSet::from([0]));
        // patch 1 is covered exactly half: included
        let two = rasterize_box(&BoundingBox::new(0, 0, 42, 28), &doc).unwrap();
        assert_eq!(two, BTreeSet::from([0, 1]));
        let under = rasterize_box(&BoundingBox::new(0, 0, 41, 28), &doc).unwrap();
        assert_eq!(under, BTreeSet::from([0]));
    }

    #[test]
    fn rasterize_rejects_invalid_box() {
        let doc = grid_doc(12, 12, 28);
        assert!(rasterize_box(&BoundingBox::new(10, 0, 10, 5), &doc).is_err());
        assert!(rasterize_box(&BoundingBox::new(0, 0, 337, 5), &doc).is_err());
    }

    #[test]
    fn iou_hand_cases() {
        let a = BoundingBox::new(0, 0, 2, 2);
        assert_eq!(box_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(box_iou(&a, &BoundingBox::new(5, 5, 6, 6)).unwrap(), 0.0);
        let b = BoundingBox::new(1, 1, 3, 3);
        assert!((box_iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        assert!(box_iou(&a, &BoundingBox::new(3, 3, 3, 4)).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let m = small_manifest();
        let a = generate_corpus(&m).unwrap();
        let b = generate_corpus(&m).unwrap();
        assert_eq!(a.documents, b.documents);
        assert_eq!(a.queries, b.queries);
        let other = generate_corpus(&CorpusManifest { seed: 9, ..m }).unwrap();
        assert_ne!(a.documents, other.documents);
    }

    #[test]
    fn degenerate_manifest() {
        let m = CorpusManifest {
            doc_count: 1,
            region_count_min: 1,
            region_count_max: 1,
            train_query_count: 1,
            eval_query_count: 0,
            ..CorpusManifest::default()
        };
        let c = generate_corpus(&m).unwrap();
        assert_eq!(c.documents.len(), 1);
        assert_eq!(c.documents[0].evidence_regions.len(), 1);
        assert_eq!(c.queries.len(), 1);
    }

    #[test]
    fn oversized_region_is_rejected() {
        let m = CorpusManifest {
            region_size_max: 13,
            ..small_manifest()
        };
        assert!(generate_corpus(&m).is_err());
    }

    #[test]
    fn generated_documents_satisfy_invariants() {
        let m = small_manifest();
        let c = generate_corpus(&m).unwrap();
        for d in &c.documents {
            d.validate().unwrap();
            assert!((1..=3).contains(&d.evidence_regions.len()));
            for r in &d.evidence_regions {
                let patches = rasterize_box(&r.bbox, d).unwrap();
                let side_ok = |v: u32| (2 * 28..=4 * 28).contains(&v);
                assert!(side_ok(r.bbox.x2 - r.bbox.x1) && side_ok(r.bbox.y2 - r.bbox.y1));
                let present: BTreeSet<u32> =
                    patches.iter().flat_map(|&p| d.patch_tokens[p].iter().copied()).collect();
                for t in &r.tokens {
                    assert!(present.contains(t), "evidence token {t} not planted");
                    assert!(*t < m.evidence_vocab_size);
                }
            }
        }
        for q in &c.queries {
            let doc = c.document(&q.positive_doc_id).unwrap();
            let region = &doc.evidence_regions[q.target_region_index];
            assert!(q.token_ids.iter().any(|t| region.tokens.contains(t)));
        }
    }

    #[test]
    fn default_corpus_queries_hit_their_region() {
        let c = generate_corpus(&CorpusManifest::default()).unwrap();
        assert_eq!(c.documents.len(), 2000);
        assert_eq!(c.train_queries().len(), 1000);
        assert_eq!(c.eval_queries().len(), 200);
        for q in &c.queries {
            let doc = c.document(&q.positive_doc_id).unwrap();
            let region = &doc.evidence_regions[q.target_region_index];
            assert!(q.token_ids.iter().any(|t| region.tokens.contains(t)));
        }
        let positives: BTreeSet<&str> =
            c.queries.iter().map(|q| q.positive_doc_id.as_str()).collect();
        assert_eq!(positives.len(), c.queries.len());
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(&small_manifest()).unwrap();
        c.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.documents, c.documents);
        assert_eq!(back.queries, c.queries);
        assert_eq!(back.manifest, c.manifest);

        let first = fs::read(dir.path().join(DOCUMENTS_FILE)).unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(first, fs::read(dir.path().join(DOCUMENTS_FILE)).unwrap());
    }

    #[test]
    fn box_serializes_as_array() {
        let r = EvidenceRegion {
            bbox: BoundingBox::new(1, 2, 3, 4),
            tokens: vec![7],
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"box":[1,2,3,4],"tokens":[7]}"#
        );
    }

    #[test]
    fn empty_file_reads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        fs::write(&p, "").unwrap();
        let v: Vec<TripletRecord> = read_records(&p).unwrap();
        assert!(v.is_empty());
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        fs::write(
            &p,
            "{\"query_id\":\"q0\",\"doc_id\":\"d0\",\"source\":\"none\"}\n{\"query_id\":\"q1\",\"source\":\"none\"}\n",
        )
        .unwrap();
        match read_records::<TripletRecord>(&p) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected record error, got {other:?}"),
        }
    }

    #[test]
    fn triplet_source_invariant() {
        let bad = r#"{"query_id":"q","doc_id":"d","description_tokens":[1],"source":"none"}"#;
        assert!(serde_json::from_str::<TripletRecord>(bad).is_err());
        let bad = r#"{"query_id":"q","doc_id":"d","source":"whole_page"}"#;
        assert!(serde_json::from_str::<TripletRecord>(bad).is_err());
        let ok = TripletRecord::undescribed("q", "d");
        let s = serde_json::to_string(&ok).unwrap();
        assert!(!s.contains("description_tokens"));
        assert_eq!(serde_json::from_str::<TripletRecord>(&s).unwrap(), ok);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0u32..300, 0u32..300, 1u32..36, 1u32..36)
            .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn triplet_round_trip(
            q in "[a-z0-9]{1,8}",
            d in "[a-z0-9]{1,8}",
            toks in prop::option::of(prop::collection::vec(0u32..512, 1..20)),
        ) {
            let rec = TripletRecord {
                query_id: q,
                doc_id: d,
                source: if toks.is_some() { DescriptionSource::RegionReasoning } else { DescriptionSource::None },
                description_tokens: toks,
            };
            let s = serde_json::to_string(&rec).unwrap();
            prop_assert_eq!(serde_json::from_str::<TripletRecord>(&s).unwrap(), rec);
        }

        #[test]
        fn rasterize_is_monotone(b in arb_box(), dx in 0u32..30, dy in 0u32..30) {
            let doc = grid_doc(12, 12, 28);
            let grown = BoundingBox::new(
                b.x1.saturating_sub(dx), b.y1.saturating_sub(dy),
                (b.x2 + dx).min(336), (b.y2 + dy).min(336),
            );
            let small = rasterize_box(&b, &doc).unwrap();
            let big = rasterize_box(&grown, &doc).unwrap();
            prop_assert!(small.is_subset(&big));
        }

        #[test]
        fn iou_symmetric_and_one_iff_equal(a in arb_box(), b in arb_box()) {
            let ab = box_iou(&a, &b).unwrap();
            prop_assert_eq!(ab, box_iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, a == b);
        }
    }
}

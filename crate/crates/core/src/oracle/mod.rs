//! Region-guided supervision: per query-document pair, find the regions
//! that answer the query, describe them, and keep one description.

mod client;
mod parse;
mod prompt;

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use client::{request_body, request_regions_external, EndpointConfig, ImageMode, RawReply};
pub use parse::parse_vlm_response;
pub use prompt::build_prompt;

use crate::corpus::{
    BoundingBox, Corpus, CorpusManifest, DescriptionSource, QueryRecord, SyntheticDocument,
    TripletRecord,
};
use crate::error::{Error, Result};

pub const SYNTHESIS_REPORT_FILE: &str = "synthesis_report.json";
pub const DEFAULT_WHOLE_PAGE_BUDGET: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Description {
    Tokens(Vec<u32>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionEvidence {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub description: Description,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleResponse {
    pub think: String,
    pub regions: Vec<RegionEvidence>,
    pub dropped_boxes: usize,
}

/// Stable 64-bit seed from string parts.
pub fn derive_seed(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Maps free text onto the corpus vocabulary. Words of the form `tok<N>`
/// with `N < vocab_size` map to `N`; any other word is hashed into range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextTokenizer {
    pub vocab_size: u32,
}

impl TextTokenizer {
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| {
                let w = w.to_lowercase();
                if let Some(n) = w.strip_prefix("tok").and_then(|n| n.parse::<u32>().ok()) {
                    if n < self.vocab_size {
                        return n;
                    }
                }
                (derive_seed(&[&w]) % self.vocab_size as u64) as u32
            })
            .collect()
    }

    pub fn decode(tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|t| format!("tok{t}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn description_tokens(&self, d: &Description) -> Vec<u32> {
        match d {
            Description::Tokens(t) => t.clone(),
            Description::Text(s) => self.encode(s),
        }
    }
}

/// Ground-truth regions for `query`: every evidence region sharing a token
/// with it. Each description is the region's evidence set, with a
/// distractor token appended after each evidence token at `noise_rate`.
pub fn synthesize_regions_synthetic(
    query: &QueryRecord,
    doc: &SyntheticDocument,
    manifest: &CorpusManifest,
    noise_rate: f64,
) -> Result<Vec<RegionEvidence>> {
    if doc.doc_id != query.positive_doc_id {
        return Err(Error::invalid(format!(
            "document {} is not the positive of {}",
            doc.doc_id, query.query_id
        )));
    }
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(Error::invalid("noise_rate must lie in [0, 1]"));
    }
    let out: Vec<RegionEvidence> = doc
        .evidence_regions
        .iter()
        .enumerate()
        .filter(|(_, r)| r.tokens.iter().any(|t| query.token_ids.contains(t)))
        .map(|(i, r)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                &query.query_id,
                &doc.doc_id,
                &i.to_string(),
            ]));
            let mut tokens = Vec::with_capacity(r.tokens.len() * 2);
            for &t in &r.tokens {
                tokens.push(t);
                if noise_rate > 0.0 && rng.gen_bool(noise_rate) {
                    tokens.push(rng.gen_range(manifest.distractor_range()));
                }
            }
            RegionEvidence {
                bbox: r.bbox,
                description: Description::Tokens(tokens),
            }
        })
        .collect();
    if out.is_empty() {
        return Err(Error::Corpus(format!(
            "query {} shares no token with any region of {}",
            query.query_id, doc.doc_id
        )));
    }
    Ok(out)
}

/// Up to `budget` distinct tokens from anywhere on the page, in an order
/// seeded by the doc id.
pub fn whole_page_description(doc: &SyntheticDocument, budget: usize) -> Result<Vec<u32>> {
    if budget == 0 {
        return Err(Error::invalid("description budget must be at least 1"));
    }
    let mut tokens = doc.distinct_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&["whole_page", &doc.doc_id]));
    tokens.shuffle(&mut rng);
    tokens.truncate(budget);
    Ok(tokens)
}

/// Uniform choice among candidates.
pub fn sample_description(candidates: &[RegionEvidence], seed: u64) -> Result<&RegionEvidence> {
    if candidates.is_empty() {
        return Err(Error::Empty("description candidates"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(&candidates[rng.gen_range(0..candidates.len())])
}

/// Candidates for one query plus bookkeeping for the report.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutcome {
    pub regions: Vec<RegionEvidence>,
    pub attempts: u32,
    pub dropped_boxes: usize,
}

/// A source of region descriptions.
pub trait RegionOracle: Sync {
    fn source(&self) -> DescriptionSource;

    fn name(&self) -> &str;

    fn max_parallel(&self) -> usize {
        1
    }

    fn regions(&self, query: &QueryRecord, doc: &SyntheticDocument) -> Result<OracleOutcome>;
}

pub struct SyntheticOracle {
    pub manifest: CorpusManifest,
    pub noise_rate: f64,
}

impl RegionOracle for SyntheticOracle {
    fn source(&self) -> DescriptionSource {
        DescriptionSource::RegionReasoning
    }

    fn name(&self) -> &str {
        "synthetic"
    }

    fn regions(&self, query: &QueryRecord, doc: &SyntheticDocument) -> Result<OracleOutcome> {
        Ok(OracleOutcome {
            regions: synthesize_regions_synthetic(query, doc, &self.manifest, self.noise_rate)?,
            attempts: 1,
            dropped_boxes: 0,
        })
    }
}

/// Query-agnostic page descriptions (one full-page box).
pub struct WholePageOracle {
    pub budget: usize,
}

impl RegionOracle for WholePageOracle {
    fn source(&self) -> DescriptionSource {
        DescriptionSource::WholePage
    }

    fn name(&self) -> &str {
        "whole_page"
    }

    fn regions(&self, _query: &QueryRecord, doc: &SyntheticDocument) -> Result<OracleOutcome> {
        Ok(OracleOutcome {
            regions: vec![RegionEvidence {
                bbox: BoundingBox::full(doc.image_width, doc.image_height),
                description: Description::Tokens(whole_page_description(doc, self.budget)?),
            }],
            attempts: 1,
            dropped_boxes: 0,
        })
    }
}

pub struct ExternalOracle {
    pub endpoint: EndpointConfig,
}

impl RegionOracle for ExternalOracle {
    fn source(&self) -> DescriptionSource {
        DescriptionSource::RegionReasoning
    }

    fn name(&self) -> &str {
        "external"
    }

    fn max_parallel(&self) -> usize {
        self.endpoint.max_parallel
    }

    fn regions(&self, query: &QueryRecord, doc: &SyntheticDocument) -> Result<OracleOutcome> {
        let prompt = build_prompt(&TextTokenizer::decode(&query.token_ids))?;
        let reply = request_regions_external(&prompt, &self.endpoint.image_path(&doc.doc_id), &self.endpoint)?;
        let parsed = parse_vlm_response(&reply.text, doc.image_width, doc.image_height)?;
        Ok(OracleOutcome {
            regions: parsed.regions,
            attempts: reply.attempts,
            dropped_boxes: parsed.dropped_boxes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryStatus {
    pub query_id: String,
    pub ok: bool,
    pub attempts: u32,
    pub candidates: usize,
    pub dropped_boxes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub backend: String,
    pub seed: u64,
    pub queries: usize,
    pub described: usize,
    pub failed: usize,
    pub per_query: Vec<QueryStatus>,
}

impl SynthesisReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SYNTHESIS_REPORT_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// One triplet per query, in query order. Oracle failures become
/// description-less triplets instead of aborting.
pub fn synthesize_dataset(
    queries: &[QueryRecord],
    corpus: &Corpus,
    oracle: &dyn RegionOracle,
    seed: u64,
) -> Result<(Vec<TripletRecord>, SynthesisReport)> {
    let tokenizer = TextTokenizer {
        vocab_size: corpus.manifest.vocab_size,
    };
    for q in queries {
        if corpus.document(&q.positive_doc_id).is_none() {
            return Err(Error::Corpus(format!(
                "query {} references unknown document {}",
                q.query_id, q.positive_doc_id
            )));
        }
    }

    let run_one = |q: &QueryRecord| -> (TripletRecord, QueryStatus) {
        let doc = corpus.document(&q.positive_doc_id).expect("checked above");
        let outcome = oracle.regions(q, doc).and_then(|o| {
            let pick = sample_description(&o.regions, derive_seed(&[&seed.to_string(), &q.query_id]))?;
            let tokens = tokenizer.description_tokens(&pick.description);
            if tokens.is_empty() {
                return Err(Error::ResponseValidation("description has no tokens".into()));
            }
            Ok((o, tokens))
        });
        match outcome {
            Ok((o, tokens)) => (
                TripletRecord {
                    query_id: q.query_id.clone(),
                    doc_id: q.positive_doc_id.clone(),
                    description_tokens: Some(tokens),
                    source: oracle.source(),
                },
                QueryStatus {
                    query_id: q.query_id.clone(),
                    ok: true,
                    attempts: o.attempts,
                    candidates: o.regions.len(),
                    dropped_boxes: o.dropped_boxes,
                    error: None,
                },
            ),
            Err(e) => (
                TripletRecord::undescribed(&q.query_id, &q.positive_doc_id),
                QueryStatus {
                    query_id: q.query_id.clone(),
                    ok: false,
                    attempts: match &e {
                        Error::Transport { attempts, .. } | Error::HttpStatus { attempts, .. } => *attempts,
                        _ => 1,
                    },
                    candidates: 0,
                    dropped_boxes: 0,
                    error: Some(e.to_string()),
                },
            ),
        }
    };

    // Bounded worker pool; results land in their query slot.
    let slots: Vec<Mutex<Option<(TripletRecord, QueryStatus)>>> =
        queries.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = oracle.max_parallel().clamp(1, queries.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= queries.len() {
                    break;
                }
                let r = run_one(&queries[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });

    let (triplets, per_query): (Vec<_>, Vec<_>) = slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .unzip();
    let described = per_query.iter().filter(|s| s.ok).count();
    let report = SynthesisReport {
        backend: oracle.name().to_owned(),
        seed,
        queries: queries.len(),
        described,
        failed: queries.len() - described,
        per_query,
    };
    Ok((triplets, report))
}

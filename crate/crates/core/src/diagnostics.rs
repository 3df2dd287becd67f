//! Embedding-space and attention diagnostics for trained checkpoints.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{rasterize_box, Corpus, QueryRecord, TripletRecord};
use crate::encoder::{encode_document, encode_text, patch_embeddings, EncoderParams};
use crate::error::{Error, Result};
use crate::mathkernel::cosine;

pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const DEFAULT_TOP_FRACTION: f64 = 0.2;

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceStats {
    pub mean_query_positive_distance: f64,
    pub mean_pairwise_doc_distance: f64,
    pub sample_size: usize,
}

/// Mean `1 - cos` over paired queries and positives.
pub fn alignment_score<Q: AsRef<[f64]>, D: AsRef<[f64]>>(queries: &[Q], positives: &[D]) -> Result<f64> {
    check_len(queries.len(), positives.len())?;
    if queries.is_empty() {
        return Err(Error::Empty("query/positive pairs"));
    }
    let mut total = 0.0;
    for (q, d) in queries.iter().zip(positives) {
        total += 1.0 - cosine(q.as_ref(), d.as_ref())?;
    }
    Ok(total / queries.len() as f64)
}

/// Mean `1 - cos` over all unordered document pairs.
pub fn uniformity_score<D: AsRef<[f64]> + Sync>(docs: &[D]) -> Result<f64> {
    if docs.len() < 2 {
        return Err(Error::invalid("uniformity needs at least two documents"));
    }
    let row_sums: Vec<f64> = (0..docs.len())
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in i + 1..docs.len() {
                s += 1.0 - cosine(docs[i].as_ref(), docs[j].as_ref())?;
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let pairs = docs.len() * (docs.len() - 1) / 2;
    Ok(row_sums.iter().sum::<f64>() / pairs as f64)
}

/// Indices of the `ceil(fraction * P)` largest weights, ties going to the
/// lower index, returned in ascending order.
pub fn top_fraction_patches(weights: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("fraction must lie in (0, 1]"));
    }
    if weights.is_empty() {
        return Err(Error::Empty("patch weights"));
    }
    // guard against 0.2 * 15 = 3.0000000000000004
    let k = ((fraction * weights.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut top = order[..k.min(weights.len())].to_vec();
    top.sort_unstable();
    Ok(top)
}

/// Which set the coverage ratio is normalised by.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageDenominator {
    /// Share of region patches that are in the top set.
    #[default]
    Region,
    /// Share of the top set that falls inside the region.
    TopSet,
}

pub fn attention_coverage(
    weights: &[f64],
    region: &BTreeSet<usize>,
    fraction: f64,
    denominator: CoverageDenominator,
) -> Result<f64> {
    if region.is_empty() {
        return Err(Error::Empty("region patch set"));
    }
    if let Some(&max) = region.last() {
        if max >= weights.len() {
            return Err(Error::invalid(format!(
                "region patch {max} outside a grid of {}",
                weights.len()
            )));
        }
    }
    let top = top_fraction_patches(weights, fraction)?;
    let hits = top.iter().filter(|p| region.contains(p)).count() as f64;
    Ok(match denominator {
        CoverageDenominator::Region => hits / region.len() as f64,
        CoverageDenominator::TopSet => hits / top.len() as f64,
    })
}

/// Cosine of the query against each patch embedding.
pub fn patch_relevance<P: AsRef<[f64]>>(query: &[f64], patches: &[P]) -> Result<Vec<f64>> {
    patches.iter().map(|p| cosine(query, p.as_ref())).collect()
}

/// Jaccard overlap of the two top-fraction sets.
pub fn attention_relevance_iou(attention: &[f64], relevance: &[f64], fraction: f64) -> Result<f64> {
    check_len(attention.len(), relevance.len())?;
    let a: BTreeSet<usize> = top_fraction_patches(attention, fraction)?.into_iter().collect();
    let b: BTreeSet<usize> = top_fraction_patches(relevance, fraction)?.into_iter().collect();
    let inter = a.intersection(&b).count() as f64;
    let union = a.union(&b).count() as f64;
    Ok(inter / union)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    /// Mean pairwise cosine inside each group.
    pub within_group: Vec<f64>,
    /// Mean cosine over pairs drawn from different groups.
    pub cross_group: f64,
}

pub fn description_similarity_stats<V: AsRef<[f64]>>(groups: &[Vec<V>]) -> Result<SimilarityStats> {
    if groups.iter().any(|g| g.len() < 2) {
        return Err(Error::invalid("every description group needs at least two members"));
    }
    let mut within_group = Vec::with_capacity(groups.len());
    for g in groups {
        let mut s = 0.0;
        let mut n = 0usize;
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                s += cosine(g[i].as_ref(), g[j].as_ref())?;
                n += 1;
            }
        }
        within_group.push(s / n as f64);
    }
    let mut s = 0.0;
    let mut n = 0usize;
    for (gi, a) in groups.iter().enumerate() {
        for b in &groups[gi + 1..] {
            for x in a {
                for y in b {
                    s += cosine(x.as_ref(), y.as_ref())?;
                    n += 1;
                }
            }
        }
    }
    Ok(SimilarityStats {
        within_group,
        cross_group: if n == 0 { 0.0 } else { s / n as f64 },
    })
}

/// Writes `<stem>.pgm` (binary 8-bit graymap, min-max normalised, each patch
/// `cell` pixels square) and `<stem>.csv` (raw values, one grid row per
/// line). A constant score vector renders black.
pub fn export_heatmap(scores: &[f64], rows: usize, cols: usize, cell: usize, stem: &Path) -> Result<()> {
    check_len(rows * cols, scores.len())?;
    if cell == 0 {
        return Err(Error::invalid("heatmap cell size must be positive"));
    }
    if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = |v: f64| -> u8 {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    };
    let (w, h) = (cols * cell, rows * cell);
    let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
    for r in 0..rows {
        let line: Vec<u8> = (0..cols)
            .flat_map(|c| std::iter::repeat(level(scores[r * cols + c])).take(cell))
            .collect();
        for _ in 0..cell {
            pgm.extend_from_slice(&line);
        }
    }
    let pgm_path = stem.with_extension("pgm");
    fs::write(&pgm_path, pgm).map_err(|e| Error::io(&pgm_path, e))?;

    let mut csv = String::new();
    for r in 0..rows {
        let row: Vec<String> = scores[r * cols..(r + 1) * cols].iter().map(|v| format!("{v}")).collect();
        csv += &row.join(",");
        csv.push('\n');
    }
    let csv_path = stem.with_extension("csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))
}

pub fn read_heatmap_csv(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .flat_map(|l| l.split(','))
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("bad heatmap value {s:?}: {e}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub top_fraction: f64,
    pub coverage_denominator: CoverageDenominator,
    /// Heatmaps are written for the first this-many instances.
    pub heatmaps: usize,
    pub heatmap_cell: usize,
    /// Descriptions per group for the similarity statistics.
    pub description_sample: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            top_fraction: DEFAULT_TOP_FRACTION,
            coverage_denominator: CoverageDenominator::Region,
            heatmaps: 4,
            heatmap_cell: 8,
            description_sample: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAttention {
    pub query_id: String,
    pub coverage: f64,
    pub iou: f64,
    pub argmax_relevance_in_region: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub top_fraction: f64,
    pub coverage_denominator: CoverageDenominator,
    pub mean_coverage: f64,
    pub mean_iou: f64,
    pub argmax_relevance_in_region_rate: f64,
    pub sorted_coverage: Vec<f64>,
    pub instances: Vec<InstanceAttention>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub checkpoint_hash: Option<String>,
    pub space: SpaceStats,
    pub attention: AttentionReport,
    /// Groups in order: region-focused, whole-page.
    pub descriptions: Option<SimilarityStats>,
}

impl DiagnosticsReport {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(DIAGNOSTICS_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

struct Instance {
    attention: Vec<f64>,
    relevance: Vec<f64>,
    record: InstanceAttention,
}

fn attention_instance(
    params: &EncoderParams<f64>,
    corpus: &Corpus,
    q: &QueryRecord,
    cfg: &DiagnosticsConfig,
) -> Result<Instance> {
    let doc = corpus
        .document(&q.positive_doc_id)
        .ok_or_else(|| Error::Corpus(format!("unknown document {}", q.positive_doc_id)))?;
    let enc = encode_document(doc, params)?;
    let attention = enc
        .attention_weights
        .as_ref()
        .expect("documents carry attention")
        .to_vec();
    let query = encode_text(&q.token_ids, params)?.embedding;
    let relevance = patch_relevance(&query, &patch_embeddings(&enc.cache, params)?)?;
    let region = rasterize_box(&doc.evidence_regions[q.target_region_index].bbox, doc)?;
    let coverage = attention_coverage(&attention, &region, cfg.top_fraction, cfg.coverage_denominator)?;
    let iou = attention_relevance_iou(&attention, &relevance, cfg.top_fraction)?;
    let best = relevance
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("nonempty grid");
    Ok(Instance {
        attention,
        relevance,
        record: InstanceAttention {
            query_id: q.query_id.clone(),
            coverage,
            iou,
            argmax_relevance_in_region: region.contains(&best),
        },
    })
}

fn description_groups(
    params: &EncoderParams<f64>,
    groups: &[&[TripletRecord]],
    sample: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    groups
        .iter()
        .map(|g| {
            g.iter()
                .filter_map(|t| t.description_tokens.as_deref())
                .take(sample)
                .map(|toks| Ok(encode_text(toks, params)?.embedding.into_inner()))
                .collect()
        })
        .collect()
}

/// Full battery over `queries` (normally the eval split). Heatmaps go to
/// `heatmap_dir` when given.
pub fn run_diagnostics(
    params: &EncoderParams<f64>,
    checkpoint_hash: Option<String>,
    corpus: &Corpus,
    queries: &[QueryRecord],
    description_sets: Option<(&[TripletRecord], &[TripletRecord])>,
    cfg: &DiagnosticsConfig,
    heatmap_dir: Option<&Path>,
) -> Result<DiagnosticsReport> {
    if queries.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let q_emb: Vec<Vec<f64>> = queries
        .par_iter()
        .map(|q| Ok(encode_text(&q.token_ids, params)?.embedding.into_inner()))
        .collect::<Result<_>>()?;
    let d_emb: Vec<Vec<f64>> = queries
        .par_iter()
        .map(|q| {
            let doc = corpus
                .document(&q.positive_doc_id)
                .ok_or_else(|| Error::Corpus(format!("unknown document {}", q.positive_doc_id)))?;
            Ok(encode_document(doc, params)?.embedding.into_inner())
        })
        .collect::<Result<_>>()?;
    let space = SpaceStats {
        mean_query_positive_distance: alignment_score(&q_emb, &d_emb)?,
        mean_pairwise_doc_distance: uniformity_score(&d_emb)?,
        sample_size: queries.len(),
    };

    let instances: Vec<Instance> = queries
        .par_iter()
        .map(|q| attention_instance(params, corpus, q, cfg))
        .collect::<Result<_>>()?;
    if let Some(dir) = heatmap_dir {
        let rows = corpus.manifest.grid_rows as usize;
        let cols = corpus.manifest.grid_cols as usize;
        for inst in instances.iter().take(cfg.heatmaps) {
            let id = &inst.record.query_id;
            export_heatmap(&inst.attention, rows, cols, cfg.heatmap_cell, &dir.join(format!("{id}_attention")))?;
            export_heatmap(&inst.relevance, rows, cols, cfg.heatmap_cell, &dir.join(format!("{id}_relevance")))?;
        }
    }
    let n = instances.len() as f64;
    let records: Vec<InstanceAttention> = instances.into_iter().map(|i| i.record).collect();
    let mut sorted_coverage: Vec<f64> = records.iter().map(|r| r.coverage).collect();
    sorted_coverage.sort_by(f64::total_cmp);
    let attention = AttentionReport {
        top_fraction: cfg.top_fraction,
        coverage_denominator: cfg.coverage_denominator,
        mean_coverage: records.iter().map(|r| r.coverage).sum::<f64>() / n,
        mean_iou: records.iter().map(|r| r.iou).sum::<f64>() / n,
        argmax_relevance_in_region_rate: records.iter().filter(|r| r.argmax_relevance_in_region).count() as f64 / n,
        sorted_coverage,
        instances: records,
    };

    let descriptions = match description_sets {
        Some((region, whole)) => {
            let groups = description_groups(params, &[region, whole], cfg.description_sample)?;
            Some(description_similarity_stats(&groups)?)
        }
        None => None,
    };
    Ok(DiagnosticsReport {
        checkpoint_hash,
        space,
        attention,
        descriptions,
    })
}

//! Exhaustive corpus ranking with NDCG@K and Recall@K.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, QueryRecord};
use crate::encoder::{encode_document, encode_text, EncoderParams};
use crate::error::{Error, Result};
use crate::mathkernel::dot;

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub doc_ids: Vec<String>,
    pub scores: Vec<f64>,
}

impl RankedList {
    /// 1-based rank of `doc_id`, if present.
    pub fn rank_of(&self, doc_id: &str) -> Option<usize> {
        self.doc_ids.iter().position(|d| d == doc_id).map(|i| i + 1)
    }
}

/// Scores every document against the query and sorts descending, breaking
/// ties by ascending doc id. Embeddings are unit-norm, so the dot product
/// is the cosine.
pub fn rank_corpus<V: AsRef<[f64]>>(
    query_id: &str,
    query: &[f64],
    doc_ids: &[String],
    doc_embeddings: &[V],
) -> Result<RankedList> {
    if doc_ids.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if doc_ids.len() != doc_embeddings.len() {
        return Err(Error::DimensionMismatch {
            expected: doc_ids.len(),
            actual: doc_embeddings.len(),
        });
    }
    let mut scored = Vec::with_capacity(doc_ids.len());
    for (i, d) in doc_embeddings.iter().enumerate() {
        let d = d.as_ref();
        if d.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: query.len(),
                actual: d.len(),
            });
        }
        scored.push((dot(query, d), i));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| doc_ids[a.1].cmp(&doc_ids[b.1])));
    Ok(RankedList {
        query_id: query_id.to_owned(),
        doc_ids: scored.iter().map(|&(_, i)| doc_ids[i].clone()).collect(),
        scores: scored.iter().map(|&(s, _)| s).collect(),
    })
}

fn check_cutoff(relevant: &BTreeSet<String>, k: usize) -> Result<()> {
    if relevant.is_empty() {
        return Err(Error::Empty("relevant set"));
    }
    if k == 0 {
        return Err(Error::invalid("cutoff k must be at least 1"));
    }
    Ok(())
}

/// Binary-gain NDCG with `1 / log2(rank + 1)` discounts.
pub fn ndcg_at_k(ranking: &RankedList, relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    check_cutoff(relevant, k)?;
    let dcg = ranking
        .doc_ids
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, d)| relevant.contains(*d))
        // fold from +0.0: f64 `sum` of nothing is -0.0
        .fold(0.0, |acc, (i, _)| acc + 1.0 / ((i + 2) as f64).log2());
    let ideal: f64 = (0..relevant.len().min(k))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    Ok(dcg / ideal)
}

pub fn recall_at_k(ranking: &RankedList, relevant: &BTreeSet<String>, k: usize) -> Result<f64> {
    check_cutoff(relevant, k)?;
    let hits = ranking
        .doc_ids
        .iter()
        .take(k)
        .filter(|d| relevant.contains(*d))
        .count();
    Ok(hits as f64 / relevant.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub positive_rank: usize,
    /// Aligned with [`MetricsReport::cutoffs`].
    pub ndcg: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cutoffs: Vec<usize>,
    pub mean_ndcg: Vec<f64>,
    pub mean_recall: Vec<f64>,
    pub corpus_size: usize,
    pub query_count: usize,
    pub checkpoint_hash: Option<String>,
    pub per_query: Vec<QueryMetrics>,
}

impl MetricsReport {
    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == k).map(|i| self.mean_ndcg[i])
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == k).map(|i| self.mean_recall[i])
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json_path = dir.join(METRICS_JSON);
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;

        let mut csv = String::from("query_id,positive_rank");
        for k in &self.cutoffs {
            csv += &format!(",ndcg@{k}");
        }
        for k in &self.cutoffs {
            csv += &format!(",recall@{k}");
        }
        csv.push('\n');
        for q in &self.per_query {
            csv += &format!("{},{}", q.query_id, q.positive_rank);
            for v in q.ndcg.iter().chain(&q.recall) {
                csv += &format!(",{v}");
            }
            csv.push('\n');
        }
        csv += "mean,";
        for v in self.mean_ndcg.iter().chain(&self.mean_recall) {
            csv += &format!(",{v}");
        }
        csv.push('\n');
        let csv_path = dir.join(METRICS_CSV);
        fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(METRICS_JSON);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Embeddings of every corpus document, in corpus order.
pub fn encode_corpus(params: &EncoderParams<f64>, corpus: &Corpus) -> Result<Vec<Vec<f64>>> {
    corpus
        .documents
        .par_iter()
        .map(|d| Ok(encode_document(d, params)?.embedding.into_inner()))
        .collect()
}

/// Ranks the whole corpus for every query and averages the metrics.
pub fn evaluate_retriever(
    params: &EncoderParams<f64>,
    checkpoint_hash: Option<String>,
    corpus: &Corpus,
    queries: &[QueryRecord],
    cutoffs: &[usize],
) -> Result<MetricsReport> {
    if queries.is_empty() {
        return Err(Error::Empty("query set"));
    }
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(Error::invalid("cutoffs must be a nonempty list of positive integers"));
    }
    let docs = encode_corpus(params, corpus)?;
    evaluate_embeddings(params, checkpoint_hash, corpus, &docs, queries, cutoffs)
}

/// As [`evaluate_retriever`], reusing precomputed document embeddings.
pub fn evaluate_embeddings(
    params: &EncoderParams<f64>,
    checkpoint_hash: Option<String>,
    corpus: &Corpus,
    doc_embeddings: &[Vec<f64>],
    queries: &[QueryRecord],
    cutoffs: &[usize],
) -> Result<MetricsReport> {
    let ids: Vec<String> = corpus.documents.iter().map(|d| d.doc_id.clone()).collect();
    let per_query: Vec<QueryMetrics> = queries
        .par_iter()
        .map(|q| {
            let e = encode_text(&q.token_ids, params)?.embedding;
            let ranking = rank_corpus(&q.query_id, &e, &ids, doc_embeddings)?;
            let relevant = BTreeSet::from([q.positive_doc_id.clone()]);
            Ok(QueryMetrics {
                query_id: q.query_id.clone(),
                positive_rank: ranking.rank_of(&q.positive_doc_id).unwrap_or(0),
                ndcg: cutoffs
                    .iter()
                    .map(|&k| ndcg_at_k(&ranking, &relevant, k))
                    .collect::<Result<_>>()?,
                recall: cutoffs
                    .iter()
                    .map(|&k| recall_at_k(&ranking, &relevant, k))
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    let n = per_query.len() as f64;
    let mean = |f: &dyn Fn(&QueryMetrics) -> &Vec<f64>| -> Vec<f64> {
        (0..cutoffs.len())
            .map(|i| per_query.iter().map(|q| f(q)[i]).sum::<f64>() / n)
            .collect()
    };
    Ok(MetricsReport {
        cutoffs: cutoffs.to_vec(),
        mean_ndcg: mean(&|q| &q.ndcg),
        mean_recall: mean(&|q| &q.recall),
        corpus_size: corpus.documents.len(),
        query_count: queries.len(),
        checkpoint_hash,
        per_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusManifest};
    use crate::encoder::init_params;
    use crate::trainer::{encoder_dims, TrainConfig};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ranking(ids: &[&str]) -> RankedList {
        RankedList {
            query_id: "q".into(),
            doc_ids: ids.iter().map(|s| s.to_string()).collect(),
            scores: (0..ids.len()).rev().map(|s| s as f64).collect(),
        }
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    /// Explicit DCG over the permutation, written independently of the
    /// library version.
    fn brute_ndcg(perm: &[usize], rel: &[bool], k: usize) -> f64 {
        let mut dcg = 0.0;
        for (pos, &doc) in perm.iter().enumerate() {
            if pos < k && rel[doc] {
                dcg += std::f64::consts::LN_2 / ((pos + 2) as f64).ln();
            }
        }
        let mut ideal_order: Vec<bool> = rel.to_vec();
        ideal_order.sort_by(|a, b| b.cmp(a));
        let mut idcg = 0.0;
        for (pos, &r) in ideal_order.iter().enumerate() {
            if pos < k && r {
                idcg += std::f64::consts::LN_2 / ((pos + 2) as f64).ln();
            }
        }
        dcg / idcg
    }

    #[test]
    fn ndcg_hand_cases() {
        let r = ranking(&["a", "b", "c", "d", "e", "f"]);
        assert_eq!(ndcg_at_k(&r, &set(&["a"]), 5).unwrap(), 1.0);
        assert!((ndcg_at_k(&r, &set(&["c"]), 5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&r, &set(&["f"]), 5).unwrap(), 0.0);
        assert!(ndcg_at_k(&r, &set(&[]), 5).is_err());
        assert!(ndcg_at_k(&r, &set(&["a"]), 0).is_err());
    }

    #[test]
    fn recall_hand_cases() {
        let r = ranking(&["a", "b", "c", "d", "e", "f", "g"]);
        assert_eq!(recall_at_k(&r, &set(&["a", "e"]), 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&r, &set(&["f", "g"]), 5).unwrap(), 0.0);
        assert_eq!(recall_at_k(&r, &set(&["b", "g"]), 5).unwrap(), 0.5);
        // k larger than the corpus
        assert_eq!(recall_at_k(&r, &set(&["g"]), 50).unwrap(), 1.0);
    }

    #[test]
    fn rank_corpus_contract() {
        let ids: Vec<String> = ["d2", "d0", "d1"].iter().map(|s| s.to_string()).collect();
        let docs = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = rank_corpus("q", &[0.0, 1.0], &ids, &docs).unwrap();
        assert_eq!(r.doc_ids, ["d1", "d2", "d0"]);
        assert_eq!(r.rank_of("d0"), Some(3));
        assert!(rank_corpus("q", &[0.0, 1.0, 0.0], &ids, &docs).is_err());
        assert!(rank_corpus::<Vec<f64>>("q", &[1.0], &[], &[]).is_err());
    }

    #[test]
    fn rank_corpus_matches_selection_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = 100;
            let ids: Vec<String> = (0..n).map(|i| format!("d{:03}", (i * 37) % n)).collect();
            // coarse values so ties occur
            let docs: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.gen_range(0..5) as f64 / 4.0, rng.gen_range(0..5) as f64 / 4.0])
                .collect();
            let q = [0.6, 0.8];
            let r = rank_corpus("q", &q, &ids, &docs).unwrap();
            let mut remaining: Vec<usize> = (0..n).collect();
            let mut expected = Vec::new();
            while !remaining.is_empty() {
                let mut best = 0;
                for j in 1..remaining.len() {
                    let (a, b) = (remaining[j], remaining[best]);
                    let sa = q[0] * docs[a][0] + q[1] * docs[a][1];
                    let sb = q[0] * docs[b][0] + q[1] * docs[b][1];
                    if sa > sb || (sa == sb && ids[a] < ids[b]) {
                        best = j;
                    }
                }
                expected.push(ids[remaining.remove(best)].clone());
            }
            assert_eq!(r.doc_ids, expected);
        }
    }

    #[test]
    fn ndcg_and_recall_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let n = rng.gen_range(1..30);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut rel: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
            rel[rng.gen_range(0..n)] = true;
            let ids: Vec<String> = perm.iter().map(|d| format!("d{d}")).collect();
            let r = RankedList {
                query_id: "q".into(),
                scores: vec![0.0; n],
                doc_ids: ids,
            };
            let relevant: BTreeSet<String> =
                (0..n).filter(|&d| rel[d]).map(|d| format!("d{d}")).collect();
            for k in [1, 5, 10, 40] {
                let got = ndcg_at_k(&r, &relevant, k).unwrap();
                assert!((got - brute_ndcg(&perm, &rel, k)).abs() < 1e-9);
                let hits = perm.iter().take(k).filter(|&&d| rel[d]).count();
                let recall = hits as f64 / rel.iter().filter(|&&b| b).count() as f64;
                assert!((recall_at_k(&r, &relevant, k).unwrap() - recall).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn promoting_a_relevant_doc_never_hurts(n in 2usize..25, rel_pos in 1usize..25, k in 1usize..12) {
            let rel_pos = rel_pos % n;
            prop_assume!(rel_pos >= 1);
            let ids: Vec<String> = (0..n).map(|i| format!("d{i:02}")).collect();
            let before = RankedList { query_id: "q".into(), doc_ids: ids.clone(), scores: vec![0.0; n] };
            let mut moved = ids.clone();
            moved.swap(rel_pos, rel_pos - 1);
            let after = RankedList { query_id: "q".into(), doc_ids: moved, scores: vec![0.0; n] };
            let relevant = BTreeSet::from([ids[rel_pos].clone()]);
            let (n0, n1) = (ndcg_at_k(&before, &relevant, k).unwrap(), ndcg_at_k(&after, &relevant, k).unwrap());
            prop_assert!(n1 >= n0);
            if rel_pos - 1 < k {
                prop_assert!(n1 > n0);
            }
            prop_assert!(recall_at_k(&after, &relevant, k).unwrap() >= recall_at_k(&before, &relevant, k).unwrap());
        }

        #[test]
        fn ranking_is_a_permutation(scores in proptest::collection::vec(-1.0f64..1.0, 1..50)) {
            let ids: Vec<String> = (0..scores.len()).map(|i| format!("d{i:02}")).collect();
            let docs: Vec<Vec<f64>> = scores.iter().map(|&s| vec![s]).collect();
            let r = rank_corpus("q", &[1.0], &ids, &docs).unwrap();
            let mut sorted = r.doc_ids.clone();
            sorted.sort();
            prop_assert_eq!(sorted, ids);
            prop_assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    fn small_corpus() -> Corpus {
        generate_corpus(&CorpusManifest {
            doc_count: 300,
            train_query_count: 100,
            eval_query_count: 150,
            ..CorpusManifest::default()
        })
        .unwrap()
    }

    #[test]
    fn report_contract_and_duplicates() {
        let corpus = small_corpus();
        let cfg = TrainConfig { d_model: 16, d_embed: 8, ..TrainConfig::default() };
        let params = init_params(&encoder_dims(&corpus, &cfg), 3).unwrap();
        let mut queries = corpus.eval_queries()[..5].to_vec();
        queries.push(queries[2].clone());
        let report = evaluate_retriever(&params, None, &corpus, &queries, &[5, 10]).unwrap();
        assert_eq!(report.cutoffs, [5, 10]);
        assert_eq!(report.per_query[2].ndcg, report.per_query[5].ndcg);
        assert!(report.mean_ndcg.iter().chain(&report.mean_recall).all(|v| (0.0..=1.0).contains(v)));
        assert!(evaluate_retriever(&params, None, &corpus, &[], &[5]).is_err());

        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        assert_eq!(MetricsReport::read(dir.path()).unwrap(), report);
        let csv = fs::read_to_string(dir.path().join(METRICS_CSV)).unwrap();
        assert_eq!(csv.lines().count(), queries.len() + 2);
        assert!(csv.starts_with("query_id,positive_rank,ndcg@5,ndcg@10,recall@5,recall@10\n"));
    }

    #[test]
    fn untrained_encoder_matches_random_baseline() {
        let corpus = small_corpus();
        let queries = corpus.eval_queries();
        let cfg = TrainConfig::default();
        let params = init_params(&encoder_dims(&corpus, &cfg), 17).unwrap();
        let report = evaluate_retriever(&params, None, &corpus, queries, &[5]).unwrap();

        // Monte-Carlo baseline: position of the single positive under a
        // uniform random permutation.
        let n = corpus.documents.len();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let samples: Vec<f64> = (0..10_000)
            .map(|_| {
                let pos = rng.gen_range(0..n);
                if pos < 5 {
                    1.0 / ((pos + 2) as f64).log2()
                } else {
                    0.0
                }
            })
            .collect();
        let mu = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        let se = (var / queries.len() as f64).sqrt();
        let got = report.ndcg(5).unwrap();
        assert!((got - mu).abs() <= 3.0 * se, "ndcg@5 {got} vs baseline {mu} ± {se}");
    }
}

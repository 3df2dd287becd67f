//! Cross-module properties of supervision synthesis and response parsing.

use std::collections::BTreeSet;

use proptest::prelude::*;
use realign_core::corpus::{
    generate_corpus, BoundingBox, CorpusManifest, DescriptionSource, QueryRecord, SyntheticDocument,
};
use realign_core::oracle::{
    derive_seed, parse_vlm_response, synthesize_dataset, synthesize_regions_synthetic, Description, OracleOutcome,
    RegionEvidence, RegionOracle,
};
use realign_core::{Error, Result};

fn manifest(seed: u64) -> CorpusManifest {
    CorpusManifest {
        seed,
        doc_count: 40,
        train_query_count: 30,
        eval_query_count: 10,
        ..CorpusManifest::default()
    }
}

/// Fails for queries whose id hashes into the `failure_rate` fraction.
struct Flaky {
    failure_rate: f64,
    salt: u64,
}

impl RegionOracle for Flaky {
    fn source(&self) -> DescriptionSource {
        DescriptionSource::RegionReasoning
    }

    fn name(&self) -> &str {
        "flaky"
    }

    fn max_parallel(&self) -> usize {
        3
    }

    fn regions(&self, query: &QueryRecord, doc: &SyntheticDocument) -> Result<OracleOutcome> {
        let h = derive_seed(&[&query.query_id, &self.salt.to_string()]);
        if (h % 1000) as f64 / 1000.0 < self.failure_rate {
            return Err(Error::ResponseParse);
        }
        Ok(OracleOutcome {
            regions: vec![RegionEvidence {
                bbox: BoundingBox::full(doc.image_width, doc.image_height),
                description: Description::Tokens(query.token_ids.clone()),
            }],
            attempts: 1,
            dropped_boxes: 0,
        })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn synthetic_descriptions_stay_in_region_plus_noise_vocabulary(seed in 0u64..1000, noise in 0.0f64..0.5) {
        let m = manifest(seed);
        let corpus = generate_corpus(&m).unwrap();
        let noise_vocab = m.distractor_range();
        for q in &corpus.queries {
            let doc = corpus.document(&q.positive_doc_id).unwrap();
            let regions = synthesize_regions_synthetic(q, doc, &m, noise).unwrap();
            prop_assert!(!regions.is_empty());
            for r in &regions {
                prop_assert!(r.bbox.validate(doc.image_width, doc.image_height).is_ok());
                let source = doc.evidence_regions.iter().find(|e| e.bbox == r.bbox).unwrap();
                let allowed: BTreeSet<u32> = source.tokens.iter().copied().collect();
                let Description::Tokens(toks) = &r.description else { panic!("synthetic text") };
                prop_assert!(!toks.is_empty());
                for t in toks {
                    prop_assert!(allowed.contains(t) || noise_vocab.contains(t), "token {t}");
                }
            }
        }
    }

    #[test]
    fn dataset_has_one_triplet_per_query_under_failures(rate in 0.0f64..=1.0, salt in 0u64..100) {
        let corpus = generate_corpus(&manifest(1)).unwrap();
        let oracle = Flaky { failure_rate: rate, salt };
        let (triplets, report) = synthesize_dataset(&corpus.queries, &corpus, &oracle, 0).unwrap();
        prop_assert_eq!(triplets.len(), corpus.queries.len());
        prop_assert_eq!(report.described + report.failed, corpus.queries.len());
        for (t, q) in triplets.iter().zip(&corpus.queries) {
            prop_assert_eq!(&t.query_id, &q.query_id);
            prop_assert_eq!(t.source == DescriptionSource::None, t.description_tokens.is_none());
        }
        prop_assert_eq!(triplets.iter().filter(|t| t.description_tokens.is_none()).count(), report.failed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn parsed_boxes_always_satisfy_box_invariants(
        boxes in proptest::collection::vec(
            (
                proptest::array::uniform4(-500.0f64..900.0),
                proptest::option::of("[a-z ]{0,8}"),
            ),
            0..6,
        ),
        w in 1u32..400,
        h in 1u32..400,
    ) {
        let entries: Vec<serde_json::Value> = boxes
            .iter()
            .map(|(a, d)| match d {
                Some(d) => serde_json::json!({ "area": a, "description": d }),
                None => serde_json::json!({ "area": a }),
            })
            .collect();
        let raw = format!("prefix ```json\n{}\n```", serde_json::json!({ "think": "t", "boxes": entries }));
        match parse_vlm_response(&raw, w, h) {
            Ok(r) => {
                prop_assert_eq!(r.regions.len() + r.dropped_boxes, boxes.len());
                for reg in &r.regions {
                    prop_assert!(reg.bbox.validate(w, h).is_ok());
                }
            }
            Err(e) => prop_assert!(matches!(e, Error::ResponseValidation(_))),
        }
    }
}

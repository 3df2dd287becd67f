//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 1-5 and 10 are correctness properties and fail the target.
//! Criteria 6-9 are directional experiment outcomes: their lines are
//! reported as measured and do not change the exit status.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, ExitCode, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use realign_core::corpus::{generate_corpus, CorpusManifest, DescriptionSource, QueryRecord, SyntheticDocument};
use realign_core::evalsuite::{ndcg_at_k, RankedList};
use realign_core::harness::{AblationTable, Arm, OracleReport};
use realign_core::mathkernel::{softmax, Vector};
use realign_core::objective::{contrastive_loss, ranking_distribution, total_loss, BatchScores};
use realign_core::oracle::{
    parse_vlm_response, request_regions_external, synthesize_dataset, EndpointConfig, OracleOutcome, RegionOracle,
};
use realign_core::trainer::{train, TrainConfig, TrainOptions};
use realign_core::{Error, Result};

const GRADIENT_TOL: f64 = 1e-4;
const GRADIENT_MIN_CONFIGS: usize = 100;
const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const METRIC_TOL: f64 = 1e-9;
const METRIC_CASES: usize = 1000;
const KL_ZERO_TOL: f64 = 1e-12;
const SOFTMAX_SUM_TOL: f64 = 1e-9;
const HAND_CASE_TOL: f64 = 1e-4;
const ABLATION_BUDGET: Duration = Duration::from_secs(30 * 60);
const SEEDS: usize = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn lab(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_realign-lab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn v(x: &[f64]) -> Vector<f64> {
    Vector::new(x.to_vec()).unwrap()
}

fn criterion_1(dir: &Path) -> Outcome {
    let start = Instant::now();
    let out = lab(dir, &["--out", "verify", "verify", "--grad-cases", "34", "--metric-cases", "1000"]);
    let elapsed = start.elapsed();
    let Ok(text) = fs::read_to_string(dir.join("verify/oracle_report.json")) else {
        return outcome(false, format!("no oracle report: {}", String::from_utf8_lossy(&out.stderr)));
    };
    let reports: Vec<OracleReport> = serde_json::from_str(&text).unwrap();
    let g = &reports[0];
    outcome(
        g.pass && g.max_error < GRADIENT_TOL && g.cases >= GRADIENT_MIN_CONFIGS && elapsed < GRADIENT_BUDGET,
        format!(
            "gradient oracle max rel err {:.2e} (< {GRADIENT_TOL:e}) over {} configs, λ ∈ {{0, 0.2, 1}}, {:.1}s (< {}s)",
            g.max_error,
            g.cases,
            elapsed.as_secs_f64(),
            GRADIENT_BUDGET.as_secs()
        ),
    )
}

fn criterion_2(dir: &Path) -> Outcome {
    let text = fs::read_to_string(dir.join("verify/oracle_report.json")).unwrap_or_default();
    let Ok(reports) = serde_json::from_str::<Vec<OracleReport>>(&text) else {
        return outcome(false, "no oracle report");
    };
    let m = &reports[1];
    let ranking = RankedList {
        query_id: "q".into(),
        doc_ids: ["a", "b", "rel", "c", "d", "e"].map(String::from).to_vec(),
        scores: vec![6.0, 5.0, 4.0, 3.0, 2.0, 1.0],
    };
    let hand = ndcg_at_k(&ranking, &BTreeSet::from(["rel".to_string()]), 5).unwrap();
    outcome(
        m.pass && m.max_error < METRIC_TOL && m.cases >= METRIC_CASES && hand == 0.5,
        format!(
            "metric oracle max err {:.1e} (< {METRIC_TOL:e}) over {} instances; rank-3 hand case NDCG@5 = {hand}",
            m.max_error, m.cases
        ),
    )
}

fn criterion_3() -> Outcome {
    let q = vec![v(&[1.0, 0.0]), v(&[0.6, 0.8]), v(&[0.0, 1.0])];
    let d = vec![v(&[0.8, 0.6]), v(&[0.0, 1.0]), v(&[-0.6, 0.8])];
    let t = vec![Some(v(&[0.0, 1.0])), None, Some(v(&[1.0, 0.0]))];
    let batch = BatchScores::new(q.clone(), t, d.clone(), 0.05).unwrap();
    let (zero, _) = total_loss(&batch, 0.0, true).unwrap();
    let bitwise = zero.total.to_bits() == zero.contrastive.to_bits();

    let same = BatchScores::new(q.clone(), q.iter().cloned().map(Some).collect(), d.clone(), 0.05).unwrap();
    let (l, _) = total_loss(&same, 0.2, true).unwrap();
    let kl_same = l.kl.abs();

    let masked = BatchScores::new(q.clone(), vec![None, None, None], d.clone(), 0.05).unwrap();
    let (m, _) = total_loss(&masked, 0.2, true).unwrap();

    let mut worst_sum: f64 = 0.0;
    for anchor in &q {
        for tau in [0.01, 0.05, 1.0] {
            let p = ranking_distribution(anchor, &d, tau).unwrap();
            worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let s = softmax(&[700.0, -700.0, 0.0], 1.0).unwrap();
    worst_sum = worst_sum.max((s.iter().sum::<f64>() - 1.0).abs());
    outcome(
        bitwise && kl_same < KL_ZERO_TOL && m.kl == 0.0 && m.kl_mask_count == 3 && worst_sum < SOFTMAX_SUM_TOL,
        format!(
            "λ=0 total == contrastive bitwise: {bitwise}; KL(q=t) = {kl_same:.1e}; all-masked KL = {} with {} masked; max |Σp − 1| = {worst_sum:.1e}",
            m.kl, m.kl_mask_count
        ),
    )
}

fn criterion_4() -> Outcome {
    let p = ranking_distribution(&[1.0f64, 0.0], &[[1.0, 0.0], [0.0, 1.0]], 1.0).unwrap();
    let batch = BatchScores::new(
        vec![v(&[1.0, 0.0]), v(&[0.0, 1.0])],
        vec![None, None],
        vec![v(&[1.0, 0.0]), v(&[0.0, 1.0])],
        1.0,
    )
    .unwrap();
    let (loss, _) = contrastive_loss(&batch).unwrap();
    let pass = (p[0] - 0.7311).abs() <= HAND_CASE_TOL
        && (p[1] - 0.2689).abs() <= HAND_CASE_TOL
        && (loss - 0.3133).abs() <= HAND_CASE_TOL;
    outcome(
        pass,
        format!("P = [{:.4}, {:.4}], contrastive loss {:.4} (± {HAND_CASE_TOL:e})", p[0], p[1], loss),
    )
}

const DETERMINISM_CONFIG: &str = "\
[corpus]
doc_count = 300
train_query_count = 256
eval_query_count = 40

[train]
epochs = 2
peak_lr = 3e-3
";

fn criterion_5(dir: &Path) -> Outcome {
    let d = dir.join("determinism");
    fs::create_dir_all(&d).unwrap();
    fs::write(d.join("c.toml"), DETERMINISM_CONFIG).unwrap();
    for args in [
        &["--config", "c.toml", "synth-corpus"][..],
        &["--config", "c.toml", "synth-supervision"],
        &["--config", "c.toml", "--threads", "1", "train", "--name", "a"],
        &["--config", "c.toml", "--threads", "1", "train", "--name", "b"],
    ] {
        let out = lab(&d, args);
        if !out.status.success() {
            return outcome(false, format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    let same = |f: &str| fs::read(d.join("out/runs/a").join(f)).unwrap() == fs::read(d.join("out/runs/b").join(f)).unwrap();
    let (ckpt_same, log_same) = (same("checkpoint.bin"), same("train_log.jsonl"));

    let corpus = generate_corpus(&CorpusManifest {
        doc_count: 300,
        train_query_count: 256,
        eval_query_count: 40,
        ..CorpusManifest::default()
    })
    .unwrap();
    let triplets = realign_core::harness::Supervision::synthesize(&corpus, 0).unwrap().region;
    let cfg = TrainConfig {
        epochs: 2,
        accumulation_steps: 1,
        peak_lr: 3e-3,
        ..TrainConfig::default()
    };
    let full = train(&corpus, &triplets, &cfg, TrainOptions::default()).unwrap();
    let part = train(
        &corpus,
        &triplets,
        &cfg,
        TrainOptions {
            resume: None,
            stop_after_step: Some(3),
        },
    )
    .unwrap();
    let part_step = part.checkpoint.step;
    let resumed = train(
        &corpus,
        &triplets,
        &cfg,
        TrainOptions {
            resume: Some(part.checkpoint),
            stop_after_step: None,
        },
    )
    .unwrap();
    let interrupted = part_step == 3 && full.total_steps > 3;
    let resume_exact = resumed.checkpoint.to_bytes().unwrap() == full.checkpoint.to_bytes().unwrap();
    outcome(
        ckpt_same && log_same && interrupted && resume_exact,
        format!(
            "repeat run checkpoint identical: {ckpt_same}, log identical: {log_same}; resume at step {} of {} bit-exact: {resume_exact}",
            part_step, full.total_steps
        ),
    )
}

fn run_ablation(dir: &Path) -> std::result::Result<(AblationTable, Duration), String> {
    let d = dir.join("ablation");
    fs::create_dir_all(&d).unwrap();
    let out = lab(&d, &["synth-corpus"]);
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let start = Instant::now();
    // progress lines stream through while the experiment runs
    let status = Command::new(env!("CARGO_BIN_EXE_realign-lab"))
        .current_dir(&d)
        .arg("ablation")
        .stdout(Stdio::null())
        .stderr(Stdio::inherit())
        .status()
        .expect("binary runs");
    let elapsed = start.elapsed();
    if !status.success() {
        return Err(format!("ablation exited with {status}"));
    }
    let table: AblationTable = serde_json::from_str(&fs::read_to_string(d.join("out/ablation.json")).unwrap()).unwrap();
    Ok((table, elapsed))
}

fn three_arm_seconds(table: &AblationTable) -> f64 {
    table
        .runs
        .iter()
        .filter(|r| r.arm != Arm::Realign || r.lambda == 0.2)
        .map(|r| r.seconds)
        .sum()
}

fn criterion_6(table: &AblationTable, elapsed: Duration) -> Outcome {
    let g = |arm: Arm| table.group(arm, arm.lambda(0.2)).map_or(f64::NAN, |g| g.ndcg5);
    let (realign, infonce, wopr) = (g(Arm::Realign), g(Arm::Infonce), g(Arm::Wopr));
    let seeds = table.runs.iter().filter(|r| r.arm == Arm::Infonce).count();
    let three_arm = three_arm_seconds(table);
    outcome(
        realign > infonce && realign >= wopr && seeds == SEEDS && three_arm < ABLATION_BUDGET.as_secs_f64(),
        format!(
            "mean NDCG@5 over {seeds} seeds: realign {realign:.4}, infonce {infonce:.4}, wopr {wopr:.4}; \
             3-arm time {three_arm:.0}s, full ablation {:.0}s (< {}s)",
            elapsed.as_secs_f64(),
            ABLATION_BUDGET.as_secs()
        ),
    )
}

fn criterion_7(table: &AblationTable) -> Outcome {
    let grid: Vec<String> = [0.0, 0.1, 0.2, 0.3]
        .iter()
        .map(|&l| format!("λ={l}: {:.4}", table.lambda_ndcg5(l).unwrap_or(f64::NAN)))
        .collect();
    let (at2, at0) = (table.lambda_ndcg5(0.2), table.lambda_ndcg5(0.0));
    let pass = matches!((at2, at0), (Some(a), Some(b)) if a >= b);
    outcome(pass, format!("mean NDCG@5 {}", grid.join(", ")))
}

fn criterion_8(table: &AblationTable) -> Outcome {
    let g = |arm| table.group(arm, arm.lambda(0.2)).unwrap();
    let (r, i) = (g(Arm::Realign), g(Arm::Infonce));
    outcome(
        r.query_positive_distance < i.query_positive_distance && r.pairwise_doc_distance > i.pairwise_doc_distance,
        format!(
            "query→positive distance realign {:.4} vs infonce {:.4}; doc pairwise distance realign {:.4} vs infonce {:.4}",
            r.query_positive_distance, i.query_positive_distance, r.pairwise_doc_distance, i.pairwise_doc_distance
        ),
    )
}

fn criterion_9(table: &AblationTable) -> Outcome {
    let g = |arm| table.group(arm, arm.lambda(0.2)).unwrap();
    let (r, i) = (g(Arm::Realign), g(Arm::Infonce));
    let bounded = table
        .runs
        .iter()
        .all(|x| (0.0..=1.0).contains(&x.coverage_min) && (0.0..=1.0).contains(&x.coverage_max));
    outcome(
        r.coverage > i.coverage && bounded,
        format!(
            "mean top-20% coverage realign {:.4} vs infonce {:.4}; every value in [0,1]: {bounded}",
            r.coverage, i.coverage
        ),
    )
}

/// Serves the scripted statuses in order, then closes.
fn stub(statuses: Vec<u16>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for status in statuses {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream);
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(x) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = x.trim().parse().unwrap_or(0);
                }
            }
            let mut buf = vec![0u8; len];
            let _ = reader.read_exact(&mut buf);
            let body = r#"{"choices":[{"message":{"content":"{\"boxes\":[]}"}}]}"#;
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = reader.into_inner().write_all(reply.as_bytes());
        }
    });
    format!("http://{addr}")
}

struct FailSome;

impl RegionOracle for FailSome {
    fn source(&self) -> DescriptionSource {
        DescriptionSource::RegionReasoning
    }

    fn name(&self) -> &str {
        "fail-some"
    }

    fn regions(&self, query: &QueryRecord, doc: &SyntheticDocument) -> Result<OracleOutcome> {
        if ["q00000", "q00004", "q00007"].contains(&query.query_id.as_str()) {
            return Err(Error::Transport {
                attempts: 4,
                status: Some(500),
                message: "injected".into(),
            });
        }
        let raw = format!(
            r#"{{"think": "x", "boxes": [{{"area": [0, 0, {}, {}], "description": "tok1 tok2"}}]}}"#,
            doc.image_width, doc.image_height
        );
        let parsed = parse_vlm_response(&raw, doc.image_width, doc.image_height)?;
        Ok(OracleOutcome {
            regions: parsed.regions,
            attempts: 1,
            dropped_boxes: 0,
        })
    }
}

fn criterion_10() -> Outcome {
    let fixture = r#"{ "think": "The totals sit in the last table row.", "boxes": [{ "area": [12, 240, 320, 300], "description": "totals row of the summary table" }]}"#;
    let accepted = parse_vlm_response(fixture, 336, 336)
        .map(|r| r.regions.len() == 1 && r.think == "The totals sit in the last table row.")
        .unwrap_or(false);
    let classes = matches!(parse_vlm_response("no object", 336, 336), Err(Error::ResponseParse))
        && matches!(parse_vlm_response(r#"{"think": "x"}"#, 336, 336), Err(Error::ResponseSchema(_)))
        && matches!(
            parse_vlm_response(r#"{"boxes": [{"area": [50,50,40,60], "description": "d"}]}"#, 336, 336),
            Err(Error::ResponseValidation(_))
        );

    let cfg = |url: String, retries| EndpointConfig {
        base_url: url,
        max_retries: retries,
        backoff_base_ms: 1,
        timeout_secs: 10.0,
        ..EndpointConfig::default()
    };
    let img = Path::new("/tmp/page.png");
    let retried = request_regions_external("q", img, &cfg(stub(vec![500, 500, 200]), 3))
        .map(|r| r.attempts == 3)
        .unwrap_or(false);
    let exhausted = matches!(
        request_regions_external("q", img, &cfg(stub(vec![500, 500, 500]), 2)),
        Err(Error::Transport { attempts: 3, .. })
    );

    let corpus = generate_corpus(&CorpusManifest {
        doc_count: 20,
        train_query_count: 10,
        eval_query_count: 2,
        ..CorpusManifest::default()
    })
    .unwrap();
    let (t, report) = synthesize_dataset(corpus.train_queries(), &corpus, &FailSome, 0).unwrap();
    let described = t.iter().filter(|t| t.description_tokens.is_some()).count();
    let undescribed = t.iter().filter(|t| t.source == DescriptionSource::None).count();
    let dataset = t.len() == 10 && described == 7 && undescribed == 3 && report.failed == 3;
    outcome(
        accepted && classes && retried && exhausted && dataset,
        format!(
            "format fixture accepted: {accepted}; error classes: {classes}; retry success after 3 attempts: {retried}; \
             exhaustion after 3 attempts: {exhausted}; 10 queries -> {} triplets ({described} described, {undescribed} none)",
            t.len()
        ),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut results: Vec<(u32, Outcome, bool)> = vec![
        (1, criterion_1(p), true),
        (2, criterion_2(p), true),
        (3, criterion_3(), true),
        (4, criterion_4(), true),
        (5, criterion_5(p), true),
    ];
    match run_ablation(p) {
        Ok((table, elapsed)) => {
            results.push((6, criterion_6(&table, elapsed), false));
            results.push((7, criterion_7(&table), false));
            results.push((8, criterion_8(&table), false));
            results.push((9, criterion_9(&table), false));
        }
        Err(e) => {
            for n in 6..=9 {
                results.push((n, outcome(false, format!("ablation did not run: {e}")), false));
            }
        }
    }
    results.push((10, criterion_10(), true));

    let mut hard_failure = false;
    for (n, o, hard) in &results {
        println!("{} criterion {n}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        hard_failure |= *hard && !o.pass;
    }
    let passed = results.iter().filter(|r| r.1.pass).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if hard_failure {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

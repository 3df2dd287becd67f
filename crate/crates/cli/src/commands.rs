use std::fs;
use std::path::{Path, PathBuf};

use realign_core::corpus::{generate_corpus, read_records, write_records, Corpus, TripletRecord, TRIPLETS_FILE};
use realign_core::diagnostics::run_diagnostics;
use realign_core::evalsuite::evaluate_retriever;
use realign_core::harness::{
    run_ablation_experiment, run_gradient_oracle, run_metric_oracle, write_oracle_reports, Arm, Fault,
};
use realign_core::oracle::{
    synthesize_dataset, ExternalOracle, RegionOracle, SyntheticOracle, WholePageOracle,
};
use realign_core::trainer::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainOptions, TRAIN_LOG_FILE};

use crate::config::{Backend, RunConfig, Split};
use crate::report::write_report;
use crate::{Cli, CliError, Command, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

pub fn run(cli: Cli) -> Result<(), CliError> {
    if cli.global.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;

    let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
    cfg.apply_seed(cli.global.seed);
    if let Some(out) = cli.global.out {
        cfg.paths.out = out;
    }
    cfg.validate()?;

    match cli.command {
        Command::SynthCorpus => synth_corpus(&cfg),
        Command::SynthSupervision { backend } => synth_supervision(&cfg, backend.unwrap_or(cfg.oracle.backend)),
        Command::Train(args) => train_cmd(&cfg, &args),
        Command::Eval { checkpoint, k, split } => eval_cmd(&cfg, &checkpoint, k, split),
        Command::Diagnose { checkpoint, heatmaps } => diagnose_cmd(&cfg, &checkpoint, heatmaps),
        Command::Report { runs } => {
            let runs = runs.unwrap_or_else(|| cfg.runs_dir());
            let path = write_report(&runs, cfg.out())?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Verify { grad_cases, metric_cases } => verify_cmd(&cfg, grad_cases, metric_cases),
        Command::Ablation { seeds } => ablation_cmd(&cfg, seeds),
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus, CliError> {
    let dir = cfg.corpus_dir();
    if !dir.is_dir() {
        return Err(CliError::Data(format!(
            "no corpus at {} (run synth-corpus first)",
            dir.display()
        )));
    }
    Ok(Corpus::load(&dir)?)
}

fn synth_corpus(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let dir = cfg.corpus_dir();
    corpus.save(&dir)?;
    println!(
        "wrote {} documents and {} queries to {}",
        corpus.documents.len(),
        corpus.queries.len(),
        dir.display()
    );
    Ok(())
}

fn synth_supervision(cfg: &RunConfig, backend: Backend) -> Result<(), CliError> {
    if backend == Backend::External {
        if let Some(dir) = &cfg.oracle.endpoint.image_dir {
            if !dir.is_dir() {
                return Err(CliError::Data(format!("image directory {} does not exist", dir.display())));
            }
        }
    }
    let corpus = load_corpus(cfg)?;
    let oracle: Box<dyn RegionOracle> = match backend {
        Backend::Synthetic => Box::new(SyntheticOracle {
            manifest: corpus.manifest.clone(),
            noise_rate: cfg.oracle.noise_rate.unwrap_or(corpus.manifest.noise_rate),
        }),
        Backend::WholePage => Box::new(WholePageOracle {
            budget: cfg.oracle.whole_page_budget,
        }),
        Backend::External => Box::new(ExternalOracle {
            endpoint: cfg.oracle.endpoint.clone(),
        }),
    };
    let (triplets, report) = synthesize_dataset(corpus.train_queries(), &corpus, oracle.as_ref(), cfg.oracle.seed)?;
    let dir = cfg.supervision_dir(backend);
    write_records(&dir.join(TRIPLETS_FILE), &triplets)?;
    report.write(&dir)?;
    println!(
        "{}: {} triplets, {} described, {} failed -> {}",
        report.backend,
        report.queries,
        report.described,
        report.failed,
        dir.display()
    );
    Ok(())
}

fn default_triplets(cfg: &RunConfig, arm: Arm) -> PathBuf {
    let backend = match (arm, cfg.oracle.backend) {
        (Arm::Wopr, _) => Backend::WholePage,
        (_, Backend::WholePage) => Backend::Synthetic,
        (_, b) => b,
    };
    cfg.supervision_dir(backend).join(TRIPLETS_FILE)
}

fn load_triplets(path: &Path) -> Result<Vec<TripletRecord>, CliError> {
    if !path.is_file() {
        return Err(CliError::Data(format!(
            "no triplets at {} (run synth-supervision first)",
            path.display()
        )));
    }
    Ok(read_records(path)?)
}

fn lambda_label(l: f64) -> String {
    format!("lambda{l}")
}

fn train_cmd(cfg: &RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    let lambdas = match &args.lambda {
        Some(v) if v.is_empty() => return Err(CliError::Usage("--lambda needs at least one value".into())),
        Some(v) => v.clone(),
        None => vec![cfg.train.lambda],
    };
    let sweep = lambdas.len() > 1;
    if sweep && args.objective == Arm::Infonce {
        return Err(CliError::Usage("a λ sweep needs --objective realign or wopr".into()));
    }
    if sweep && (args.name.is_some() || args.resume.is_some()) {
        return Err(CliError::Usage("--name and --resume apply to single runs only".into()));
    }
    if args.objective == Arm::Infonce && args.lambda.is_some() && lambdas[0] != 0.0 {
        eprintln!("note: infonce trains with λ = 0; ignoring λ = {}", lambdas[0]);
    }
    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;
    let corpus = load_corpus(cfg)?;
    let triplets_path = args.triplets.clone().unwrap_or_else(|| default_triplets(cfg, args.objective));
    let triplets = load_triplets(&triplets_path)?;

    for &lambda in &lambdas {
        let train_cfg = realign_core::trainer::TrainConfig {
            lambda: args.objective.lambda(lambda),
            ..cfg.train.clone()
        };
        let name = match (&args.name, sweep) {
            (Some(n), _) => n.clone(),
            (None, true) => format!("{}-{}", args.objective.name(), lambda_label(lambda)),
            (None, false) => args.objective.name().to_string(),
        };
        let dir = cfg.runs_dir().join(&name);
        let outcome = train(
            &corpus,
            &triplets,
            &train_cfg,
            TrainOptions {
                resume: resume.clone(),
                stop_after_step: None,
            },
        )?;
        for e in &outcome.epochs {
            eprintln!(
                "{name} epoch {}: contrastive {:.5} kl {:.5} total {:.5}",
                e.epoch, e.mean_contrastive, e.mean_kl, e.mean_total
            );
        }
        fs::create_dir_all(&dir).map_err(|e| realign_core::Error::io(&dir, e))?;
        write_records(&dir.join(TRAIN_LOG_FILE), &outcome.log)?;
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &outcome.checkpoint)?;
        println!("{name}: {} steps -> {}", outcome.total_steps, dir.display());
    }
    Ok(())
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn open_checkpoint(path: &Path) -> Result<(Checkpoint, String), CliError> {
    let ckpt = load_checkpoint(path)?;
    let hash = ckpt.content_hash()?;
    Ok((ckpt, hash))
}

fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, k: Option<Vec<usize>>, split: Option<Split>) -> Result<(), CliError> {
    let (ckpt, hash) = open_checkpoint(checkpoint)?;
    let cutoffs = k.unwrap_or_else(|| cfg.eval.cutoffs.clone());
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(CliError::Usage("--k must list positive integers".into()));
    }
    let corpus = load_corpus(cfg)?;
    let queries = match split.unwrap_or(cfg.eval.split) {
        Split::Train => corpus.train_queries(),
        Split::Eval => corpus.eval_queries(),
    };
    let report = evaluate_retriever(&ckpt.params, Some(hash), &corpus, queries, &cutoffs)?;
    let dir = checkpoint_dir(checkpoint);
    report.write(&dir)?;
    let cells: Vec<String> = report
        .cutoffs
        .iter()
        .zip(&report.mean_ndcg)
        .map(|(k, v)| format!("ndcg@{k} {v:.4}"))
        .collect();
    println!("{} -> {}", cells.join(" "), dir.display());
    Ok(())
}

fn diagnose_cmd(cfg: &RunConfig, checkpoints: &[PathBuf], heatmaps: Option<usize>) -> Result<(), CliError> {
    let opened: Vec<(Checkpoint, String)> = checkpoints
        .iter()
        .map(|p| open_checkpoint(p))
        .collect::<Result<_, _>>()?;
    let corpus = load_corpus(cfg)?;
    let mut dcfg = cfg.diagnostics.clone();
    if let Some(n) = heatmaps {
        dcfg.heatmaps = n;
    }
    let region_path = cfg.supervision_dir(Backend::Synthetic).join(TRIPLETS_FILE);
    let whole_path = cfg.supervision_dir(Backend::WholePage).join(TRIPLETS_FILE);
    let descriptions = if region_path.is_file() && whole_path.is_file() {
        Some((read_records::<TripletRecord>(&region_path)?, read_records::<TripletRecord>(&whole_path)?))
    } else {
        None
    };
    for (path, (ckpt, hash)) in checkpoints.iter().zip(opened) {
        let dir = checkpoint_dir(path);
        let report = run_diagnostics(
            &ckpt.params,
            Some(hash),
            &corpus,
            corpus.eval_queries(),
            descriptions.as_ref().map(|(r, w)| (r.as_slice(), w.as_slice())),
            &dcfg,
            Some(&dir.join("heatmaps")),
        )?;
        report.write(&dir)?;
        println!(
            "alignment {:.4} uniformity {:.4} coverage {:.4} iou {:.4} -> {}",
            report.space.mean_query_positive_distance,
            report.space.mean_pairwise_doc_distance,
            report.attention.mean_coverage,
            report.attention.mean_iou,
            dir.display()
        );
    }
    Ok(())
}

fn verify_cmd(cfg: &RunConfig, grad_cases: usize, metric_cases: usize) -> Result<(), CliError> {
    let seed = cfg.seed.unwrap_or(0);
    let reports = vec![
        run_gradient_oracle(&[seed], grad_cases, Fault::None)?,
        run_metric_oracle(seed, metric_cases, Fault::None)?,
    ];
    let path = write_oracle_reports(&reports, cfg.out())?;
    for r in &reports {
        println!(
            "{}: {} cases, max error {:.3e} (tolerance {:e}) {}",
            r.suite,
            r.cases,
            r.max_error,
            r.tolerance,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    println!("wrote {}", path.display());
    if reports.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(CliError::Numeric("oracle suite failed".into()))
    }
}

fn ablation_cmd(cfg: &RunConfig, seeds: Option<Vec<u64>>) -> Result<(), CliError> {
    let mut acfg = cfg.ablation.clone();
    if let Some(s) = seeds {
        acfg.seeds = s;
    }
    let corpus = load_corpus(cfg)?;
    let table = run_ablation_experiment(&corpus, &acfg, |r| {
        eprintln!(
            "{} λ={} seed {}: ndcg@5 {:.4} coverage {:.4} ({:.1}s)",
            r.arm.name(),
            r.lambda,
            r.seed,
            r.ndcg5,
            r.coverage,
            r.seconds
        )
    })?;
    let path = table.write(cfg.out())?;
    let json = cfg.out().join("ablation.json");
    fs::write(&json, serde_json::to_string_pretty(&table).map_err(realign_core::Error::from)? + "\n")
        .map_err(|e| realign_core::Error::io(&json, e))?;
    for g in &table.groups {
        println!("{} λ={}: ndcg@5 {:.4} ndcg@10 {:.4}", g.arm.name(), g.lambda, g.ndcg5, g.ndcg10);
    }
    println!("wrote {}", path.display());
    Ok(())
}

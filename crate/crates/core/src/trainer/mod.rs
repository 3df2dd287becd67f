//! Optimization loop: in-batch negative batching, AdamW, linear
//! warmup/decay, gradient accumulation, checkpointing and exact resume.

pub mod adamw;
pub mod checkpoint;

use std::collections::{HashMap, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, TripletRecord};
use crate::encoder::{
    accumulate_backward, encode_document, encode_text, init_params, EncodeOutput, EncoderDims,
    EncoderParams, ForwardCache,
};
use crate::error::{Error, Result};
use crate::objective::{total_loss_view, BatchView, LossBreakdown};

pub use adamw::{adamw_step, adamw_update_slice, AdamWHyper, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u32,
    /// Rows per micro-batch; every row sees `logical_batch - 1` negatives.
    pub logical_batch: usize,
    pub accumulation_steps: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub teacher_detached: bool,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub d_model: usize,
    pub d_embed: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            logical_batch: 64,
            accumulation_steps: 4,
            peak_lr: 1e-4,
            warmup_ratio: 0.1,
            lambda: 0.2,
            temperature: 0.05,
            teacher_detached: true,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            d_model: 64,
            d_embed: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.logical_batch < 2 {
            return Err(Error::invalid("logical_batch must be at least 2"));
        }
        if self.accumulation_steps < 1 {
            return Err(Error::invalid("accumulation_steps must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::invalid("warmup_ratio must lie in [0, 1)"));
        }
        for (name, v) in [
            ("peak_lr", self.peak_lr),
            ("temperature", self.temperature),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.d_model == 0 || self.d_embed == 0 {
            return Err(Error::invalid("encoder widths must be positive"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWHyper {
        AdamWHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn warmup_steps(total_steps: u64, warmup_ratio: f64) -> u64 {
    // guard against 0.1 * 30 = 3.0000000000000004 rounding up to 4
    ((warmup_ratio * total_steps as f64) - 1e-9).ceil().max(0.0) as u64
}

/// Linear 0 → peak over the warmup, then linear peak → 0.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::invalid(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let warm = warmup_steps(total_steps, cfg.warmup_ratio);
    let peak = cfg.peak_lr;
    if step < warm {
        return Ok(peak * step as f64 / warm as f64);
    }
    let decay = total_steps - warm;
    if decay == 0 {
        return Ok(peak);
    }
    Ok(peak * (total_steps - step) as f64 / decay as f64)
}

/// Shuffles triplets with `epoch_seed` and cuts them into batches of
/// `logical_batch` rows with distinct positive documents. A row whose
/// document is already in the open batch is deferred to the next one; the
/// last incomplete batch is dropped.
pub fn make_batches(
    triplets: &[TripletRecord],
    logical_batch: usize,
    epoch_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if logical_batch < 2 {
        return Err(Error::invalid("logical_batch must be at least 2"));
    }
    if triplets.len() < logical_batch {
        return Err(Error::invalid(format!(
            "{} triplets cannot fill a batch of {logical_batch}",
            triplets.len()
        )));
    }
    let distinct: HashSet<&str> = triplets.iter().map(|t| t.doc_id.as_str()).collect();
    if distinct.len() < logical_batch {
        return Err(Error::invalid(format!(
            "{} distinct documents cannot fill a batch of {logical_batch}",
            distinct.len()
        )));
    }
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);

    let mut batches = Vec::new();
    let mut deferred: VecDeque<usize> = VecDeque::new();
    let mut fresh = order.into_iter();
    loop {
        let mut batch = Vec::with_capacity(logical_batch);
        let mut docs: HashSet<&str> = HashSet::with_capacity(logical_batch);
        let mut still_deferred = VecDeque::new();
        while let Some(i) = deferred.pop_front() {
            if batch.len() < logical_batch && docs.insert(triplets[i].doc_id.as_str()) {
                batch.push(i);
            } else {
                still_deferred.push_back(i);
            }
        }
        deferred = still_deferred;
        while batch.len() < logical_batch {
            let Some(i) = fresh.next() else { break };
            if docs.insert(triplets[i].doc_id.as_str()) {
                batch.push(i);
            } else {
                deferred.push_back(i);
            }
        }
        if batch.len() < logical_batch {
            break;
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub contrastive: f64,
    pub kl: f64,
    pub total: f64,
    pub kl_mask_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u32,
    pub micro_batches: usize,
    pub mean_contrastive: f64,
    pub mean_kl: f64,
    pub mean_total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub total_steps: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: Option<Checkpoint>,
    /// Return after this many optimizer steps (counted from zero, not from
    /// the resume point).
    pub stop_after_step: Option<u64>,
}

struct Row<'a> {
    query: &'a [u32],
    doc: usize,
    description: Option<&'a [u32]>,
}

fn training_rows<'a>(corpus: &'a Corpus, triplets: &'a [TripletRecord]) -> Result<Vec<Row<'a>>> {
    let queries: HashMap<&str, &[u32]> = corpus
        .queries
        .iter()
        .map(|q| (q.query_id.as_str(), q.token_ids.as_slice()))
        .collect();
    triplets
        .iter()
        .map(|t| {
            let query = queries.get(t.query_id.as_str()).ok_or_else(|| {
                Error::Corpus(format!("triplet references unknown query {}", t.query_id))
            })?;
            let doc = corpus.doc_index(&t.doc_id).ok_or_else(|| {
                Error::Corpus(format!("triplet references unknown document {}", t.doc_id))
            })?;
            Ok(Row {
                query,
                doc,
                description: t.description_tokens.as_deref(),
            })
        })
        .collect()
}

pub fn encoder_dims(corpus: &Corpus, cfg: &TrainConfig) -> EncoderDims {
    EncoderDims {
        vocab_size: corpus.manifest.vocab_size as usize,
        d_model: cfg.d_model,
        d_embed: cfg.d_embed,
        grid_rows: corpus.manifest.grid_rows as usize,
        grid_cols: corpus.manifest.grid_cols as usize,
    }
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed_hex: hex::encode(rng.get_seed()),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

type Encoded = (EncodeOutput<f64>, EncodeOutput<f64>, Option<EncodeOutput<f64>>);

/// Loss and parameter gradients of a single micro-batch, accumulated into
/// `grads`.
fn micro_batch(
    corpus: &Corpus,
    rows: &[Row<'_>],
    batch: &[usize],
    params: &EncoderParams<f64>,
    cfg: &TrainConfig,
    grads: &mut EncoderParams<f64>,
) -> Result<LossBreakdown<f64>> {
    let encoded: Vec<Encoded> = batch
        .par_iter()
        .map(|&i| {
            let r = &rows[i];
            let q = encode_text(r.query, params)?;
            let d = encode_document(&corpus.documents[r.doc], params)?;
            let t = r.description.map(|t| encode_text(t, params)).transpose()?;
            Ok((q, d, t))
        })
        .collect::<Result<_>>()?;
    let view = BatchView {
        queries: encoded.iter().map(|e| &e.0.embedding[..]).collect(),
        descriptions: encoded
            .iter()
            .map(|e| e.2.as_ref().map(|t| &t.embedding[..]))
            .collect(),
        documents: encoded.iter().map(|e| &e.1.embedding[..]).collect(),
        temperature: cfg.temperature,
    };
    let (loss, g) = total_loss_view(&view, cfg.lambda, cfg.teacher_detached)?;

    let mut caches: Vec<&ForwardCache<f64>> = Vec::with_capacity(3 * batch.len());
    let mut upstream: Vec<&[f64]> = Vec::with_capacity(3 * batch.len());
    for (i, e) in encoded.iter().enumerate() {
        caches.push(&e.0.cache);
        upstream.push(&g.queries[i]);
        caches.push(&e.1.cache);
        upstream.push(&g.documents[i]);
        if let (Some(t), Some(gt)) = (&e.2, &g.descriptions[i]) {
            caches.push(&t.cache);
            upstream.push(gt);
        }
    }
    accumulate_backward(params, &caches, &upstream, grads)?;
    Ok(loss)
}

/// Runs the full schedule (or resumes one) and returns the final state.
pub fn train(
    corpus: &Corpus,
    triplets: &[TripletRecord],
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let rows = training_rows(corpus, triplets)?;
    let dims = encoder_dims(corpus, cfg);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let epoch_seeds: Vec<u64> = (0..cfg.epochs).map(|_| rng.next_u64()).collect();
    let rng_after = rng_state(&rng);
    let mut plan: Vec<(u32, Vec<usize>)> = Vec::new();
    for (e, &s) in epoch_seeds.iter().enumerate() {
        for b in make_batches(triplets, cfg.logical_batch, s)? {
            plan.push((e as u32, b));
        }
    }
    let accum = cfg.accumulation_steps;
    let total_steps = plan.len().div_ceil(accum) as u64;
    let config_hash = cfg.hash();

    let (mut params, mut opt, mut step, start_micro) = match opts.resume {
        Some(ck) => {
            if ck.config_hash != config_hash {
                return Err(Error::invalid("checkpoint was produced by a different config"));
            }
            if ck.rng != rng_after {
                return Err(Error::invalid("checkpoint RNG state does not match the schedule"));
            }
            if ck.dims != dims {
                return Err(Error::invalid("checkpoint dimensions do not match the corpus"));
            }
            (ck.params, ck.optimizer, ck.step, ck.micro_step as usize)
        }
        None => {
            let p = init_params::<f64>(&dims, cfg.seed)?;
            let o = OptimizerState::new(&p);
            (p, o, 0, 0)
        }
    };
    let hp = cfg.adamw();

    let mut log = Vec::new();
    let mut grads = params.zeros_like();
    let mut window: Vec<LossBreakdown<f64>> = Vec::with_capacity(accum);
    let mut epoch_stats: Vec<(u32, Vec<LossBreakdown<f64>>)> = Vec::new();
    let mut micro = start_micro;

    while micro < plan.len() {
        if opts.stop_after_step.is_some_and(|s| step >= s) {
            break;
        }
        let (epoch, batch) = &plan[micro];
        let loss = micro_batch(corpus, &rows, batch, &params, cfg, &mut grads)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { step: step as usize });
        }
        window.push(loss);
        match epoch_stats.last_mut() {
            Some((e, v)) if e == epoch => v.push(loss),
            _ => epoch_stats.push((*epoch, vec![loss])),
        }
        micro += 1;

        if window.len() == accum || micro == plan.len() {
            let n = window.len() as f64;
            grads.scale(1.0 / n);
            let lr = lr_at(step, total_steps, cfg)?;
            adamw_step(&mut params, &grads, &mut opt, lr, &hp)?;
            if !params.is_finite() {
                return Err(Error::NonFiniteLoss { step: step as usize });
            }
            step += 1;
            log.push(StepRecord {
                step,
                lr,
                contrastive: window.iter().map(|l| l.contrastive).sum::<f64>() / n,
                kl: window.iter().map(|l| l.kl).sum::<f64>() / n,
                total: window.iter().map(|l| l.total).sum::<f64>() / n,
                kl_mask_count: window.iter().map(|l| l.kl_mask_count).sum(),
            });
            window.clear();
            grads = params.zeros_like();
        }
    }

    let epochs = epoch_stats
        .into_iter()
        .map(|(epoch, v)| {
            let n = v.len() as f64;
            EpochSummary {
                epoch,
                micro_batches: v.len(),
                mean_contrastive: v.iter().map(|l| l.contrastive).sum::<f64>() / n,
                mean_kl: v.iter().map(|l| l.kl).sum::<f64>() / n,
                mean_total: v.iter().map(|l| l.total).sum::<f64>() / n,
            }
        })
        .collect();

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            dims,
            params,
            optimizer: opt,
            step,
            micro_step: micro as u64,
            rng: rng_after,
            config: cfg.clone(),
            config_hash,
        },
        log,
        epochs,
        total_steps,
    })
}

//! Two-stage training: masked-language-model pretraining, then contrastive
//! fine-tuning with InfoNCE or a margin triplet loss. Both stages share the
//! freeze-then-unfreeze schedule, early stopping on validation loss, and
//! per-improvement checkpointing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, Triplet};
use crate::encoder::{self, is_head_param, save_checkpoint, EncoderError, Model};
use crate::numerics::NumericsError;
use crate::pooling::{pool_node, pool_v3_node, PoolError, PoolVariant, PoolingSpec};
use crate::{NodeId, Tape, Tensor};

mod optim;

pub use optim::AdamW;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mlm,
    #[serde(rename = "infonce")]
    InfoNce,
    Triplet,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Extra epochs allowed past the best validation epoch.
    pub patience: usize,
    /// Epochs with the backbone frozen (sense block and heads train first).
    pub freeze_epochs: usize,
    pub loss: LossKind,
    pub infonce_temperature: f64,
    pub triplet_margin: f64,
    pub weight_decay: f64,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            batch_size: 16,
            max_epochs: 30,
            patience: 3,
            freeze_epochs: 2,
            loss: LossKind::Mlm,
            infonce_temperature: 0.05,
            triplet_margin: 0.5,
            weight_decay: 0.01,
            mask_rate: 0.15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.loss == LossKind::InfoNce && self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be >= 2 for infonce".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(TrainError::Config("mask_rate must be in (0, 1)".into()));
        }
        if self.infonce_temperature <= 0.0 {
            return Err(TrainError::Config("infonce_temperature must be > 0".into()));
        }
        if self.triplet_margin < 0.0 {
            return Err(TrainError::Config("triplet_margin must be >= 0".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::Config("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
    SingleEpochBound,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    /// Not serialized: wall time varies between identical runs.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

pub fn write_train_report(report: &TrainReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| TrainError::Config(format!("report serialization: {e}")))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

// ── Losses ──────────────────────────────────────────────────────────────

/// Mean cross-entropy over masked positions only; errors when nothing is
/// masked (the caller must re-mask).
pub fn mlm_loss(logits: &Tensor, targets: &[Option<usize>]) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let l = tape.leaf(logits.clone())?;
    let node = tape.cross_entropy(l, targets)?;
    Ok(tape.value(node).item())
}

/// InfoNCE over cosine similarities: -ln( e^{sim(a,p)/T} / sum over
/// {p} U negatives of e^{sim(a,.)/T} ).
pub fn infonce_node(
    tape: &mut Tape,
    anchor: NodeId,
    positive: NodeId,
    negatives: &[NodeId],
    temperature: f64,
) -> Result<NodeId> {
    if temperature <= 0.0 {
        return Err(TrainError::Config(format!(
            "infonce temperature must be > 0, got {temperature}"
        )));
    }
    if negatives.is_empty() {
        return Err(TrainError::Config("infonce needs at least one negative".into()));
    }
    let mut sims = Vec::with_capacity(1 + negatives.len());
    let cp = tape.cosine_sim(anchor, positive)?;
    sims.push(tape.reshape(cp, vec![1, 1])?);
    for &n in negatives {
        let cn = tape.cosine_sim(anchor, n)?;
        sims.push(tape.reshape(cn, vec![1, 1])?);
    }
    let row = tape.concat_cols(&sims)?;
    let scaled = tape.scale(row, 1.0 / temperature)?;
    Ok(tape.cross_entropy(scaled, &[Some(0)])?)
}

pub fn infonce_loss(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    temperature: f64,
) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let d = anchor.len();
    let a = tape.leaf(Tensor::from_vec(vec![1, d], anchor.to_vec())?)?;
    let p = tape.leaf(Tensor::from_vec(vec![1, d], positive.to_vec())?)?;
    let ns = negatives
        .iter()
        .map(|n| Ok(tape.leaf(Tensor::from_vec(vec![1, d], n.clone())?)?))
        .collect::<Result<Vec<_>>>()?;
    let node = infonce_node(&mut tape, a, p, &ns, temperature)?;
    Ok(tape.value(node).item())
}

/// max(0, d(a,p) - d(a,n) + margin) with d = cosine distance.
pub fn triplet_node(
    tape: &mut Tape,
    anchor: NodeId,
    positive: NodeId,
    negative: NodeId,
    margin: f64,
) -> Result<NodeId> {
    if margin < 0.0 {
        return Err(TrainError::Config(format!("margin must be >= 0, got {margin}")));
    }
    // d(a,p) - d(a,n) + margin = cos(a,n) - cos(a,p) + margin
    let cp = tape.cosine_sim(anchor, positive)?;
    let cn = tape.cosine_sim(anchor, negative)?;
    let neg_cp = tape.scale(cp, -1.0)?;
    let diff = tape.add(cn, neg_cp)?;
    let m = tape.constant(Tensor::scalar(margin))?;
    let shifted = tape.add(diff, m)?;
    Ok(tape.relu(shifted)?)
}

pub fn triplet_margin_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let d = anchor.len();
    let a = tape.leaf(Tensor::from_vec(vec![1, d], anchor.to_vec())?)?;
    let p = tape.leaf(Tensor::from_vec(vec![1, d], positive.to_vec())?)?;
    let n = tape.leaf(Tensor::from_vec(vec![1, d], negative.to_vec())?)?;
    let node = triplet_node(&mut tape, a, p, n, margin)?;
    Ok(tape.value(node).item())
}

// ── Shared trainer plumbing ─────────────────────────────────────────────

fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut x = base
        ^ a.wrapping_mul(0x9E3779B97F4A7C15)
        ^ b.wrapping_mul(0xBF58476D1CE4E5B9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58476D1CE4E5B9);
    x ^= x >> 27;
    x
}

/// 90:10 split by index; the last example backs validation when the corpus
/// is too small for a tenth.
fn split_indices(n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(TrainError::EmptyCorpus);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..n {
        if i % 10 == 9 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    if val.is_empty() {
        val.push(train.pop().expect("n >= 2"));
    }
    Ok((train, val))
}

fn mean_node(tape: &mut Tape, parts: &[NodeId]) -> Result<NodeId> {
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    Ok(tape.scale(total, 1.0 / parts.len() as f64)?)
}

struct EarlyStopper {
    best_val: f64,
    best_epoch: usize,
    since_best: usize,
    patience: usize,
    best_params: Option<crate::ParamStore>,
}

impl EarlyStopper {
    fn new(patience: usize) -> Self {
        EarlyStopper {
            best_val: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
            patience,
            best_params: None,
        }
    }

    /// Returns (improved, must_stop).
    fn observe(&mut self, epoch: usize, val: f64, params: &crate::ParamStore) -> (bool, bool) {
        if val < self.best_val {
            self.best_val = val;
            self.best_epoch = epoch;
            self.since_best = 0;
            self.best_params = Some(params.clone());
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best > self.patience)
        }
    }
}

fn apply_freeze(model: &mut Model, epoch: usize, freeze_epochs: usize) {
    if epoch < freeze_epochs {
        model.params.set_trainable(is_head_param);
    } else {
        model.params.set_trainable(|_| true);
    }
}

fn checkpoint_paths(out_dir: &Path, epoch: usize) -> (PathBuf, PathBuf) {
    (out_dir.join(format!("ckpt_epoch_{epoch}.iskp")), out_dir.join("best.iskp"))
}

fn save_improvement(
    model: &Model,
    pooling: Option<&PoolingSpec>,
    epoch: usize,
    out_dir: Option<&Path>,
) -> Result<()> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let (epoch_path, best_path) = checkpoint_paths(dir, epoch);
        save_checkpoint(model, pooling, Some(epoch), &epoch_path)?;
        std::fs::copy(&epoch_path, &best_path)?;
    }
    Ok(())
}

fn non_finite_to_divergence(err: TrainError, epoch: usize) -> TrainError {
    let op = match &err {
        TrainError::Numerics(NumericsError::NonFinite { op }) => Some(*op),
        TrainError::Encoder(EncoderError::Numerics(NumericsError::NonFinite { op })) => Some(*op),
        TrainError::Pool(PoolError::Numerics(NumericsError::NonFinite { op })) => Some(*op),
        TrainError::Pool(PoolError::Encoder(EncoderError::Numerics(
            NumericsError::NonFinite { op },
        ))) => Some(*op),
        _ => None,
    };
    match op {
        Some(op) => TrainError::Diverged {
            epoch,
            detail: format!("non-finite value produced by {op}"),
        },
        None => err,
    }
}

// ── Stage 0: MLM pretraining ────────────────────────────────────────────

fn pad_rows(rows: &[&Vec<u32>]) -> Vec<Vec<u32>> {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    rows.iter()
        .map(|r| {
            let mut padded = (*r).clone();
            padded.resize(width, corpus::PAD);
            padded
        })
        .collect()
}

/// Mask a batch, re-rolling the seed when no position was selected.
fn mask_with_retry(
    rows: &[Vec<u32>],
    vocab_size: usize,
    rate: f64,
    seed: u64,
) -> Result<corpus::MaskedBatch> {
    for bump in 0..16 {
        let masked = corpus::mask_batch(rows, vocab_size, rate, seed.wrapping_add(bump))?;
        if !masked.positions.is_empty() {
            return Ok(masked);
        }
    }
    Err(TrainError::Config("masking selected no positions in 16 attempts".into()))
}

/// Weighted-mean MLM loss over one masked batch; the graph spans every row.
fn mlm_batch_loss(
    tape: &mut Tape,
    model: &Model,
    masked: &corpus::MaskedBatch,
) -> Result<NodeId> {
    let total: usize = masked.positions.len();
    let mut parts = Vec::new();
    for (row, tgt) in masked.masked.iter().zip(&masked.targets) {
        let count = tgt.iter().flatten().count();
        if count == 0 {
            continue;
        }
        let gains = vec![1.0; model.cfg.k];
        let fwd = encoder::forward(tape, &model.params, &model.cfg, row, &gains)?;
        let logits = encoder::mlm_logits(tape, &model.params, fwd.o)?;
        let targets: Vec<Option<usize>> =
            tgt.iter().map(|t| t.map(|id| id as usize)).collect();
        let ce = tape.cross_entropy(logits, &targets)?;
        parts.push(tape.scale(ce, count as f64 / total as f64)?);
    }
    let mut loss = parts[0];
    for &p in &parts[1..] {
        loss = tape.add(loss, p)?;
    }
    Ok(loss)
}

/// Stage-0 trainer. Phase 1 (first `freeze_epochs` epochs) trains the sense
/// construction block and heads with the backbone frozen; phase 2 unfreezes
/// everything. Early-stops on validation loss; restores the best parameters.
pub fn train_mlm(
    model: &mut Model,
    texts: &[String],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let encoded: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| {
            let mut ids = model.vocab.encode(t);
            ids.truncate(model.cfg.max_len);
            ids
        })
        .filter(|ids| !ids.is_empty())
        .collect();
    if encoded.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let (train_idx, val_idx) = split_indices(encoded.len())?;

    // validation batches are masked once so epoch losses are comparable
    let val_batches: Vec<corpus::MaskedBatch> = val_idx
        .chunks(cfg.batch_size)
        .enumerate()
        .map(|(b, chunk)| {
            let rows: Vec<&Vec<u32>> = chunk.iter().map(|&i| &encoded[i]).collect();
            mask_with_retry(
                &pad_rows(&rows),
                model.cfg.vocab_size,
                cfg.mask_rate,
                derive_seed(cfg.seed, u64::MAX, b as u64),
            )
        })
        .collect::<Result<_>>()?;

    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut train_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..cfg.max_epochs {
        apply_freeze(model, epoch, cfg.freeze_epochs);
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut count_sum = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let rows: Vec<&Vec<u32>> = chunk.iter().map(|&i| &encoded[i]).collect();
            let masked = mask_with_retry(
                &pad_rows(&rows),
                model.cfg.vocab_size,
                cfg.mask_rate,
                derive_seed(cfg.seed, epoch as u64 + 2, b as u64),
            )?;
            let mut tape = Tape::new();
            let loss = mlm_batch_loss(&mut tape, model, &masked)
                .map_err(|e| non_finite_to_divergence(e, epoch))?;
            let loss_value = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            opt.step(&mut model.params, &grads.by_param());
            loss_sum += loss_value * masked.positions.len() as f64;
            count_sum += masked.positions.len();
        }
        train_losses.push(loss_sum / count_sum as f64);

        let mut vloss_sum = 0.0;
        let mut vcount = 0usize;
        for masked in &val_batches {
            let mut tape = Tape::no_grad();
            let loss = mlm_batch_loss(&mut tape, model, masked)
                .map_err(|e| non_finite_to_divergence(e, epoch))?;
            vloss_sum += tape.value(loss).item() * masked.positions.len() as f64;
            vcount += masked.positions.len();
        }
        let vloss = vloss_sum / vcount as f64;
        val_losses.push(vloss);

        let (improved, must_stop) = stopper.observe(epoch, vloss, &model.params);
        if improved {
            save_improvement(model, None, epoch, out_dir)?;
        }
        if must_stop {
            stop_reason = StopReason::EarlyStopping;
            break;
        }
    }

    if let Some(best) = stopper.best_params {
        model.params = best;
    }
    model.params.set_trainable(|_| true);
    Ok(TrainReport {
        train_losses,
        val_losses,
        best_epoch: stopper.best_epoch,
        stop_reason,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

// ── Stage 1: contrastive fine-tuning ────────────────────────────────────

struct EncodedTriplet {
    anchor: Vec<u32>,
    positive: Vec<u32>,
    negative: Vec<u32>,
}

struct TripletEmbeddings {
    anchor: NodeId,
    positive: NodeId,
    negative: NodeId,
}

/// Encode one triplet on the tape. For v3, pool weights from the anchor are
/// shared with the positive; the negative keeps its own.
fn encode_triplet(
    tape: &mut Tape,
    model: &Model,
    t: &EncodedTriplet,
    spec: &PoolingSpec,
) -> Result<TripletEmbeddings> {
    let gains = vec![1.0; model.cfg.k];
    let fa = encoder::forward(tape, &model.params, &model.cfg, &t.anchor, &gains)?;
    let fp = encoder::forward(tape, &model.params, &model.cfg, &t.positive, &gains)?;
    let fn_ = encoder::forward(tape, &model.params, &model.cfg, &t.negative, &gains)?;
    match spec.variant {
        PoolVariant::V3 => {
            let tau = spec.tau.expect("validated");
            let (sa, pi_a) = pool_v3_node(tape, &fa.o_sense, &fa.keep, tau, None)?;
            let (sp, _) = pool_v3_node(tape, &fp.o_sense, &fp.keep, tau, Some(pi_a))?;
            let (sn, _) = pool_v3_node(tape, &fn_.o_sense, &fn_.keep, tau, None)?;
            Ok(TripletEmbeddings { anchor: sa, positive: sp, negative: sn })
        }
        _ => {
            let sa = pool_node(tape, spec, &fa.o_sense, &fa.keep, None)?.s;
            let sp = pool_node(tape, spec, &fp.o_sense, &fp.keep, None)?.s;
            let sn = pool_node(tape, spec, &fn_.o_sense, &fn_.keep, None)?.s;
            Ok(TripletEmbeddings { anchor: sa, positive: sp, negative: sn })
        }
    }
}

/// Batch loss: InfoNCE uses the explicit negative plus other items'
/// positives as in-batch negatives; triplet applies the margin loss per item.
fn contrastive_batch_loss(
    tape: &mut Tape,
    model: &Model,
    batch: &[&EncodedTriplet],
    cfg: &TrainConfig,
    spec: &PoolingSpec,
) -> Result<NodeId> {
    let embs: Vec<TripletEmbeddings> = batch
        .iter()
        .map(|t| encode_triplet(tape, model, t, spec))
        .collect::<Result<_>>()?;
    let mut parts = Vec::with_capacity(embs.len());
    for (i, e) in embs.iter().enumerate() {
        let node = match cfg.loss {
            LossKind::InfoNce => {
                let mut negatives = vec![e.negative];
                for (j, other) in embs.iter().enumerate() {
                    if j != i {
                        negatives.push(other.positive);
                    }
                }
                infonce_node(tape, e.anchor, e.positive, &negatives, cfg.infonce_temperature)?
            }
            LossKind::Triplet => {
                triplet_node(tape, e.anchor, e.positive, e.negative, cfg.triplet_margin)?
            }
            LossKind::Mlm => {
                return Err(TrainError::Config("contrastive trainer got loss=mlm".into()))
            }
        };
        parts.push(node);
    }
    mean_node(tape, &parts)
}

/// Stage-1 trainer over contrastive triplets.
pub fn train_contrastive(
    model: &mut Model,
    triplets: &[Triplet],
    cfg: &TrainConfig,
    spec: &PoolingSpec,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    spec.validate()?;
    if cfg.loss == LossKind::Mlm {
        return Err(TrainError::Config("contrastive trainer needs loss=infonce or triplet".into()));
    }
    let start = Instant::now();
    let encode = |text: &str| -> Result<Vec<u32>> {
        let mut ids = model.vocab.encode(text);
        ids.truncate(model.cfg.max_len);
        if ids.is_empty() {
            return Err(TrainError::Config(format!("triplet text is empty: {text:?}")));
        }
        Ok(ids)
    };
    let encoded: Vec<EncodedTriplet> = triplets
        .iter()
        .map(|t| {
            Ok(EncodedTriplet {
                anchor: encode(&t.anchor)?,
                positive: encode(&t.positive)?,
                negative: encode(&t.negative)?,
            })
        })
        .collect::<Result<_>>()?;
    if encoded.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let (train_idx, val_idx) = split_indices(encoded.len())?;

    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut train_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..cfg.max_epochs {
        apply_freeze(model, epoch, cfg.freeze_epochs);
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EncodedTriplet> = chunk.iter().map(|&i| &encoded[i]).collect();
            let mut tape = Tape::new();
            let loss = contrastive_batch_loss(&mut tape, model, &batch, cfg, spec)
                .map_err(|e| non_finite_to_divergence(e, epoch))?;
            let loss_value = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            opt.step(&mut model.params, &grads.by_param());
            loss_sum += loss_value;
            batches += 1;
        }
        train_losses.push(loss_sum / batches as f64);

        let mut vloss = 0.0;
        let mut vbatches = 0usize;
        for chunk in val_idx.chunks(cfg.batch_size) {
            let batch: Vec<&EncodedTriplet> = chunk.iter().map(|&i| &encoded[i]).collect();
            let mut tape = Tape::no_grad();
            let loss = contrastive_batch_loss(&mut tape, model, &batch, cfg, spec)
                .map_err(|e| non_finite_to_divergence(e, epoch))?;
            vloss += tape.value(loss).item();
            vbatches += 1;
        }
        vloss /= vbatches as f64;
        val_losses.push(vloss);

        let (improved, must_stop) = stopper.observe(epoch, vloss, &model.params);
        if improved {
            save_improvement(model, Some(spec), epoch, out_dir)?;
        }
        if must_stop {
            stop_reason = StopReason::EarlyStopping;
            break;
        }
    }

    if let Some(best) = stopper.best_params {
        model.params = best;
    }
    model.params.set_trainable(|_| true);
    Ok(TrainReport {
        train_losses,
        val_losses,
        best_epoch: stopper.best_epoch,
        stop_reason,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

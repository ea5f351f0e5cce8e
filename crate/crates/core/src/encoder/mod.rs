//! Encoder forward pass: token embeddings, context-independent sense
//! construction, transformer contextualization, sense-specific mixture
//! weights, convex composition, and the tied MLM head.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Vocab, PAD};
use crate::numerics::NumericsError;
use crate::{NodeId, ParamStore, Tape, Tensor};

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("token id {id} out of range (vocab size {vocab})")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {n} exceeds max_len {max_len}")]
    TooLong { n: usize, max_len: usize },
    #[error("sequence is empty or all PAD")]
    EmptyInput,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Sense count per token.
    pub k: usize,
    /// Model width; must be divisible by `k` and by `n_heads`.
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(EncoderError::Config("k must be >= 1".into()));
        }
        if self.d == 0 || self.d % self.k != 0 {
            return Err(EncoderError::Config(format!(
                "d ({}) must be a positive multiple of k ({})",
                self.d, self.k
            )));
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(EncoderError::Config(format!(
                "d ({}) must be a positive multiple of n_heads ({})",
                self.d, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(EncoderError::Config("max_len must be >= 2".into()));
        }
        if self.vocab_size < 6 {
            return Err(EncoderError::Config("vocab_size must be >= 6".into()));
        }
        Ok(())
    }

    /// Width of each sense-specific query/key projection.
    pub fn sense_dim(&self) -> usize {
        self.d / self.k
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }
}

/// A trained or trainable model: config, parameters, vocabulary.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub vocab: Vocab,
}

impl Model {
    /// Fresh model with normal(0, 0.02) weights, zero biases, unit norms.
    /// `cfg.vocab_size` is set from the vocabulary.
    pub fn new(mut cfg: ModelConfig, vocab: Vocab, seed: u64) -> Result<Model> {
        cfg.vocab_size = vocab.len();
        cfg.validate()?;
        let params = init_params(&cfg, seed);
        Ok(Model { cfg, params, vocab })
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two ChaCha uniforms
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn weight(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| 0.02 * normal(rng)).collect();
    Tensor::from_vec(shape, data).expect("weight shape")
}

/// Build the full parameter set in a fixed construction order.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let (d, k) = (cfg.d, cfg.k);

    p.insert("embed.tok", weight(&mut rng, vec![cfg.vocab_size, d]));
    p.insert("embed.pos", weight(&mut rng, vec![cfg.max_len, d]));

    p.insert("sense.w1", weight(&mut rng, vec![d, d]));
    p.insert("sense.b1", Tensor::zeros(vec![d]));
    p.insert("sense.w2", weight(&mut rng, vec![d, k * d]));
    p.insert("sense.b2", Tensor::zeros(vec![k * d]));

    for layer in 0..cfg.n_layers {
        let pre = format!("layer{layer}");
        p.insert(&format!("{pre}.ln1.gamma"), Tensor::full(vec![d], 1.0));
        p.insert(&format!("{pre}.ln1.beta"), Tensor::zeros(vec![d]));
        for name in ["wq", "wk", "wv", "wo"] {
            p.insert(&format!("{pre}.attn.{name}"), weight(&mut rng, vec![d, d]));
        }
        // no key bias: a shared key offset cancels inside the row softmax
        for name in ["bq", "bv", "bo"] {
            p.insert(&format!("{pre}.attn.{name}"), Tensor::zeros(vec![d]));
        }
        p.insert(&format!("{pre}.ln2.gamma"), Tensor::full(vec![d], 1.0));
        p.insert(&format!("{pre}.ln2.beta"), Tensor::zeros(vec![d]));
        p.insert(&format!("{pre}.ff.w1"), weight(&mut rng, vec![d, 4 * d]));
        p.insert(&format!("{pre}.ff.b1"), Tensor::zeros(vec![4 * d]));
        p.insert(&format!("{pre}.ff.w2"), weight(&mut rng, vec![4 * d, d]));
        p.insert(&format!("{pre}.ff.b2"), Tensor::zeros(vec![d]));
    }
    if cfg.n_layers > 0 {
        p.insert("final.gamma", Tensor::full(vec![d], 1.0));
        p.insert("final.beta", Tensor::zeros(vec![d]));
    }

    let sd = cfg.sense_dim();
    for l in 0..k {
        p.insert(&format!("senseattn.q{l}"), weight(&mut rng, vec![d, sd]));
        p.insert(&format!("senseattn.k{l}"), weight(&mut rng, vec![d, sd]));
    }

    p.insert("mlm.bias", Tensor::zeros(vec![cfg.vocab_size]));
    p
}

/// Parameters trained while the backbone is frozen: the sense construction
/// block, the sense attention projections, and the MLM head bias.
pub fn is_head_param(name: &str) -> bool {
    name.starts_with("sense.") || name.starts_with("senseattn.") || name.starts_with("mlm.")
}

fn check_ids(cfg: &ModelConfig, ids: &[u32]) -> Result<Vec<bool>> {
    if ids.is_empty() {
        return Err(EncoderError::EmptyInput);
    }
    if ids.len() > cfg.max_len {
        return Err(EncoderError::TooLong { n: ids.len(), max_len: cfg.max_len });
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(EncoderError::TokenOutOfRange { id: bad, vocab: cfg.vocab_size });
    }
    let keep: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
    if keep.iter().all(|&k| !k) {
        return Err(EncoderError::EmptyInput);
    }
    Ok(keep)
}

/// Token embedding lookup e_i.
pub fn token_embeddings(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    ids: &[u32],
) -> Result<NodeId> {
    check_ids(cfg, ids)?;
    let e = tape.param("embed.tok", store.get("embed.tok").expect("embed.tok"))?;
    let rows: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    Ok(tape.gather_rows(e, &rows)?)
}

fn dense(
    tape: &mut Tape,
    store: &ParamStore,
    x: NodeId,
    w_name: &str,
    b_name: &str,
) -> Result<NodeId> {
    let w = tape.param(w_name, store.get(w_name).expect("dense weight"))?;
    let b = tape.param(b_name, store.get(b_name).expect("dense bias"))?;
    let xw = tape.matmul(x, w)?;
    Ok(tape.add_row(xw, b)?)
}

/// Context-independent sense construction: a two-layer GELU feed-forward
/// map from each token embedding to k sense vectors, laid out (n, k*d).
/// Position-independent by construction.
pub fn sense_construct(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    ids: &[u32],
) -> Result<NodeId> {
    let e = token_embeddings(tape, store, cfg, ids)?;
    let h1 = dense(tape, store, e, "sense.w1", "sense.b1")?;
    let h1 = tape.gelu(h1)?;
    Ok(dense(tape, store, h1, "sense.w2", "sense.b2")?)
}

fn layer_norm_named(
    tape: &mut Tape,
    store: &ParamStore,
    x: NodeId,
    gamma: &str,
    beta: &str,
) -> Result<NodeId> {
    let g = tape.param(gamma, store.get(gamma).expect("ln gamma"))?;
    let b = tape.param(beta, store.get(beta).expect("ln beta"))?;
    Ok(tape.layer_norm(x, g, b)?)
}

/// Bidirectional pre-layernorm transformer over the token embeddings with
/// learned absolute positions. PAD columns are masked out of attention.
/// With zero layers this is the definitional base case H = e + pos.
pub fn contextualize(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    ids: &[u32],
) -> Result<NodeId> {
    let keep = check_ids(cfg, ids)?;
    let n = ids.len();
    let mask: Vec<bool> = keep.iter().map(|&k| !k).collect();
    let any_masked = mask.iter().any(|&m| m);

    let e = token_embeddings(tape, store, cfg, ids)?;
    let pos_table = tape.param("embed.pos", store.get("embed.pos").expect("embed.pos"))?;
    let rows: Vec<usize> = (0..n).collect();
    let pos = tape.gather_rows(pos_table, &rows)?;
    let mut x = tape.add(e, pos)?;

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for layer in 0..cfg.n_layers {
        let pre = format!("layer{layer}");
        let ln1 = layer_norm_named(tape, store, x, &format!("{pre}.ln1.gamma"), &format!("{pre}.ln1.beta"))?;
        let q = dense(tape, store, ln1, &format!("{pre}.attn.wq"), &format!("{pre}.attn.bq"))?;
        let wk = tape.param(&format!("{pre}.attn.wk"), store.get(&format!("{pre}.attn.wk")).expect("wk"))?;
        let k = tape.matmul(ln1, wk)?;
        let v = dense(tape, store, ln1, &format!("{pre}.attn.wv"), &format!("{pre}.attn.bv"))?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores, 1.0, if any_masked { Some(mask.clone()) } else { None })?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let proj = dense(tape, store, ctx, &format!("{pre}.attn.wo"), &format!("{pre}.attn.bo"))?;
        x = tape.add(x, proj)?;

        let ln2 = layer_norm_named(tape, store, x, &format!("{pre}.ln2.gamma"), &format!("{pre}.ln2.beta"))?;
        let f1 = dense(tape, store, ln2, &format!("{pre}.ff.w1"), &format!("{pre}.ff.b1"))?;
        let f1 = tape.gelu(f1)?;
        let f2 = dense(tape, store, f1, &format!("{pre}.ff.w2"), &format!("{pre}.ff.b2"))?;
        x = tape.add(x, f2)?;
    }
    if cfg.n_layers > 0 {
        x = layer_norm_named(tape, store, x, "final.gamma", "final.beta")?;
    }
    Ok(x)
}

/// Per-sense source-position attention: for each sense l,
/// alpha_l[i, j] = softmax_j((Q_l h_i) . (K_l h_j) / sqrt(d/k))
/// with PAD columns masked to zero weight.
pub fn mixture_weights(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    h: NodeId,
    keep: &[bool],
) -> Result<Vec<NodeId>> {
    let sd = cfg.sense_dim();
    let scale = 1.0 / (sd as f64).sqrt();
    let mask: Vec<bool> = keep.iter().map(|&k| !k).collect();
    let any_masked = mask.iter().any(|&m| m);
    let mut alphas = Vec::with_capacity(cfg.k);
    for l in 0..cfg.k {
        let qn = format!("senseattn.q{l}");
        let kn = format!("senseattn.k{l}");
        let wq = tape.param(&qn, store.get(&qn).expect("sense q"))?;
        let wk = tape.param(&kn, store.get(&kn).expect("sense k"))?;
        let hq = tape.matmul(h, wq)?;
        let hk = tape.matmul(h, wk)?;
        let hkt = tape.transpose(hk)?;
        let logits = tape.matmul(hq, hkt)?;
        let logits = tape.scale(logits, scale)?;
        let alpha = tape.softmax(logits, 1.0, if any_masked { Some(mask.clone()) } else { None })?;
        alphas.push(alpha);
    }
    Ok(alphas)
}

/// Convex composition: o_sense[i, l] = (g_l / k) * sum_j alpha_l[i, j] * C[j, l]
/// and o = sum_l o_sense[., l]. The 1/k factor makes the implied weights
/// {alpha/k} sum to one per position; `gains` (default all-ones) rescale
/// individual senses, with gain 0 ablating a sense entirely.
pub fn compose(
    tape: &mut Tape,
    cfg: &ModelConfig,
    alpha: &[NodeId],
    senses: NodeId,
    gains: &[f64],
) -> Result<(Vec<NodeId>, NodeId)> {
    if alpha.len() != cfg.k || gains.len() != cfg.k {
        return Err(EncoderError::Config(format!(
            "expected {} senses, got {} alphas and {} gains",
            cfg.k,
            alpha.len(),
            gains.len()
        )));
    }
    let d = cfg.d;
    let inv_k = 1.0 / cfg.k as f64;
    let mut o_sense = Vec::with_capacity(cfg.k);
    for l in 0..cfg.k {
        let c_l = tape.slice_cols(senses, l * d, d)?;
        let mixed = tape.matmul(alpha[l], c_l)?;
        o_sense.push(tape.scale(mixed, gains[l] * inv_k)?);
    }
    let mut o = o_sense[0];
    for &part in &o_sense[1..] {
        o = tape.add(o, part)?;
    }
    Ok((o_sense, o))
}

/// Vocabulary logits with the projection tied to the token embedding matrix.
pub fn mlm_logits(
    tape: &mut Tape,
    store: &ParamStore,
    o: NodeId,
) -> Result<NodeId> {
    let e = tape.param("embed.tok", store.get("embed.tok").expect("embed.tok"))?;
    let et = tape.transpose(e)?;
    let logits = tape.matmul(o, et)?;
    let bias = tape.param("mlm.bias", store.get("mlm.bias").expect("mlm.bias"))?;
    Ok(tape.add_row(logits, bias)?)
}

/// Handles into one full forward pass.
pub struct ForwardPass {
    pub n: usize,
    pub keep: Vec<bool>,
    pub senses: NodeId,
    pub h: NodeId,
    pub alpha: Vec<NodeId>,
    pub o_sense: Vec<NodeId>,
    pub o: NodeId,
}

/// Full pipeline: senses, contextual states, mixture weights, composition.
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    ids: &[u32],
    gains: &[f64],
) -> Result<ForwardPass> {
    let keep = check_ids(cfg, ids)?;
    let senses = sense_construct(tape, store, cfg, ids)?;
    let h = contextualize(tape, store, cfg, ids)?;
    let alpha = mixture_weights(tape, store, cfg, h, &keep)?;
    let (o_sense, o) = compose(tape, cfg, &alpha, senses, gains)?;
    Ok(ForwardPass { n: ids.len(), keep, senses, h, alpha, o_sense, o })
}

/// Context-independent sense vectors for one input, as values.
#[derive(Clone, Debug)]
pub struct SenseBank {
    pub k: usize,
    pub d: usize,
    /// (n, k*d): row i holds the k sense vectors of token i.
    pub c: Tensor,
}

impl SenseBank {
    pub fn sense(&self, i: usize, l: usize) -> &[f64] {
        &self.c.row(i)[l * self.d..(l + 1) * self.d]
    }
}

/// Composed token representations with their per-sense components.
#[derive(Clone, Debug)]
pub struct TokenComposition {
    /// (n, d) composed vectors o_i.
    pub o: Tensor,
    /// k tensors of shape (n, d); o = sum over senses.
    pub o_sense: Vec<Tensor>,
    /// Non-PAD flags per position.
    pub keep: Vec<bool>,
}

/// Run the forward pass without gradients and extract values.
pub fn composition(model: &Model, ids: &[u32], gains: &[f64]) -> Result<TokenComposition> {
    let mut tape = Tape::no_grad();
    let fwd = forward(&mut tape, &model.params, &model.cfg, ids, gains)?;
    Ok(TokenComposition {
        o: tape.value(fwd.o).clone(),
        o_sense: fwd.o_sense.iter().map(|&id| tape.value(id).clone()).collect(),
        keep: fwd.keep,
    })
}

/// Sense bank values for one input.
pub fn sense_bank(model: &Model, ids: &[u32]) -> Result<SenseBank> {
    let mut tape = Tape::no_grad();
    let senses = sense_construct(&mut tape, &model.params, &model.cfg, ids)?;
    Ok(SenseBank { k: model.cfg.k, d: model.cfg.d, c: tape.value(senses).clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;

    fn tiny_cfg(k: usize, d: usize, n_layers: usize, n_heads: usize) -> ModelConfig {
        ModelConfig { k, d, n_layers, n_heads, vocab_size: 12, max_len: 8 }
    }

    fn tiny_vocab() -> Vocab {
        let texts: Vec<String> =
            vec!["a b c d e f g".into()];
        Vocab::build(&texts, 12).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(tiny_cfg(2, 8, 1, 2).validate().is_ok());
        assert!(tiny_cfg(0, 8, 1, 2).validate().is_err());
        assert!(tiny_cfg(3, 8, 1, 2).validate().is_err());
        assert!(tiny_cfg(2, 8, 1, 3).validate().is_err());
        let mut c = tiny_cfg(2, 8, 1, 2);
        c.max_len = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sense_rows_depend_only_on_token_id() {
        let model = Model::new(tiny_cfg(2, 8, 1, 2), tiny_vocab(), 3).unwrap();
        let bank = sense_bank(&model, &[5, 6, 7, 8, 9, 5]).unwrap();
        assert_eq!(bank.c.row(0), bank.c.row(5));
        assert_ne!(bank.c.row(0), bank.c.row(1));
    }

    #[test]
    fn sense_construct_k1_is_a_plain_embedding_map() {
        let model = Model::new(tiny_cfg(1, 8, 1, 2), tiny_vocab(), 3).unwrap();
        let bank = sense_bank(&model, &[5, 6]).unwrap();
        assert_eq!(bank.c.shape(), &[2, 8]);
        // the map factors through the token id alone
        let again = sense_bank(&model, &[6]).unwrap();
        assert_eq!(bank.c.row(1), again.c.row(0));
    }

    #[test]
    fn sense_construct_matches_naive_loops() {
        let model = Model::new(tiny_cfg(2, 4, 0, 2), tiny_vocab(), 9).unwrap();
        let ids = [5u32, 7];
        let bank = sense_bank(&model, &ids).unwrap();

        // naive oracle: e = E[id]; h = gelu(e W1 + b1); c = h W2 + b2
        let p = &model.params;
        let (e, w1, b1, w2, b2) = (
            p.get("embed.tok").unwrap(),
            p.get("sense.w1").unwrap(),
            p.get("sense.b1").unwrap(),
            p.get("sense.w2").unwrap(),
            p.get("sense.b2").unwrap(),
        );
        let d = 4;
        let kd = 8;
        let gelu = |x: f64| 0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh());
        for (r, &id) in ids.iter().enumerate() {
            let erow = e.row(id as usize);
            let mut h = vec![0.0; d];
            for j in 0..d {
                let mut s = b1.data()[j];
                for p2 in 0..d {
                    s += erow[p2] * w1.get2(p2, j);
                }
                h[j] = gelu(s);
            }
            for j in 0..kd {
                let mut s = b2.data()[j];
                for p2 in 0..d {
                    s += h[p2] * w2.get2(p2, j);
                }
                assert!((bank.c.get2(r, j) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn contextualize_zero_layers_is_embeddings_plus_positions() {
        let model = Model::new(tiny_cfg(2, 8, 0, 2), tiny_vocab(), 5).unwrap();
        let ids = [5u32, 6, 7];
        let mut tape = Tape::no_grad();
        let h = contextualize(&mut tape, &model.params, &model.cfg, &ids).unwrap();
        let hv = tape.value(h);
        let e = model.params.get("embed.tok").unwrap();
        let p = model.params.get("embed.pos").unwrap();
        for (i, &id) in ids.iter().enumerate() {
            for j in 0..8 {
                let want = e.get2(id as usize, j) + p.get2(i, j);
                assert!((hv.get2(i, j) - want).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn pad_suffix_does_not_change_real_token_states() {
        let model = Model::new(tiny_cfg(2, 8, 2, 2), tiny_vocab(), 5).unwrap();
        let short = [5u32, 6];
        let padded = [5u32, 6, PAD, PAD];
        let mut t1 = Tape::no_grad();
        let h1 = contextualize(&mut t1, &model.params, &model.cfg, &short).unwrap();
        let mut t2 = Tape::no_grad();
        let h2 = contextualize(&mut t2, &model.params, &model.cfg, &padded).unwrap();
        for i in 0..2 {
            for j in 0..8 {
                let a = t1.value(h1).get2(i, j);
                let b = t2.value(h2).get2(i, j);
                assert!((a - b).abs() <= 1e-9, "H[{i},{j}]: {a} vs {b}");
            }
        }
    }

    #[test]
    fn contextualize_rejects_too_long() {
        let model = Model::new(tiny_cfg(2, 8, 1, 2), tiny_vocab(), 5).unwrap();
        let ids = vec![5u32; 9];
        let mut tape = Tape::no_grad();
        assert!(matches!(
            contextualize(&mut tape, &model.params, &model.cfg, &ids),
            Err(EncoderError::TooLong { .. })
        ));
    }

    #[test]
    fn one_layer_one_head_matches_naive_attention_oracle() {
        let cfg = ModelConfig { k: 1, d: 4, n_layers: 1, n_heads: 1, vocab_size: 12, max_len: 8 };
        let model = Model::new(cfg, tiny_vocab(), 21).unwrap();
        let ids = [5u32, 6, 7];
        let mut tape = Tape::no_grad();
        let h = contextualize(&mut tape, &model.params, &model.cfg, &ids).unwrap();
        let got = tape.value(h);

        // naive scalar-loop oracle for the full 1-layer pre-LN block
        let p = &model.params;
        let d = 4usize;
        let n = ids.len();
        let gelu =
            |x: f64| 0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh());
        let ln = |row: &[f64], gamma: &[f64], beta: &[f64]| -> Vec<f64> {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
                .collect()
        };
        let linear = |x: &[Vec<f64>], w: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| {
                    (0..w.cols())
                        .map(|j| {
                            let mut s = b.data()[j];
                            for p2 in 0..w.rows() {
                                s += row[p2] * w.get2(p2, j);
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        };

        let e = p.get("embed.tok").unwrap();
        let pos = p.get("embed.pos").unwrap();
        let mut x: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (0..d).map(|j| e.get2(id as usize, j) + pos.get2(i, j)).collect())
            .collect();

        let g1 = p.get("layer0.ln1.gamma").unwrap().data();
        let b1 = p.get("layer0.ln1.beta").unwrap().data();
        let ln1: Vec<Vec<f64>> = x.iter().map(|r| ln(r, g1, b1)).collect();
        let q = linear(&ln1, p.get("layer0.attn.wq").unwrap(), p.get("layer0.attn.bq").unwrap());
        let zero_bias = Tensor::zeros(vec![4]);
        let k = linear(&ln1, p.get("layer0.attn.wk").unwrap(), &zero_bias);
        let v = linear(&ln1, p.get("layer0.attn.wv").unwrap(), p.get("layer0.attn.bv").unwrap());
        let scale = 1.0 / (d as f64).sqrt();
        let mut ctx = vec![vec![0.0; d]; n];
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale)
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..n {
                let a = exps[j] / z;
                for c in 0..d {
                    ctx[i][c] += a * v[j][c];
                }
            }
        }
        let proj = linear(&ctx, p.get("layer0.attn.wo").unwrap(), p.get("layer0.attn.bo").unwrap());
        for i in 0..n {
            for c in 0..d {
                x[i][c] += proj[i][c];
            }
        }
        let g2 = p.get("layer0.ln2.gamma").unwrap().data();
        let b2 = p.get("layer0.ln2.beta").unwrap().data();
        let ln2: Vec<Vec<f64>> = x.iter().map(|r| ln(r, g2, b2)).collect();
        let f1 = linear(&ln2, p.get("layer0.ff.w1").unwrap(), p.get("layer0.ff.b1").unwrap());
        let f1: Vec<Vec<f64>> = f1.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        let f2 = linear(&f1, p.get("layer0.ff.w2").unwrap(), p.get("layer0.ff.b2").unwrap());
        for i in 0..n {
            for c in 0..d {
                x[i][c] += f2[i][c];
            }
        }
        let gf = p.get("final.gamma").unwrap().data();
        let bf = p.get("final.beta").unwrap().data();
        let out: Vec<Vec<f64>> = x.iter().map(|r| ln(r, gf, bf)).collect();

        for i in 0..n {
            for j in 0..d {
                assert!(
                    (got.get2(i, j) - out[i][j]).abs() <= 1e-10,
                    "H[{i},{j}]: {} vs {}",
                    got.get2(i, j),
                    out[i][j]
                );
            }
        }
    }

    #[test]
    fn mixture_weights_singleton_and_uniform_cases() {
        let cfg = tiny_cfg(2, 8, 0, 2);
        let model = Model::new(cfg.clone(), tiny_vocab(), 13).unwrap();
        // n = 1: softmax of a single unmasked column is 1
        let mut tape = Tape::no_grad();
        let fwd = forward(&mut tape, &model.params, &model.cfg, &[5], &[1.0, 1.0]).unwrap();
        for &a in &fwd.alpha {
            assert!((tape.value(a).item() - 1.0).abs() <= 1e-12);
        }

        // zero Q/K: uniform over non-PAD columns
        let mut model2 = Model::new(cfg, tiny_vocab(), 13).unwrap();
        for l in 0..2 {
            *model2.params.get_mut(&format!("senseattn.q{l}")).unwrap() =
                Tensor::zeros(vec![8, 4]).with_grad();
            *model2.params.get_mut(&format!("senseattn.k{l}")).unwrap() =
                Tensor::zeros(vec![8, 4]).with_grad();
        }
        let mut tape2 = Tape::no_grad();
        let fwd2 =
            forward(&mut tape2, &model2.params, &model2.cfg, &[5, 6, 7, PAD], &[1.0, 1.0]).unwrap();
        for &a in &fwd2.alpha {
            let av = tape2.value(a);
            for i in 0..4 {
                for j in 0..3 {
                    assert!((av.get2(i, j) - 1.0 / 3.0).abs() <= 1e-12);
                }
                assert_eq!(av.get2(i, 3), 0.0, "PAD column carries weight");
            }
        }
    }

    #[test]
    fn mixture_weights_match_per_sense_softmax_oracle() {
        let cfg = tiny_cfg(2, 8, 1, 2);
        let model = Model::new(cfg, tiny_vocab(), 17).unwrap();
        let ids = [5u32, 6, 7];
        let mut tape = Tape::no_grad();
        let fwd = forward(&mut tape, &model.params, &model.cfg, &ids, &[1.0, 1.0]).unwrap();
        let hv = tape.value(fwd.h).clone();
        let sd = model.cfg.sense_dim();
        for l in 0..2 {
            let wq = model.params.get(&format!("senseattn.q{l}")).unwrap();
            let wk = model.params.get(&format!("senseattn.k{l}")).unwrap();
            let proj = |row: &[f64], w: &Tensor| -> Vec<f64> {
                (0..sd)
                    .map(|j| (0..8).map(|p| row[p] * w.get2(p, j)).sum::<f64>())
                    .collect()
            };
            let alpha = tape.value(fwd.alpha[l]);
            for i in 0..3 {
                let qi = proj(hv.row(i), wq);
                let logits: Vec<f64> = (0..3)
                    .map(|j| {
                        let kj = proj(hv.row(j), wk);
                        qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (sd as f64).sqrt()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..3 {
                    assert!((alpha.get2(i, j) - exps[j] / z).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn compose_base_cases_and_oracle() {
        // n=1, k=1: o equals the single sense vector
        let cfg1 = ModelConfig { k: 1, d: 4, n_layers: 0, n_heads: 1, vocab_size: 12, max_len: 8 };
        let model1 = Model::new(cfg1, tiny_vocab(), 2).unwrap();
        let comp = composition(&model1, &[5], &[1.0]).unwrap();
        let bank = sense_bank(&model1, &[5]).unwrap();
        for j in 0..4 {
            assert!((comp.o.get2(0, j) - bank.sense(0, 0)[j]).abs() <= 1e-12);
        }

        // convexity consequence: identical sense vectors for every token
        // and sense make o_i that exact vector
        let cfg = tiny_cfg(2, 4, 0, 2);
        let mut model = Model::new(cfg, tiny_vocab(), 2).unwrap();
        // force C rows constant: zero the sense map, bias = v tiled
        *model.params.get_mut("sense.w2").unwrap() = Tensor::zeros(vec![4, 8]).with_grad();
        let v = [0.3, -0.7, 1.1, 0.25];
        let tiled: Vec<f64> = v.iter().chain(v.iter()).cloned().collect();
        *model.params.get_mut("sense.b2").unwrap() =
            Tensor::from_vec(vec![8], tiled).unwrap().with_grad();
        let comp = composition(&model, &[5, 6, 7], &[1.0, 1.0]).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((comp.o.get2(i, j) - v[j]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn compose_matches_double_loop_oracle() {
        let cfg = ModelConfig { k: 2, d: 6, n_layers: 1, n_heads: 2, vocab_size: 12, max_len: 8 };
        let model = Model::new(cfg, tiny_vocab(), 31).unwrap();
        let ids = [5u32, 6];
        let mut tape = Tape::no_grad();
        let fwd = forward(&mut tape, &model.params, &model.cfg, &ids, &[1.0, 1.0]).unwrap();
        let senses = tape.value(fwd.senses).clone();
        for l in 0..2 {
            let alpha = tape.value(fwd.alpha[l]).clone();
            let ov = tape.value(fwd.o_sense[l]);
            for i in 0..2 {
                for c in 0..6 {
                    let mut s = 0.0;
                    for j in 0..2 {
                        s += alpha.get2(i, j) * senses.get2(j, l * 6 + c);
                    }
                    s *= 0.5; // 1/k
                    assert!((ov.get2(i, c) - s).abs() <= 1e-12);
                }
            }
        }
        // o = sum over senses
        let o = tape.value(fwd.o);
        for i in 0..2 {
            for c in 0..6 {
                let want: f64 =
                    (0..2).map(|l| tape.value(fwd.o_sense[l]).get2(i, c)).sum();
                assert!((o.get2(i, c) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn composition_weights_are_convex_per_position() {
        let cfg = tiny_cfg(4, 8, 1, 2);
        let model = Model::new(cfg, tiny_vocab(), 41).unwrap();
        let ids = [5u32, 6, 7, PAD];
        let mut tape = Tape::no_grad();
        let fwd =
            forward(&mut tape, &model.params, &model.cfg, &ids, &[1.0; 4]).unwrap();
        for i in 0..4 {
            let mut total = 0.0;
            for l in 0..4 {
                let av = tape.value(fwd.alpha[l]);
                for j in 0..4 {
                    let w = av.get2(i, j) / 4.0;
                    assert!(w >= -1e-12);
                    total += w;
                }
            }
            assert!((total - 1.0).abs() <= 1e-9, "position {i}: weight sum {total}");
        }
    }

    #[test]
    fn mlm_logits_zero_input_is_bias_and_head_is_tied() {
        let model = Model::new(tiny_cfg(2, 8, 0, 2), tiny_vocab(), 3).unwrap();
        assert!(model.params.get("mlm.weight").is_none()); // tied: no separate matrix
        let mut tape = Tape::no_grad();
        let zero = tape.leaf(Tensor::zeros(vec![2, 8])).unwrap();
        let logits = mlm_logits(&mut tape, &model.params, zero).unwrap();
        let bias = model.params.get("mlm.bias").unwrap();
        let lv = tape.value(logits);
        for r in 0..2 {
            for j in 0..12 {
                assert_eq!(lv.get2(r, j), bias.data()[j]);
            }
        }
    }

    #[test]
    fn mlm_logits_match_matmul_oracle() {
        let model = Model::new(tiny_cfg(2, 4, 0, 2), tiny_vocab(), 8).unwrap();
        let ids = [5u32, 9];
        let mut tape = Tape::no_grad();
        let fwd = forward(&mut tape, &model.params, &model.cfg, &ids, &[1.0, 1.0]).unwrap();
        let logits = mlm_logits(&mut tape, &model.params, fwd.o).unwrap();
        let lv = tape.value(logits);
        let ov = tape.value(fwd.o);
        let e = model.params.get("embed.tok").unwrap();
        let b = model.params.get("mlm.bias").unwrap();
        for i in 0..2 {
            for vcb in 0..12 {
                let mut s = b.data()[vcb];
                for c in 0..4 {
                    s += ov.get2(i, c) * e.get2(vcb, c);
                }
                assert!((lv.get2(i, vcb) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn permuting_positions_permutes_sense_rows() {
        let model = Model::new(tiny_cfg(2, 8, 1, 2), tiny_vocab(), 3).unwrap();
        let a = sense_bank(&model, &[5, 6, 7]).unwrap();
        let b = sense_bank(&model, &[7, 5, 6]).unwrap();
        assert_eq!(a.c.row(0), b.c.row(1));
        assert_eq!(a.c.row(1), b.c.row(2));
        assert_eq!(a.c.row(2), b.c.row(0));
    }

    #[test]
    fn token_out_of_range_is_rejected() {
        let model = Model::new(tiny_cfg(2, 8, 0, 2), tiny_vocab(), 3).unwrap();
        assert!(matches!(
            sense_bank(&model, &[5, 99]),
            Err(EncoderError::TokenOutOfRange { .. })
        ));
    }
}

//! Sentence embeddings from token compositions.
//!
//! Three pooling laws over the per-sense components o_i^(l):
//! v1 averages the composed vectors uniformly, v2 keeps only the dominant
//! sense, v3 blends senses with softmax(S/tau) over the per-sense total
//! activation S. As tau grows v3 approaches v1 up to a global 1/k scale
//! (direction-equal, see `pool_v3`); as tau shrinks it approaches v2.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{self, EncoderError, Model, TokenComposition};
use crate::numerics::NumericsError;
use crate::{NodeId, Tape, Tensor};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("invalid pooling spec: {0}")]
    Spec(String),
    #[error("no non-PAD tokens to pool")]
    AllPad,
    #[error("empty text")]
    EmptyText,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, PoolError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolVariant {
    V1,
    V2,
    V3,
}

impl std::fmt::Display for PoolVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PoolVariant::V1 => write!(f, "v1"),
            PoolVariant::V2 => write!(f, "v2"),
            PoolVariant::V3 => write!(f, "v3"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolingSpec {
    pub variant: PoolVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

impl PoolingSpec {
    pub fn v1() -> Self {
        PoolingSpec { variant: PoolVariant::V1, tau: None }
    }

    pub fn v2() -> Self {
        PoolingSpec { variant: PoolVariant::V2, tau: None }
    }

    pub fn v3(tau: f64) -> Self {
        PoolingSpec { variant: PoolVariant::V3, tau: Some(tau) }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.variant, self.tau) {
            (PoolVariant::V3, Some(t)) if t > 0.0 => Ok(()),
            (PoolVariant::V3, Some(t)) => {
                Err(PoolError::Spec(format!("tau must be > 0, got {t}")))
            }
            (PoolVariant::V3, None) => Err(PoolError::Spec("v3 requires tau".into())),
            (_, Some(_)) => Err(PoolError::Spec("tau is only valid for v3".into())),
            (_, None) => Ok(()),
        }
    }
}

/// Per-sense total activation S_l = sum over non-PAD i of ||o_i^(l)||.
#[derive(Clone, Debug)]
pub struct SenseNorms(pub Vec<f64>);

#[derive(Clone, Debug, Serialize)]
pub struct PoolingMeta {
    pub variant: PoolVariant,
    pub tau: Option<f64>,
    /// Softmax pool weights (v3 only).
    pub pi: Option<Vec<f64>>,
    /// Dominant sense index (v2 only).
    pub l_star: Option<usize>,
    /// Sense gains that were applied before pooling.
    pub gains: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SentenceEmbedding {
    pub s: Vec<f64>,
    pub meta: PoolingMeta,
}

// ── Graph builders (shared by training and the value-level API) ────────

fn keep_count(keep: &[bool]) -> Result<usize> {
    let m = keep.iter().filter(|&&k| k).count();
    if m == 0 {
        return Err(PoolError::AllPad);
    }
    Ok(m)
}

fn mean_row(tape: &mut Tape, keep: &[bool]) -> Result<NodeId> {
    let m = keep_count(keep)? as f64;
    let w: Vec<f64> = keep.iter().map(|&k| if k { 1.0 / m } else { 0.0 }).collect();
    Ok(tape.constant(Tensor::from_vec(vec![1, keep.len()], w)?)?)
}

fn ones_row(tape: &mut Tape, keep: &[bool]) -> Result<NodeId> {
    keep_count(keep)?;
    let w: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    Ok(tape.constant(Tensor::from_vec(vec![1, keep.len()], w)?)?)
}

/// Sense-norm vector as a (1, k) node.
pub fn sense_norms_node(tape: &mut Tape, o_sense: &[NodeId], keep: &[bool]) -> Result<NodeId> {
    let u = ones_row(tape, keep)?;
    let mut parts = Vec::with_capacity(o_sense.len());
    for &os in o_sense {
        let rn = tape.row_norms(os)?;
        parts.push(tape.matmul(u, rn)?);
    }
    Ok(tape.concat_cols(&parts)?)
}

/// Uniform mean of o_i over non-PAD positions; (1, d) node.
pub fn pool_v1_node(tape: &mut Tape, o_sense: &[NodeId], keep: &[bool]) -> Result<NodeId> {
    let w = mean_row(tape, keep)?;
    let mut o = o_sense[0];
    for &part in &o_sense[1..] {
        o = tape.add(o, part)?;
    }
    Ok(tape.matmul(w, o)?)
}

/// Dominant-sense mean. The argmax is a constant of the forward pass
/// (no gradient through selection); exact ties break toward the highest
/// sense index.
pub fn pool_v2_node(
    tape: &mut Tape,
    o_sense: &[NodeId],
    keep: &[bool],
) -> Result<(NodeId, usize)> {
    let norms = sense_norms_node(tape, o_sense, keep)?;
    let l_star = argmax_highest(tape.value(norms).data());
    let w = mean_row(tape, keep)?;
    let s = tape.matmul(w, o_sense[l_star])?;
    Ok((s, l_star))
}

/// Softmax-blended pooling s_tau; returns (s, pi). When `shared_pi` is
/// given (training-time sharing from the anchor) it replaces this input's
/// own pool weights.
pub fn pool_v3_node(
    tape: &mut Tape,
    o_sense: &[NodeId],
    keep: &[bool],
    tau: f64,
    shared_pi: Option<NodeId>,
) -> Result<(NodeId, NodeId)> {
    if tau <= 0.0 {
        return Err(PoolError::Spec(format!("tau must be > 0, got {tau}")));
    }
    let norms = sense_norms_node(tape, o_sense, keep)?;
    let own_pi = tape.softmax(norms, tau, None)?;
    let pi = shared_pi.unwrap_or(own_pi);
    let w = mean_row(tape, keep)?;
    let mut means = Vec::with_capacity(o_sense.len());
    for &os in o_sense {
        means.push(tape.matmul(w, os)?);
    }
    let per_sense = tape.concat_rows(&means)?;
    let s = tape.matmul(pi, per_sense)?;
    Ok((s, pi))
}

pub struct PooledNode {
    pub s: NodeId,
    pub pi: Option<NodeId>,
    pub l_star: Option<usize>,
}

/// Dispatch on the pooling spec.
pub fn pool_node(
    tape: &mut Tape,
    spec: &PoolingSpec,
    o_sense: &[NodeId],
    keep: &[bool],
    shared_pi: Option<NodeId>,
) -> Result<PooledNode> {
    spec.validate()?;
    match spec.variant {
        PoolVariant::V1 => {
            let s = pool_v1_node(tape, o_sense, keep)?;
            Ok(PooledNode { s, pi: None, l_star: None })
        }
        PoolVariant::V2 => {
            let (s, l_star) = pool_v2_node(tape, o_sense, keep)?;
            Ok(PooledNode { s, pi: None, l_star: Some(l_star) })
        }
        PoolVariant::V3 => {
            let (s, pi) = pool_v3_node(tape, o_sense, keep, spec.tau.unwrap(), shared_pi)?;
            Ok(PooledNode { s, pi: Some(pi), l_star: None })
        }
    }
}

fn argmax_highest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v >= values[best] {
            best = i;
        }
    }
    best
}

// ── Value-level API ─────────────────────────────────────────────────────

fn comp_leaves(tape: &mut Tape, comp: &TokenComposition) -> Result<Vec<NodeId>> {
    comp.o_sense
        .iter()
        .map(|t| Ok(tape.leaf(t.clone())?))
        .collect()
}

pub fn sense_norms(comp: &TokenComposition) -> Result<SenseNorms> {
    let mut tape = Tape::no_grad();
    let leaves = comp_leaves(&mut tape, comp)?;
    let node = sense_norms_node(&mut tape, &leaves, &comp.keep)?;
    Ok(SenseNorms(tape.value(node).data().to_vec()))
}

fn finish(
    tape: &Tape,
    s: NodeId,
    variant: PoolVariant,
    tau: Option<f64>,
    pi: Option<Vec<f64>>,
    l_star: Option<usize>,
    gains: Vec<f64>,
) -> SentenceEmbedding {
    SentenceEmbedding {
        s: tape.value(s).data().to_vec(),
        meta: PoolingMeta { variant, tau, pi, l_star, gains },
    }
}

pub fn pool_v1(comp: &TokenComposition) -> Result<SentenceEmbedding> {
    let mut tape = Tape::no_grad();
    let leaves = comp_leaves(&mut tape, comp)?;
    let s = pool_v1_node(&mut tape, &leaves, &comp.keep)?;
    let k = comp.o_sense.len();
    Ok(finish(&tape, s, PoolVariant::V1, None, None, None, vec![1.0; k]))
}

pub fn pool_v2(comp: &TokenComposition) -> Result<SentenceEmbedding> {
    let mut tape = Tape::no_grad();
    let leaves = comp_leaves(&mut tape, comp)?;
    let (s, l_star) = pool_v2_node(&mut tape, &leaves, &comp.keep)?;
    let k = comp.o_sense.len();
    Ok(finish(&tape, s, PoolVariant::V2, None, None, Some(l_star), vec![1.0; k]))
}

pub fn pool_v3(comp: &TokenComposition, tau: f64) -> Result<SentenceEmbedding> {
    let mut tape = Tape::no_grad();
    let leaves = comp_leaves(&mut tape, comp)?;
    let (s, pi) = pool_v3_node(&mut tape, &leaves, &comp.keep, tau, None)?;
    let pi_values = tape.value(pi).data().to_vec();
    let k = comp.o_sense.len();
    Ok(finish(&tape, s, PoolVariant::V3, Some(tau), Some(pi_values), None, vec![1.0; k]))
}

pub fn pool(comp: &TokenComposition, spec: &PoolingSpec) -> Result<SentenceEmbedding> {
    spec.validate()?;
    match spec.variant {
        PoolVariant::V1 => pool_v1(comp),
        PoolVariant::V2 => pool_v2(comp),
        PoolVariant::V3 => pool_v3(comp, spec.tau.unwrap()),
    }
}

/// Masked mean of each sense's components: the per-sense contribution to a
/// v1 embedding. Used by the decomposed embedding export.
pub fn sense_means(comp: &TokenComposition) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::no_grad();
    let leaves = comp_leaves(&mut tape, comp)?;
    let w = mean_row(&mut tape, &comp.keep)?;
    let mut out = Vec::with_capacity(leaves.len());
    for leaf in leaves {
        let m = tape.matmul(w, leaf)?;
        out.push(tape.value(m).data().to_vec());
    }
    Ok(out)
}

/// Full pipeline: tokenize, truncate to max_len, forward with sense gains
/// (default all-ones; a gain of 0 ablates that sense), pool.
pub fn encode_sentence(
    model: &Model,
    text: &str,
    spec: &PoolingSpec,
    gains: Option<&[f64]>,
) -> Result<SentenceEmbedding> {
    spec.validate()?;
    let default_gains = vec![1.0; model.cfg.k];
    let gains = gains.unwrap_or(&default_gains);
    if gains.len() != model.cfg.k {
        return Err(PoolError::Spec(format!(
            "expected {} gains, got {}",
            model.cfg.k,
            gains.len()
        )));
    }
    let mut ids = model.vocab.encode(text);
    if ids.is_empty() {
        return Err(PoolError::EmptyText);
    }
    ids.truncate(model.cfg.max_len);
    let comp = encoder::composition(model, &ids, gains)?;
    let mut emb = pool(&comp, spec)?;
    emb.meta.gains = gains.to_vec();
    Ok(emb)
}

/// Encode a batch of texts, optionally in parallel. Output order matches
/// input order and is identical for any thread count.
pub fn encode_batch(
    model: &Model,
    texts: &[String],
    spec: &PoolingSpec,
    gains: Option<&[f64]>,
    threads: usize,
) -> Result<Vec<SentenceEmbedding>> {
    let threads = threads.max(1);
    if threads == 1 || texts.len() < 2 {
        return texts.iter().map(|t| encode_sentence(model, t, spec, gains)).collect();
    }
    let mut slots: Vec<Option<Result<SentenceEmbedding>>> = Vec::new();
    slots.resize_with(texts.len(), || None);
    let chunk = texts.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (c, (texts_chunk, slots_chunk)) in
            texts.chunks(chunk).zip(slots.chunks_mut(chunk)).enumerate()
        {
            let _ = c;
            scope.spawn(move || {
                for (t, slot) in texts_chunk.iter().zip(slots_chunk.iter_mut()) {
                    *slot = Some(encode_sentence(model, t, spec, gains));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;
    use crate::encoder::ModelConfig;
    use proptest::prelude::*;

    fn comp_from(o_sense: Vec<Vec<Vec<f64>>>, keep: Vec<bool>) -> TokenComposition {
        let n = o_sense[0].len();
        let d = o_sense[0][0].len();
        let tensors: Vec<Tensor> = o_sense
            .iter()
            .map(|rows| {
                Tensor::from_vec(vec![n, d], rows.iter().flatten().cloned().collect()).unwrap()
            })
            .collect();
        let mut o = vec![0.0; n * d];
        for t in &tensors {
            for (acc, v) in o.iter_mut().zip(t.data()) {
                *acc += v;
            }
        }
        TokenComposition { o: Tensor::from_vec(vec![n, d], o).unwrap(), o_sense: tensors, keep }
    }

    #[test]
    fn sense_norms_base_cases() {
        let comp = comp_from(
            vec![vec![vec![0.0, 0.0]], vec![vec![0.0, 0.0]]],
            vec![true],
        );
        assert_eq!(sense_norms(&comp).unwrap().0, vec![0.0, 0.0]);

        let comp = comp_from(vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]], vec![true]);
        assert_eq!(sense_norms(&comp).unwrap().0, vec![1.0, 1.0]);
    }

    #[test]
    fn sense_norms_match_loop_oracle() {
        let rows = vec![
            vec![vec![0.3, -0.4], vec![1.0, 2.0], vec![0.0, 0.5]],
            vec![vec![-1.0, 1.0], vec![0.2, 0.1], vec![0.7, -0.7]],
        ];
        let keep = vec![true, true, true];
        let comp = comp_from(rows.clone(), keep);
        let got = sense_norms(&comp).unwrap().0;
        for (l, sense_rows) in rows.iter().enumerate() {
            let want: f64 = sense_rows
                .iter()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum();
            assert!((got[l] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn sense_norms_exclude_pad_rows() {
        let rows = vec![vec![vec![3.0, 4.0], vec![100.0, 0.0]]];
        let comp = comp_from(rows, vec![true, false]);
        assert!((sense_norms(&comp).unwrap().0[0] - 5.0).abs() <= 1e-12);
    }

    #[test]
    fn all_pad_pooling_errors() {
        let comp = comp_from(vec![vec![vec![1.0, 0.0]]], vec![false]);
        assert!(matches!(pool_v1(&comp), Err(PoolError::AllPad)));
        assert!(matches!(sense_norms(&comp), Err(PoolError::AllPad)));
    }

    #[test]
    fn pool_v1_cases() {
        // n = 1: s = o_0
        let comp = comp_from(vec![vec![vec![0.7, -0.1]]], vec![true]);
        assert_eq!(pool_v1(&comp).unwrap().s, vec![0.7, -0.1]);

        // rows (1,0) and (0,1) -> (0.5, 0.5)
        let comp = comp_from(vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]], vec![true, true]);
        assert_eq!(pool_v1(&comp).unwrap().s, vec![0.5, 0.5]);

        // random n = 4: mean oracle
        let rows: Vec<Vec<f64>> =
            (0..4).map(|i| vec![i as f64 * 0.3 - 0.5, (i * i) as f64 * 0.11]).collect();
        let comp = comp_from(vec![rows.clone()], vec![true; 4]);
        let got = pool_v1(&comp).unwrap().s;
        for j in 0..2 {
            let want: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / 4.0;
            assert!((got[j] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn pool_v2_cases() {
        // k = 1 degenerates to v1
        let comp = comp_from(vec![vec![vec![0.2, 0.4], vec![0.6, 0.0]]], vec![true, true]);
        let v2 = pool_v2(&comp).unwrap();
        assert_eq!(v2.meta.l_star, Some(0));
        assert_eq!(v2.s, pool_v1(&comp).unwrap().s);

        // only sense 1 is active
        let comp = comp_from(
            vec![
                vec![vec![0.0, 0.0], vec![0.0, 0.0]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ],
            vec![true, true],
        );
        let v2 = pool_v2(&comp).unwrap();
        assert_eq!(v2.meta.l_star, Some(1));
        assert_eq!(v2.s, vec![0.5, 0.5]);

        // oracle: compute norms, argmax, masked mean of that sense
        let rows = vec![
            vec![vec![0.9, -0.2], vec![0.1, 0.1]],
            vec![vec![0.0, 0.3], vec![-0.4, 0.2]],
        ];
        let comp = comp_from(rows.clone(), vec![true, true]);
        let norms: Vec<f64> = rows
            .iter()
            .map(|sr| sr.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).sum())
            .collect();
        let mut l_star = 0;
        for (i, &v) in norms.iter().enumerate() {
            if v >= norms[l_star] {
                l_star = i;
            }
        }
        let v2 = pool_v2(&comp).unwrap();
        assert_eq!(v2.meta.l_star, Some(l_star));
        for j in 0..2 {
            let want: f64 = rows[l_star].iter().map(|r| r[j]).sum::<f64>() / 2.0;
            assert!((v2.s[j] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn pool_v3_formula_oracle_and_limits() {
        let rows = vec![
            vec![vec![0.9, -0.2], vec![0.1, 0.1]],
            vec![vec![0.0, 0.3], vec![-0.4, 0.2]],
        ];
        let comp = comp_from(rows.clone(), vec![true, true]);

        // direct-formula oracle at tau = 1
        let norms: Vec<f64> = rows
            .iter()
            .map(|sr| sr.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).sum())
            .collect();
        let z: f64 = norms.iter().map(|v| v.exp()).sum();
        let pi: Vec<f64> = norms.iter().map(|v| v.exp() / z).collect();
        let got = pool_v3(&comp, 1.0).unwrap();
        for j in 0..2 {
            let want: f64 = (0..2)
                .map(|l| pi[l] * rows[l].iter().map(|r| r[j]).sum::<f64>() / 2.0)
                .sum();
            assert!((got.s[j] - want).abs() <= 1e-12);
        }
        let got_pi = got.meta.pi.unwrap();
        for l in 0..2 {
            assert!((got_pi[l] - pi[l]).abs() <= 1e-12);
        }

        // tau -> infinity: direction equals v1 (scale differs by 1/k)
        let v1 = pool_v1(&comp).unwrap();
        let inf = pool_v3(&comp, 1e9).unwrap();
        let cos = crate::numerics::cosine_similarity(&inf.s, &v1.s).unwrap();
        assert!(cos >= 1.0 - 1e-9);
        for j in 0..2 {
            assert!((inf.s[j] * 2.0 - v1.s[j]).abs() <= 1e-6);
        }

        // tau -> 0 with a unique argmax: equals v2
        let v2 = pool_v2(&comp).unwrap();
        let sharp = pool_v3(&comp, 1e-9).unwrap();
        let diff: f64 = sharp
            .s
            .iter()
            .zip(&v2.s)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = v2.s.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm <= 1e-6);
    }

    #[test]
    fn pool_v3_rejects_bad_tau() {
        let comp = comp_from(vec![vec![vec![1.0, 0.0]]], vec![true]);
        assert!(pool_v3(&comp, 0.0).is_err());
        assert!(pool(&comp, &PoolingSpec { variant: PoolVariant::V3, tau: None }).is_err());
        assert!(PoolingSpec { variant: PoolVariant::V1, tau: Some(1.0) }.validate().is_err());
    }

    fn tiny_model(k: usize) -> Model {
        let vocab = Vocab::build(&["a b c d e".to_string()], 12).unwrap();
        let cfg =
            ModelConfig { k, d: 8, n_layers: 1, n_heads: 2, vocab_size: 0, max_len: 6 };
        Model::new(cfg, vocab, 19).unwrap()
    }

    #[test]
    fn encode_sentence_gain_identity_and_annihilation() {
        let model = tiny_model(2);
        let spec = PoolingSpec::v1();
        let plain = encode_sentence(&model, "a b c", &spec, None).unwrap();
        let unit = encode_sentence(&model, "a b c", &spec, Some(&[1.0, 1.0])).unwrap();
        assert_eq!(plain.s, unit.s); // bitwise

        let zero = encode_sentence(&model, "a b c", &spec, Some(&[0.0, 0.0])).unwrap();
        assert!(zero.s.iter().all(|&v| v == 0.0));

        // v2 with all-zero gains: zero embedding, tie-break winner l* = k-1
        let zero2 = encode_sentence(&model, "a b c", &PoolingSpec::v2(), Some(&[0.0, 0.0])).unwrap();
        assert!(zero2.s.iter().all(|&v| v == 0.0));
        assert_eq!(zero2.meta.l_star, Some(1));
    }

    #[test]
    fn encode_sentence_v1_gain_linearity() {
        // zeroing one sense under v1 subtracts exactly that sense's mean
        let model = tiny_model(2);
        let spec = PoolingSpec::v1();
        let full = encode_sentence(&model, "a b c d", &spec, None).unwrap();
        let cut = encode_sentence(&model, "a b c d", &spec, Some(&[1.0, 0.0])).unwrap();
        let ids = model.vocab.encode("a b c d");
        let comp = encoder::composition(&model, &ids, &[1.0, 1.0]).unwrap();
        let means = sense_means(&comp).unwrap();
        for j in 0..8 {
            let want = full.s[j] - means[1][j];
            assert!((cut.s[j] - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn encode_sentence_rejects_empty_text() {
        let model = tiny_model(2);
        assert!(matches!(
            encode_sentence(&model, "   ", &PoolingSpec::v1(), None),
            Err(PoolError::EmptyText)
        ));
    }

    #[test]
    fn encode_sentence_truncates_beyond_max_len() {
        let model = tiny_model(2);
        let long = "a b c d e a b c d e a b";
        let emb = encode_sentence(&model, long, &PoolingSpec::v1(), None).unwrap();
        let short = encode_sentence(&model, "a b c d e a", &PoolingSpec::v1(), None).unwrap();
        assert_eq!(emb.s, short.s);
    }

    #[test]
    fn encode_batch_parallel_matches_sequential() {
        let model = tiny_model(2);
        let texts: Vec<String> =
            ["a b", "b c d", "e a", "c c c", "d e a b"].iter().map(|s| s.to_string()).collect();
        let spec = PoolingSpec::v3(2.0);
        let seq = encode_batch(&model, &texts, &spec, None, 1).unwrap();
        let par = encode_batch(&model, &texts, &spec, None, 3).unwrap();
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.s, b.s);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pi_is_a_probability_vector(
            norms in proptest::collection::vec(0.0f64..5.0, 2..6),
            tau in 0.01f64..100.0,
        ) {
            let k = norms.len();
            // one token per sense with the requested norm in the first slot
            let rows: Vec<Vec<Vec<f64>>> =
                norms.iter().map(|&s| vec![vec![s, 0.0]]).collect();
            let comp = comp_from(rows, vec![true]);
            let emb = pool_v3(&comp, tau).unwrap();
            let pi = emb.meta.pi.unwrap();
            prop_assert_eq!(pi.len(), k);
            let total: f64 = pi.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            for &p in &pi {
                prop_assert!(p >= 0.0);
            }
        }

        #[test]
        fn pooling_is_permutation_invariant(
            seed in 0u64..1000,
            n in 2usize..5,
        ) {
            // deterministic pseudo-random composition from the seed
            let mut x = seed as f64 + 0.5;
            let mut next = || { x = (x * 0.61803398875 + 1.3247).fract() * 2.0 - 1.0; x };
            let rows: Vec<Vec<Vec<f64>>> = (0..2)
                .map(|_| (0..n).map(|_| (0..3).map(|_| next()).collect()).collect())
                .collect();
            let comp = comp_from(rows.clone(), vec![true; n]);
            let mut rot = rows.clone();
            for sense in rot.iter_mut() {
                sense.rotate_left(1);
            }
            let comp_rot = comp_from(rot, vec![true; n]);
            for spec in [PoolingSpec::v1(), PoolingSpec::v2(), PoolingSpec::v3(1.5)] {
                let a = pool(&comp, &spec).unwrap();
                let b = pool(&comp_rot, &spec).unwrap();
                for (x1, x2) in a.s.iter().zip(&b.s) {
                    prop_assert!((x1 - x2).abs() <= 1e-12);
                }
            }
        }
    }
}

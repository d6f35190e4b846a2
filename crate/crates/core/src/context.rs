//! Context encoder: a single-block bidirectional transformer over the shared
//! prompt vocabulary, mean-pooled into one vector per text. Question and
//! concept texts pass through it to become injectable embeddings.

use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::HistoryWindow;
use crate::error::{Error, Result};
use crate::prompt::Vocab;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextSource {
    QText,
    CText,
}

/// One encoded text. `values` has length d_t.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextVec {
    pub values: Vec<f64>,
    pub source: ContextSource,
}

#[derive(Debug)]
pub struct ContextEncoder {
    pub d_t: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub vocab: Vocab,
    pub params: IndexMap<String, Tensor>,
}

impl ContextEncoder {
    pub fn init(vocab: Vocab, d_t: usize, n_heads: usize, max_len: usize, seed: u64) -> Result<Self> {
        if d_t == 0 || max_len == 0 {
            return Err(Error::InvalidArgument("context dims must be positive".into()));
        }
        if n_heads == 0 || d_t % n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "context heads ({n_heads}) must divide d_t ({d_t})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (d_t as f64).sqrt();
        let mut p = IndexMap::new();
        p.insert("ctx.embed".into(), Tensor::randn(vec![vocab.len(), d_t], 0.1, &mut rng).param());
        p.insert("ctx.pos".into(), Tensor::randn(vec![max_len, d_t], 0.1, &mut rng).param());
        p.insert("ctx.ln1.g".into(), Tensor::new(vec![d_t], vec![1.0; d_t]).param());
        p.insert("ctx.ln1.b".into(), Tensor::zeros(vec![d_t]).param());
        p.insert("ctx.attn.wq".into(), Tensor::randn(vec![d_t, d_t], s, &mut rng).param());
        p.insert("ctx.attn.wk".into(), Tensor::randn(vec![d_t, d_t], s, &mut rng).param());
        p.insert("ctx.attn.wv".into(), Tensor::randn(vec![d_t, d_t], s, &mut rng).param());
        p.insert("ctx.attn.wo".into(), Tensor::randn(vec![d_t, d_t], s, &mut rng).param());
        p.insert("ctx.ln2.g".into(), Tensor::new(vec![d_t], vec![1.0; d_t]).param());
        p.insert("ctx.ln2.b".into(), Tensor::zeros(vec![d_t]).param());
        p.insert("ctx.ffn.w1".into(), Tensor::randn(vec![d_t, 4 * d_t], s, &mut rng).param());
        p.insert("ctx.ffn.b1".into(), Tensor::zeros(vec![4 * d_t]).param());
        p.insert(
            "ctx.ffn.w2".into(),
            Tensor::randn(vec![4 * d_t, d_t], 0.5 * s, &mut rng).param(),
        );
        p.insert("ctx.ffn.b2".into(), Tensor::zeros(vec![d_t]).param());
        Ok(ContextEncoder { d_t, n_heads, max_len, vocab, params: p })
    }

    /// Flips every parameter's trainability; frozen encoders contribute no
    /// gradients and optimizers skip them.
    pub fn set_trainable(&mut self, trainable: bool) {
        for t in self.params.values_mut() {
            t.requires_grad = trainable;
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.params.values().all(|t| t.requires_grad)
    }

    /// Tokenizes one text for encoding. Empty and over-long texts are errors.
    pub fn token_ids(&self, text: &str) -> Result<Vec<usize>> {
        let ids = self.vocab.encode(text);
        if ids.is_empty() {
            return Err(Error::InvalidArgument("cannot encode empty text".into()));
        }
        if ids.len() > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "text of {} tokens exceeds context window {}",
                ids.len(),
                self.max_len
            )));
        }
        Ok(ids.into_iter().map(|i| i as usize).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new()
            .with_meta("model", "context-encoder".into())
            .with_meta("d_t", (self.d_t as u64).into())
            .with_meta("n_heads", (self.n_heads as u64).into())
            .with_meta("max_len", (self.max_len as u64).into())
            .with_meta("vocab_sha256", self.vocab.fingerprint().into());
        for (name, t) in &self.params {
            ck.insert(name, t.clone());
        }
        ck.save(path)
    }

    /// Loads a checkpoint, verifying it was built over the same vocabulary.
    pub fn load(path: &Path, vocab: Vocab) -> Result<Self> {
        let mut ck = Checkpoint::load(path)?;
        let expected = ck.meta_str("vocab_sha256")?.to_string();
        let actual = vocab.fingerprint();
        if expected != actual {
            return Err(Error::VocabHashMismatch { expected, actual });
        }
        let d_t = ck.meta_u64("d_t")? as usize;
        let n_heads = ck.meta_u64("n_heads")? as usize;
        let max_len = ck.meta_u64("max_len")? as usize;
        let mut fresh = ContextEncoder::init(vocab, d_t, n_heads, max_len, 0)?;
        for (name, slot) in fresh.params.iter_mut() {
            let loaded = ck.take(name)?;
            if loaded.shape != slot.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    loaded.shape, slot.shape
                )));
            }
            *slot = loaded.param();
        }
        Ok(fresh)
    }
}

pub(crate) fn bind_ctx(tape: &mut Tape, model: &ContextEncoder) -> IndexMap<String, Var> {
    model.params.iter().map(|(n, t)| (n.clone(), tape.param(n, t))).collect()
}

/// Per-token hidden states after the block, before pooling. Shape [t, d_t].
pub(crate) fn hidden_rows(
    tape: &mut Tape,
    model: &ContextEncoder,
    v: &IndexMap<String, Var>,
    ids: &[usize],
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("cannot encode empty text".into()));
    }
    if ids.len() > model.max_len {
        return Err(Error::InvalidArgument(format!(
            "text of {} tokens exceeds context window {}",
            ids.len(),
            model.max_len
        )));
    }
    let x = tape.gather(v["ctx.embed"], ids);
    let x = tape.add_pos_table(x, v["ctx.pos"]);
    let n1 = tape.layer_norm(x, v["ctx.ln1.g"], v["ctx.ln1.b"]);
    let q = tape.matmul(n1, v["ctx.attn.wq"]);
    let k = tape.matmul(n1, v["ctx.attn.wk"]);
    let val = tape.matmul(n1, v["ctx.attn.wv"]);
    let a = tape.full_self_attention(q, k, val, model.n_heads);
    let a = tape.matmul(a, v["ctx.attn.wo"]);
    let x = tape.add(x, a);
    let n2 = tape.layer_norm(x, v["ctx.ln2.g"], v["ctx.ln2.b"]);
    let h = tape.matmul(n2, v["ctx.ffn.w1"]);
    let h = tape.add_rows(h, v["ctx.ffn.b1"]);
    let h = tape.gelu(h);
    let h = tape.matmul(h, v["ctx.ffn.w2"]);
    let h = tape.add_rows(h, v["ctx.ffn.b2"]);
    Ok(tape.add(x, h))
}

/// Mean-pooled encoding of a token sequence. Shape [d_t].
pub(crate) fn encode_ids(
    tape: &mut Tape,
    model: &ContextEncoder,
    v: &IndexMap<String, Var>,
    ids: &[usize],
) -> Result<Var> {
    let rows = hidden_rows(tape, model, v, ids)?;
    Ok(tape.mean_rows(rows))
}

pub fn encode_text(model: &ContextEncoder, text: &str, source: ContextSource) -> Result<ContextVec> {
    let ids = model.token_ids(text)?;
    let mut tape = Tape::new();
    let v = bind_ctx(&mut tape, model);
    let pooled = encode_ids(&mut tape, model, &v, &ids)?;
    Ok(ContextVec { values: tape.value(pooled).data.clone(), source })
}

/// Context vectors for every item of a window: history entries first, the
/// target last. Absent texts yield `None`; several concept texts are joined
/// with "; " and encoded as one string.
#[derive(Debug, Clone)]
pub struct ItemContexts {
    pub question: Option<ContextVec>,
    pub concept: Option<ContextVec>,
}

pub fn encode_entity_texts(
    model: &ContextEncoder,
    window: &HistoryWindow,
) -> Result<Vec<ItemContexts>> {
    let mut out = Vec::with_capacity(window.history.len() + 1);
    for it in window.history.iter().chain(std::iter::once(&window.target)) {
        let question = match &it.question_text {
            Some(t) => Some(encode_text(model, t, ContextSource::QText)?),
            None => None,
        };
        let concept = if it.concept_texts.is_empty() {
            None
        } else {
            Some(encode_text(model, &it.concept_texts.join("; "), ContextSource::CText)?)
        };
        out.push(ItemContexts { question, concept });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;
    use crate::gradcheck::fd_check;

    fn toy_model() -> ContextEncoder {
        let vocab = Vocab::build([
            "Compute the sum of 4 and 3 .",
            "fractions ; decimals ; number sense",
            "alpha beta gamma",
        ]);
        ContextEncoder::init(vocab, 16, 4, 32, 7).unwrap()
    }

    fn interaction(qtext: Option<&str>, ctexts: &[&str]) -> Interaction {
        Interaction {
            student_id: "s0001".into(),
            seq_index: 0,
            question_id: Some(1),
            concept_ids: vec![2],
            correct: true,
            question_text: qtext.map(str::to_string),
            concept_texts: ctexts.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn identical_texts_give_identical_vectors() {
        let model = toy_model();
        let a = encode_text(&model, "Compute the sum of 4 and 3.", ContextSource::QText).unwrap();
        let b = encode_text(&model, "Compute the sum of 4 and 3.", ContextSource::QText).unwrap();
        assert_eq!(a.values.len(), 16);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn single_token_text_is_its_hidden_state() {
        let model = toy_model();
        let pooled = encode_text(&model, "alpha", ContextSource::CText).unwrap();
        let ids = model.token_ids("alpha").unwrap();
        let mut tape = Tape::new();
        let v = bind_ctx(&mut tape, &model);
        let rows = hidden_rows(&mut tape, &model, &v, &ids).unwrap();
        let row = tape.value(rows).data.clone();
        assert_eq!(pooled.values, row);
    }

    #[test]
    fn empty_text_is_rejected() {
        let model = toy_model();
        assert!(encode_text(&model, "", ContextSource::QText).is_err());
        assert!(encode_text(&model, "   ", ContextSource::QText).is_err());
    }

    #[test]
    fn overlong_text_is_rejected() {
        let model = toy_model();
        let long = vec!["alpha"; 33].join(" ");
        assert!(encode_text(&model, &long, ContextSource::QText).is_err());
    }

    #[test]
    fn word_order_changes_the_encoding() {
        let model = toy_model();
        let a = encode_text(&model, "alpha beta gamma", ContextSource::QText).unwrap();
        let b = encode_text(&model, "gamma beta alpha", ContextSource::QText).unwrap();
        let diff: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6, "encoder ignored word order, diff {diff}");
    }

    #[test]
    fn unknown_words_fall_back_to_unk() {
        let model = toy_model();
        let v = encode_text(&model, "entirely novel words", ContextSource::QText).unwrap();
        assert!(v.values.iter().all(|x| x.is_finite()));
        let unk3 = {
            let ids = vec![Vocab::UNK as usize; 3];
            let mut tape = Tape::new();
            let bound = bind_ctx(&mut tape, &model);
            let pooled = encode_ids(&mut tape, &model, &bound, &ids).unwrap();
            tape.value(pooled).data.clone()
        };
        assert_eq!(v.values, unk3);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let model = toy_model();
        let ids = model.token_ids("alpha beta gamma beta").unwrap();
        let eval = |params: &IndexMap<String, Tensor>| -> Result<f64> {
            let probe = ContextEncoder {
                d_t: model.d_t,
                n_heads: model.n_heads,
                max_len: model.max_len,
                vocab: model.vocab.clone(),
                params: params.clone(),
            };
            let mut tape = Tape::new();
            let v = bind_ctx(&mut tape, &probe);
            let pooled = encode_ids(&mut tape, &probe, &v, &ids)?;
            let sq = tape.mul(pooled, pooled);
            let loss = tape.sum_all(sq);
            Ok(tape.value(loss).data[0])
        };
        let mut tape = Tape::new();
        let v = bind_ctx(&mut tape, &model);
        let pooled = encode_ids(&mut tape, &model, &v, &ids).unwrap();
        let sq = tape.mul(pooled, pooled);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let err = fd_check(&model.params, &grads, 1e-5, eval).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn frozen_encoder_contributes_no_gradients() {
        let mut model = toy_model();
        model.set_trainable(false);
        assert!(!model.is_trainable());
        let ids = model.token_ids("alpha beta").unwrap();
        let mut tape = Tape::new();
        let v = bind_ctx(&mut tape, &model);
        let pooled = encode_ids(&mut tape, &model, &v, &ids).unwrap();
        let loss = tape.sum_all(pooled);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn window_text_availability_drives_vector_presence() {
        let model = toy_model();
        // nips-like: both texts present
        let rich = HistoryWindow {
            history: vec![interaction(Some("Compute the sum of 4 and 3."), &["fractions"])],
            target: interaction(Some("Compute the sum of 4 and 3."), &["decimals", "number sense"]),
            label: true,
        };
        let vecs = encode_entity_texts(&model, &rich).unwrap();
        assert_eq!(vecs.len(), 2);
        assert!(vecs[0].question.is_some() && vecs[0].concept.is_some());
        let joined = encode_text(&model, "decimals; number sense", ContextSource::CText).unwrap();
        assert_eq!(vecs[1].concept.as_ref().unwrap().values, joined.values);

        // junyi-like: no texts at all
        let bare = HistoryWindow {
            history: vec![interaction(None, &[])],
            target: interaction(None, &[]),
            label: false,
        };
        let vecs = encode_entity_texts(&model, &bare).unwrap();
        assert!(vecs.iter().all(|v| v.question.is_none() && v.concept.is_none()));

        // assist-like: concept text only
        let skills = HistoryWindow {
            history: vec![interaction(None, &["fractions"])],
            target: interaction(None, &["number sense"]),
            label: true,
        };
        let vecs = encode_entity_texts(&model, &skills).unwrap();
        assert!(vecs.iter().all(|v| v.question.is_none() && v.concept.is_some()));
    }

    #[test]
    fn checkpoint_round_trip_preserves_weights_and_vocab_guard() {
        let model = toy_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ctx.json");
        model.save(&path).unwrap();
        let back = ContextEncoder::load(&path, model.vocab.clone()).unwrap();
        for (name, t) in &model.params {
            assert_eq!(t.data, back.params[name].data, "mismatch in {name}");
        }
        let other = Vocab::build(["a different corpus entirely"]);
        match ContextEncoder::load(&path, other) {
            Err(Error::VocabHashMismatch { .. }) => {}
            other => panic!("expected vocab mismatch, got {other:?}"),
        }
    }
}

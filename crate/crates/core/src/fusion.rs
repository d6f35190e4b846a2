//! Fusion layer: adapters that map context and sequence vectors into the
//! LM embedding space, and the merge function g combining them into the
//! slot embeddings e_Ques and e_Conc.

use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::context::{self, ContextEncoder, ContextVec};
use crate::data::{HistoryWindow, Interaction};
use crate::error::{Error, Result};
use crate::prompt::{SlotBinding, SlotKind, SlotRef};
use crate::seqkt::IdEmbeddings;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeKind {
    Add,
    Avg,
    Concat,
}

impl MergeKind {
    pub fn parse(s: &str) -> Result<MergeKind> {
        match s {
            "add" => Ok(MergeKind::Add),
            "avg" => Ok(MergeKind::Avg),
            "concat" => Ok(MergeKind::Concat),
            other => Err(Error::InvalidArgument(format!("unknown merge function {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MergeKind::Add => "add",
            MergeKind::Avg => "avg",
            MergeKind::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub has_context: bool,
    pub has_sequence: bool,
}

/// One slot embedding ready for injection.
#[derive(Debug, Clone)]
pub struct FusedVec {
    pub values: Vec<f64>,
    pub entity: SlotKind,
    pub provenance: Provenance,
}

/// Both adapters plus the merge parameters. The context adapter maps d_t
/// to d_e, the sequence adapter d_s to d_e; Concat carries an extra
/// projection from 2*d_e back down.
#[derive(Debug)]
pub struct Fusion {
    pub d_t: usize,
    pub d_s: usize,
    pub d_e: usize,
    pub merge: MergeKind,
    pub params: IndexMap<String, Tensor>,
}

impl Fusion {
    pub fn init(d_t: usize, d_s: usize, d_e: usize, merge: MergeKind, seed: u64) -> Result<Fusion> {
        if d_t == 0 || d_s == 0 || d_e == 0 {
            return Err(Error::InvalidArgument("fusion dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = IndexMap::new();
        let st = 1.0 / (d_t as f64).sqrt();
        let ss = 1.0 / (d_s as f64).sqrt();
        let se = 1.0 / (d_e as f64).sqrt();
        p.insert("fuse.ctx.w1".into(), Tensor::randn(vec![d_t, d_e], st, &mut rng).param());
        p.insert("fuse.ctx.b1".into(), Tensor::zeros(vec![d_e]).param());
        p.insert("fuse.ctx.w2".into(), Tensor::randn(vec![d_e, d_e], se, &mut rng).param());
        p.insert("fuse.ctx.b2".into(), Tensor::zeros(vec![d_e]).param());
        p.insert("fuse.seq.w1".into(), Tensor::randn(vec![d_s, d_e], ss, &mut rng).param());
        p.insert("fuse.seq.b1".into(), Tensor::zeros(vec![d_e]).param());
        p.insert("fuse.seq.w2".into(), Tensor::randn(vec![d_e, d_e], se, &mut rng).param());
        p.insert("fuse.seq.b2".into(), Tensor::zeros(vec![d_e]).param());
        if merge == MergeKind::Concat {
            let sc = 1.0 / (2.0 * d_e as f64).sqrt();
            p.insert("fuse.cat.w".into(), Tensor::randn(vec![2 * d_e, d_e], sc, &mut rng).param());
        }
        Ok(Fusion { d_t, d_s, d_e, merge, params: p })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new()
            .with_meta("model", "fusion".into())
            .with_meta("d_t", (self.d_t as u64).into())
            .with_meta("d_s", (self.d_s as u64).into())
            .with_meta("d_e", (self.d_e as u64).into())
            .with_meta("merge", serde_json::to_value(self.merge)?);
        for (name, t) in &self.params {
            ck.insert(name, t.clone());
        }
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Fusion> {
        let mut ck = Checkpoint::load(path)?;
        let merge = MergeKind::parse(ck.meta_str("merge")?)?;
        let d_t = ck.meta_u64("d_t")? as usize;
        let d_s = ck.meta_u64("d_s")? as usize;
        let d_e = ck.meta_u64("d_e")? as usize;
        let mut fresh = Fusion::init(d_t, d_s, d_e, merge, 0)?;
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

pub(crate) fn bind_fusion(tape: &mut Tape, fusion: &Fusion) -> IndexMap<String, Var> {
    fusion.params.iter().map(|(n, t)| (n.clone(), tape.param(n, t))).collect()
}

fn mlp(tape: &mut Tape, v: &IndexMap<String, Var>, prefix: &str, x: Var) -> Var {
    let h = tape.vecmat(x, v[&format!("{prefix}.w1")]);
    let h = tape.add_rows(h, v[&format!("{prefix}.b1")]);
    let h = tape.gelu(h);
    let h = tape.vecmat(h, v[&format!("{prefix}.w2")]);
    tape.add_rows(h, v[&format!("{prefix}.b2")])
}

pub(crate) fn adapt_context_graph(tape: &mut Tape, v: &IndexMap<String, Var>, x: Var) -> Var {
    mlp(tape, v, "fuse.ctx", x)
}

pub(crate) fn adapt_sequence_graph(tape: &mut Tape, v: &IndexMap<String, Var>, x: Var) -> Var {
    mlp(tape, v, "fuse.seq", x)
}

pub(crate) fn merge_graph(
    tape: &mut Tape,
    fusion: &Fusion,
    v: &IndexMap<String, Var>,
    cont: Option<Var>,
    seq: Option<Var>,
) -> Result<Var> {
    match fusion.merge {
        MergeKind::Add => match (cont, seq) {
            (Some(c), Some(s)) => Ok(tape.add(c, s)),
            (Some(one), None) | (None, Some(one)) => Ok(one),
            (None, None) => Err(Error::InvalidArgument("merge needs at least one input".into())),
        },
        MergeKind::Avg => match (cont, seq) {
            (Some(c), Some(s)) => {
                let sum = tape.add(c, s);
                Ok(tape.scale(sum, 0.5))
            }
            (Some(one), None) | (None, Some(one)) => Ok(one),
            (None, None) => Err(Error::InvalidArgument("merge needs at least one input".into())),
        },
        MergeKind::Concat => {
            let d = fusion.d_e;
            let zero = |tape: &mut Tape| tape.constant_vec(vec![d], vec![0.0; d]);
            let (c, s) = match (cont, seq) {
                (Some(c), Some(s)) => (c, s),
                (Some(c), None) => {
                    let z = zero(tape);
                    (c, z)
                }
                (None, Some(s)) => {
                    let z = zero(tape);
                    (z, s)
                }
                (None, None) => {
                    return Err(Error::InvalidArgument("merge needs at least one input".into()))
                }
            };
            let both = tape.concat_vec(c, s);
            Ok(tape.vecmat(both, v["fuse.cat.w"]))
        }
    }
}

/// Applies the context adapter outside any training graph.
pub fn adapt_context(fusion: &Fusion, r: &ContextVec) -> Result<Vec<f64>> {
    if r.values.len() != fusion.d_t {
        return Err(Error::ShapeMismatch(format!(
            "context vector has {} entries, adapter expects {}",
            r.values.len(),
            fusion.d_t
        )));
    }
    let mut tape = Tape::new();
    let v = bind_fusion(&mut tape, fusion);
    let x = tape.constant_vec(vec![fusion.d_t], r.values.clone());
    let out = adapt_context_graph(&mut tape, &v, x);
    Ok(tape.value(out).data.clone())
}

/// Applies the sequence adapter outside any training graph.
pub fn adapt_sequence(fusion: &Fusion, r: &[f64]) -> Result<Vec<f64>> {
    if r.len() != fusion.d_s {
        return Err(Error::ShapeMismatch(format!(
            "sequence vector has {} entries, adapter expects {}",
            r.len(),
            fusion.d_s
        )));
    }
    let mut tape = Tape::new();
    let v = bind_fusion(&mut tape, fusion);
    let x = tape.constant_vec(vec![fusion.d_s], r.to_vec());
    let out = adapt_sequence_graph(&mut tape, &v, x);
    Ok(tape.value(out).data.clone())
}

/// Combines already-adapted vectors with the configured g.
pub fn merge(
    fusion: &Fusion,
    h_cont: Option<&[f64]>,
    h_seq: Option<&[f64]>,
    entity: SlotKind,
) -> Result<FusedVec> {
    for h in [h_cont, h_seq].into_iter().flatten() {
        if h.len() != fusion.d_e {
            return Err(Error::ShapeMismatch(format!(
                "merge input has {} entries, expected {}",
                h.len(),
                fusion.d_e
            )));
        }
    }
    let mut tape = Tape::new();
    let v = bind_fusion(&mut tape, fusion);
    let cont = h_cont.map(|h| tape.constant_vec(vec![fusion.d_e], h.to_vec()));
    let seq = h_seq.map(|h| tape.constant_vec(vec![fusion.d_e], h.to_vec()));
    let out = merge_graph(&mut tape, fusion, &v, cont, seq)?;
    Ok(FusedVec {
        values: tape.value(out).data.clone(),
        entity,
        provenance: Provenance { has_context: h_cont.is_some(), has_sequence: h_seq.is_some() },
    })
}

/// Sequence-side slot-token embedding tables as named tensors. They stay
/// frozen when exported from a trained sequence encoder; the token-init
/// baseline instead starts them random and fine-tunes them directly.
#[derive(Debug, Clone)]
pub struct SeqTables {
    pub d_s: usize,
    pub params: IndexMap<String, Tensor>,
}

pub const SEQ_Q: &str = "seq.questions";
pub const SEQ_C: &str = "seq.concepts";

fn rows_tensor(rows: &[Vec<f64>], d: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::new(vec![rows.len(), d], data)
}

impl SeqTables {
    pub fn from_embeddings(e: &IdEmbeddings) -> SeqTables {
        let mut params = IndexMap::new();
        params.insert(SEQ_Q.to_string(), rows_tensor(&e.questions, e.d_s));
        params.insert(SEQ_C.to_string(), rows_tensor(&e.concepts, e.d_s));
        SeqTables { d_s: e.d_s, params }
    }

    /// Random tables for the token-init baseline; callers that want them
    /// fine-tuned must also `set_trainable(true)`.
    pub fn random(n_questions: usize, n_concepts: usize, d_s: usize, seed: u64) -> SeqTables {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        params.insert(SEQ_Q.to_string(), Tensor::randn(vec![n_questions, d_s], 0.1, &mut rng));
        params.insert(SEQ_C.to_string(), Tensor::randn(vec![n_concepts, d_s], 0.1, &mut rng));
        SeqTables { d_s, params }
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for t in self.params.values_mut() {
            t.requires_grad = trainable;
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.params.values().any(|t| t.requires_grad)
    }

    /// Row count; zero means the modality is absent from the dataset.
    pub fn rows(&self, key: &str) -> usize {
        self.params[key].shape[0]
    }
}

pub(crate) fn bind_seq(tape: &mut Tape, seq: &SeqTables) -> IndexMap<String, Var> {
    seq.params.iter().map(|(n, t)| (n.clone(), tape.param(n, t))).collect()
}

/// Everything needed to turn slot bindings into embeddings on one tape.
/// All three sources enter as bound vars; frozen tensors simply produce no
/// gradient entries.
pub(crate) struct SlotSources<'a> {
    pub fusion: &'a Fusion,
    pub fusion_vars: &'a IndexMap<String, Var>,
    pub encoder: Option<(&'a ContextEncoder, &'a IndexMap<String, Var>)>,
    pub seq: Option<(&'a SeqTables, &'a IndexMap<String, Var>)>,
}

fn interaction_of<'w>(window: &'w HistoryWindow, r: SlotRef) -> &'w Interaction {
    match r {
        SlotRef::History(i) => &window.history[i],
        SlotRef::Target => &window.target,
    }
}

pub(crate) fn slot_embedding_graph(
    tape: &mut Tape,
    src: &SlotSources,
    window: &HistoryWindow,
    binding: &SlotBinding,
    memo: &mut IndexMap<(u8, Vec<usize>), Var>,
) -> Result<(Var, Provenance)> {
    let it = interaction_of(window, binding.reference);
    let id = binding.entity_id as usize;
    let text: Option<String> = match binding.slot {
        SlotKind::Ques => it.question_text.clone(),
        SlotKind::Conc => {
            (!it.concept_texts.is_empty()).then(|| it.concept_texts.join("; "))
        }
    };
    let cont = match (&src.encoder, text) {
        (Some((enc, enc_vars)), Some(text)) => {
            let ids = enc.token_ids(&text)?;
            let tag = match binding.slot {
                SlotKind::Ques => 0u8,
                SlotKind::Conc => 1u8,
            };
            let key = (tag, ids.clone());
            let adapted = match memo.get(&key) {
                Some(&v) => v,
                None => {
                    let pooled = context::encode_ids(tape, enc, enc_vars, &ids)?;
                    let a = adapt_context_graph(tape, src.fusion_vars, pooled);
                    memo.insert(key, a);
                    a
                }
            };
            Some(adapted)
        }
        _ => None,
    };
    let seq = match &src.seq {
        Some((tables, seq_vars)) => {
            let (table_key, what) = match binding.slot {
                SlotKind::Ques => (SEQ_Q, "question"),
                SlotKind::Conc => (SEQ_C, "concept"),
            };
            let rows = tables.rows(table_key);
            if rows == 0 {
                None
            } else if id >= rows {
                return Err(Error::InvalidArgument(format!(
                    "{what} id {id} outside embedding table ({rows} rows)"
                )));
            } else {
                let key = (2 + u8::from(binding.slot == SlotKind::Conc), vec![id]);
                let adapted = match memo.get(&key) {
                    Some(&v) => v,
                    None => {
                        let x = tape.row(seq_vars[table_key], id);
                        let a = adapt_sequence_graph(tape, src.fusion_vars, x);
                        memo.insert(key, a);
                        a
                    }
                };
                Some(adapted)
            }
        }
        None => None,
    };
    if cont.is_none() && seq.is_none() {
        let what = match binding.slot {
            SlotKind::Ques => "question",
            SlotKind::Conc => "concept",
        };
        return Err(Error::InvalidArgument(format!(
            "{what} slot at position {} has neither text nor sequence embedding",
            binding.position
        )));
    }
    let prov = Provenance { has_context: cont.is_some(), has_sequence: seq.is_some() };
    let fused = merge_graph(tape, src.fusion, src.fusion_vars, cont, seq)?;
    Ok((fused, prov))
}

/// Fused embeddings for every binding in plan order.
pub fn build_slot_embeddings(
    fusion: &Fusion,
    encoder: Option<&ContextEncoder>,
    seq: Option<&SeqTables>,
    window: &HistoryWindow,
    bindings: &[SlotBinding],
) -> Result<Vec<FusedVec>> {
    let mut tape = Tape::new();
    let fusion_vars = bind_fusion(&mut tape, fusion);
    let enc_bound = encoder.map(|e| (e, context::bind_ctx(&mut tape, e)));
    let seq_bound = seq.map(|s| (s, bind_seq(&mut tape, s)));
    let src = SlotSources {
        fusion,
        fusion_vars: &fusion_vars,
        encoder: enc_bound.as_ref().map(|(e, v)| (*e, v)),
        seq: seq_bound.as_ref().map(|(s, v)| (*s, v)),
    };
    let mut memo = IndexMap::new();
    let mut out = Vec::with_capacity(bindings.len());
    for b in bindings {
        let (var, prov) = slot_embedding_graph(&mut tape, &src, window, b, &mut memo)?;
        out.push(FusedVec {
            values: tape.value(var).data.clone(),
            entity: b.slot,
            provenance: prov,
        });
    }
    Ok(out)
}

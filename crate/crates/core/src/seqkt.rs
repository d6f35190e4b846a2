//! Sequence-encoder knowledge tracing: a recurrent model (DKT) and a
//! monotonic-attention model (AKT-lite), trained standalone on interaction
//! sequences. Their learned ID embeddings are exported for injection into
//! the language model.

use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{mix, HistoryWindow, Interaction};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::metrics::{accuracy, auc};
use crate::optim::{cosine_lr, AdamW};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeqKind {
    Dkt,
    AktLite,
}

impl SeqKind {
    pub fn parse(s: &str) -> Result<SeqKind> {
        match s {
            "dkt" => Ok(SeqKind::Dkt),
            "akt-lite" | "akt" => Ok(SeqKind::AktLite),
            other => Err(Error::InvalidArgument(format!("unknown sequence model {other:?}"))),
        }
    }
}

/// Which entity stream drives the recurrent one-hot input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeqEntity {
    Question,
    Concept,
}

#[derive(Debug)]
pub struct SeqKtModel {
    pub kind: SeqKind,
    pub entity: SeqEntity,
    pub n_questions: usize,
    pub n_concepts: usize,
    pub d_s: usize,
    pub hidden: usize,
    pub trained: bool,
    pub params: IndexMap<String, Tensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqTrainConfig {
    pub d_s: usize,
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub patience: usize,
    pub max_history: usize,
    /// Cap on training items (sequences for DKT, windows for AKT) per epoch.
    pub items_per_epoch: Option<usize>,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for SeqTrainConfig {
    fn default() -> Self {
        SeqTrainConfig {
            d_s: 64,
            hidden: 64,
            lr: 1e-2,
            weight_decay: 1e-5,
            epochs: 12,
            batch: 8,
            patience: 3,
            max_history: 100,
            items_per_epoch: None,
            seed: 42,
            exec: ExecMode::Parallel,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeqValReport {
    pub auc: f64,
    pub acc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Mean training loss before any update, then after each epoch.
    pub loss_history: Vec<f64>,
}

/// One interaction reduced to what the sequence models consume.
#[derive(Debug, Clone, Copy)]
struct SeqStep {
    qid: Option<usize>,
    cid: Option<usize>,
    correct: bool,
}

fn step_of(it: &Interaction) -> SeqStep {
    SeqStep {
        qid: it.question_id.map(|q| q as usize),
        cid: it.concept_ids.first().map(|&c| c as usize),
        correct: it.correct,
    }
}

impl SeqKtModel {
    fn entity_count(&self) -> usize {
        match self.entity {
            SeqEntity::Question => self.n_questions,
            SeqEntity::Concept => self.n_concepts,
        }
    }

    fn entity_of(&self, s: &SeqStep) -> Result<usize> {
        let (id, what) = match self.entity {
            SeqEntity::Question => (s.qid, "question"),
            SeqEntity::Concept => (s.cid, "concept"),
        };
        let id = id.ok_or_else(|| {
            Error::InvalidArgument(format!("interaction lacks a {what} id for this model"))
        })?;
        if id >= self.entity_count() {
            return Err(Error::InvalidArgument(format!(
                "{what} id {id} out of range (< {})",
                self.entity_count()
            )));
        }
        Ok(id)
    }

    fn has_aux_concepts(&self) -> bool {
        self.params.contains_key("dkt.concepts")
    }

    /// Fresh model with randomized weights.
    pub fn init(
        kind: SeqKind,
        n_questions: usize,
        n_concepts: usize,
        d_s: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<SeqKtModel> {
        if d_s == 0 || hidden == 0 {
            return Err(Error::InvalidArgument("embedding and hidden dims must be positive".into()));
        }
        if n_questions == 0 && n_concepts == 0 {
            return Err(Error::InvalidArgument("no questions and no concepts in data".into()));
        }
        let entity = if n_questions > 0 { SeqEntity::Question } else { SeqEntity::Concept };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = IndexMap::new();
        let n_e = match entity {
            SeqEntity::Question => n_questions,
            SeqEntity::Concept => n_concepts,
        };
        match kind {
            SeqKind::Dkt => {
                let sx = 1.0 / (d_s as f64).sqrt();
                let sh = 1.0 / (hidden as f64).sqrt();
                p.insert("dkt.input".into(), Tensor::randn(vec![2 * n_e, d_s], 0.1, &mut rng).param());
                p.insert("dkt.wx".into(), Tensor::randn(vec![d_s, 4 * hidden], sx, &mut rng).param());
                p.insert("dkt.wh".into(), Tensor::randn(vec![hidden, 4 * hidden], sh, &mut rng).param());
                let mut b = Tensor::zeros(vec![4 * hidden]).param();
                // open the forget gate at init
                for v in &mut b.data[hidden..2 * hidden] {
                    *v = 1.0;
                }
                p.insert("dkt.b".into(), b);
                p.insert("dkt.head.w".into(), Tensor::randn(vec![hidden, n_e], sh, &mut rng).param());
                p.insert("dkt.head.b".into(), Tensor::zeros(vec![n_e]).param());
                if entity == SeqEntity::Question && n_concepts > 0 {
                    p.insert(
                        "dkt.concepts".into(),
                        Tensor::randn(vec![n_concepts, d_s], 0.1, &mut rng).param(),
                    );
                    p.insert("dkt.aux.m".into(), Tensor::randn(vec![d_s, hidden], sx, &mut rng).param());
                    p.insert("dkt.aux.b".into(), Tensor::zeros(vec![1]).param());
                }
            }
            SeqKind::AktLite => {
                let s = 1.0 / (d_s as f64).sqrt();
                if n_questions > 0 {
                    p.insert("akt.eq".into(), Tensor::randn(vec![n_questions, d_s], 0.1, &mut rng).param());
                }
                if n_concepts > 0 {
                    p.insert("akt.ec".into(), Tensor::randn(vec![n_concepts, d_s], 0.1, &mut rng).param());
                }
                p.insert("akt.answer".into(), Tensor::randn(vec![2, d_s], 0.1, &mut rng).param());
                p.insert("akt.wq".into(), Tensor::randn(vec![d_s, d_s], s, &mut rng).param());
                p.insert("akt.wk".into(), Tensor::randn(vec![d_s, d_s], s, &mut rng).param());
                p.insert("akt.wv".into(), Tensor::randn(vec![d_s, d_s], s, &mut rng).param());
                // softplus(-3) ~ 0.05: a gentle decay at init so distant
                // items still contribute; training sharpens it as needed
                p.insert("akt.theta".into(), Tensor::new(vec![1], vec![-3.0]).param());
                p.insert("akt.head.w1".into(), Tensor::randn(vec![2 * d_s, hidden], s, &mut rng).param());
                p.insert("akt.head.b1".into(), Tensor::zeros(vec![hidden]).param());
                p.insert("akt.head.w2".into(), Tensor::randn(vec![hidden, 1], 1.0 / (hidden as f64).sqrt(), &mut rng).param());
                p.insert("akt.head.b2".into(), Tensor::zeros(vec![1]).param());
            }
        }
        Ok(SeqKtModel {
            kind,
            entity,
            n_questions,
            n_concepts,
            d_s,
            hidden,
            trained: false,
            params: p,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": self.kind,
            "entity": self.entity,
            "n_questions": self.n_questions,
            "n_concepts": self.n_concepts,
            "d_s": self.d_s,
            "hidden": self.hidden,
            "trained": self.trained,
        });
        let mut ck = Checkpoint::new().with_meta("seqkt", meta);
        for (name, t) in &self.params {
            ck.insert(name, t.clone());
        }
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<SeqKtModel> {
        let ck = Checkpoint::load(path)?;
        let meta = ck
            .meta
            .get("seqkt")
            .ok_or_else(|| Error::Checkpoint("missing seqkt metadata".into()))?;
        fn field<T: serde::de::DeserializeOwned>(
            meta: &serde_json::Value,
            key: &str,
        ) -> Result<T> {
            let v = meta
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("seqkt metadata lacks {key}")))?;
            serde_json::from_value(v).map_err(Error::Json)
        }
        Ok(SeqKtModel {
            kind: field(meta, "kind")?,
            entity: field(meta, "entity")?,
            n_questions: field(meta, "n_questions")?,
            n_concepts: field(meta, "n_concepts")?,
            d_s: field(meta, "d_s")?,
            hidden: field(meta, "hidden")?,
            trained: field(meta, "trained")?,
            params: ck.tensors,
        })
    }
}

fn bind_all(tape: &mut Tape, params: &IndexMap<String, Tensor>) -> IndexMap<String, Var> {
    params.iter().map(|(n, t)| (n.clone(), tape.param(n, t))).collect()
}

fn lstm_step(
    tape: &mut Tape,
    v: &IndexMap<String, Var>,
    x: Var,
    h: Var,
    c: Var,
    hidden: usize,
) -> (Var, Var) {
    let gx = tape.vecmat(x, v["dkt.wx"]);
    let gh = tape.vecmat(h, v["dkt.wh"]);
    let gsum = tape.add(gx, gh);
    let gates = tape.add_rows(gsum, v["dkt.b"]);
    let i = tape.slice_vec(gates, 0, hidden);
    let f = tape.slice_vec(gates, hidden, hidden);
    let o = tape.slice_vec(gates, 2 * hidden, hidden);
    let g = tape.slice_vec(gates, 3 * hidden, hidden);
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let o = tape.sigmoid(o);
    let g = tape.tanh(g);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_new = tape.add(fc, ig);
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc);
    (h_new, c_new)
}

/// Runs the recurrent core over a history and returns the final hidden state.
fn dkt_hidden(
    tape: &mut Tape,
    model: &SeqKtModel,
    v: &IndexMap<String, Var>,
    history: &[SeqStep],
) -> Result<Var> {
    let hidden = model.hidden;
    let mut h = tape.constant_vec(vec![hidden], vec![0.0; hidden]);
    let mut c = tape.constant_vec(vec![hidden], vec![0.0; hidden]);
    for s in history {
        let e = model.entity_of(s)?;
        let x = tape.row(v["dkt.input"], 2 * e + usize::from(s.correct));
        let (nh, nc) = lstm_step(tape, v, x, h, c, hidden);
        h = nh;
        c = nc;
    }
    Ok(h)
}

fn dkt_logits(tape: &mut Tape, v: &IndexMap<String, Var>, h: Var) -> Var {
    let hw = tape.vecmat(h, v["dkt.head.w"]);
    tape.add_rows(hw, v["dkt.head.b"])
}

/// Next-step correctness probability for every entity given a history.
/// An empty history yields the prior sigmoid(head bias).
pub fn dkt_forward(model: &SeqKtModel, history: &[(usize, bool)]) -> Result<Vec<f64>> {
    if model.kind != SeqKind::Dkt {
        return Err(Error::InvalidArgument("dkt_forward requires a DKT model".into()));
    }
    let steps: Vec<SeqStep> = history
        .iter()
        .map(|&(e, correct)| match model.entity {
            SeqEntity::Question => SeqStep { qid: Some(e), cid: None, correct },
            SeqEntity::Concept => SeqStep { qid: None, cid: Some(e), correct },
        })
        .collect();
    let mut tape = Tape::new();
    let v = bind_all(&mut tape, &model.params);
    let h = dkt_hidden(&mut tape, model, &v, &steps)?;
    let logits = dkt_logits(&mut tape, &v, h);
    let probs = tape.sigmoid(logits);
    Ok(tape.value(probs).data.clone())
}

/// Training loss over one full student sequence: every step predicts the
/// next interaction's outcome. With an auxiliary concept table, a second
/// bilinear head predicts the same label from the next concept embedding.
fn dkt_sequence_loss(
    tape: &mut Tape,
    model: &SeqKtModel,
    v: &IndexMap<String, Var>,
    seq: &[SeqStep],
) -> Result<Var> {
    let hidden = model.hidden;
    let mut h = tape.constant_vec(vec![hidden], vec![0.0; hidden]);
    let mut c = tape.constant_vec(vec![hidden], vec![0.0; hidden]);
    let mut main_logits = Vec::new();
    let mut labels = Vec::new();
    let mut aux_logits = Vec::new();
    let mut aux_labels = Vec::new();
    let use_aux = model.has_aux_concepts();
    for t in 0..seq.len() - 1 {
        let e = model.entity_of(&seq[t])?;
        let x = tape.row(v["dkt.input"], 2 * e + usize::from(seq[t].correct));
        let (nh, nc) = lstm_step(tape, v, x, h, c, hidden);
        h = nh;
        c = nc;
        let next = &seq[t + 1];
        let e_next = model.entity_of(next)?;
        let logits = dkt_logits(tape, v, h);
        main_logits.push(tape.pick(logits, e_next));
        labels.push(if next.correct { 1.0 } else { 0.0 });
        if use_aux {
            if let Some(cid) = next.cid {
                if cid >= model.n_concepts {
                    return Err(Error::InvalidArgument(format!(
                        "concept id {cid} out of range (< {})",
                        model.n_concepts
                    )));
                }
                let c_emb = tape.row(v["dkt.concepts"], cid);
                let m = tape.vecmat(c_emb, v["dkt.aux.m"]);
                let hm = tape.mul(h, m);
                let score = tape.sum_all(hm);
                let biased = tape.add(score, v["dkt.aux.b"]);
                aux_logits.push(biased);
                aux_labels.push(if next.correct { 1.0 } else { 0.0 });
            }
        }
    }
    let main = tape.bce_many(&main_logits, &labels);
    if aux_logits.is_empty() {
        return Ok(main);
    }
    let aux = tape.bce_many(&aux_logits, &aux_labels);
    let aux_scaled = tape.scale(aux, 0.5);
    Ok(tape.add(main, aux_scaled))
}

fn akt_item_embedding(
    tape: &mut Tape,
    model: &SeqKtModel,
    v: &IndexMap<String, Var>,
    s: &SeqStep,
    with_answer: bool,
) -> Result<Var> {
    let mut emb: Option<Var> = None;
    if let Some(q) = s.qid {
        if q >= model.n_questions {
            return Err(Error::InvalidArgument(format!(
                "question id {q} out of range (< {})",
                model.n_questions
            )));
        }
        emb = Some(tape.row(v["akt.eq"], q));
    }
    if let Some(c) = s.cid {
        if model.params.contains_key("akt.ec") {
            if c >= model.n_concepts {
                return Err(Error::InvalidArgument(format!(
                    "concept id {c} out of range (< {})",
                    model.n_concepts
                )));
            }
            let ce = tape.row(v["akt.ec"], c);
            emb = Some(match emb {
                Some(e) => tape.add(e, ce),
                None => ce,
            });
        }
    }
    let mut emb = emb.ok_or_else(|| {
        Error::InvalidArgument("interaction has neither question nor concept id".into())
    })?;
    if with_answer {
        let a = tape.row(v["akt.answer"], usize::from(s.correct));
        emb = tape.add(emb, a);
    }
    Ok(emb)
}

/// Builds the AKT-lite logit for one window on the given tape.
fn akt_window_logit(
    tape: &mut Tape,
    model: &SeqKtModel,
    v: &IndexMap<String, Var>,
    history: &[SeqStep],
    target: &SeqStep,
) -> Result<Var> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("akt needs a nonempty history".into()));
    }
    let d = model.d_s;
    let rows: Vec<Var> = history
        .iter()
        .map(|s| akt_item_embedding(tape, model, v, s, true))
        .collect::<Result<_>>()?;
    let t_emb = akt_item_embedding(tape, model, v, target, false)?;
    let qvec = tape.vecmat(t_emb, v["akt.wq"]);
    // scores with monotonic distance decay
    let theta = tape.softplus(v["akt.theta"]);
    let n = history.len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = Vec::with_capacity(n);
    for (i, &row) in rows.iter().enumerate() {
        let k = tape.vecmat(row, v["akt.wk"]);
        let kq = tape.mul(k, qvec);
        let s = tape.sum_all(kq);
        let s = tape.scale(s, scale);
        let dist = tape.constant_vec(vec![1], vec![(n - i) as f64]);
        let decay = tape.mul_scalar_var(dist, theta);
        scores.push(tape.sub(s, decay));
    }
    let mut score_vec = scores[0];
    for &s in &scores[1..] {
        score_vec = tape.concat_vec(score_vec, s);
    }
    let weights = tape.softmax_rows(score_vec);
    let mut attended = tape.constant_vec(vec![d], vec![0.0; d]);
    for (i, &row) in rows.iter().enumerate() {
        let val = tape.vecmat(row, v["akt.wv"]);
        let w = tape.pick(weights, i);
        let wv = tape.mul_scalar_var(val, w);
        attended = tape.add(attended, wv);
    }
    let joint = tape.concat_vec(attended, t_emb);
    let h1 = tape.vecmat(joint, v["akt.head.w1"]);
    let h1 = tape.add_rows(h1, v["akt.head.b1"]);
    let h1 = tape.gelu(h1);
    let out = tape.vecmat(h1, v["akt.head.w2"]);
    Ok(tape.add_rows(out, v["akt.head.b2"]))
}

/// Correctness probability for a target after a history, plus the attention
/// weights over the history.
pub fn akt_forward(
    model: &SeqKtModel,
    history: &[(Option<usize>, Option<usize>, bool)],
    target: (Option<usize>, Option<usize>),
) -> Result<(f64, Vec<f64>)> {
    if model.kind != SeqKind::AktLite {
        return Err(Error::InvalidArgument("akt_forward requires an AKT-lite model".into()));
    }
    let steps: Vec<SeqStep> = history
        .iter()
        .map(|&(qid, cid, correct)| SeqStep { qid, cid, correct })
        .collect();
    let t = SeqStep { qid: target.0, cid: target.1, correct: false };
    let mut tape = Tape::new();
    let v = bind_all(&mut tape, &model.params);
    let logit = akt_window_logit(&mut tape, model, &v, &steps, &t)?;
    let prob = tape.sigmoid(logit);
    let p = tape.value(prob).data[0];
    // recover the weights: the softmax node sits right before the value mixing
    let mut tape2 = Tape::new();
    let v2 = bind_all(&mut tape2, &model.params);
    let weights = akt_attention_weights(&mut tape2, model, &v2, &steps, &t)?;
    Ok((p, weights))
}

fn akt_attention_weights(
    tape: &mut Tape,
    model: &SeqKtModel,
    v: &IndexMap<String, Var>,
    history: &[SeqStep],
    target: &SeqStep,
) -> Result<Vec<f64>> {
    let d = model.d_s;
    let rows: Vec<Var> = history
        .iter()
        .map(|s| akt_item_embedding(tape, model, v, s, true))
        .collect::<Result<_>>()?;
    let t_emb = akt_item_embedding(tape, model, v, target, false)?;
    let qvec = tape.vecmat(t_emb, v["akt.wq"]);
    let theta = tape.softplus(v["akt.theta"]);
    let n = history.len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut score_vec: Option<Var> = None;
    for (i, &row) in rows.iter().enumerate() {
        let k = tape.vecmat(row, v["akt.wk"]);
        let kq = tape.mul(k, qvec);
        let s = tape.sum_all(kq);
        let s = tape.scale(s, scale);
        let dist = tape.constant_vec(vec![1], vec![(n - i) as f64]);
        let decay = tape.mul_scalar_var(dist, theta);
        let sc = tape.sub(s, decay);
        score_vec = Some(match score_vec {
            Some(acc) => tape.concat_vec(acc, sc),
            None => sc,
        });
    }
    let weights = tape.softmax_rows(score_vec.expect("nonempty history"));
    Ok(tape.value(weights).data.clone())
}

// ── training ────────────────────────────────────────────────────────────

fn group_sequences(train: &[Interaction]) -> Vec<Vec<SeqStep>> {
    let mut per_student: IndexMap<&str, Vec<&Interaction>> = IndexMap::new();
    for it in train {
        per_student.entry(it.student_id.as_str()).or_default().push(it);
    }
    per_student.sort_keys();
    per_student
        .into_iter()
        .map(|(_, mut items)| {
            items.sort_by_key(|it| it.seq_index);
            items.into_iter().map(step_of).collect()
        })
        .filter(|s: &Vec<SeqStep>| s.len() >= 2)
        .collect()
}

fn window_steps(w: &HistoryWindow, max_history: usize) -> (Vec<SeqStep>, SeqStep) {
    let start = w.history.len().saturating_sub(max_history);
    let hist = w.history[start..].iter().map(step_of).collect();
    (hist, step_of(&w.target))
}

/// Per-window predictions used for validation and embedding quality checks.
pub fn predict_windows(
    model: &SeqKtModel,
    windows: &[&HistoryWindow],
    max_history: usize,
    exec: ExecMode,
) -> Result<Vec<f64>> {
    let results = map_indexed(exec, windows, |_, w| -> Result<f64> {
        let (hist, target) = window_steps(w, max_history);
        let mut tape = Tape::new();
        let v = bind_all(&mut tape, &model.params);
        match model.kind {
            SeqKind::Dkt => {
                let h = dkt_hidden(&mut tape, model, &v, &hist)?;
                let logits = dkt_logits(&mut tape, &v, h);
                let probs = tape.sigmoid(logits);
                let e = model.entity_of(&target)?;
                Ok(tape.value(probs).data[e])
            }
            SeqKind::AktLite => {
                let logit = akt_window_logit(&mut tape, model, &v, &hist, &target)?;
                let prob = tape.sigmoid(logit);
                Ok(tape.value(prob).data[0])
            }
        }
    });
    results.into_iter().collect()
}

fn mean_train_loss(
    model: &SeqKtModel,
    sequences: &[Vec<SeqStep>],
    windows: &[(Vec<SeqStep>, SeqStep)],
    exec: ExecMode,
) -> Result<f64> {
    match model.kind {
        SeqKind::Dkt => {
            let losses = map_indexed(exec, sequences, |_, seq| -> Result<f64> {
                let mut tape = Tape::new();
                let v = bind_all(&mut tape, &model.params);
                let loss = dkt_sequence_loss(&mut tape, model, &v, seq)?;
                Ok(tape.value(loss).data[0])
            });
            let vals = losses.into_iter().collect::<Result<Vec<f64>>>()?;
            Ok(vals.iter().sum::<f64>() / vals.len() as f64)
        }
        SeqKind::AktLite => {
            let losses = map_indexed(exec, windows, |_, (hist, target)| -> Result<f64> {
                let mut tape = Tape::new();
                let v = bind_all(&mut tape, &model.params);
                let logit = akt_window_logit(&mut tape, model, &v, hist, target)?;
                let label = if target.correct { 1.0 } else { 0.0 };
                let loss = tape.bce_many(&[logit], &[label]);
                Ok(tape.value(loss).data[0])
            });
            let vals = losses.into_iter().collect::<Result<Vec<f64>>>()?;
            Ok(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Trains a sequence encoder with early stopping on validation AUC.
pub fn train_seq_encoder(
    train: &[Interaction],
    valid_windows: &[&HistoryWindow],
    kind: SeqKind,
    n_questions: usize,
    n_concepts: usize,
    cfg: &SeqTrainConfig,
) -> Result<(SeqKtModel, SeqValReport)> {
    if train.is_empty() {
        return Err(Error::Training("empty training split".into()));
    }
    let mut model = SeqKtModel::init(kind, n_questions, n_concepts, cfg.d_s, cfg.hidden, cfg.seed)?;
    let sequences = group_sequences(train);
    let train_full = crate::data::window_histories(train, cfg.max_history)?;
    let train_window_steps: Vec<(Vec<SeqStep>, SeqStep)> = train_full
        .iter()
        .map(|w| window_steps(w, cfg.max_history))
        .collect();
    if sequences.is_empty() {
        return Err(Error::Training("no student has two or more interactions".into()));
    }

    let n_items = match kind {
        SeqKind::Dkt => sequences.len(),
        SeqKind::AktLite => train_window_steps.len(),
    };
    let per_epoch = cfg.items_per_epoch.unwrap_or(n_items).min(n_items);
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut report = SeqValReport {
        auc: 0.0,
        acc: 0.0,
        best_epoch: 0,
        epochs_run: 0,
        loss_history: vec![mean_train_loss(&model, &sequences, &train_window_steps, cfg.exec)?],
    };
    let mut best_params: Option<IndexMap<String, Tensor>> = None;
    let mut best_auc = f64::NEG_INFINITY;
    let valid_labels: Vec<bool> = valid_windows.iter().map(|w| w.label).collect();

    let mut step_no = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_items).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 101, epoch as u64));
        order.shuffle(&mut rng);
        order.truncate(per_epoch);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch) {
            opt.set_lr(cosine_lr(step_no.min(total_steps), total_steps, cfg.lr)?);
            step_no += 1;
            let results: Vec<Result<(f64, Gradients)>> =
                map_indexed(cfg.exec, chunk, |_, &idx| -> Result<(f64, Gradients)> {
                    let mut tape = Tape::new();
                    let v = bind_all(&mut tape, &model.params);
                    let loss = match kind {
                        SeqKind::Dkt => dkt_sequence_loss(&mut tape, &model, &v, &sequences[idx])?,
                        SeqKind::AktLite => {
                            let (hist, target) = &train_window_steps[idx];
                            let logit = akt_window_logit(&mut tape, &model, &v, hist, target)?;
                            let label = if target.correct { 1.0 } else { 0.0 };
                            tape.bce_many(&[logit], &[label])
                        }
                    };
                    let value = tape.value(loss).data[0];
                    let grads = tape.backward(loss)?;
                    Ok((value, grads))
                });
            let mut total = Gradients::default();
            let inv = 1.0 / chunk.len() as f64;
            for r in results {
                let (value, grads) = r?;
                epoch_loss += value;
                seen += 1;
                total.accumulate_scaled(&grads, inv);
            }
            opt.step(&mut model.params, &total)?;
        }
        report.loss_history.push(epoch_loss / seen as f64);
        report.epochs_run = epoch + 1;

        if !valid_windows.is_empty() {
            let preds = predict_windows(&model, valid_windows, cfg.max_history, cfg.exec)?;
            let val_auc = auc(&valid_labels, &preds)?;
            if val_auc > best_auc {
                best_auc = val_auc;
                report.auc = val_auc;
                report.acc = accuracy(&valid_labels, &preds)?;
                report.best_epoch = epoch + 1;
                best_params = Some(model.params.clone());
            } else if epoch + 1 - report.best_epoch >= cfg.patience {
                break;
            }
        }
    }
    if let Some(best) = best_params {
        model.params = best;
    }
    model.trained = true;
    Ok((model, report))
}

// ── embedding extraction ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdEmbeddings {
    pub d_s: usize,
    /// Row per question id; empty when the model has no question stream.
    pub questions: Vec<Vec<f64>>,
    pub concepts: Vec<Vec<f64>>,
}

/// Pulls the learned ID embeddings out of a model. DKT has no explicit
/// embedding table, so a question's vector is the mean of its two
/// input-projection rows (answered-wrong and answered-right variants).
pub fn extract_id_embeddings(model: &SeqKtModel) -> IdEmbeddings {
    if !model.trained {
        eprintln!("warning: extracting embeddings from an untrained sequence model");
    }
    let d = model.d_s;
    let row = |t: &Tensor, i: usize| t.data[i * d..(i + 1) * d].to_vec();
    match model.kind {
        SeqKind::Dkt => {
            let input = &model.params["dkt.input"];
            let n_e = model.entity_count();
            let averaged: Vec<Vec<f64>> = (0..n_e)
                .map(|e| {
                    let lo = row(input, 2 * e);
                    let hi = row(input, 2 * e + 1);
                    lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect()
                })
                .collect();
            let concepts = if model.has_aux_concepts() {
                let t = &model.params["dkt.concepts"];
                (0..model.n_concepts).map(|c| row(t, c)).collect()
            } else if model.entity == SeqEntity::Concept {
                averaged.clone()
            } else {
                Vec::new()
            };
            let questions = if model.entity == SeqEntity::Question { averaged } else { Vec::new() };
            IdEmbeddings { d_s: d, questions, concepts }
        }
        SeqKind::AktLite => {
            let questions = model
                .params
                .get("akt.eq")
                .map(|t| (0..model.n_questions).map(|q| row(t, q)).collect())
                .unwrap_or_default();
            let concepts = model
                .params
                .get("akt.ec")
                .map(|t| (0..model.n_concepts).map(|c| row(t, c)).collect())
                .unwrap_or_default();
            IdEmbeddings { d_s: d, questions, concepts }
        }
    }
}

//! Miniature decoder-only language model with slot-embedding injection,
//! LoRA adaptation, brief next-token pretraining, and the LLM-KT training
//! loop that supervises only the Yes/No answer token.

use std::collections::BTreeSet;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::context::{self, ContextEncoder};
use crate::data::{logistic, mix, HistoryWindow};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::fusion::{self, Fusion, FusedVec, SeqTables};
use crate::metrics::auc;
use crate::optim::{cosine_lr, AdamW};
use crate::prompt::{ablated_kind, plan_prompt, Entity, PromptPlan, TemplateKind, Vocab};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_e: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl LmConfig {
    /// Desk-scale architecture; the context window covers the longest
    /// rendered prompt at history length 100.
    pub fn desk(vocab_size: usize) -> LmConfig {
        LmConfig { vocab_size, d_e: 64, n_layers: 2, n_heads: 4, max_seq_len: 1600 }
    }
}

/// Decoder-only transformer: tied embeddings, pre-norm blocks with causal
/// attention (ALiBi position biases) and a GELU feed-forward.
#[derive(Debug, Clone)]
pub struct ToyLm {
    pub cfg: LmConfig,
    pub params: IndexMap<String, Tensor>,
}

impl ToyLm {
    pub fn init(cfg: LmConfig, seed: u64) -> Result<ToyLm> {
        if cfg.vocab_size == 0 || cfg.d_e == 0 || cfg.n_layers == 0 || cfg.max_seq_len == 0 {
            return Err(Error::InvalidArgument("lm dims must be positive".into()));
        }
        if cfg.n_heads == 0 || cfg.d_e % cfg.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "lm heads ({}) must divide d_e ({})",
                cfg.n_heads, cfg.d_e
            )));
        }
        let d = cfg.d_e;
        let s = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = IndexMap::new();
        p.insert("lm.embed".into(), Tensor::randn(vec![cfg.vocab_size, d], 0.1, &mut rng).param());
        for i in 0..cfg.n_layers {
            p.insert(format!("lm.b{i}.ln1.g"), Tensor::new(vec![d], vec![1.0; d]).param());
            p.insert(format!("lm.b{i}.ln1.b"), Tensor::zeros(vec![d]).param());
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("lm.b{i}.{w}"), Tensor::randn(vec![d, d], s, &mut rng).param());
            }
            p.insert(format!("lm.b{i}.ln2.g"), Tensor::new(vec![d], vec![1.0; d]).param());
            p.insert(format!("lm.b{i}.ln2.b"), Tensor::zeros(vec![d]).param());
            p.insert(format!("lm.b{i}.ffn.w1"), Tensor::randn(vec![d, 4 * d], s, &mut rng).param());
            p.insert(format!("lm.b{i}.ffn.b1"), Tensor::zeros(vec![4 * d]).param());
            p.insert(
                format!("lm.b{i}.ffn.w2"),
                Tensor::randn(vec![4 * d, d], 0.5 * s, &mut rng).param(),
            );
            p.insert(format!("lm.b{i}.ffn.b2"), Tensor::zeros(vec![d]).param());
        }
        p.insert("lm.lnf.g".into(), Tensor::new(vec![d], vec![1.0; d]).param());
        p.insert("lm.lnf.b".into(), Tensor::zeros(vec![d]).param());
        Ok(ToyLm { cfg, params: p })
    }

    pub fn set_base_trainable(&mut self, trainable: bool) {
        for t in self.params.values_mut() {
            t.requires_grad = trainable;
        }
    }
}

/// FNV-1a over parameter names and raw f64 bits; used to prove frozen
/// tensors stayed untouched.
pub fn weights_checksum(params: &IndexMap<String, Tensor>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    };
    for (name, t) in params {
        for b in name.bytes() {
            eat(b);
        }
        for x in &t.data {
            for b in x.to_bits().to_le_bytes() {
                eat(b);
            }
        }
    }
    h
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig::desk()
    }
}

impl LoraConfig {
    pub fn desk() -> LoraConfig {
        LoraConfig { rank: 8, alpha: 8.0, dropout: 0.0 }
    }

    /// Hyperparameters used with the full-size model.
    pub fn paper() -> LoraConfig {
        LoraConfig { rank: 32, alpha: 32.0, dropout: 0.1 }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.alpha <= 0.0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "bad lora config: rank {}, alpha {}, dropout {}",
                self.rank, self.alpha, self.dropout
            )));
        }
        Ok(())
    }
}

/// Low-rank updates for the attention query and value projections of every
/// block. B starts at zero so the wrapped model initially equals the base.
#[derive(Debug)]
pub struct LoraAdapter {
    pub cfg: LoraConfig,
    pub params: IndexMap<String, Tensor>,
}

pub const LORA_TARGETS: [&str; 2] = ["wq", "wv"];

impl LoraAdapter {
    pub fn init(lm: &LmConfig, cfg: LoraConfig, seed: u64) -> Result<LoraAdapter> {
        cfg.validate()?;
        let d = lm.d_e;
        let s = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = IndexMap::new();
        for i in 0..lm.n_layers {
            for w in LORA_TARGETS {
                p.insert(
                    format!("lora.b{i}.{w}.a"),
                    Tensor::randn(vec![d, cfg.rank], s, &mut rng).param(),
                );
                p.insert(format!("lora.b{i}.{w}.b"), Tensor::zeros(vec![cfg.rank, d]).param());
            }
        }
        Ok(LoraAdapter { cfg, params: p })
    }

    pub fn trainable_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }
}

fn bind_map(tape: &mut Tape, params: &IndexMap<String, Tensor>) -> IndexMap<String, Var> {
    params.iter().map(|(n, t)| (n.clone(), tape.param(n, t))).collect()
}

/// Inverted-dropout mask: kept entries carry 1/(1-p).
fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
}

struct LmForward<'a> {
    lm: &'a ToyLm,
    lora: Option<&'a LoraAdapter>,
}

impl<'a> LmForward<'a> {
    fn bind(&self, tape: &mut Tape) -> IndexMap<String, Var> {
        let mut v = bind_map(tape, &self.lm.params);
        if let Some(lora) = self.lora {
            v.extend(bind_map(tape, &lora.params));
        }
        v
    }

    /// One attention projection, optionally wrapped with its LoRA pair.
    fn proj(
        &self,
        tape: &mut Tape,
        v: &IndexMap<String, Var>,
        x: Var,
        layer: usize,
        which: &str,
        drop: &mut Option<(&mut ChaCha8Rng, f64)>,
    ) -> Var {
        let base = tape.matmul(x, v[&format!("lm.b{layer}.{which}")]);
        let Some(lora) = self.lora else { return base };
        if !LORA_TARGETS.contains(&which) {
            return base;
        }
        let x_in = match drop {
            Some((rng, p)) => {
                let len = tape.value(x).numel();
                let mask = dropout_mask(rng, len, *p);
                tape.mul_mask(x, mask)
            }
            None => x,
        };
        let xa = tape.matmul(x_in, v[&format!("lora.b{layer}.{which}.a")]);
        let xab = tape.matmul(xa, v[&format!("lora.b{layer}.{which}.b")]);
        let scaled = tape.scale(xab, lora.cfg.scale());
        tape.add(base, scaled)
    }

    /// Token rows through every block plus the final norm. Injection
    /// replaces embedding rows at the given positions before the first block.
    fn hidden(
        &self,
        tape: &mut Tape,
        v: &IndexMap<String, Var>,
        ids: &[usize],
        inject: &[(usize, Var)],
        mut drop: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<Var> {
        let cfg = &self.lm.cfg;
        let t = ids.len();
        if t == 0 {
            return Err(Error::InvalidArgument("cannot run the lm on zero tokens".into()));
        }
        if t > cfg.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "prompt of {t} tokens exceeds the context window {}",
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        for &(pos, var) in inject {
            if pos >= t {
                return Err(Error::InvalidArgument(format!(
                    "slot position {pos} outside prompt of {t} tokens"
                )));
            }
            let n = tape.value(var).numel();
            if n != cfg.d_e {
                return Err(Error::ShapeMismatch(format!(
                    "slot vector has {n} entries, lm expects {}",
                    cfg.d_e
                )));
            }
        }
        let mut x = if inject.is_empty() {
            tape.gather(v["lm.embed"], ids)
        } else {
            tape.gather_inject(v["lm.embed"], ids, inject)
        };
        for i in 0..cfg.n_layers {
            let n1 = tape.layer_norm(x, v[&format!("lm.b{i}.ln1.g")], v[&format!("lm.b{i}.ln1.b")]);
            let q = self.proj(tape, v, n1, i, "wq", &mut drop);
            let k = self.proj(tape, v, n1, i, "wk", &mut drop);
            let val = self.proj(tape, v, n1, i, "wv", &mut drop);
            let a = tape.causal_self_attention(q, k, val, cfg.n_heads, true);
            let a = self.proj(tape, v, a, i, "wo", &mut drop);
            x = tape.add(x, a);
            let n2 = tape.layer_norm(x, v[&format!("lm.b{i}.ln2.g")], v[&format!("lm.b{i}.ln2.b")]);
            let h = tape.matmul(n2, v[&format!("lm.b{i}.ffn.w1")]);
            let h = tape.add_rows(h, v[&format!("lm.b{i}.ffn.b1")]);
            let h = tape.gelu(h);
            let h = tape.matmul(h, v[&format!("lm.b{i}.ffn.w2")]);
            let h = tape.add_rows(h, v[&format!("lm.b{i}.ffn.b2")]);
            x = tape.add(x, h);
        }
        Ok(tape.layer_norm(x, v["lm.lnf.g"], v["lm.lnf.b"]))
    }

    /// Full-vocabulary logits at one position, via the tied embedding.
    fn logits_at(&self, tape: &mut Tape, v: &IndexMap<String, Var>, hidden: Var, pos: usize) -> Var {
        let row = tape.row(hidden, pos);
        tape.matvec(v["lm.embed"], row)
    }

    fn logits_all(&self, tape: &mut Tape, v: &IndexMap<String, Var>, hidden: Var) -> Var {
        tape.matmul_tb(hidden, v["lm.embed"])
    }
}

fn plan_ids(plan: &PromptPlan) -> Vec<usize> {
    plan.token_ids.iter().map(|&i| i as usize).collect()
}

fn inject_slots(
    tape: &mut Tape,
    d_e: usize,
    plan: &PromptPlan,
    slots: &[FusedVec],
) -> Result<Vec<(usize, Var)>> {
    if slots.len() != plan.slot_bindings.len() {
        return Err(Error::InvalidArgument(format!(
            "{} slot vectors for {} bindings",
            slots.len(),
            plan.slot_bindings.len()
        )));
    }
    plan.slot_bindings
        .iter()
        .zip(slots)
        .map(|(b, s)| {
            if s.values.len() != d_e {
                return Err(Error::ShapeMismatch(format!(
                    "slot vector has {} entries, lm expects {d_e}",
                    s.values.len()
                )));
            }
            let var = tape.constant_vec(vec![d_e], s.values.clone());
            Ok((b.position, var))
        })
        .collect()
}

/// Full-vocabulary logits at the answer position with slot vectors written
/// over the marker embeddings.
pub fn forward_injected(
    lm: &ToyLm,
    lora: Option<&LoraAdapter>,
    plan: &PromptPlan,
    slots: &[FusedVec],
) -> Result<Vec<f64>> {
    let fwd = LmForward { lm, lora };
    let mut tape = Tape::new();
    let v = fwd.bind(&mut tape);
    let inject = inject_slots(&mut tape, lm.cfg.d_e, plan, slots)?;
    let hidden = fwd.hidden(&mut tape, &v, &plan_ids(plan), &inject, None)?;
    let logits = fwd.logits_at(&mut tape, &v, hidden, plan.answer_position);
    Ok(tape.value(logits).data.clone())
}

/// Two-way softmax over the Yes/No logits, stable for any magnitudes.
pub fn two_way_prob(z_yes: f64, z_no: f64) -> f64 {
    logistic(z_yes - z_no)
}

pub fn predict_prob(
    lm: &ToyLm,
    lora: Option<&LoraAdapter>,
    plan: &PromptPlan,
    slots: &[FusedVec],
) -> Result<f64> {
    let logits = forward_injected(lm, lora, plan, slots)?;
    Ok(two_way_prob(logits[Vocab::YES as usize], logits[Vocab::NO as usize]))
}

// ── pretraining ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub items_per_epoch: Option<usize>,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 2,
            batch: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            items_per_epoch: None,
            seed: 42,
            exec: ExecMode::Parallel,
        }
    }
}

fn pretrain_loss(fwd: &LmForward, ids: &[usize]) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let v = fwd.bind(&mut tape);
    let hidden = fwd.hidden(&mut tape, &v, ids, &[], None)?;
    let logits = fwd.logits_all(&mut tape, &v, hidden);
    let mut targets: Vec<Option<usize>> = ids[1..].iter().map(|&i| Some(i)).collect();
    targets.push(None);
    let loss = tape.ce_seq(logits, &targets);
    let value = tape.value(loss).data[0];
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

/// Next-token training over rendered prompts; trains every base weight.
/// Returns the mean loss before training followed by one entry per epoch.
pub fn pretrain_lm(lm: &mut ToyLm, prompts: &[Vec<u32>], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    let usable: Vec<Vec<usize>> = prompts
        .iter()
        .filter(|p| p.len() >= 2)
        .map(|p| p.iter().map(|&i| i as usize).collect())
        .collect();
    if usable.is_empty() {
        return Err(Error::Training("no prompt has two or more tokens".into()));
    }
    lm.set_base_trainable(true);
    let per_epoch = cfg.items_per_epoch.unwrap_or(usable.len()).min(usable.len());
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);

    let initial = {
        let fwd = LmForward { lm, lora: None };
        let losses = map_indexed(cfg.exec, &usable, |_, ids| {
            let mut tape = Tape::new();
            let v = fwd.bind(&mut tape);
            let hidden = fwd.hidden(&mut tape, &v, ids, &[], None)?;
            let logits = fwd.logits_all(&mut tape, &v, hidden);
            let mut targets: Vec<Option<usize>> = ids[1..].iter().map(|&i| Some(i)).collect();
            targets.push(None);
            let loss = tape.ce_seq(logits, &targets);
            Ok(tape.value(loss).data[0])
        });
        let vals = losses.into_iter().collect::<Result<Vec<f64>>>()?;
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let mut history = vec![initial];

    let mut step_no = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 7, epoch as u64));
        order.shuffle(&mut rng);
        order.truncate(per_epoch);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch) {
            opt.set_lr(cosine_lr(step_no.min(total_steps), total_steps, cfg.lr)?);
            step_no += 1;
            let fwd = LmForward { lm, lora: None };
            let results = map_indexed(cfg.exec, chunk, |_, &idx| pretrain_loss(&fwd, &usable[idx]));
            let mut total = Gradients::default();
            let inv = 1.0 / chunk.len() as f64;
            for r in results {
                let (value, grads) = r?;
                if !value.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite pretraining loss {value} in epoch {epoch}"
                    )));
                }
                epoch_loss += value;
                seen += 1;
                total.accumulate_scaled(&grads, inv);
            }
            opt.step(&mut lm.params, &total)?;
        }
        history.push(epoch_loss / seen as f64);
    }
    Ok(history)
}

// ── the assembled LLM-KT model ──────────────────────────────────────────

/// Everything inference needs: base LM, LoRA, fusion, optional context
/// encoder, frozen sequence embeddings, vocabulary and template choice.
#[derive(Debug)]
pub struct LlmKtModel {
    pub lm: ToyLm,
    pub lora: LoraAdapter,
    pub fusion: Fusion,
    pub encoder: Option<ContextEncoder>,
    pub seq: Option<SeqTables>,
    pub vocab: Vocab,
    pub template: TemplateKind,
    pub drop: BTreeSet<Entity>,
}

impl LlmKtModel {
    pub fn effective_template(&self) -> Result<TemplateKind> {
        ablated_kind(self.template, &self.drop)
    }

    pub fn plan(&self, window: &HistoryWindow) -> Result<PromptPlan> {
        plan_prompt(self.effective_template()?, window, &self.vocab)
    }

    fn check_dims(&self) -> Result<()> {
        if self.fusion.d_e != self.lm.cfg.d_e {
            return Err(Error::ShapeMismatch(format!(
                "fusion outputs d_e={} but the lm embeds d_e={}",
                self.fusion.d_e, self.lm.cfg.d_e
            )));
        }
        if let Some(enc) = &self.encoder {
            if enc.d_t != self.fusion.d_t {
                return Err(Error::ShapeMismatch(format!(
                    "encoder d_t={} but the context adapter expects {}",
                    enc.d_t, self.fusion.d_t
                )));
            }
        }
        if let Some(seq) = &self.seq {
            if seq.d_s != self.fusion.d_s {
                return Err(Error::ShapeMismatch(format!(
                    "sequence embeddings d_s={} but the sequence adapter expects {}",
                    seq.d_s, self.fusion.d_s
                )));
            }
        }
        Ok(())
    }

    /// Answer-position logits for one window on a caller-owned tape.
    fn window_logits(
        &self,
        tape: &mut Tape,
        window: &HistoryWindow,
        drop_rng: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<Var> {
        let plan = self.plan(window)?;
        let fwd = LmForward { lm: &self.lm, lora: Some(&self.lora) };
        let v = fwd.bind(tape);
        let fusion_vars = fusion::bind_fusion(tape, &self.fusion);
        let enc_bound = self.encoder.as_ref().map(|e| {
            let vars = context::bind_ctx(tape, e);
            (e, vars)
        });
        let seq_bound = self.seq.as_ref().map(|s| (s, fusion::bind_seq(tape, s)));
        let src = fusion::SlotSources {
            fusion: &self.fusion,
            fusion_vars: &fusion_vars,
            encoder: enc_bound.as_ref().map(|(e, vars)| (*e, vars)),
            seq: seq_bound.as_ref().map(|(s, vars)| (*s, vars)),
        };
        let mut memo = IndexMap::new();
        let mut inject = Vec::with_capacity(plan.slot_bindings.len());
        for b in &plan.slot_bindings {
            let (var, _) = fusion::slot_embedding_graph(tape, &src, window, b, &mut memo)?;
            inject.push((b.position, var));
        }
        let hidden = fwd.hidden(tape, &v, &plan_ids(&plan), &inject, drop_rng)?;
        Ok(fwd.logits_at(tape, &v, hidden, plan.answer_position))
    }

    pub fn predict_window(&self, window: &HistoryWindow) -> Result<f64> {
        self.check_dims()?;
        let mut tape = Tape::new();
        let logits = self.window_logits(&mut tape, window, None)?;
        let lv = tape.value(logits);
        Ok(two_way_prob(lv.data[Vocab::YES as usize], lv.data[Vocab::NO as usize]))
    }

    pub fn predict_windows(&self, windows: &[&HistoryWindow], exec: ExecMode) -> Result<Vec<f64>> {
        self.check_dims()?;
        let results = map_indexed(exec, windows, |_, w| {
            let mut tape = Tape::new();
            let logits = self.window_logits(&mut tape, w, None)?;
            let lv = tape.value(logits);
            Ok(two_way_prob(lv.data[Vocab::YES as usize], lv.data[Vocab::NO as usize]))
        });
        results.into_iter().collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let arch = serde_json::to_value(self.cfg_manifest())?;
        let mut ck = Checkpoint::new().with_meta("manifest", arch);
        for (name, t) in self.lm.params.iter().chain(&self.lora.params).chain(&self.fusion.params)
        {
            ck.insert(name, t.clone());
        }
        if let Some(enc) = &self.encoder {
            for (name, t) in &enc.params {
                ck.insert(name, t.clone());
            }
        }
        if let Some(seq) = &self.seq {
            for (name, t) in &seq.params {
                ck.insert(name, t.clone());
            }
        }
        ck.save(path)
    }

    fn cfg_manifest(&self) -> Manifest {
        Manifest {
            lm: self.lm.cfg,
            lora: self.lora.cfg,
            merge: self.fusion.merge,
            d_t: self.fusion.d_t,
            d_s: self.fusion.d_s,
            encoder: self.encoder.as_ref().map(|e| EncoderManifest {
                n_heads: e.n_heads,
                max_len: e.max_len,
                trainable: e.is_trainable(),
            }),
            has_seq: self.seq.is_some(),
            seq_trainable: self.seq.as_ref().map(|s| s.is_trainable()).unwrap_or(false),
            template: self.template,
            drop: self.drop.iter().copied().collect(),
            vocab: self.vocab.clone(),
            vocab_sha256: self.vocab.fingerprint(),
        }
    }

    pub fn load(path: &Path) -> Result<LlmKtModel> {
        let mut ck = Checkpoint::load(path)?;
        let manifest: Manifest = serde_json::from_value(
            ck.meta
                .get("manifest")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing manifest".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        let mut lm = ToyLm::init(manifest.lm, 0)?;
        for (name, slot) in lm.params.iter_mut() {
            *slot = take_shaped(&mut ck, name, &slot.shape)?;
        }
        let mut lora = LoraAdapter::init(&manifest.lm, manifest.lora, 0)?;
        for (name, slot) in lora.params.iter_mut() {
            *slot = take_shaped(&mut ck, name, &slot.shape)?;
        }
        let mut fusion =
            Fusion::init(manifest.d_t, manifest.d_s, manifest.lm.d_e, manifest.merge, 0)?;
        for (name, slot) in fusion.params.iter_mut() {
            *slot = take_shaped(&mut ck, name, &slot.shape)?;
        }
        let encoder = match &manifest.encoder {
            Some(em) => {
                let mut enc = ContextEncoder::init(
                    manifest.vocab.clone(),
                    manifest.d_t,
                    em.n_heads,
                    em.max_len,
                    0,
                )?;
                for (name, slot) in enc.params.iter_mut() {
                    *slot = take_shaped(&mut ck, name, &slot.shape)?;
                }
                enc.set_trainable(em.trainable);
                Some(enc)
            }
            None => None,
        };
        let seq = if manifest.has_seq {
            let mut params = IndexMap::new();
            for key in [fusion::SEQ_Q, fusion::SEQ_C] {
                let t = ck.take(key)?;
                if t.shape.len() != 2 || t.shape[1] != manifest.d_s {
                    return Err(Error::Checkpoint(format!(
                        "tensor {key} has shape {:?}, expected [*, {}]",
                        t.shape, manifest.d_s
                    )));
                }
                params.insert(key.to_string(), t);
            }
            let mut tables = SeqTables { d_s: manifest.d_s, params };
            tables.set_trainable(manifest.seq_trainable);
            Some(tables)
        } else {
            None
        };
        Ok(LlmKtModel {
            lm,
            lora,
            fusion,
            encoder,
            seq,
            vocab: manifest.vocab,
            template: manifest.template,
            drop: manifest.drop.into_iter().collect(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    lm: LmConfig,
    lora: LoraConfig,
    merge: crate::fusion::MergeKind,
    d_t: usize,
    d_s: usize,
    encoder: Option<EncoderManifest>,
    has_seq: bool,
    seq_trainable: bool,
    template: TemplateKind,
    drop: Vec<Entity>,
    vocab: Vocab,
    vocab_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct EncoderManifest {
    n_heads: usize,
    max_len: usize,
    trainable: bool,
}

fn take_shaped(ck: &mut Checkpoint, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = ck.take(name)?;
    if t.shape != shape {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has shape {:?}, expected {shape:?}",
            t.shape
        )));
    }
    Ok(t)
}

// ── LLM-KT training ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub grad_accum: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub items_per_epoch: Option<usize>,
    /// Cap on validation windows scored per epoch (evenly strided subset).
    pub valid_cap: Option<usize>,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: 32,
            grad_accum: 1,
            lr: 3e-4,
            weight_decay: 1e-5,
            patience: 3,
            items_per_epoch: None,
            valid_cap: None,
            seed: 42,
            exec: ExecMode::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.epochs > 10 {
            return Err(Error::InvalidArgument(format!(
                "epochs must lie in 1..=10, got {}",
                self.epochs
            )));
        }
        if self.batch == 0 || self.grad_accum == 0 || self.patience == 0 {
            return Err(Error::InvalidArgument(
                "batch, grad_accum and patience must be at least 1".into(),
            ));
        }
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "bad optimizer settings: lr {}, weight_decay {}",
                self.lr, self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCurves {
    pub stats: Vec<EpochStat>,
    pub best_epoch: usize,
    pub best_auc: f64,
}

impl TrainCurves {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,train_loss,valid_auc\n");
        for s in &self.stats {
            out.push_str(&format!("{},{},{}\n", s.epoch, s.train_loss, s.valid_auc));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

pub(crate) fn strided_subset<'w>(
    windows: &[&'w HistoryWindow],
    cap: Option<usize>,
) -> Vec<&'w HistoryWindow> {
    match cap {
        Some(cap) if cap > 0 && windows.len() > cap => {
            let step = windows.len() as f64 / cap as f64;
            (0..cap).map(|i| windows[(i as f64 * step) as usize]).collect()
        }
        _ => windows.to_vec(),
    }
}

fn split_by_prefix(grads: &Gradients, prefix: &str) -> Gradients {
    let mut out = Gradients::default();
    for (name, g) in &grads.by_name {
        if name.starts_with(prefix) {
            out.by_name.insert(name.clone(), g.clone());
        }
    }
    out
}

/// Fine-tunes LoRA, the adapters and (unless frozen) the context encoder
/// with cross-entropy on the answer token only. Base LM weights and the
/// sequence embeddings stay untouched.
pub fn train_llm_kt(
    model: &mut LlmKtModel,
    train_windows: &[&HistoryWindow],
    valid_windows: &[&HistoryWindow],
    cfg: &TrainConfig,
) -> Result<TrainCurves> {
    cfg.validate()?;
    if train_windows.is_empty() {
        return Err(Error::Training("empty training split".into()));
    }
    if valid_windows.is_empty() {
        return Err(Error::Training("empty validation split".into()));
    }
    model.check_dims()?;
    model.lm.set_base_trainable(false);

    let train_ctx = model.encoder.as_ref().map(|e| e.is_trainable()).unwrap_or(false);
    let train_seq = model.seq.as_ref().map(|s| s.is_trainable()).unwrap_or(false);
    let mut opt_lora = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut opt_fuse = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut opt_ctx = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut opt_seq = AdamW::new(cfg.lr, cfg.weight_decay);

    let n_items = train_windows.len();
    let per_epoch = cfg.items_per_epoch.unwrap_or(n_items).min(n_items);
    let micro = cfg.batch;
    let macro_size = micro * cfg.grad_accum;
    let steps_per_epoch = per_epoch.div_ceil(macro_size);
    let total_steps = steps_per_epoch * cfg.epochs;

    let valid_subset = strided_subset(valid_windows, cfg.valid_cap);
    let valid_labels: Vec<bool> = valid_subset.iter().map(|w| w.label).collect();

    let mut curves = TrainCurves { stats: Vec::new(), best_epoch: 0, best_auc: f64::NEG_INFINITY };
    let mut best: Option<Snapshot> = None;

    let mut step_no = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_items).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 11, epoch as u64));
        order.shuffle(&mut rng);
        order.truncate(per_epoch);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for macro_chunk in order.chunks(macro_size) {
            let lr = cosine_lr(step_no.min(total_steps), total_steps, cfg.lr)?;
            opt_lora.set_lr(lr);
            opt_fuse.set_lr(lr);
            opt_ctx.set_lr(lr);
            opt_seq.set_lr(lr);
            step_no += 1;
            let mut total = Gradients::default();
            let inv = 1.0 / macro_chunk.len() as f64;
            for chunk in macro_chunk.chunks(micro) {
                let dropout = model.lora.cfg.dropout;
                let results = map_indexed(cfg.exec, chunk, |_, &idx| -> Result<(f64, Gradients)> {
                    let w = train_windows[idx];
                    let mut tape = Tape::new();
                    let mut drop_rng;
                    let drop = if dropout > 0.0 {
                        drop_rng = ChaCha8Rng::seed_from_u64(mix(
                            cfg.seed,
                            13,
                            ((epoch as u64) << 32) | idx as u64,
                        ));
                        Some((&mut drop_rng, dropout))
                    } else {
                        None
                    };
                    let logits = model.window_logits(&mut tape, w, drop)?;
                    let gold = (if w.label { Vocab::YES } else { Vocab::NO }) as usize;
                    let loss = tape.ce_row(logits, gold);
                    let value = tape.value(loss).data[0];
                    let grads = tape.backward(loss)?;
                    Ok((value, grads))
                });
                for r in results {
                    let (value, grads) = r?;
                    if !value.is_finite() {
                        return Err(Error::Training(format!(
                            "non-finite answer loss {value} in epoch {epoch} step {step_no}"
                        )));
                    }
                    epoch_loss += value;
                    seen += 1;
                    total.accumulate_scaled(&grads, inv);
                }
            }
            opt_lora.step(&mut model.lora.params, &split_by_prefix(&total, "lora."))?;
            opt_fuse.step(&mut model.fusion.params, &split_by_prefix(&total, "fuse."))?;
            if train_ctx {
                if let Some(enc) = &mut model.encoder {
                    opt_ctx.step(&mut enc.params, &split_by_prefix(&total, "ctx."))?;
                }
            }
            if train_seq {
                if let Some(seq) = &mut model.seq {
                    opt_seq.step(&mut seq.params, &split_by_prefix(&total, "seq."))?;
                }
            }
        }

        let preds = model.predict_windows(&valid_subset, cfg.exec)?;
        let val_auc = auc(&valid_labels, &preds)?;
        curves.stats.push(EpochStat {
            epoch: epoch + 1,
            train_loss: epoch_loss / seen as f64,
            valid_auc: val_auc,
        });
        if val_auc > curves.best_auc {
            curves.best_auc = val_auc;
            curves.best_epoch = epoch + 1;
            best = Some(Snapshot {
                lora: model.lora.params.clone(),
                fuse: model.fusion.params.clone(),
                ctx: model.encoder.as_ref().map(|e| e.params.clone()),
                seq: model.seq.as_ref().map(|s| s.params.clone()),
            });
        } else if epoch + 1 - curves.best_epoch >= cfg.patience {
            break;
        }
    }

    if let Some(snap) = best {
        model.lora.params = snap.lora;
        model.fusion.params = snap.fuse;
        if let (Some(enc), Some(ctx)) = (&mut model.encoder, snap.ctx) {
            enc.params = ctx;
        }
        if let (Some(tables), Some(seq)) = (&mut model.seq, snap.seq) {
            tables.params = seq;
        }
    }
    Ok(curves)
}

struct Snapshot {
    lora: IndexMap<String, Tensor>,
    fuse: IndexMap<String, Tensor>,
    ctx: Option<IndexMap<String, Tensor>>,
    seq: Option<IndexMap<String, Tensor>>,
}

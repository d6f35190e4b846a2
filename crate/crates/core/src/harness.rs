//! Pipeline stages that connect the pieces end to end: data preparation,
//! sequence-encoder training, LLM-KT assembly and fine-tuning, evaluation,
//! and the ablation / sweep drivers the CLI exposes.
//!
//! Every stage is a pure function of a [`RunConfig`] and the prepared data,
//! so the CLI subcommands and the test suite share one code path. Stage
//! seeds all derive from the master seed, which makes reruns bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{streams, DataSource, RunConfig, SeqEncoderKind};
use crate::context::ContextEncoder;
use crate::data::{
    entity_counts, load_csv, split_students, synth_generate, window_histories, DatasetSplit,
    HistoryWindow, Interaction, SchemaKind,
};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::fusion::{Fusion, MergeKind, SeqTables};
use crate::lm::{
    pretrain_lm, strided_subset, train_llm_kt, LlmKtModel, LmConfig, LoraAdapter, ToyLm,
    TrainCurves,
};
use crate::metrics::{accuracy, auc};
use crate::prompt::{ablated_kind, render, render_ablated, Entity, Vocab};
use crate::seqkt::{
    extract_id_embeddings, predict_windows as predict_seq_windows, train_seq_encoder, SeqKind,
    SeqKtModel, SeqValReport,
};

/// File names every pipeline stage agrees on inside the output directory.
pub mod artifacts {
    pub const CONFIG: &str = "config.json";
    pub const DATA: &str = "data.csv";
    pub const ORACLE: &str = "oracle.json";
    pub const SPLITS: &str = "splits.json";
    pub const SEQ_MODEL: &str = "seq_model.json";
    pub const SEQ_METRICS: &str = "seq_metrics.json";
    pub const ID_EMBEDDINGS: &str = "id_embeddings.json";
    pub const MODEL: &str = "llmkt.json";
    pub const CURVES: &str = "curves.csv";
    pub const METRICS: &str = "metrics.json";
    pub const METRICS_CSV: &str = "metrics.csv";
    pub const ABLATION: &str = "ablation.csv";
    pub const ABLATION_JSON: &str = "ablation.json";
    pub const SWEEP_LENGTH: &str = "sweep_length.csv";
    pub const SWEEP_MERGE: &str = "sweep_merge.csv";
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

// ── data stage ──────────────────────────────────────────────────────────

/// The loaded dataset plus its student-level split and entity ranges.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub interactions: Vec<Interaction>,
    pub split: DatasetSplit,
    pub n_questions: usize,
    pub n_concepts: usize,
    pub has_texts: bool,
}

/// Loads or synthesizes the interactions named by the config. When an
/// output directory already holds a data file, that file wins, so a run
/// always trains on exactly the bytes `prepare` wrote.
pub fn dataset_interactions(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<Interaction>> {
    match &cfg.data {
        DataSource::Synth { spec } => {
            if let Some(dir) = out {
                let path = dir.join(artifacts::DATA);
                if path.exists() {
                    return Ok(load_csv(&path, SchemaKind::Native)?.interactions);
                }
            }
            Ok(synth_generate(spec).interactions)
        }
        DataSource::Csv { path, schema } => Ok(load_csv(Path::new(path), *schema)?.interactions),
    }
}

fn bundle_with_split(interactions: Vec<Interaction>, split: DatasetSplit) -> DataBundle {
    let counts = entity_counts(&interactions);
    let has_texts = interactions
        .iter()
        .any(|i| i.question_text.is_some() || !i.concept_texts.is_empty());
    DataBundle {
        interactions,
        split,
        n_questions: counts.n_questions,
        n_concepts: counts.n_concepts,
        has_texts,
    }
}

/// Builds the bundle from scratch: source the interactions, then split
/// students with the seed derived for the split stage.
pub fn prepare_bundle(cfg: &RunConfig) -> Result<DataBundle> {
    let interactions = dataset_interactions(cfg, None)?;
    let students: Vec<String> = interactions.iter().map(|i| i.student_id.clone()).collect();
    let split = split_students(&students, cfg.stage_seed(streams::SPLIT))?;
    Ok(bundle_with_split(interactions, split))
}

/// Rebuilds the bundle from artifacts a previous `prepare` wrote.
pub fn load_bundle(cfg: &RunConfig, out: &Path) -> Result<DataBundle> {
    let interactions = dataset_interactions(cfg, Some(out))?;
    let split = DatasetSplit::load(&out.join(artifacts::SPLITS))?;
    Ok(bundle_with_split(interactions, split))
}

/// The `prepare` stage: source the interactions (reusing a data file the
/// output directory already holds), split students, persist the split.
pub fn prepare_to_dir(cfg: &RunConfig, out: &Path) -> Result<DataBundle> {
    let interactions = dataset_interactions(cfg, Some(out))?;
    let students: Vec<String> = interactions.iter().map(|i| i.student_id.clone()).collect();
    let split = split_students(&students, cfg.stage_seed(streams::SPLIT))?;
    split.save(&out.join(artifacts::SPLITS))?;
    Ok(bundle_with_split(interactions, split))
}

/// Windows at a fixed history length, with index lists per split so the
/// same materialized windows back train, valid and test views.
#[derive(Debug)]
pub struct WindowSet {
    pub windows: Vec<HistoryWindow>,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl WindowSet {
    pub fn build(bundle: &DataBundle, max_history: usize) -> Result<WindowSet> {
        let windows = window_histories(&bundle.interactions, max_history)?;
        let mut train = Vec::new();
        let mut valid = Vec::new();
        let mut test = Vec::new();
        for (i, w) in windows.iter().enumerate() {
            let sid = &w.target.student_id;
            if bundle.split.in_train(sid) {
                train.push(i);
            } else if bundle.split.in_valid(sid) {
                valid.push(i);
            } else if bundle.split.in_test(sid) {
                test.push(i);
            }
        }
        Ok(WindowSet { windows, train, valid, test })
    }

    pub fn refs(&self, indices: &[usize]) -> Vec<&HistoryWindow> {
        indices.iter().map(|&i| &self.windows[i]).collect()
    }
}

fn train_interactions(bundle: &DataBundle) -> Vec<Interaction> {
    bundle
        .interactions
        .iter()
        .filter(|i| bundle.split.in_train(&i.student_id))
        .cloned()
        .collect()
}

// ── sequence-encoder stage ──────────────────────────────────────────────

/// Output of the sequence stage: a trained encoder when one was asked for,
/// and the slot-embedding tables handed to the LLM-KT model. Token-init
/// produces trainable random tables and no encoder; `none` produces
/// neither.
#[derive(Debug)]
pub struct SeqStage {
    pub model: Option<SeqKtModel>,
    pub report: Option<SeqValReport>,
    pub tables: Option<SeqTables>,
}

pub fn run_seq_stage(cfg: &RunConfig, bundle: &DataBundle, ws: &WindowSet) -> Result<SeqStage> {
    let kind = match cfg.seq_encoder {
        SeqEncoderKind::None => return Ok(SeqStage { model: None, report: None, tables: None }),
        SeqEncoderKind::TokenInit => {
            let mut tables = SeqTables::random(
                bundle.n_questions,
                bundle.n_concepts,
                cfg.seq_train.d_s,
                cfg.stage_seed(streams::TOKEN_INIT),
            );
            tables.set_trainable(true);
            return Ok(SeqStage { model: None, report: None, tables: Some(tables) });
        }
        SeqEncoderKind::Dkt => SeqKind::Dkt,
        SeqEncoderKind::AktLite => SeqKind::AktLite,
    };
    let train = train_interactions(bundle);
    let valid = ws.refs(&ws.valid);
    let mut seq_cfg = cfg.seq_train.clone();
    seq_cfg.max_history = cfg.max_history;
    let (model, report) =
        train_seq_encoder(&train, &valid, kind, bundle.n_questions, bundle.n_concepts, &seq_cfg)?;
    let tables = SeqTables::from_embeddings(&extract_id_embeddings(&model));
    Ok(SeqStage { model: Some(model), report: Some(report), tables: Some(tables) })
}

/// Reuses a saved encoder when the output directory has one; otherwise
/// trains from scratch. Either path yields the same tables because the
/// training stage is seed-deterministic.
pub fn load_or_run_seq_stage(
    cfg: &RunConfig,
    bundle: &DataBundle,
    ws: &WindowSet,
    out: Option<&Path>,
) -> Result<SeqStage> {
    if matches!(cfg.seq_encoder, SeqEncoderKind::Dkt | SeqEncoderKind::AktLite) {
        if let Some(dir) = out {
            let path = dir.join(artifacts::SEQ_MODEL);
            if path.exists() {
                let model = SeqKtModel::load(&path)?;
                let tables = SeqTables::from_embeddings(&extract_id_embeddings(&model));
                return Ok(SeqStage { model: Some(model), report: None, tables: Some(tables) });
            }
        }
    }
    run_seq_stage(cfg, bundle, ws)
}

// ── vocabulary ──────────────────────────────────────────────────────────

/// Builds the vocabulary from the training split only. Each training
/// interaction is rendered through the active template both as a correct
/// and as an incorrect history item, which covers every phrase and ID
/// numeral fine-tuning can encounter; unseen-split IDs fall back to the
/// unknown token by design.
pub fn build_vocab(cfg: &RunConfig, bundle: &DataBundle) -> Result<Vocab> {
    let mut corpus = Vec::new();
    for it in bundle.interactions.iter().filter(|i| bundle.split.in_train(&i.student_id)) {
        for correct in [true, false] {
            let mut item = it.clone();
            item.correct = correct;
            let window =
                HistoryWindow { history: vec![item], target: it.clone(), label: correct };
            corpus.push(render_ablated(cfg.template, &window, &cfg.drop)?);
        }
    }
    if corpus.is_empty() {
        return Err(Error::Training("no training interactions to build a vocabulary from".into()));
    }
    Ok(Vocab::build(corpus.iter().map(String::as_str)))
}

// ── model assembly and training ─────────────────────────────────────────

pub fn assemble_model(
    cfg: &RunConfig,
    vocab: Vocab,
    tables: Option<SeqTables>,
) -> Result<LlmKtModel> {
    let lm_cfg = LmConfig {
        vocab_size: vocab.len(),
        d_e: cfg.d_e,
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        max_seq_len: cfg.max_seq_len,
    };
    let lm = ToyLm::init(lm_cfg, cfg.stage_seed(streams::LM_INIT))?;
    assemble_with_base(cfg, vocab, lm, tables)
}

/// Assembly around an already-initialized (usually pretrained) base LM.
pub fn assemble_with_base(
    cfg: &RunConfig,
    vocab: Vocab,
    lm: ToyLm,
    tables: Option<SeqTables>,
) -> Result<LlmKtModel> {
    let lora = LoraAdapter::init(&lm.cfg, cfg.lora, cfg.stage_seed(streams::LORA_INIT))?;
    let d_s = tables.as_ref().map(|t| t.d_s).unwrap_or(cfg.seq_train.d_s);
    let fusion =
        Fusion::init(cfg.d_t, d_s, cfg.d_e, cfg.merge, cfg.stage_seed(streams::FUSION_INIT))?;
    let encoder = if cfg.use_context {
        let mut enc = ContextEncoder::init(
            vocab.clone(),
            cfg.d_t,
            cfg.ctx_heads,
            cfg.ctx_max_len,
            cfg.stage_seed(streams::CTX_INIT),
        )?;
        enc.set_trainable(cfg.train_context);
        Some(enc)
    } else {
        None
    };
    Ok(LlmKtModel {
        lm,
        lora,
        fusion,
        encoder,
        seq: tables,
        vocab,
        template: cfg.template,
        drop: cfg.drop.clone(),
    })
}

/// Renders capped training windows into next-token pretraining prompts.
/// No labels: the answer word stays out, so pretraining teaches template
/// structure and ID co-occurrence without seeing correctness.
pub fn pretrain_prompts(cfg: &RunConfig, vocab: &Vocab, ws: &WindowSet) -> Result<Vec<Vec<u32>>> {
    let kind = ablated_kind(cfg.template, &cfg.drop)?;
    let train = ws.refs(&ws.train);
    let short: Vec<&HistoryWindow> = train
        .into_iter()
        .filter(|w| w.history.len() <= cfg.pretrain_max_history)
        .collect();
    let chosen = strided_subset(&short, Some(cfg.pretrain_windows));
    if chosen.is_empty() {
        return Err(Error::Training("no training window is short enough to pretrain on".into()));
    }
    let mut prompts = Vec::with_capacity(chosen.len());
    for w in chosen {
        prompts.push(vocab.encode(&render(kind, w)?));
    }
    Ok(prompts)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: LlmKtModel,
    /// Mean next-token loss before pretraining, then one entry per epoch.
    pub pretrain_losses: Vec<f64>,
    pub curves: TrainCurves,
}

/// Pretrained bases keyed by everything pretraining depends on. Ablation
/// variants that share a template (and sweeps that share a window length)
/// reuse one base; pretraining is deterministic, so a hit is bit-identical
/// to retraining.
#[derive(Debug, Default)]
pub struct PretrainCache {
    entries: std::collections::HashMap<String, (Vocab, ToyLm, Vec<f64>)>,
}

impl PretrainCache {
    pub fn new() -> PretrainCache {
        PretrainCache::default()
    }
}

fn pretrained_base(
    cfg: &RunConfig,
    bundle: &DataBundle,
    ws: &WindowSet,
    cache: Option<&mut PretrainCache>,
) -> Result<(Vocab, ToyLm, Vec<f64>)> {
    let vocab = build_vocab(cfg, bundle)?;
    let key = format!(
        "{}|{}|{}|{}|{}",
        ablated_kind(cfg.template, &cfg.drop)?.as_str(),
        cfg.max_history,
        cfg.pretrain_max_history,
        cfg.seed,
        vocab.fingerprint(),
    );
    if let Some(cache) = &cache {
        if let Some(hit) = cache.entries.get(&key) {
            return Ok(hit.clone());
        }
    }
    let lm_cfg = LmConfig {
        vocab_size: vocab.len(),
        d_e: cfg.d_e,
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        max_seq_len: cfg.max_seq_len,
    };
    let mut lm = ToyLm::init(lm_cfg, cfg.stage_seed(streams::LM_INIT))?;
    let prompts = pretrain_prompts(cfg, &vocab, ws)?;
    let losses = pretrain_lm(&mut lm, &prompts, &cfg.pretrain)?;
    if let Some(cache) = cache {
        cache.entries.insert(key, (vocab.clone(), lm.clone(), losses.clone()));
    }
    Ok((vocab, lm, losses))
}

/// The full training stage: vocabulary, assembly, next-token pretraining,
/// then LoRA / adapter fine-tuning on the answer token.
pub fn run_training(
    cfg: &RunConfig,
    bundle: &DataBundle,
    ws: &WindowSet,
    tables: Option<SeqTables>,
) -> Result<TrainOutcome> {
    run_training_cached(cfg, bundle, ws, tables, None)
}

/// Same stage with a pretraining cache shared across related runs.
pub fn run_training_cached(
    cfg: &RunConfig,
    bundle: &DataBundle,
    ws: &WindowSet,
    tables: Option<SeqTables>,
    cache: Option<&mut PretrainCache>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (vocab, lm, pretrain_losses) = pretrained_base(cfg, bundle, ws, cache)?;
    let mut model = assemble_with_base(cfg, vocab, lm, tables)?;
    let all_train = ws.refs(&ws.train);
    let train_refs: Vec<&HistoryWindow> = match cfg.train_history_cap {
        Some(cap) => all_train.into_iter().filter(|w| w.history.len() <= cap).collect(),
        None => all_train,
    };
    let valid_refs = ws.refs(&ws.valid);
    let curves = train_llm_kt(&mut model, &train_refs, &valid_refs, &cfg.train)?;
    Ok(TrainOutcome { model, pretrain_losses, curves })
}

// ── evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub acc: f64,
    #[serde(rename = "n")]
    pub n_examples: usize,
    pub fingerprint: String,
}

pub fn evaluate_model(
    model: &LlmKtModel,
    test: &[&HistoryWindow],
    eval_cap: Option<usize>,
    fingerprint: String,
    exec: ExecMode,
) -> Result<MetricsReport> {
    let subset = strided_subset(test, eval_cap);
    if subset.is_empty() {
        return Err(Error::InvalidArgument("no test windows to evaluate".into()));
    }
    let scores = model.predict_windows(&subset, exec)?;
    let labels: Vec<bool> = subset.iter().map(|w| w.label).collect();
    Ok(MetricsReport {
        auc: auc(&labels, &scores)?,
        acc: accuracy(&labels, &scores)?,
        n_examples: subset.len(),
        fingerprint,
    })
}

/// Scores a standalone sequence encoder on test windows, for the DKT / AKT
/// reference numbers.
pub fn evaluate_seq(
    model: &SeqKtModel,
    test: &[&HistoryWindow],
    max_history: usize,
    eval_cap: Option<usize>,
    fingerprint: String,
    exec: ExecMode,
) -> Result<MetricsReport> {
    let subset = strided_subset(test, eval_cap);
    if subset.is_empty() {
        return Err(Error::InvalidArgument("no test windows to evaluate".into()));
    }
    let scores = predict_seq_windows(model, &subset, max_history, exec)?;
    let labels: Vec<bool> = subset.iter().map(|w| w.label).collect();
    Ok(MetricsReport {
        auc: auc(&labels, &scores)?,
        acc: accuracy(&labels, &scores)?,
        n_examples: subset.len(),
        fingerprint,
    })
}

/// A checkpoint only makes sense alongside the config that produced it;
/// reject evaluation when the experiment axes disagree.
pub fn guard_checkpoint(cfg: &RunConfig, model: &LlmKtModel) -> Result<()> {
    if model.template != cfg.template || model.drop != cfg.drop {
        return Err(Error::InvalidArgument(
            "checkpoint template or ablation set disagrees with the config".into(),
        ));
    }
    if model.fusion.merge != cfg.merge {
        return Err(Error::InvalidArgument(
            "checkpoint merge strategy disagrees with the config".into(),
        ));
    }
    if model.seq.is_some() != (cfg.seq_encoder != SeqEncoderKind::None) {
        return Err(Error::InvalidArgument(
            "checkpoint sequence stream disagrees with the config".into(),
        ));
    }
    if model.encoder.is_some() != cfg.use_context {
        return Err(Error::InvalidArgument(
            "checkpoint context encoder disagrees with the config".into(),
        ));
    }
    Ok(())
}

/// Rebuilds the training-split vocabulary and compares content hashes, so
/// a checkpoint is never scored against data it was not trained on.
pub fn check_vocab(cfg: &RunConfig, bundle: &DataBundle, model: &LlmKtModel) -> Result<()> {
    let rebuilt = build_vocab(cfg, bundle)?;
    let expected = model.vocab.fingerprint();
    let actual = rebuilt.fingerprint();
    if expected != actual {
        return Err(Error::VocabHashMismatch { expected, actual });
    }
    Ok(())
}

// ── ablations and sweeps ────────────────────────────────────────────────

pub const ABLATION_VARIANTS: [&str; 5] =
    ["full", "-question", "-concept", "-sequence", "-context"];

#[derive(Debug, Clone, Serialize)]
pub struct VariantOutcome {
    pub variant: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub notice: Option<String>,
}

fn skipped(variant: &str, why: &str) -> VariantOutcome {
    VariantOutcome {
        variant: variant.to_string(),
        report: None,
        notice: Some(format!("skipped: {why}")),
    }
}

/// The config for one ablation variant, or a notice when the variant does
/// not apply to this base configuration.
fn variant_config(base: &RunConfig, variant: &str) -> Result<(Option<RunConfig>, Option<String>)> {
    let base_kind = ablated_kind(base.template, &base.drop)?;
    let mut cfg = base.clone();
    match variant {
        "full" => {}
        "-question" | "-concept" => {
            let entity =
                if variant == "-question" { Entity::Question } else { Entity::Concept };
            cfg.drop.insert(entity);
            match ablated_kind(cfg.template, &cfg.drop) {
                Err(e) => return Ok((None, Some(format!("{e}")))),
                Ok(kind) if kind == base_kind => {
                    return Ok((
                        None,
                        Some(format!("dropping the {variant} entity leaves the prompt unchanged")),
                    ));
                }
                Ok(_) => {}
            }
        }
        "-sequence" => {
            if base.seq_encoder == SeqEncoderKind::None {
                return Ok((None, Some("no sequence stream to remove".into())));
            }
            if !base.use_context {
                return Ok((
                    None,
                    Some("removing the sequence stream leaves no slot sources".into()),
                ));
            }
            cfg.seq_encoder = SeqEncoderKind::None;
        }
        "-context" => {
            if !base.use_context {
                return Ok((None, Some("no context encoder to remove".into())));
            }
            if base.seq_encoder == SeqEncoderKind::None {
                return Ok((
                    None,
                    Some("removing the context encoder leaves no slot sources".into()),
                ));
            }
            cfg.use_context = false;
        }
        other => {
            return Err(Error::InvalidArgument(format!("unknown ablation variant {other:?}")))
        }
    }
    Ok((Some(cfg), None))
}

fn tables_for(cfg: &RunConfig, stage: &SeqStage) -> Option<SeqTables> {
    if cfg.seq_encoder == SeqEncoderKind::None {
        None
    } else {
        stage.tables.clone()
    }
}

/// Trains and scores the full model plus the four single-removal variants
/// under one master seed. The trained sequence encoder is shared across
/// variants; inapplicable variants are skipped with a notice instead of
/// failing the run.
pub fn run_ablation(
    base: &RunConfig,
    bundle: &DataBundle,
    ws: &WindowSet,
    stage: &SeqStage,
) -> Result<Vec<VariantOutcome>> {
    let mut cache = PretrainCache::new();
    let mut out = Vec::with_capacity(ABLATION_VARIANTS.len());
    for variant in ABLATION_VARIANTS {
        let (cfg, notice) = variant_config(base, variant)?;
        let cfg = match cfg {
            Some(cfg) => cfg,
            None => {
                out.push(skipped(variant, notice.as_deref().unwrap_or("not applicable")));
                continue;
            }
        };
        let trained =
            run_training_cached(&cfg, bundle, ws, tables_for(&cfg, stage), Some(&mut cache))?;
        let report = evaluate_model(
            &trained.model,
            &ws.refs(&ws.test),
            cfg.eval_cap,
            cfg.fingerprint(),
            cfg.exec,
        )?;
        out.push(VariantOutcome {
            variant: variant.to_string(),
            report: Some(report),
            notice: None,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub key: String,
    pub report: MetricsReport,
}

/// Re-windows, re-trains the sequence encoder, and re-runs training for
/// each history length.
pub fn run_length_sweep(
    base: &RunConfig,
    bundle: &DataBundle,
    lengths: &[usize],
) -> Result<Vec<SweepRow>> {
    if lengths.is_empty() {
        return Err(Error::InvalidArgument("length sweep needs at least one length".into()));
    }
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let mut cfg = base.clone();
        cfg.max_history = len;
        let ws = WindowSet::build(bundle, len)?;
        let stage = run_seq_stage(&cfg, bundle, &ws)?;
        let trained = run_training(&cfg, bundle, &ws, stage.tables)?;
        let report = evaluate_model(
            &trained.model,
            &ws.refs(&ws.test),
            cfg.eval_cap,
            cfg.fingerprint(),
            cfg.exec,
        )?;
        rows.push(SweepRow { key: len.to_string(), report });
    }
    Ok(rows)
}

/// Trains one model per merge strategy over a shared sequence encoder.
pub fn run_merge_sweep(base: &RunConfig, bundle: &DataBundle) -> Result<Vec<SweepRow>> {
    let ws = WindowSet::build(bundle, base.max_history)?;
    let stage = run_seq_stage(base, bundle, &ws)?;
    let mut cache = PretrainCache::new();
    let mut rows = Vec::with_capacity(3);
    for merge in [MergeKind::Add, MergeKind::Avg, MergeKind::Concat] {
        let mut cfg = base.clone();
        cfg.merge = merge;
        let trained =
            run_training_cached(&cfg, bundle, &ws, tables_for(&cfg, &stage), Some(&mut cache))?;
        let report = evaluate_model(
            &trained.model,
            &ws.refs(&ws.test),
            cfg.eval_cap,
            cfg.fingerprint(),
            cfg.exec,
        )?;
        rows.push(SweepRow { key: merge.as_str().to_string(), report });
    }
    Ok(rows)
}

// ── result tables ───────────────────────────────────────────────────────

/// One CSV row per completed variant; skipped variants carry a notice and
/// are reported out of band.
pub fn ablation_csv(rows: &[VariantOutcome]) -> String {
    let mut out = String::from("variant,auc,acc,n\n");
    for row in rows {
        if let Some(m) = &row.report {
            out.push_str(&format!("{},{},{},{}\n", row.variant, m.auc, m.acc, m.n_examples));
        }
    }
    out
}

pub fn sweep_csv(key_header: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{key_header},auc,acc,n\n");
    for row in rows {
        let m = &row.report;
        out.push_str(&format!("{},{},{},{}\n", row.key, m.auc, m.acc, m.n_examples));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthSpec;
    use crate::prompt::TemplateKind;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data = DataSource::Synth {
            spec: SynthSpec {
                n_students: 24,
                n_questions: 10,
                n_concepts: 4,
                interactions_per_student: 12,
                seed: 0,
            },
        };
        cfg.max_history = 6;
        cfg.d_e = 16;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.max_seq_len = 256;
        cfg.d_t = 8;
        cfg.ctx_heads = 2;
        cfg.ctx_max_len = 32;
        cfg.seq_train.d_s = 8;
        cfg.seq_train.hidden = 8;
        cfg.seq_train.epochs = 2;
        cfg.seq_train.items_per_epoch = Some(20);
        cfg.pretrain.epochs = 1;
        cfg.pretrain.batch = 4;
        cfg.pretrain_windows = 12;
        cfg.train.epochs = 1;
        cfg.train.batch = 4;
        cfg.train.items_per_epoch = Some(12);
        cfg.train.valid_cap = Some(12);
        cfg.train_history_cap = Some(4);
        cfg.eval_cap = Some(16);
        cfg.with_seed(5)
    }

    #[test]
    fn bundle_and_windows_partition_cleanly() {
        let cfg = tiny_cfg();
        let bundle = prepare_bundle(&cfg).unwrap();
        assert_eq!(bundle.interactions.len(), 24 * 12);
        assert_eq!(bundle.n_questions, 10);
        assert_eq!(bundle.n_concepts, 4);
        assert!(bundle.has_texts);
        assert_eq!(bundle.split.train.len() + bundle.split.valid.len() + bundle.split.test.len(), 24);
        assert_eq!(bundle.split.valid.len(), 2);
        assert_eq!(bundle.split.test.len(), 2);

        let ws = WindowSet::build(&bundle, cfg.max_history).unwrap();
        assert_eq!(ws.windows.len(), 24 * 11);
        assert_eq!(ws.train.len() + ws.valid.len() + ws.test.len(), ws.windows.len());
        assert_eq!(ws.valid.len(), 2 * 11);
        for &i in &ws.test {
            assert!(bundle.split.in_test(&ws.windows[i].target.student_id));
        }
        for w in &ws.windows {
            assert!(w.history.len() <= cfg.max_history);
        }

        let again = prepare_bundle(&cfg).unwrap();
        assert_eq!(again.interactions, bundle.interactions);
        assert_eq!(again.split.train, bundle.split.train);
    }

    #[test]
    fn train_vocab_covers_train_prompts() {
        let cfg = tiny_cfg();
        let bundle = prepare_bundle(&cfg).unwrap();
        let ws = WindowSet::build(&bundle, cfg.max_history).unwrap();
        let vocab = build_vocab(&cfg, &bundle).unwrap();
        for &i in ws.train.iter().take(40) {
            let text = render(cfg.template, &ws.windows[i]).unwrap();
            let ids = vocab.encode(&text);
            assert!(
                !ids.contains(&Vocab::UNK),
                "train window {i} hit the unknown token: {text}"
            );
        }
    }

    #[test]
    fn pretrain_prompts_are_short_and_hold_no_answers() {
        let cfg = tiny_cfg();
        let bundle = prepare_bundle(&cfg).unwrap();
        let ws = WindowSet::build(&bundle, cfg.max_history).unwrap();
        let vocab = build_vocab(&cfg, &bundle).unwrap();
        let prompts = pretrain_prompts(&cfg, &vocab, &ws).unwrap();
        assert_eq!(prompts.len(), cfg.pretrain_windows);
        for p in &prompts {
            assert_eq!(vocab.token(*p.last().unwrap()), ":");
            assert!(!p.contains(&Vocab::YES) && !p.contains(&Vocab::NO));
        }
    }

    #[test]
    fn pipeline_reruns_bit_exactly() {
        let cfg = tiny_cfg();
        let bundle = prepare_bundle(&cfg).unwrap();
        let ws = WindowSet::build(&bundle, cfg.max_history).unwrap();

        let run = |cfg: &RunConfig| -> (MetricsReport, Vec<f64>) {
            let stage = run_seq_stage(cfg, &bundle, &ws).unwrap();
            let trained = run_training(cfg, &bundle, &ws, stage.tables).unwrap();
            let report = evaluate_model(
                &trained.model,
                &ws.refs(&ws.test),
                cfg.eval_cap,
                cfg.fingerprint(),
                cfg.exec,
            )
            .unwrap();
            (report, trained.pretrain_losses)
        };
        let (a, losses_a) = run(&cfg);
        let (b, losses_b) = run(&cfg);
        assert_eq!(a.auc.to_bits(), b.auc.to_bits());
        assert_eq!(a.acc.to_bits(), b.acc.to_bits());
        assert_eq!(a.n_examples, b.n_examples);
        assert_eq!(losses_a, losses_b);
        assert!(losses_a.last().unwrap() < losses_a.first().unwrap());

        let other = run(&tiny_cfg().with_seed(6)).0;
        assert_ne!(a.auc.to_bits(), other.auc.to_bits());
    }

    #[test]
    fn checkpoint_guards_catch_mismatches() {
        let cfg = tiny_cfg();
        let bundle = prepare_bundle(&cfg).unwrap();
        let ws = WindowSet::build(&bundle, cfg.max_history).unwrap();
        let stage = run_seq_stage(&cfg, &bundle, &ws).unwrap();
        let vocab = build_vocab(&cfg, &bundle).unwrap();
        let model = assemble_model(&cfg, vocab, stage.tables).unwrap();

        guard_checkpoint(&cfg, &model).unwrap();
        check_vocab(&cfg, &bundle, &model).unwrap();

        let mut wrong = cfg.clone();
        wrong.merge = MergeKind::Concat;
        assert!(guard_checkpoint(&wrong, &model).is_err());
        let mut wrong = cfg.clone();
        wrong.template = TemplateKind::Type2;
        assert!(guard_checkpoint(&wrong, &model).is_err());

        let mut other = tiny_cfg();
        other.data = DataSource::Synth {
            spec: SynthSpec {
                n_students: 24,
                n_questions: 7,
                n_concepts: 4,
                interactions_per_student: 12,
                seed: 0,
            },
        };
        let other = other.with_seed(5);
        let other_bundle = prepare_bundle(&other).unwrap();
        match check_vocab(&other, &other_bundle, &model) {
            Err(Error::VocabHashMismatch { .. }) => {}
            other => panic!("expected a vocabulary hash mismatch, got {other:?}"),
        }
    }

    #[test]
    fn ablation_skips_inapplicable_variants() {
        let mut cfg = tiny_cfg();
        cfg.template = TemplateKind::Type2;
        let (got, notice) = variant_config(&cfg, "-question").unwrap();
        assert!(got.is_none(), "dropping the only entity should skip: {notice:?}");
        let (got, notice) = variant_config(&cfg, "-concept").unwrap();
        assert!(got.is_none());
        assert!(notice.unwrap().contains("unchanged"));
        let (got, _) = variant_config(&cfg, "-sequence").unwrap();
        assert!(got.is_some());

        let mut no_ctx = tiny_cfg();
        no_ctx.use_context = false;
        let (got, notice) = variant_config(&no_ctx, "-sequence").unwrap();
        assert!(got.is_none());
        assert!(notice.unwrap().contains("no slot sources"));
        let (got, _) = variant_config(&no_ctx, "-context").unwrap();
        assert!(got.is_none());

        let full = variant_config(&tiny_cfg(), "full").unwrap().0.unwrap();
        assert_eq!(full.fingerprint(), tiny_cfg().fingerprint());
        let minus_q = variant_config(&tiny_cfg(), "-question").unwrap().0.unwrap();
        assert!(minus_q.fingerprint().contains("drop=question"));
    }

    #[test]
    fn ablation_rows_and_csv_line_up() {
        let cfg = tiny_cfg();
        let bundle = prepare_bundle(&cfg).unwrap();
        let ws = WindowSet::build(&bundle, cfg.max_history).unwrap();
        let stage = run_seq_stage(&cfg, &bundle, &ws).unwrap();
        let rows = run_ablation(&cfg, &bundle, &ws, &stage).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].variant, "full");
        assert!(rows.iter().all(|r| r.report.is_some()));
        let csv = ablation_csv(&rows);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], "variant,auc,acc,n");
        assert_eq!(lines.len(), 6);
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 4);
        }
        // A cached pretrained base must be bit-identical to a fresh one:
        // the standalone full run and the ablation's full row agree exactly.
        let trained = run_training(&cfg, &bundle, &ws, stage.tables.clone()).unwrap();
        let solo = evaluate_model(
            &trained.model,
            &ws.refs(&ws.test),
            cfg.eval_cap,
            cfg.fingerprint(),
            cfg.exec,
        )
        .unwrap();
        let full = rows[0].report.as_ref().unwrap();
        assert_eq!(solo.auc.to_bits(), full.auc.to_bits());
        assert_eq!(solo.acc.to_bits(), full.acc.to_bits());
    }

    #[test]
    fn merge_sweep_covers_every_strategy() {
        let cfg = tiny_cfg();
        let bundle = prepare_bundle(&cfg).unwrap();
        let rows = run_merge_sweep(&cfg, &bundle).unwrap();
        let keys: Vec<&str> = rows.iter().map(|r| r.key.as_str()).collect();
        assert_eq!(keys, ["add", "avg", "concat"]);
        for row in &rows {
            assert!(row.report.auc.is_finite());
            assert!(row.report.fingerprint.contains(&format!("g={}", row.key)));
        }
        let csv = sweep_csv("merge", &rows);
        assert!(csv.starts_with("merge,auc,acc,n\n"));
        assert_eq!(csv.trim_end().lines().count(), 4);
    }

    #[test]
    fn length_sweep_rewindows_per_length() {
        let cfg = tiny_cfg();
        let bundle = prepare_bundle(&cfg).unwrap();
        let rows = run_length_sweep(&cfg, &bundle, &[3, 6]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].report.fingerprint.contains("L=3"));
        assert!(rows[1].report.fingerprint.contains("L=6"));
        assert!(run_length_sweep(&cfg, &bundle, &[]).is_err());
    }

    #[test]
    fn seq_stage_respects_the_encoder_choice() {
        let cfg = tiny_cfg();
        let bundle = prepare_bundle(&cfg).unwrap();
        let ws = WindowSet::build(&bundle, cfg.max_history).unwrap();

        let stage = run_seq_stage(&cfg, &bundle, &ws).unwrap();
        assert!(stage.model.is_some());
        let tables = stage.tables.as_ref().unwrap();
        assert!(!tables.is_trainable());
        assert_eq!(tables.d_s, cfg.seq_train.d_s);

        let mut token = cfg.clone();
        token.seq_encoder = SeqEncoderKind::TokenInit;
        let stage = run_seq_stage(&token, &bundle, &ws).unwrap();
        assert!(stage.model.is_none());
        assert!(stage.tables.as_ref().unwrap().is_trainable());

        let mut none = cfg.clone();
        none.seq_encoder = SeqEncoderKind::None;
        let stage = run_seq_stage(&none, &bundle, &ws).unwrap();
        assert!(stage.model.is_none() && stage.tables.is_none());
    }
}

//! Run configuration: a single JSON document drives every pipeline stage.
//! One master seed pins the whole run; stage seeds and execution modes are
//! derived from it so a config fingerprint fully determines a rerun.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{mix, SynthSpec};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::fusion::MergeKind;
use crate::lm::{LoraConfig, PretrainConfig, TrainConfig};
use crate::prompt::{Entity, TemplateKind};
use crate::seqkt::SeqTrainConfig;

/// Where the sequence-side slot embeddings come from:
/// a trained DKT or AKT-lite encoder, randomly initialized trainable
/// tables (the token-init baseline), or nothing at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeqEncoderKind {
    Dkt,
    AktLite,
    TokenInit,
    None,
}

impl SeqEncoderKind {
    pub fn parse(s: &str) -> Result<SeqEncoderKind> {
        match s {
            "dkt" => Ok(SeqEncoderKind::Dkt),
            "akt-lite" | "akt" => Ok(SeqEncoderKind::AktLite),
            "token-init" => Ok(SeqEncoderKind::TokenInit),
            "none" => Ok(SeqEncoderKind::None),
            other => Err(Error::InvalidArgument(format!("unknown sequence encoder {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SeqEncoderKind::Dkt => "dkt",
            SeqEncoderKind::AktLite => "akt-lite",
            SeqEncoderKind::TokenInit => "token-init",
            SeqEncoderKind::None => "none",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synth {
        #[serde(flatten)]
        spec: SynthSpec,
    },
    Csv {
        path: String,
        schema: crate::data::SchemaKind,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth { spec: SynthSpec::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub data: DataSource,
    /// L, the history window length.
    pub max_history: usize,
    pub template: TemplateKind,
    pub merge: MergeKind,
    pub seq_encoder: SeqEncoderKind,
    pub use_context: bool,
    /// Fine-tune the context encoder along with the adapters, or freeze it.
    pub train_context: bool,
    /// Entities removed from the prompt (the -Question / -Concept ablations).
    pub drop: BTreeSet<Entity>,
    pub d_e: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub d_t: usize,
    pub ctx_heads: usize,
    pub ctx_max_len: usize,
    pub lora: LoraConfig,
    pub seq_train: SeqTrainConfig,
    pub pretrain: PretrainConfig,
    /// How many rendered prompts feed next-token pretraining.
    pub pretrain_windows: usize,
    /// History cap for the pretraining prompts; short prompts teach the
    /// template structure cheaply.
    pub pretrain_max_history: usize,
    pub train: TrainConfig,
    /// Fine-tune only on windows whose history is at most this long;
    /// evaluation always sees full-length windows.
    pub train_history_cap: Option<usize>,
    /// Evenly strided cap on test windows scored during evaluation.
    pub eval_cap: Option<usize>,
    pub exec: ExecMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            data: DataSource::default(),
            max_history: 100,
            template: TemplateKind::Type1,
            merge: MergeKind::Add,
            seq_encoder: SeqEncoderKind::Dkt,
            use_context: true,
            train_context: true,
            drop: BTreeSet::new(),
            d_e: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 1600,
            d_t: 64,
            ctx_heads: 4,
            ctx_max_len: 64,
            lora: LoraConfig::desk(),
            seq_train: SeqTrainConfig::default(),
            pretrain: PretrainConfig::default(),
            pretrain_windows: 128,
            pretrain_max_history: 3,
            train: TrainConfig::default(),
            train_history_cap: Some(30),
            eval_cap: Some(500),
            exec: ExecMode::Parallel,
        }
    }
}

/// Stage streams for deriving per-stage seeds from the master seed.
pub mod streams {
    pub const DATA: u64 = 21;
    pub const SPLIT: u64 = 22;
    pub const SEQ_TRAIN: u64 = 23;
    pub const PRETRAIN: u64 = 24;
    pub const TRAIN: u64 = 25;
    pub const LM_INIT: u64 = 26;
    pub const LORA_INIT: u64 = 27;
    pub const FUSION_INIT: u64 = 28;
    pub const CTX_INIT: u64 = 29;
    pub const TOKEN_INIT: u64 = 30;
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))?;
        Ok(cfg.normalized())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn stage_seed(&self, stream: u64) -> u64 {
        mix(self.seed, stream, 0)
    }

    /// Rewrites stage seeds and execution modes from the master values.
    pub fn normalized(mut self) -> RunConfig {
        if let DataSource::Synth { spec } = &mut self.data {
            spec.seed = mix(self.seed, streams::DATA, 0);
        }
        self.seq_train.seed = self.stage_seed(streams::SEQ_TRAIN);
        self.pretrain.seed = self.stage_seed(streams::PRETRAIN);
        self.train.seed = self.stage_seed(streams::TRAIN);
        self.seq_train.exec = self.exec;
        self.pretrain.exec = self.exec;
        self.train.exec = self.exec;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> RunConfig {
        self.seed = seed;
        self.normalized()
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_history == 0 {
            return Err(Error::InvalidArgument("max_history must be at least 1".into()));
        }
        if self.d_e == 0 || self.n_layers == 0 || self.d_t == 0 {
            return Err(Error::InvalidArgument("model dims must be positive".into()));
        }
        if self.n_heads == 0 || self.d_e % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "n_heads ({}) must divide d_e ({})",
                self.n_heads, self.d_e
            )));
        }
        if self.ctx_heads == 0 || self.d_t % self.ctx_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "ctx_heads ({}) must divide d_t ({})",
                self.ctx_heads, self.d_t
            )));
        }
        if self.seq_encoder == SeqEncoderKind::None && !self.use_context {
            return Err(Error::InvalidArgument(
                "no slot sources: enable a sequence encoder or the context encoder".into(),
            ));
        }
        self.train.validate()?;
        crate::prompt::ablated_kind(self.template, &self.drop)?;
        Ok(())
    }

    /// The axes that distinguish one experiment from another. A rerun with
    /// the same fingerprint reproduces metrics bit-exactly.
    pub fn fingerprint(&self) -> String {
        let drop = if self.drop.is_empty() {
            "-".to_string()
        } else {
            self.drop
                .iter()
                .map(|e| match e {
                    Entity::Question => "question",
                    Entity::Concept => "concept",
                })
                .collect::<Vec<_>>()
                .join("+")
        };
        format!(
            "template={};g={};L={};seed={};drop={};seq={};ctx={}",
            self.template.as_str(),
            self.merge.as_str(),
            self.max_history,
            self.seed,
            drop,
            self.seq_encoder.as_str(),
            if self.use_context { "on" } else { "off" },
        )
    }
}

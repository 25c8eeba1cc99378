//! Pipeline configuration: named profiles overlaid with an optional TOML file.

use std::path::{Path, PathBuf};

use mel_core::model::{EntityModel, TransformerConfig};
use mel_core::rerank::{CAConfig, PairSampling, RerankTrainConfig};
use mel_core::tokenizer::{SEG_PAIR_ENTITY, SEG_RIGHT};
use mel_core::training::{TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::synthetic::SyntheticSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Transformer shape without the vocabulary- and seed-dependent parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub max_len: usize,
}

impl ArchConfig {
    pub fn transformer(&self, vocab_size: usize, segments: usize, d_enc: usize, seed: u64) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            max_len: self.max_len,
            vocab_size,
            segments,
            d_enc,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_enc: usize,
    pub mention: ArchConfig,
    pub entity: ArchConfig,
    /// Standard deviation of Model E's initial table rows.
    pub table_init_std: f64,
    pub cross: ArchConfig,
    pub cross_d_enc: usize,
    /// Start the entity tower from the mention tower's initial weights.
    pub shared_init: bool,
    /// Start the cross-encoder from the trained mention tower instead of
    /// fresh weights.
    pub cross_warm_start: bool,
    /// Scale of the identity query/key projections the cross-encoder's first
    /// layer starts from, applied after the warm start; `None` keeps them.
    pub cross_identity_qk: Option<f64>,
}

impl ModelConfig {
    pub fn mention_config(&self, vocab_size: usize, seed: u64) -> TransformerConfig {
        self.mention.transformer(vocab_size, SEG_RIGHT as usize + 1, self.d_enc, seed)
    }

    pub fn entity_config(&self, vocab_size: usize, seed: u64) -> TransformerConfig {
        self.entity.transformer(vocab_size, 1, self.d_enc, seed)
    }

    pub fn ca_config(&self, vocab_size: usize, seed: u64) -> CAConfig {
        CAConfig {
            transformer: self.cross.transformer(vocab_size, SEG_PAIR_ENTITY as usize + 1, self.cross_d_enc, seed),
        }
    }
}

/// Which dual-encoder variant the train stage builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub entity_model: EntityModel,
    pub aux_task: bool,
    pub hard_negatives: bool,
}

impl Toggles {
    pub fn mode(&self) -> TrainMode {
        TrainMode {
            model: self.entity_model,
            aux_task: self.aux_task,
            hard_negatives: self.hard_negatives,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Held-out mentions sampled per language for evaluation.
    pub per_lang: usize,
    /// Candidates rescored by the cross-encoder.
    pub rerank_top_n: usize,
    /// Training mentions used to build reranker examples; 0 means all.
    pub rerank_train_mentions: usize,
}

/// Input and output locations; relative paths resolve against the work directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub raw_dir: PathBuf,
    pub kb: PathBuf,
    pub mentions: PathBuf,
    pub provenance: PathBuf,
    pub train: PathBuf,
    pub heldout: PathBuf,
    pub eval: PathBuf,
    pub vocab: PathBuf,
    /// Phase-1 checkpoint the mining stage starts from.
    pub phase1: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub phase2_log: PathBuf,
    pub negatives: PathBuf,
    pub index: PathBuf,
    pub alias: PathBuf,
    pub report: PathBuf,
    pub alias_report: PathBuf,
    pub reranker: PathBuf,
    pub rerank_log: PathBuf,
    pub reranked: PathBuf,
    pub rerank_report: PathBuf,
    pub manifest: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let p = PathBuf::from;
        Paths {
            raw_dir: p("raw"),
            kb: p("kb.jsonl"),
            mentions: p("mentions.jsonl"),
            provenance: p("provenance.tsv"),
            train: p("train.jsonl"),
            heldout: p("heldout.jsonl"),
            eval: p("eval.jsonl"),
            vocab: p("vocab.txt"),
            phase1: p("model_phase1.ckpt"),
            checkpoint: p("model.ckpt"),
            train_log: p("train_log.tsv"),
            phase2_log: p("train_log_phase2.tsv"),
            negatives: p("negatives.json"),
            index: p("entities.idx"),
            alias: p("alias.tsv"),
            report: p("report.json"),
            alias_report: p("alias_report.json"),
            reranker: p("reranker.ckpt"),
            rerank_log: p("rerank_log.tsv"),
            reranked: p("reranked.tsv"),
            rerank_report: p("rerank_report.json"),
            manifest: p("manifest.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub seed: u64,
    pub precision: Precision,
    pub workdir: PathBuf,
    pub paths: Paths,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub toggles: Toggles,
    pub train: TrainConfig,
    pub rerank: RerankTrainConfig,
    pub rerank_sampling: PairSampling,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn desk() -> Self {
        let arch = |max_len| ArchConfig {
            layers: 2,
            heads: 2,
            d_model: 32,
            d_ffn: 64,
            max_len,
        };
        PipelineConfig {
            profile: Profile::Desk,
            seed: 0,
            precision: Precision::F32,
            workdir: PathBuf::from("."),
            paths: Paths::default(),
            synthetic: SyntheticSpec::default(),
            model: ModelConfig {
                vocab_size: 1200,
                d_enc: 32,
                mention: arch(32),
                entity: arch(16),
                table_init_std: 0.1,
                cross: arch(48),
                cross_d_enc: 16,
                shared_init: true,
                cross_warm_start: true,
                cross_identity_qk: Some(1.0),
            },
            toggles: Toggles {
                entity_model: EntityModel::F,
                aux_task: false,
                hard_negatives: false,
            },
            train: TrainConfig {
                batch_size: 64,
                steps: 2000,
                phase2_steps: 1000,
                peak_lr: 2e-3,
                ..TrainConfig::default()
            },
            rerank: RerankTrainConfig {
                batch_size: 64,
                steps: 8000,
                peak_lr: 2e-3,
                ..RerankTrainConfig::default()
            },
            rerank_sampling: PairSampling {
                retrieved_per_positive: Some(3),
                ..PairSampling::default()
            },
            eval: EvalConfig {
                per_lang: 2000,
                rerank_top_n: 5,
                rerank_train_mentions: 0,
            },
        }
    }

    /// Full-scale architecture and optimization settings.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        let arch = |layers, max_len| ArchConfig {
            layers,
            heads: 12,
            d_model: 768,
            d_ffn: 3072,
            max_len,
        };
        c.profile = Profile::Paper;
        c.model = ModelConfig {
            vocab_size: 119_547,
            d_enc: 300,
            mention: arch(4, 64),
            entity: arch(4, 64),
            table_init_std: 0.1,
            cross: arch(12, 128),
            cross_d_enc: 300,
            shared_init: true,
            cross_warm_start: true,
            cross_identity_qk: Some(1.0),
        };
        c.train = TrainConfig::paper();
        c.rerank = RerankTrainConfig::paper();
        c.eval.rerank_train_mentions = 0;
        c
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Profile defaults overlaid with the tables present in `toml_text`.
    pub fn from_toml(profile: Profile, toml_text: &str) -> CliResult<Self> {
        let base = toml::Value::try_from(Self::for_profile(profile))
            .map_err(|e| CliError::Config(e.to_string()))?;
        let overlay: toml::Value = toml::from_str(toml_text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        let merged = merge(base, overlay);
        let cfg: PipelineConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(profile: Profile, path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(profile, &text)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        self.synthetic.validate()?;
        if self.toggles.aux_task && self.toggles.entity_model != EntityModel::F {
            return Err(CliError::Config("aux_task needs entity_model F".into()));
        }
        Ok(())
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    /// Seed for one stage, derived from the root seed and the stage name.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }
}

pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn merge(base: toml::Value, overlay: toml::Value) -> toml::Value {
    match (base, overlay) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(existing) => merge(existing, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, o) => o,
    }
}

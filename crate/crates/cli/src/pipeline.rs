//! File-based stages. Each stage reads and writes only its declared files
//! under the work directory and records their hashes in a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mel_core::checkpoint::Checkpoint;
use mel_core::corpus::{count_entity_frequencies, write_tsv, FrequencyTable, MentionCorpus};
use mel_core::eval::emit_report;
use mel_core::kb::{compute_lang_usage, load_kb, KnowledgeBase, LangUsageStats};
use mel_core::model::DualEncoder;
use mel_core::rerank::{write_reranked_tsv, CrossEncoder};
use mel_core::retrieval::EntityIndex;
use mel_core::tokenizer::SubwordVocab;
use mel_core::training::{mine_for, train_phase1, train_phase2, TrainingLog};
use mel_core::Scalar;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{PipelineConfig, Precision};
use crate::error::{CliError, CliResult};
use crate::synthetic::{gen_synthetic, DOCS_FILE, HEADINGS_FILE, HELDOUT_FILE, KB_RAW_FILE, REDIRECTS_FILE, TITLES_FILE};
use crate::workflow::{self, RawInputs, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    KbIngest,
    Extract,
    Split,
    Vocab,
    Train,
    Mine,
    Index,
    Eval,
    RerankTrain,
    RerankEval,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::KbIngest,
        Stage::Extract,
        Stage::Split,
        Stage::Vocab,
        Stage::Train,
        Stage::Mine,
        Stage::Index,
        Stage::Eval,
        Stage::RerankTrain,
        Stage::RerankEval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::KbIngest => "kb-ingest",
            Stage::Extract => "extract",
            Stage::Split => "split",
            Stage::Vocab => "vocab",
            Stage::Train => "train",
            Stage::Mine => "mine",
            Stage::Index => "index",
            Stage::Eval => "eval",
            Stage::RerankTrain => "rerank-train",
            Stage::RerankEval => "rerank-eval",
        }
    }

    /// Files the stage reads, relative to the work directory. Optional raw
    /// files are listed only when present.
    pub fn inputs(self, cfg: &PipelineConfig) -> Vec<PathBuf> {
        let p = &cfg.paths;
        let raw = |f: &str| p.raw_dir.join(f);
        let present = |f: &str| {
            let rel = raw(f);
            cfg.path(&rel).exists().then_some(rel)
        };
        match self {
            Stage::KbIngest => vec![raw(KB_RAW_FILE)],
            Stage::Extract => {
                let mut v = vec![p.kb.clone(), raw(DOCS_FILE), raw(TITLES_FILE)];
                v.extend(present(REDIRECTS_FILE));
                v.extend(present(HEADINGS_FILE));
                v
            }
            Stage::Split => vec![p.mentions.clone(), p.provenance.clone(), raw(HELDOUT_FILE)],
            Stage::Vocab => vec![p.train.clone(), p.kb.clone()],
            Stage::Train => vec![p.kb.clone(), p.train.clone(), p.vocab.clone()],
            Stage::Mine => vec![p.phase1.clone(), p.kb.clone(), p.train.clone(), p.vocab.clone()],
            Stage::Index => vec![p.checkpoint.clone(), p.kb.clone(), p.train.clone(), p.vocab.clone()],
            Stage::Eval => vec![
                p.checkpoint.clone(),
                p.index.clone(),
                p.train.clone(),
                p.eval.clone(),
                p.vocab.clone(),
            ],
            Stage::RerankTrain => vec![
                p.checkpoint.clone(),
                p.index.clone(),
                p.kb.clone(),
                p.train.clone(),
                p.vocab.clone(),
            ],
            Stage::RerankEval => vec![
                p.reranker.clone(),
                p.checkpoint.clone(),
                p.index.clone(),
                p.kb.clone(),
                p.train.clone(),
                p.eval.clone(),
                p.vocab.clone(),
            ],
        }
    }

    pub fn outputs(self, cfg: &PipelineConfig) -> Vec<PathBuf> {
        let p = &cfg.paths;
        let txt = |r: &PathBuf| r.with_extension("txt");
        match self {
            Stage::KbIngest => vec![p.kb.clone()],
            Stage::Extract => vec![p.mentions.clone(), p.provenance.clone()],
            Stage::Split => vec![p.train.clone(), p.heldout.clone(), p.eval.clone()],
            Stage::Vocab => vec![p.vocab.clone()],
            Stage::Train if cfg.toggles.hard_negatives => vec![p.phase1.clone(), p.train_log.clone()],
            Stage::Train => vec![p.checkpoint.clone(), p.train_log.clone()],
            Stage::Mine => vec![p.negatives.clone(), p.checkpoint.clone(), p.phase2_log.clone()],
            Stage::Index => vec![p.index.clone()],
            Stage::Eval => vec![
                p.report.clone(),
                txt(&p.report),
                p.alias.clone(),
                p.alias_report.clone(),
                txt(&p.alias_report),
            ],
            Stage::RerankTrain => vec![p.reranker.clone(), p.rerank_log.clone()],
            Stage::RerankEval => vec![p.reranked.clone(), p.rerank_report.clone(), txt(&p.rerank_report)],
        }
    }

    /// Stages of a full run for this configuration, in order.
    pub fn sequence(cfg: &PipelineConfig) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| *s != Stage::Mine || cfg.toggles.hard_negatives)
            .collect()
    }
}

/// Hashes of what each stage last read and wrote.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    /// Inputs whose current hash differs from what the producing stage wrote.
    pub fn stale_inputs(&self, stage: Stage, current: &BTreeMap<String, String>) -> Vec<String> {
        let mut out = Vec::new();
        for (file, hash) in current {
            for (producer, rec) in &self.stages {
                if producer == stage.name() {
                    continue;
                }
                if let Some(written) = rec.outputs.get(file) {
                    if written != hash {
                        out.push(format!("{file} changed since stage {producer} wrote it"));
                    }
                }
            }
        }
        out
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash of the configuration without the work directory, so the same run
/// in another directory records the same value.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    let mut c = cfg.clone();
    c.workdir = PathBuf::from(".");
    hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub outputs: Vec<PathBuf>,
    pub warnings: Vec<String>,
    /// Short human-readable lines about the result.
    pub notes: Vec<String>,
}

fn hash_all(cfg: &PipelineConfig, files: &[PathBuf]) -> CliResult<BTreeMap<String, String>> {
    files
        .iter()
        .map(|f| Ok((f.display().to_string(), sha256_file(&cfg.path(f))?)))
        .collect()
}

/// Runs one stage: checks its inputs exist, warns about inputs changed since
/// they were produced, runs, and records hashes in the manifest.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> CliResult<StageOutcome> {
    cfg.validate()?;
    let inputs = stage.inputs(cfg);
    for f in &inputs {
        if !cfg.path(f).exists() {
            return Err(CliError::MissingInput {
                stage: stage.name().to_string(),
                path: cfg.path(f),
            });
        }
    }
    let manifest_path = cfg.path(&cfg.paths.manifest);
    let mut manifest = Manifest::load(&manifest_path)?;
    let in_hashes = hash_all(cfg, &inputs)?;
    let warnings: Vec<String> = manifest
        .stale_inputs(stage, &in_hashes)
        .into_iter()
        .map(|w| format!("warning: stale input for {}: {w}", stage.name()))
        .collect();
    let notes = match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, stage)?,
        Precision::F64 => run_typed::<f64>(cfg, stage)?,
    };
    let outputs = stage.outputs(cfg);
    let out_hashes = hash_all(cfg, &outputs)?;
    manifest.stages.insert(
        stage.name().to_string(),
        StageRecord {
            seed: cfg.seed,
            config: config_hash(cfg),
            inputs: in_hashes,
            outputs: out_hashes,
        },
    );
    manifest.save(&manifest_path)?;
    Ok(StageOutcome {
        stage,
        outputs: outputs.iter().map(|f| cfg.path(f)).collect(),
        warnings,
        notes,
    })
}

/// Every stage of [`Stage::sequence`] in order.
pub fn run_all(cfg: &PipelineConfig) -> CliResult<Vec<StageOutcome>> {
    Stage::sequence(cfg).into_iter().map(|s| run_stage(cfg, s)).collect()
}

/// Generates the synthetic corpus into the raw input directory.
pub fn write_synthetic(cfg: &PipelineConfig) -> CliResult<PathBuf> {
    let dir = cfg.path(&cfg.paths.raw_dir);
    gen_synthetic(&cfg.synthetic)?.write(&dir)?;
    Ok(dir)
}

/// Training-side data loaded from the stage files.
struct Loaded {
    kb: KnowledgeBase,
    vocab: SubwordVocab,
    train: MentionCorpus,
    eval: MentionCorpus,
    stats: LangUsageStats,
    freq: FrequencyTable,
}

impl Loaded {
    fn read(cfg: &PipelineConfig, with_kb: bool, with_eval: bool) -> CliResult<Self> {
        let p = &cfg.paths;
        let train = MentionCorpus::read(&cfg.path(&p.train), None)?;
        let eval = if with_eval {
            MentionCorpus::read(&cfg.path(&p.eval), None)?
        } else {
            MentionCorpus::default()
        };
        let kb = if with_kb {
            load_kb(&cfg.path(&p.kb))?
        } else {
            KnowledgeBase::default()
        };
        Ok(Loaded {
            stats: compute_lang_usage(&train),
            freq: count_entity_frequencies(&train),
            vocab: SubwordVocab::load(&cfg.path(&p.vocab))?,
            kb,
            train,
            eval,
        })
    }

    fn view(&self) -> View<'_> {
        View {
            kb: &self.kb,
            vocab: &self.vocab,
            train: &self.train,
            eval: &self.eval,
            stats: &self.stats,
            freq: &self.freq,
        }
    }
}

fn load_model<T: Scalar>(path: &Path) -> CliResult<DualEncoder<T>> {
    Ok(DualEncoder::from_checkpoint(Checkpoint::load(path)?)?)
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn run_typed<T: Scalar>(cfg: &PipelineConfig, stage: Stage) -> CliResult<Vec<String>> {
    let p = &cfg.paths;
    let at = |r: &PathBuf| cfg.path(r);
    let mut notes = Vec::new();
    match stage {
        Stage::KbIngest => {
            let raw = RawInputs::read_kb(&at(&p.raw_dir))?;
            let n_raw = raw.len();
            let kb = workflow::ingest(raw)?;
            kb.write_jsonl(&at(&p.kb))?;
            notes.push(format!("{} of {} entities kept", kb.len(), n_raw));
        }
        Stage::Extract => {
            let kb = load_kb(&at(&p.kb))?;
            let inputs = RawInputs::read_corpus_side(&at(&p.raw_dir))?;
            let ex = workflow::extract(&inputs, &kb);
            ex.corpus.write_jsonl(&at(&p.mentions))?;
            ex.corpus.write_provenance(&at(&p.provenance))?;
            notes.push(format!(
                "{} mentions; {:?}; {} with gold outside the KB dropped",
                ex.corpus.len(),
                ex.diagnostics,
                ex.unknown_gold
            ));
        }
        Stage::Split => {
            let corpus = MentionCorpus::read(&at(&p.mentions), Some(&at(&p.provenance)))?;
            let held_path = at(&p.raw_dir.join(HELDOUT_FILE));
            let held = std::fs::read_to_string(&held_path).map_err(|e| CliError::io(&held_path, e))?;
            let pages = held.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            let s = workflow::split(&corpus, &pages, cfg.eval.per_lang, cfg.stage_seed("split"));
            s.train.write_jsonl(&at(&p.train))?;
            s.heldout.write_jsonl(&at(&p.heldout))?;
            s.eval.write_jsonl(&at(&p.eval))?;
            notes.push(format!("train {}, heldout {}, eval {}", s.train.len(), s.heldout.len(), s.eval.len()));
        }
        Stage::Vocab => {
            let train = MentionCorpus::read(&at(&p.train), None)?;
            let kb = load_kb(&at(&p.kb))?;
            let vocab = workflow::build_vocab(&train, &kb, cfg.model.vocab_size)?;
            vocab.save(&at(&p.vocab))?;
            notes.push(format!("{} tokens", vocab.len()));
        }
        Stage::Train => {
            let d = Loaded::read(cfg, true, false)?;
            let v = d.view();
            let init = workflow::init_model::<T>(cfg, v.vocab, v.kb)?;
            let (model, log) = train_phase1(&workflow::train_config(cfg), &v.data(), cfg.toggles.mode(), init)?;
            let out = if cfg.toggles.hard_negatives { &p.phase1 } else { &p.checkpoint };
            model.to_checkpoint().save(&at(out))?;
            log.write_tsv(&at(&p.train_log))?;
            notes.push(last_loss(&log));
        }
        Stage::Mine => {
            if !cfg.toggles.hard_negatives {
                return Err(CliError::Config("mine needs toggles.hard_negatives = true".into()));
            }
            let d = Loaded::read(cfg, true, false)?;
            let v = d.view();
            let tc = workflow::train_config(cfg);
            let phase1 = load_model::<T>(&at(&p.phase1))?;
            let negatives = mine_for(&phase1, &v.data(), &tc)?;
            write_json(&at(&p.negatives), &negatives)?;
            let mut log = TrainingLog::default();
            let model = train_phase2(&tc, &v.data(), cfg.toggles.mode(), phase1, &negatives, &mut log)?;
            model.to_checkpoint().save(&at(&p.checkpoint))?;
            log.write_tsv(&at(&p.phase2_log))?;
            notes.push(format!("{} negatives mined; {}", negatives.total(), last_loss(&log)));
        }
        Stage::Index => {
            let d = Loaded::read(cfg, true, false)?;
            let model = load_model::<T>(&at(&p.checkpoint))?;
            let index = workflow::index_for(&model, &d.view(), &workflow::model_tag(cfg))?;
            index.save(&at(&p.index))?;
            notes.push(format!("{} entities, d_enc {}", index.len(), index.d_enc()));
        }
        Stage::Eval => {
            let d = Loaded::read(cfg, false, true)?;
            let v = d.view();
            let model = load_model::<T>(&at(&p.checkpoint))?;
            let index = EntityIndex::<T>::load(&at(&p.index))?;
            let (_, report) = workflow::evaluate(&model, &index, &v)?;
            emit_report(&report, &at(&p.report))?;
            let (table, _, alias_report) = workflow::alias_baseline(&v);
            table.write_tsv(&at(&p.alias))?;
            emit_report(&alias_report, &at(&p.alias_report))?;
            notes.push(format!("dual encoder\n{}", report.to_table()));
            notes.push(format!("alias table\n{}", alias_report.to_table()));
        }
        Stage::RerankTrain => {
            let d = Loaded::read(cfg, true, false)?;
            let model = load_model::<T>(&at(&p.checkpoint))?;
            let index = EntityIndex::<T>::load(&at(&p.index))?;
            let (ca, log) = workflow::train_cross_encoder(cfg, &d.view(), &model, &index)?;
            ca.to_checkpoint().save(&at(&p.reranker))?;
            write_tsv(
                &at(&p.rerank_log),
                std::iter::once(vec!["step".to_string(), "loss".to_string()])
                    .chain(log.iter().map(|(s, l)| vec![s.to_string(), format!("{l:.6}")])),
            )?;
            if let Some((s, l)) = log.last() {
                notes.push(format!("step {s} loss {l:.4}"));
            }
        }
        Stage::RerankEval => {
            let d = Loaded::read(cfg, true, true)?;
            let model = load_model::<T>(&at(&p.checkpoint))?;
            let index = EntityIndex::<T>::load(&at(&p.index))?;
            let ca = CrossEncoder::<T>::from_checkpoint(Checkpoint::load(&at(&p.reranker))?)?;
            let (lists, report) = workflow::rerank_eval(cfg, &d.view(), &model, &index, &ca)?;
            write_reranked_tsv(&at(&p.reranked), &lists)?;
            emit_report(&report, &at(&p.rerank_report))?;
            notes.push(format!("reranked\n{}", report.to_table()));
        }
    }
    Ok(notes)
}

fn last_loss(log: &TrainingLog) -> String {
    log.rows
        .last()
        .map_or("no steps".to_string(), |r| format!("phase {} step {} loss {:.4}", r.phase, r.step, r.losses.total))
}

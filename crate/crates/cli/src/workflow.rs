//! Pipeline stages as in-memory functions. The file-based stages in
//! [`crate::pipeline`] wrap these with reads and writes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use mel_core::corpus::{
    count_entity_frequencies, drop_unknown_gold, extract_corpus, read_jsonl, read_redirects, read_title_map,
    read_tsv, sample_balanced_eval, split_holdout, Document, ExtractDiagnostics, FrequencyTable, MentionCorpus,
    TitleMap,
};
use mel_core::eval::{aggregate, evaluate_alias, evaluate_dense, EvalReport, EvalResult, FrequencyBins, QueryResult};
use mel_core::kb::{
    compute_lang_usage, default_blocklist, filter_admin_entities, require_wikipedia_page, Entity, KnowledgeBase,
    LangUsageStats,
};
use mel_core::model::{DualEncoder, EntityModel};
use mel_core::rerank::{build_reranker_training_set, rerank, train_reranker, CrossEncoder, RerankedList};
use mel_core::retrieval::{build_alias_table, build_index, AliasTable, EntityIndex};
use mel_core::tokenizer::{build_mention_input, train_vocab, SubwordVocab};
use mel_core::training::{train, TrainConfig, TrainData, TrainOutcome};
use mel_core::Scalar;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::synthetic::{
    SyntheticCorpus, DOCS_FILE, HEADINGS_FILE, HELDOUT_FILE, KB_RAW_FILE, REDIRECTS_FILE, TITLES_FILE,
};

/// Raw pipeline inputs.
#[derive(Debug, Clone, Default)]
pub struct RawInputs {
    pub kb_raw: Vec<Entity>,
    pub docs: Vec<Document>,
    pub redirects: HashMap<String, String>,
    pub titles: TitleMap,
    pub headings: BTreeMap<String, Vec<String>>,
    pub heldout_pages: BTreeSet<String>,
}

impl RawInputs {
    pub fn from_synthetic(s: &SyntheticCorpus) -> Self {
        RawInputs {
            kb_raw: s.kb_raw.clone(),
            docs: s.docs.clone(),
            redirects: s.redirects.iter().cloned().collect(),
            titles: s
                .titles
                .iter()
                .map(|(l, t, q)| ((l.clone(), t.clone()), q.clone()))
                .collect(),
            headings: s.headings.clone(),
            heldout_pages: s.heldout_pages.clone(),
        }
    }

    pub fn kb_path(dir: &Path) -> std::path::PathBuf {
        dir.join(KB_RAW_FILE)
    }

    pub fn read_kb(dir: &Path) -> CliResult<Vec<Entity>> {
        Ok(read_jsonl(&dir.join(KB_RAW_FILE))?)
    }

    /// Everything but the KB, which the ingest stage reads on its own.
    pub fn read_corpus_side(dir: &Path) -> CliResult<Self> {
        let headings_path = dir.join(HEADINGS_FILE);
        let mut headings: BTreeMap<String, Vec<String>> = BTreeMap::new();
        if headings_path.exists() {
            for (line, cols) in read_tsv(&headings_path)? {
                let [lang, heading] = cols.as_slice() else {
                    return Err(CliError::Config(format!(
                        "{}:{line}: expected lang<TAB>heading",
                        headings_path.display()
                    )));
                };
                headings.entry(lang.clone()).or_default().push(heading.clone());
            }
        }
        let held_path = dir.join(HELDOUT_FILE);
        let held = std::fs::read_to_string(&held_path).map_err(|e| CliError::io(&held_path, e))?;
        let redirects_path = dir.join(REDIRECTS_FILE);
        Ok(RawInputs {
            kb_raw: Vec::new(),
            docs: read_jsonl(&dir.join(DOCS_FILE))?,
            redirects: if redirects_path.exists() {
                read_redirects(&redirects_path)?
            } else {
                HashMap::new()
            },
            titles: read_title_map(&dir.join(TITLES_FILE))?,
            headings,
            heldout_pages: held.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
        })
    }
}

/// Validates raw entities, then drops administrative and page-less ones.
pub fn ingest(raw: Vec<Entity>) -> CliResult<KnowledgeBase> {
    let kb = KnowledgeBase::from_entities(raw)?;
    Ok(require_wikipedia_page(filter_admin_entities(kb, &default_blocklist())))
}

#[derive(Debug, Clone)]
pub struct Extracted {
    pub corpus: MentionCorpus,
    pub diagnostics: ExtractDiagnostics,
    /// Mentions whose gold entity was filtered out of the KB.
    pub unknown_gold: usize,
}

pub fn extract(inputs: &RawInputs, kb: &KnowledgeBase) -> Extracted {
    let (corpus, diagnostics) = extract_corpus(&inputs.docs, &inputs.headings, &inputs.redirects, &inputs.titles);
    let (corpus, unknown_gold) = drop_unknown_gold(&corpus, kb);
    Extracted {
        corpus,
        diagnostics,
        unknown_gold,
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: MentionCorpus,
    pub heldout: MentionCorpus,
    pub eval: MentionCorpus,
}

pub fn split(corpus: &MentionCorpus, heldout_pages: &BTreeSet<String>, per_lang: usize, seed: u64) -> Split {
    let (train, heldout) = split_holdout(corpus, heldout_pages);
    let eval = sample_balanced_eval(&heldout, per_lang, seed);
    Split { train, heldout, eval }
}

/// Subword vocabulary over training contexts and every KB description.
pub fn build_vocab(train: &MentionCorpus, kb: &KnowledgeBase, size: usize) -> CliResult<SubwordVocab> {
    let mention_text = train
        .mentions()
        .iter()
        .map(|m| format!("{} {} {} {}", m.title, m.left, m.span, m.right));
    let descriptions = kb
        .entities()
        .flat_map(|e| e.descriptions.iter().map(|d| d.text.clone()));
    Ok(train_vocab(mention_text.chain(descriptions), size)?)
}

/// Fresh dual encoder for the configured variant.
pub fn init_model<T: Scalar>(cfg: &PipelineConfig, vocab: &SubwordVocab, kb: &KnowledgeBase) -> CliResult<DualEncoder<T>> {
    let seed = cfg.stage_seed("init");
    let m = &cfg.model;
    let mention = m.mention_config(vocab.len(), seed);
    Ok(match cfg.toggles.entity_model {
        EntityModel::F => {
            let mut model = DualEncoder::new_featurized(mention, m.entity_config(vocab.len(), seed ^ 1))?;
            if m.shared_init {
                model.share_initialization();
            }
            model
        }
        EntityModel::E => {
            let qids: Vec<String> = kb.qids().cloned().collect();
            DualEncoder::new_embedding(mention, qids, m.table_init_std, seed ^ 1)?
        }
    })
}

/// Shared state after the data stages.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub kb: KnowledgeBase,
    pub extracted: Extracted,
    pub split: Split,
    pub vocab: SubwordVocab,
    pub stats: LangUsageStats,
    pub freq: FrequencyTable,
}

impl Prepared {
    pub fn view(&self) -> View<'_> {
        View {
            kb: &self.kb,
            vocab: &self.vocab,
            train: &self.split.train,
            eval: &self.split.eval,
            stats: &self.stats,
            freq: &self.freq,
        }
    }
}

/// What the model stages read, borrowed from memory or from loaded files.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub kb: &'a KnowledgeBase,
    pub vocab: &'a SubwordVocab,
    pub train: &'a MentionCorpus,
    pub eval: &'a MentionCorpus,
    pub stats: &'a LangUsageStats,
    pub freq: &'a FrequencyTable,
}

impl<'a> View<'a> {
    pub fn data(&self) -> TrainData<'a> {
        TrainData {
            kb: self.kb,
            vocab: self.vocab,
            train: self.train,
        }
    }
}

/// Runs ingest, extract, split and vocab over in-memory inputs.
pub fn prepare(cfg: &PipelineConfig, inputs: RawInputs) -> CliResult<Prepared> {
    let heldout_pages = inputs.heldout_pages.clone();
    let kb = ingest(inputs.kb_raw.clone())?;
    let extracted = extract(&inputs, &kb);
    let split = split(&extracted.corpus, &heldout_pages, cfg.eval.per_lang, cfg.stage_seed("split"));
    let vocab = build_vocab(&split.train, &kb, cfg.model.vocab_size)?;
    let stats = compute_lang_usage(&split.train);
    let freq = count_entity_frequencies(&split.train);
    Ok(Prepared {
        kb,
        extracted,
        split,
        vocab,
        stats,
        freq,
    })
}

/// Training settings with the stage-derived seed.
pub fn train_config(cfg: &PipelineConfig) -> TrainConfig {
    let mut tc = cfg.train.clone();
    tc.seed = cfg.stage_seed("train");
    tc
}

pub fn train_model<T: Scalar>(cfg: &PipelineConfig, v: &View<'_>) -> CliResult<TrainOutcome<T>> {
    let init = init_model::<T>(cfg, v.vocab, v.kb)?;
    Ok(train(&train_config(cfg), &v.data(), cfg.toggles.mode(), init)?)
}

/// Short tag naming the dual-encoder variant.
pub fn model_tag(cfg: &PipelineConfig) -> String {
    let t = cfg.toggles;
    let mut tag = match t.entity_model {
        EntityModel::E => "model_e".to_string(),
        EntityModel::F => "model_f".to_string(),
    };
    if t.aux_task {
        tag.push_str("+aux");
    }
    if t.hard_negatives {
        tag.push_str("+hn");
    }
    tag
}

pub fn index_for<T: Scalar>(model: &DualEncoder<T>, v: &View<'_>, tag: &str) -> CliResult<EntityIndex<T>> {
    Ok(build_index(model, v.kb, v.stats, v.vocab, tag)?)
}

pub fn evaluate<T: Scalar>(
    model: &DualEncoder<T>,
    index: &EntityIndex<T>,
    v: &View<'_>,
) -> CliResult<(EvalResult, EvalReport)> {
    let bins = FrequencyBins::default();
    let result = evaluate_dense(model, v.vocab, index, v.eval, v.freq, &bins)?;
    let report = aggregate(&result, &bins, v.freq);
    Ok((result, report))
}

pub fn alias_baseline(v: &View<'_>) -> (AliasTable, EvalResult, EvalReport) {
    let bins = FrequencyBins::default();
    let table = build_alias_table(v.train);
    let result = evaluate_alias(&table, v.eval, v.freq, &bins);
    let report = aggregate(&result, &bins, v.freq);
    (table, result, report)
}

/// First `limit` training mentions in a seeded shuffle; 0 keeps all.
fn subsample(train: &MentionCorpus, limit: usize, seed: u64) -> MentionCorpus {
    if limit == 0 || limit >= train.len() {
        return train.clone();
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut keep: Vec<usize> = rand::seq::index::sample(&mut rng, train.len(), limit).into_vec();
    keep.sort_unstable();
    MentionCorpus::from_mentions(keep.into_iter().map(|i| train.mentions()[i].clone()).collect())
}

/// Builds cross-encoder examples from dual-encoder retrievals and trains it.
pub fn train_cross_encoder<T: Scalar>(
    cfg: &PipelineConfig,
    v: &View<'_>,
    de: &DualEncoder<T>,
    index: &EntityIndex<T>,
) -> CliResult<(CrossEncoder<T>, Vec<(usize, f64)>)> {
    let ca_cfg = cfg.model.ca_config(v.vocab.len(), cfg.stage_seed("rerank-init"));
    let mut ca = CrossEncoder::new(&ca_cfg)?;
    if cfg.model.cross_warm_start {
        ca.encoder.copy_compatible_from(&de.mention);
    }
    if let Some(scale) = cfg.model.cross_identity_qk {
        ca.encoder.identity_query_key(1, T::of(scale));
    }
    let mentions = subsample(v.train, cfg.eval.rerank_train_mentions, cfg.stage_seed("rerank-sample"));
    let examples = build_reranker_training_set(
        de,
        v.vocab,
        index,
        &mentions,
        v.kb,
        v.stats,
        ca_cfg.transformer.max_len,
        cfg.rerank_sampling,
        cfg.stage_seed("rerank-examples"),
    )?;
    let mut rc = cfg.rerank.clone();
    rc.seed = cfg.stage_seed("rerank-train");
    let log = train_reranker(&mut ca, &examples, &rc)?;
    Ok((ca, log))
}

/// Reranks each eval mention's top-n dual-encoder candidates; the rest of
/// the dual-encoder list keeps its order below them.
pub fn rerank_eval<T: Scalar>(
    cfg: &PipelineConfig,
    v: &View<'_>,
    de: &DualEncoder<T>,
    index: &EntityIndex<T>,
    ca: &CrossEncoder<T>,
) -> CliResult<(Vec<(usize, RerankedList)>, EvalReport)> {
    let bins = FrequencyBins::default();
    let max_k = *mel_core::eval::K_VALUES.last().expect("k values");
    let m_len = de.mention.config.max_len;
    let mentions = v.eval.mentions();
    let inputs: Vec<_> = mentions.iter().map(|m| build_mention_input(v.vocab, m, m_len)).collect();
    let queries = mel_core::retrieval::encode_all(&de.mention, &inputs)?;
    let lists = index.search_batch(&queries, max_k)?;
    let mut out = Vec::with_capacity(mentions.len());
    let mut results = Vec::with_capacity(mentions.len());
    for (i, (m, list)) in mentions.iter().zip(&lists).enumerate() {
        let reranked = rerank(ca, v.vocab, list, m, v.kb, v.stats, cfg.eval.rerank_top_n)?;
        results.push(QueryResult {
            mention_id: i,
            lang: m.lang.clone(),
            gold_qid: m.gold_qid.clone(),
            bin: bins.assign_bin(v.freq.get(&m.gold_qid)),
            rank: reranked.rank_of(&m.gold_qid),
        });
        out.push((i, reranked));
    }
    let result = EvalResult { queries: results };
    Ok((out, aggregate(&result, &bins, v.freq)))
}

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::masked_softmax_loss;
use super::mining::{mine_hard_negatives, HardNegativeSet, NegativeBalance};
use super::optim::{learning_rate, Adam};
use super::pairs::{build_entity_entity_pairs, EntityPair};
use crate::corpus::{count_entity_frequencies, MentionCorpus};
use crate::error::{Error, Result};
use crate::kb::{compute_lang_usage, KnowledgeBase};
use crate::model::{normalize_rows, normalize_rows_backward, DualEncoder, EntityModel, EntityTower};
use crate::retrieval::{build_index, entity_inputs};
use crate::scalar::Scalar;
use crate::tokenizer::{build_entity_input, build_mention_input, SubwordVocab, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    /// Continuation steps after mining; used only with hard negatives.
    pub phase2_steps: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    /// Multiplier on cosine scores inside the softmax.
    pub temperature: f64,
    pub negatives_per_positive_cap: usize,
    /// Mined negatives appended to each row per step.
    pub negatives_per_row: usize,
    /// Retrievals scanned per mention while mining.
    pub top_k_scan: usize,
    pub aux_pairs_per_entity_cap: usize,
    pub balance: NegativeBalance,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            steps: 2000,
            phase2_steps: 1000,
            peak_lr: 1e-3,
            warmup_frac: 0.1,
            temperature: 20.0,
            negatives_per_positive_cap: 10,
            negatives_per_row: 3,
            top_k_scan: 20,
            aux_pairs_per_entity_cap: 5,
            balance: NegativeBalance::PerEntity,
            log_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: batch 8192, 500k + 250k steps, lr 1e-4, 10% warm-up.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 8192,
            steps: 500_000,
            phase2_steps: 250_000,
            peak_lr: 1e-4,
            top_k_scan: 100,
            negatives_per_row: 10,
            log_every: 1000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1]");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.peak_lr >= 0.0) {
            return bad("peak_lr must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMode {
    pub model: EntityModel,
    pub aux_task: bool,
    pub hard_negatives: bool,
}

impl TrainMode {
    pub const MODEL_E: TrainMode = TrainMode {
        model: EntityModel::E,
        aux_task: false,
        hard_negatives: false,
    };
    pub const MODEL_F: TrainMode = TrainMode {
        model: EntityModel::F,
        aux_task: false,
        hard_negatives: false,
    };
    pub const MODEL_F_PLUS_AUX: TrainMode = TrainMode {
        model: EntityModel::F,
        aux_task: true,
        hard_negatives: false,
    };

    pub fn with_hard_negatives(self) -> Self {
        TrainMode {
            hard_negatives: true,
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub mention_entity: f64,
    pub entity_entity: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub phase: u8,
    pub step: usize,
    pub lr: f64,
    pub losses: StepLosses,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    /// TSV with columns `phase, step, lr, loss_me, loss_ee, loss_total`;
    /// `loss_ee` is `-` when the auxiliary task is off.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("phase\tstep\tlr\tloss_me\tloss_ee\tloss_total\n");
        for r in &self.rows {
            let ee = r.losses.entity_entity.map_or("-".to_string(), |v| format!("{v:.6}"));
            out.push_str(&format!(
                "{}\t{}\t{:.6e}\t{:.6}\t{}\t{:.6}\n",
                r.phase, r.step, r.lr, r.losses.mention_entity, ee, r.losses.total
            ));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Mentions of one step: inputs, gold qids, and each row's own negatives.
#[derive(Debug, Clone, Default)]
pub struct MentionBatch<'a> {
    pub inputs: Vec<TokenSequence>,
    pub golds: Vec<&'a str>,
    pub negatives: Vec<Vec<&'a str>>,
}

/// Entity-entity rows (alternate descriptions) against columns (primary
/// descriptions) of the same entities.
#[derive(Debug, Clone, Default)]
pub struct PairBatch<'a> {
    pub qids: Vec<&'a str>,
    pub alt: Vec<TokenSequence>,
    pub primary: Vec<TokenSequence>,
}

/// Entity-tower input per qid, from the selected description.
pub type EntityFeatures = HashMap<String, TokenSequence>;

fn scale_into<T: Scalar>(g: &mut Array2<T>, s: T) {
    if s != T::one() {
        g.mapv_inplace(|v| v * s);
    }
}

/// Mention-entity in-batch loss. Column `j < B` holds row `j`'s gold;
/// columns past `B` hold each row's own negatives. Another row's gold equal
/// to row `i`'s is masked for row `i`, as are unused negative slots.
/// Gradients scaled by `scale` are accumulated into `grads`.
pub fn mention_entity_loss<'b, T: Scalar>(
    model: &DualEncoder<T>,
    batch: &MentionBatch<'b>,
    features: &EntityFeatures,
    temperature: T,
    scale: T,
    grads: &mut DualEncoder<T>,
) -> Result<T> {
    let b = batch.inputs.len();
    if b == 0 || batch.golds.len() != b || (!batch.negatives.is_empty() && batch.negatives.len() != b) {
        return Err(Error::Shape("inconsistent mention batch".into()));
    }
    let mut ents: Vec<&str> = Vec::new();
    let mut col_of: HashMap<&str, usize> = HashMap::new();
    let mut intern = |q: &'b str| -> usize {
        *col_of.entry(q).or_insert_with(|| {
            ents.push(q);
            ents.len() - 1
        })
    };
    let gold_col: Vec<usize> = batch.golds.iter().map(|q| intern(q)).collect();
    let neg_col: Vec<Vec<usize>> = batch
        .negatives
        .iter()
        .map(|ns| ns.iter().map(|q| intern(q)).collect())
        .collect();
    let k = neg_col.iter().map(Vec::len).max().unwrap_or(0);

    let (m_raw, m_cache) = model.mention.forward(&batch.inputs)?;
    let (mu, m_norm) = normalize_rows(&m_raw);

    let (e_raw, e_cache) = match &model.entity {
        EntityTower::Featurized(enc) => {
            let inputs = ents
                .iter()
                .map(|q| {
                    features
                        .get(*q)
                        .cloned()
                        .ok_or_else(|| Error::Unencodable(vec![q.to_string()]))
                })
                .collect::<Result<Vec<_>>>()?;
            let (e, cache) = enc.forward(&inputs)?;
            (e, Some(cache))
        }
        EntityTower::Embedding(table) => {
            let rows = ents
                .iter()
                .map(|q| table.row_of(q).ok_or_else(|| Error::UnknownEntity(q.to_string())))
                .collect::<Result<Vec<_>>>()?;
            (table.vectors.select(Axis(0), &rows), None)
        }
    };
    let (eu, e_norm) = normalize_rows(&e_raw);

    let all = mu.dot(&eu.t());
    let mut scores = Array2::zeros((b, b + k));
    let mut mask = Array2::from_elem((b, b + k), false);
    for i in 0..b {
        for j in 0..b {
            scores[[i, j]] = all[[i, gold_col[j]]];
            mask[[i, j]] = j == i || gold_col[j] != gold_col[i];
        }
        if let Some(ns) = neg_col.get(i) {
            for (slot, &c) in ns.iter().enumerate() {
                scores[[i, b + slot]] = all[[i, c]];
                mask[[i, b + slot]] = true;
            }
        }
    }
    let (loss, mut g) = masked_softmax_loss(&scores, &mask, temperature)?;
    scale_into(&mut g, scale);

    let mut d_all = Array2::zeros(all.raw_dim());
    for i in 0..b {
        for j in 0..b {
            d_all[[i, gold_col[j]]] += g[[i, j]];
        }
        if let Some(ns) = neg_col.get(i) {
            for (slot, &c) in ns.iter().enumerate() {
                d_all[[i, c]] += g[[i, b + slot]];
            }
        }
    }
    let d_mu = d_all.dot(&eu);
    let d_eu = d_all.t().dot(&mu);
    let d_m = normalize_rows_backward(&mu, &m_norm, &d_mu);
    model.mention.backward_into(&m_cache, &d_m, &mut grads.mention);
    let d_e = normalize_rows_backward(&eu, &e_norm, &d_eu);
    match (&model.entity, &mut grads.entity, e_cache) {
        (EntityTower::Featurized(enc), EntityTower::Featurized(genc), Some(cache)) => {
            enc.backward_into(&cache, &d_e, genc);
        }
        (EntityTower::Embedding(table), EntityTower::Embedding(gtable), None) => {
            for (q, d) in ents.iter().zip(d_e.rows()) {
                let r = table.row_of(q).expect("row checked above");
                let mut target = gtable.vectors.row_mut(r);
                target += &d;
            }
        }
        _ => return Err(Error::Shape("gradient accumulator does not match the model".into())),
    }
    Ok(loss)
}

/// Cross-lingual entity-entity loss: alternate descriptions as rows,
/// primary descriptions as columns, both through the one entity tower.
pub fn entity_entity_loss<T: Scalar>(
    model: &DualEncoder<T>,
    batch: &PairBatch<'_>,
    temperature: T,
    scale: T,
    grads: &mut DualEncoder<T>,
) -> Result<T> {
    let (EntityTower::Featurized(enc), EntityTower::Featurized(genc)) = (&model.entity, &mut grads.entity)
    else {
        return Err(Error::Config("the entity-entity task needs a featurized entity tower".into()));
    };
    let p = batch.qids.len();
    if p == 0 || batch.alt.len() != p || batch.primary.len() != p {
        return Err(Error::Shape("inconsistent pair batch".into()));
    }
    let (a_raw, a_cache) = enc.forward(&batch.alt)?;
    let (p_raw, p_cache) = enc.forward(&batch.primary)?;
    let (au, a_norm) = normalize_rows(&a_raw);
    let (pu, p_norm) = normalize_rows(&p_raw);
    let scores = au.dot(&pu.t());
    let mask = Array2::from_shape_fn((p, p), |(i, j)| i == j || batch.qids[i] != batch.qids[j]);
    let (loss, mut g) = masked_softmax_loss(&scores, &mask, temperature)?;
    scale_into(&mut g, scale);
    let d_a = normalize_rows_backward(&au, &a_norm, &g.dot(&pu));
    let d_p = normalize_rows_backward(&pu, &p_norm, &g.t().dot(&au));
    enc.backward_into(&a_cache, &d_a, genc);
    enc.backward_into(&p_cache, &d_p, genc);
    Ok(loss)
}

/// Losses and gradients of one step. With a pair batch the total is the
/// mean of the two task losses; otherwise it is the mention-entity loss.
pub fn batch_losses<T: Scalar>(
    model: &DualEncoder<T>,
    mentions: &MentionBatch<'_>,
    pairs: Option<&PairBatch<'_>>,
    features: &EntityFeatures,
    temperature: f64,
) -> Result<(StepLosses, DualEncoder<T>)> {
    let mut grads = model.zeros_like();
    let tau = T::of(temperature);
    let scale = if pairs.is_some() { T::of(0.5) } else { T::one() };
    let me = mention_entity_loss(model, mentions, features, tau, scale, &mut grads)?.as_f64();
    let ee = match pairs {
        Some(pb) => Some(entity_entity_loss(model, pb, tau, scale, &mut grads)?.as_f64()),
        None => None,
    };
    let total = match ee {
        Some(ee) => (me + ee) / 2.0,
        None => me,
    };
    Ok((
        StepLosses {
            mention_entity: me,
            entity_entity: ee,
            total,
        },
        grads,
    ))
}

/// One optimizer update on the combined loss.
pub fn multitask_step<T: Scalar>(
    model: &mut DualEncoder<T>,
    adam: &mut Adam<T>,
    mentions: &MentionBatch<'_>,
    pairs: Option<&PairBatch<'_>>,
    features: &EntityFeatures,
    temperature: f64,
    lr: f64,
) -> Result<StepLosses> {
    let (losses, grads) = batch_losses(model, mentions, pairs, features, temperature)?;
    let g: Vec<_> = grads.tensors().into_iter().map(|(_, t)| t).collect();
    adam.update(model.tensors_mut().into_iter().map(|(_, t)| t), g, lr);
    Ok(losses)
}

/// Optimizer state shaped for `model`.
pub fn adam_for<T: Scalar>(model: &DualEncoder<T>) -> Adam<T> {
    Adam::new(model.tensors().into_iter().map(|(_, t)| t))
}

/// Learning rate for `step` followed by one Adam update with `grads`.
pub fn adam_schedule_step<T: Scalar>(
    adam: &mut Adam<T>,
    model: &mut DualEncoder<T>,
    grads: &DualEncoder<T>,
    step: usize,
    steps: usize,
    config: &TrainConfig,
) -> f64 {
    let lr = learning_rate(step, steps, config.warmup_frac, config.peak_lr);
    let g: Vec<_> = grads.tensors().into_iter().map(|(_, t)| t).collect();
    adam.update(model.tensors_mut().into_iter().map(|(_, t)| t), g, lr);
    lr
}

/// Everything a training run reads.
pub struct TrainData<'a> {
    pub kb: &'a KnowledgeBase,
    pub vocab: &'a SubwordVocab,
    pub train: &'a MentionCorpus,
}

/// Tokenized training material shared by the phases of one run.
struct Prepared {
    mention_inputs: Vec<TokenSequence>,
    features: EntityFeatures,
    pairs: Vec<(EntityPair, TokenSequence, TokenSequence)>,
}

fn prepare<T: Scalar>(
    model: &DualEncoder<T>,
    data: &TrainData<'_>,
    config: &TrainConfig,
    aux: bool,
) -> Result<Prepared> {
    let stats = compute_lang_usage(data.train);
    let m_len = model.mention.config.max_len;
    let mention_inputs = data
        .train
        .mentions()
        .iter()
        .map(|m| build_mention_input(data.vocab, m, m_len))
        .collect();
    let mut features = EntityFeatures::new();
    let mut pairs = Vec::new();
    if let Some(enc) = model.entity_encoder() {
        let e_len = enc.config.max_len;
        let (qids, inputs) = entity_inputs(data.kb, &stats, data.vocab, e_len)?;
        features = qids.into_iter().zip(inputs).collect();
        if aux {
            pairs = build_entity_entity_pairs(data.kb, &stats, config.aux_pairs_per_entity_cap, config.seed)
                .into_iter()
                .map(|p| {
                    let alt = build_entity_input(data.vocab, &p.alt_desc, e_len);
                    let primary = build_entity_input(data.vocab, &p.primary_desc, e_len);
                    (p, alt, primary)
                })
                .collect();
        }
    }
    Ok(Prepared {
        mention_inputs,
        features,
        pairs,
    })
}

/// Endless reshuffled pass over `0..n`.
struct Epochs {
    order: Vec<usize>,
    pos: usize,
}

impl Epochs {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Epochs { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn run_phase<T: Scalar>(
    model: &mut DualEncoder<T>,
    data: &TrainData<'_>,
    prep: &Prepared,
    config: &TrainConfig,
    steps: usize,
    phase: u8,
    negatives: Option<&HardNegativeSet>,
    log: &mut TrainingLog,
) -> Result<()> {
    let mentions = data.train.mentions();
    if mentions.is_empty() || steps == 0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(phase as u64 + 1)));
    let mut mention_epochs = Epochs::new(mentions.len(), &mut rng);
    let mut pair_epochs = Epochs::new(prep.pairs.len(), &mut rng);
    let mut adam = adam_for(model);
    for step in 0..steps {
        let rows = mention_epochs.take(config.batch_size, &mut rng);
        let mut batch = MentionBatch {
            inputs: rows.iter().map(|&r| prep.mention_inputs[r].clone()).collect(),
            golds: rows.iter().map(|&r| mentions[r].gold_qid.as_str()).collect(),
            negatives: Vec::new(),
        };
        if let Some(neg) = negatives {
            batch.negatives = rows
                .iter()
                .map(|&r| {
                    let pool = &neg.per_mention[r];
                    let mut picked: Vec<&str> = pool.iter().map(String::as_str).collect();
                    if picked.len() > config.negatives_per_row {
                        let idx = rand::seq::index::sample(&mut rng, picked.len(), config.negatives_per_row);
                        let mut idx = idx.into_vec();
                        idx.sort_unstable();
                        picked = idx.into_iter().map(|i| pool[i].as_str()).collect();
                    }
                    picked
                })
                .collect();
        }
        let pair_batch = if prep.pairs.is_empty() {
            None
        } else {
            let idx = pair_epochs.take(config.batch_size, &mut rng);
            Some(PairBatch {
                qids: idx.iter().map(|&i| prep.pairs[i].0.qid.as_str()).collect(),
                alt: idx.iter().map(|&i| prep.pairs[i].1.clone()).collect(),
                primary: idx.iter().map(|&i| prep.pairs[i].2.clone()).collect(),
            })
        };
        let (losses, grads) = batch_losses(model, &batch, pair_batch.as_ref(), &prep.features, config.temperature)?;
        let lr = adam_schedule_step(&mut adam, model, &grads, step, steps, config);
        if step % config.log_every.max(1) == 0 || step + 1 == steps {
            log.rows.push(LogRow { phase, step, lr, losses });
        }
    }
    Ok(())
}

pub struct TrainOutcome<T> {
    pub model: DualEncoder<T>,
    pub log: TrainingLog,
    /// Phase-1 model the negatives were mined with, when mining ran.
    pub phase1: Option<DualEncoder<T>>,
    pub negatives: Option<HardNegativeSet>,
}

/// Phase 1 with random in-batch negatives; with hard negatives, mining
/// against the phase-1 model and a phase-2 continuation from it.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    data: &TrainData<'_>,
    mode: TrainMode,
    init: DualEncoder<T>,
) -> Result<TrainOutcome<T>> {
    let (model, log) = train_phase1(config, data, mode, init)?;
    if !mode.hard_negatives {
        return Ok(TrainOutcome {
            model,
            log,
            phase1: None,
            negatives: None,
        });
    }
    let negatives = mine_for(&model, data, config)?;
    let mut log = log;
    let final_model = train_phase2(config, data, mode, model.clone(), &negatives, &mut log)?;
    Ok(TrainOutcome {
        model: final_model,
        log,
        phase1: Some(model),
        negatives: Some(negatives),
    })
}

fn check_run<T: Scalar>(config: &TrainConfig, data: &TrainData<'_>, mode: TrainMode, init: &DualEncoder<T>) -> Result<()> {
    config.validate()?;
    if init.model() != mode.model {
        return Err(Error::Config(format!(
            "mode expects model {:?}, checkpoint is model {:?}",
            mode.model,
            init.model()
        )));
    }
    if mode.aux_task && mode.model != EntityModel::F {
        return Err(Error::Config("the entity-entity task needs model F".into()));
    }
    if let Some(q) = data.train.mentions().iter().find(|m| !data.kb.contains(&m.gold_qid)) {
        return Err(Error::UnknownEntity(q.gold_qid.clone()));
    }
    Ok(())
}

/// Phase 1 only: `config.steps` steps with in-batch negatives.
pub fn train_phase1<T: Scalar>(
    config: &TrainConfig,
    data: &TrainData<'_>,
    mode: TrainMode,
    init: DualEncoder<T>,
) -> Result<(DualEncoder<T>, TrainingLog)> {
    check_run(config, data, mode, &init)?;
    let mut model = init;
    let prep = prepare(&model, data, config, mode.aux_task)?;
    let mut log = TrainingLog::default();
    run_phase(&mut model, data, &prep, config, config.steps, 1, None, &mut log)?;
    Ok((model, log))
}

/// Phase 2 only: `config.phase2_steps` steps from the phase-1 model with
/// mined negatives appended to each row; log rows are appended to `log`.
pub fn train_phase2<T: Scalar>(
    config: &TrainConfig,
    data: &TrainData<'_>,
    mode: TrainMode,
    phase1: DualEncoder<T>,
    negatives: &HardNegativeSet,
    log: &mut TrainingLog,
) -> Result<DualEncoder<T>> {
    check_run(config, data, mode, &phase1)?;
    if negatives.per_mention.len() != data.train.len() {
        return Err(Error::Config(format!(
            "{} negative lists for {} training mentions",
            negatives.per_mention.len(),
            data.train.len()
        )));
    }
    let mut model = phase1;
    let prep = prepare(&model, data, config, mode.aux_task)?;
    run_phase(&mut model, data, &prep, config, config.phase2_steps, 2, Some(negatives), log)?;
    Ok(model)
}

/// Mines negatives for every training mention with `model`.
pub fn mine_for<T: Scalar>(model: &DualEncoder<T>, data: &TrainData<'_>, config: &TrainConfig) -> Result<HardNegativeSet> {
    let stats = compute_lang_usage(data.train);
    let index = build_index(model, data.kb, &stats, data.vocab, "mining")?;
    let freq = count_entity_frequencies(data.train);
    mine_hard_negatives(
        model,
        data.vocab,
        data.train,
        &index,
        &freq,
        config.negatives_per_positive_cap,
        config.top_k_scan,
        config.balance,
    )
}

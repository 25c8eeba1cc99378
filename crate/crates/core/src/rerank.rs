//! Cross-attention reranking of dual-encoder candidates.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{MentionCorpus, MentionRecord};
use crate::error::{Error, Result};
use crate::kb::{select_description, KnowledgeBase, LangUsageStats};
use crate::model::{take_vector, DualEncoder, Encoder, ForwardCache, TransformerConfig};
use crate::retrieval::{encode_all, top_k_indices, CandidateList, EntityIndex};
use crate::scalar::Scalar;
use crate::tokenizer::{build_mention_input, build_pair_input, SubwordVocab, TokenSequence};
use crate::training::{learning_rate, Adam};

pub const CROSS_ENCODER_KIND: &str = "cross_encoder";

/// Top retrieved and uniformly drawn negatives per training mention.
pub const RETRIEVED_NEGATIVES: usize = 4;
pub const RANDOM_NEGATIVES: usize = 4;

/// How the random (non-retrieved) negatives are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomNegatives {
    /// Uniformly over the index.
    #[default]
    Uniform,
    /// In proportion to each entity's count of positives in the training
    /// set, so an entity is a negative about as often as it is a positive.
    /// Entities without positives are drawn uniformly only when the
    /// weighted pool runs out.
    PositiveProportional,
}

/// How negatives for reranker training are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairSampling {
    pub random: RandomNegatives,
    /// When set, an entity is admitted as a retrieved negative at most this
    /// many times per training positive; retrievals are admitted in rank
    /// order across all mentions, and a mention whose top candidates are
    /// used up takes lower-ranked ones from the first `scan` retrievals.
    pub retrieved_per_positive: Option<usize>,
    pub scan: usize,
}

impl Default for PairSampling {
    fn default() -> Self {
        PairSampling {
            random: RandomNegatives::default(),
            retrieved_per_positive: None,
            scan: 20,
        }
    }
}

/// Transformer over the pair input; its `d_enc` output feeds a one-unit
/// logistic head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CAConfig {
    pub transformer: TransformerConfig,
}

impl CAConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if self.transformer.segments < 5 {
            return Err(Error::Config("pair inputs use 5 segment ids".into()));
        }
        if self.transformer.max_len < 16 {
            return Err(Error::Config("pair inputs need max_len >= 16".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEncoder<T> {
    pub encoder: Encoder<T>,
    pub head_w: Array1<T>,
    /// Length-1 bias, kept as a tensor for checkpoints and the optimizer.
    pub head_b: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub input: TokenSequence,
    pub label: u8,
    pub mention: usize,
    pub qid: String,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> CrossEncoder<T> {
    /// Encoder initialized as usual; head weights zero, so every pair starts at 0.5.
    pub fn new(config: &CAConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.transformer.clone())?;
        Ok(CrossEncoder {
            head_w: Array1::zeros(config.transformer.d_enc),
            head_b: Array1::zeros(1),
            encoder,
        })
    }

    pub fn zeros_like(&self) -> Self {
        CrossEncoder {
            encoder: self.encoder.zeros_like(),
            head_w: Array1::zeros(self.head_w.len()),
            head_b: Array1::zeros(1),
        }
    }

    pub fn tensors(&self) -> Vec<(String, ndarray::ArrayViewD<'_, T>)> {
        let mut out = self.encoder.tensors();
        out.push(("head.w".into(), self.head_w.view().into_dyn()));
        out.push(("head.b".into(), self.head_b.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ndarray::ArrayViewMutD<'_, T>)> {
        let mut out = self.encoder.tensors_mut();
        out.push(("head.w".into(), self.head_w.view_mut().into_dyn()));
        out.push(("head.b".into(), self.head_b.view_mut().into_dyn()));
        out
    }

    /// Head logits for a batch, with the encoder cache for backward.
    pub fn logits(&self, inputs: &[TokenSequence]) -> Result<(Array1<T>, Array2<T>, ForwardCache<T>)> {
        let (h, cache) = self.encoder.forward(inputs)?;
        let b = self.head_b[0];
        let logits = h.dot(&self.head_w).mapv(|z| z + b);
        Ok((logits, h, cache))
    }

    /// Coherence probability of one pair.
    pub fn score_pair(&self, pair: &TokenSequence) -> Result<T> {
        Ok(self.score_pairs(std::slice::from_ref(pair))?[0])
    }

    pub fn score_pairs(&self, pairs: &[TokenSequence]) -> Result<Array1<T>> {
        Ok(self.logits(pairs)?.0.mapv(sigmoid))
    }

    /// Mean binary cross-entropy over the batch and its gradient.
    pub fn bce_loss(&self, inputs: &[TokenSequence], labels: &[u8]) -> Result<(T, CrossEncoder<T>)> {
        if inputs.len() != labels.len() || inputs.is_empty() {
            return Err(Error::Shape("one label per pair input".into()));
        }
        let (z, h, cache) = self.logits(inputs)?;
        let n = T::of(inputs.len() as f64);
        let mut loss = T::zero();
        let mut dz = Array1::zeros(z.len());
        for (i, (&zi, &y)) in z.iter().zip(labels).enumerate() {
            let y = T::of(y as f64);
            loss += softplus(zi) - y * zi;
            dz[i] = (sigmoid(zi) - y) / n;
        }
        let mut grads = self.zeros_like();
        grads.head_w = h.t().dot(&dz);
        grads.head_b[0] = dz.sum();
        let dh = dz
            .view()
            .insert_axis(ndarray::Axis(1))
            .dot(&self.head_w.view().insert_axis(ndarray::Axis(0)));
        self.encoder.backward_into(&cache, &dh, &mut grads.encoder);
        Ok((loss / n, grads))
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let meta = serde_json::json!({ "transformer": self.encoder.config });
        let mut ckpt = Checkpoint::new(CROSS_ENCODER_KIND, meta);
        for (name, t) in self.tensors() {
            ckpt.push(name, t.to_owned());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        if ckpt.kind != CROSS_ENCODER_KIND {
            return Err(Error::Checkpoint(format!("expected {CROSS_ENCODER_KIND}, found {}", ckpt.kind)));
        }
        let transformer: TransformerConfig = ckpt.meta_field("transformer")?;
        let mut store = ckpt.into_store();
        let head_w = take_vector(&mut store, "head.w")?;
        let head_b = take_vector(&mut store, "head.b")?;
        let encoder = Encoder::from_tensors(transformer, &mut store, "")?;
        if let Some(extra) = store.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        if head_w.len() != encoder.config.d_enc || head_b.len() != 1 {
            return Err(Error::Checkpoint("head shape does not match the encoder".into()));
        }
        Ok(CrossEncoder {
            encoder,
            head_w,
            head_b,
        })
    }
}

/// Per training mention: the gold pair (label 1), the top retrieved
/// non-gold entities and randomly drawn other non-gold entities (label 0).
/// Negatives are distinct and capped by what the index holds.
#[allow(clippy::too_many_arguments)]
pub fn build_reranker_training_set<T: Scalar>(
    de_model: &DualEncoder<T>,
    vocab: &SubwordVocab,
    index: &EntityIndex<T>,
    train: &MentionCorpus,
    kb: &KnowledgeBase,
    stats: &LangUsageStats,
    max_len: usize,
    sampling: PairSampling,
    seed: u64,
) -> Result<Vec<PairExample>> {
    let m_len = de_model.mention.config.max_len;
    let inputs: Vec<_> = train.mentions().iter().map(|m| build_mention_input(vocab, m, m_len)).collect();
    let queries = encode_all(&de_model.mention, &inputs)?;
    let scores = index.score_batch(&queries)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = index.len();
    let weighted = match sampling.random {
        RandomNegatives::Uniform => None,
        RandomNegatives::PositiveProportional => {
            let mut counts = vec![0u64; n];
            for m in train.mentions() {
                if let Some(r) = index.row_of(&m.gold_qid) {
                    counts[r] += 1;
                }
            }
            let support = counts.iter().filter(|&&c| c > 0).count();
            WeightedIndex::new(&counts).ok().map(|w| (w, counts, support))
        }
    };
    let gold_rows: Vec<Option<usize>> = train.mentions().iter().map(|m| index.row_of(&m.gold_qid)).collect();
    let retrieved_lists: Vec<Vec<usize>> = match sampling.retrieved_per_positive {
        None => scores
            .rows()
            .into_iter()
            .zip(&gold_rows)
            .map(|(row, &g)| {
                top_k_indices(row, RETRIEVED_NEGATIVES + 1)
                    .into_iter()
                    .filter(|&r| Some(r) != g)
                    .take(RETRIEVED_NEGATIVES)
                    .collect()
            })
            .collect(),
        Some(ratio) => {
            let mut positives = vec![0usize; n];
            for g in gold_rows.iter().flatten() {
                positives[*g] += 1;
            }
            let ranked: Vec<Vec<usize>> = scores
                .rows()
                .into_iter()
                .zip(&gold_rows)
                .map(|(row, &g)| {
                    top_k_indices(row, sampling.scan.max(RETRIEVED_NEGATIVES + 1))
                        .into_iter()
                        .filter(|&r| Some(r) != g)
                        .collect()
                })
                .collect();
            let mut order: Vec<(usize, usize)> = ranked
                .iter()
                .enumerate()
                .flat_map(|(m, c)| (0..c.len()).map(move |r| (r, m)))
                .collect();
            order.sort_unstable();
            let mut used = vec![0usize; n];
            let mut kept: Vec<Vec<usize>> = vec![Vec::new(); ranked.len()];
            for (rank, m) in order {
                let e = ranked[m][rank];
                if kept[m].len() < RETRIEVED_NEGATIVES && used[e] < ratio * positives[e] {
                    used[e] += 1;
                    kept[m].push(e);
                }
            }
            kept
        }
    };
    let mut out = Vec::new();
    for (mi, (m, retrieved)) in train.mentions().iter().zip(retrieved_lists).enumerate() {
        let gold_row = gold_rows[mi];
        let mut used: HashSet<usize> = retrieved.iter().copied().collect();
        used.extend(gold_row);
        let want = RANDOM_NEGATIVES.min(n - used.len());
        let mut random = Vec::with_capacity(want);
        if let Some((dist, counts, support)) = &weighted {
            let available = support - used.iter().filter(|&&r| counts[r] > 0).count();
            let from_weighted = want.min(available);
            while random.len() < from_weighted {
                let r = dist.sample(&mut rng);
                if used.insert(r) {
                    random.push(r);
                }
            }
        }
        while random.len() < want {
            let r = rng.gen_range(0..n);
            if used.insert(r) {
                random.push(r);
            }
        }
        let mut push = |qid: &str, label: u8| -> Result<()> {
            let e = kb.get(qid).ok_or_else(|| Error::UnknownEntity(qid.to_string()))?;
            let d = select_description(e, stats)?;
            out.push(PairExample {
                input: build_pair_input(vocab, m, d, max_len),
                label,
                mention: mi,
                qid: qid.to_string(),
            });
            Ok(())
        };
        push(&m.gold_qid, 1)?;
        for r in retrieved.into_iter().chain(random) {
            push(&index.qids()[r], 0)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankTrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for RerankTrainConfig {
    fn default() -> Self {
        RerankTrainConfig {
            batch_size: 32,
            steps: 1000,
            peak_lr: 1e-3,
            warmup_frac: 0.01,
            log_every: 50,
            seed: 0,
        }
    }
}

impl RerankTrainConfig {
    /// Full-scale settings: 1M steps, lr 1e-5, 1% warm-up.
    pub fn paper() -> Self {
        RerankTrainConfig {
            batch_size: 8192,
            steps: 1_000_000,
            peak_lr: 1e-5,
            log_every: 1000,
            ..RerankTrainConfig::default()
        }
    }
}

/// Minibatch Adam on mean binary cross-entropy; returns `(step, loss)` log rows.
pub fn train_reranker<T: Scalar>(
    ca: &mut CrossEncoder<T>,
    examples: &[PairExample],
    config: &RerankTrainConfig,
) -> Result<Vec<(usize, f64)>> {
    if examples.is_empty() || config.steps == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut pos = 0;
    let mut adam = Adam::new(ca.tensors().into_iter().map(|(_, t)| t));
    let mut log = Vec::new();
    for step in 0..config.steps {
        let mut inputs = Vec::with_capacity(config.batch_size);
        let mut labels = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size.min(examples.len()) {
            if pos == order.len() {
                order.shuffle(&mut rng);
                pos = 0;
            }
            let ex = &examples[order[pos]];
            pos += 1;
            inputs.push(ex.input.clone());
            labels.push(ex.label);
        }
        let (loss, grads) = ca.bce_loss(&inputs, &labels)?;
        let lr = learning_rate(step, config.steps, config.warmup_frac, config.peak_lr);
        let g: Vec<_> = grads.tensors().into_iter().map(|(_, t)| t).collect();
        adam.update(ca.tensors_mut().into_iter().map(|(_, t)| t), g, lr);
        if step % config.log_every.max(1) == 0 || step + 1 == config.steps {
            log.push((step, loss.as_f64()));
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankedCandidate {
    pub qid: String,
    pub de_score: f64,
    /// Present for the rescored block only.
    pub ca_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RerankedList {
    pub entries: Vec<RerankedCandidate>,
}

impl RerankedList {
    pub fn qids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|c| c.qid.as_str())
    }

    pub fn rank_of(&self, qid: &str) -> Option<usize> {
        self.entries.iter().position(|c| c.qid == qid).map(|p| p + 1)
    }
}

/// Rescores the first `n` candidates with the cross-encoder and reorders
/// them by probability; equal probabilities keep their dual-encoder order,
/// and candidates past `n` follow unchanged.
#[allow(clippy::too_many_arguments)]
pub fn rerank<T: Scalar>(
    ca: &CrossEncoder<T>,
    vocab: &SubwordVocab,
    de_candidates: &CandidateList<T>,
    m: &MentionRecord,
    kb: &KnowledgeBase,
    stats: &LangUsageStats,
    n: usize,
) -> Result<RerankedList> {
    if de_candidates.is_empty() {
        return Err(Error::Shape("nothing to rerank".into()));
    }
    let block = n.min(de_candidates.len());
    let max_len = ca.encoder.config.max_len;
    let mut inputs = Vec::with_capacity(block);
    for c in &de_candidates.entries[..block] {
        let e = kb.get(&c.qid).ok_or_else(|| Error::UnknownEntity(c.qid.clone()))?;
        inputs.push(build_pair_input(vocab, m, select_description(e, stats)?, max_len));
    }
    let probs = ca.score_pairs(&inputs)?;
    let mut head: Vec<RerankedCandidate> = de_candidates.entries[..block]
        .iter()
        .zip(probs.iter())
        .map(|(c, p)| RerankedCandidate {
            qid: c.qid.clone(),
            de_score: c.score.as_f64(),
            ca_prob: Some(p.as_f64()),
        })
        .collect();
    head.sort_by(|a, b| {
        b.ca_prob
            .partial_cmp(&a.ca_prob)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    head.extend(de_candidates.entries[block..].iter().map(|c| RerankedCandidate {
        qid: c.qid.clone(),
        de_score: c.score.as_f64(),
        ca_prob: None,
    }));
    Ok(RerankedList { entries: head })
}

/// TSV rows `mention_id, rank, qid, de_score, ca_prob` (`-` when not rescored).
pub fn write_reranked_tsv(path: &Path, lists: &[(usize, RerankedList)]) -> Result<()> {
    let mut out = String::from("mention_id\trank\tqid\tde_score\tca_prob\n");
    for (id, list) in lists {
        for (r, c) in list.entries.iter().enumerate() {
            let p = c.ca_prob.map_or("-".to_string(), |p| format!("{p:.6}"));
            out.push_str(&format!("{id}\t{}\t{}\t{:.6}\t{p}\n", r + 1, c.qid, c.de_score));
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

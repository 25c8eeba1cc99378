use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::corpus::{FrequencyTable, MentionCorpus};
use crate::error::Result;
use crate::model::DualEncoder;
use crate::retrieval::{encode_all, top_k_indices, EntityIndex};
use crate::scalar::Scalar;
use crate::tokenizer::{build_mention_input, SubwordVocab};

const QUERY_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeBalance {
    /// Each entity serves as a negative at most `cap × positives` times.
    PerEntity,
    /// Only the per-mention cap applies; frequent retrievals dominate.
    Unbalanced,
}

/// Mined negatives per training mention, with per-entity tallies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HardNegativeSet {
    pub per_mention: Vec<Vec<String>>,
    pub tally: BTreeMap<String, usize>,
}

impl HardNegativeSet {
    pub fn from_lists(per_mention: Vec<Vec<String>>) -> Self {
        let mut tally = BTreeMap::new();
        for q in per_mention.iter().flatten() {
            *tally.entry(q.clone()).or_insert(0) += 1;
        }
        HardNegativeSet { per_mention, tally }
    }

    pub fn total(&self) -> usize {
        self.tally.values().sum()
    }

    /// Entities used as a negative more than `cap × positives` times.
    pub fn violations(&self, positives: &FrequencyTable, cap: usize) -> Vec<String> {
        self.tally
            .iter()
            .filter(|(q, &n)| n as u64 > cap as u64 * positives.get(q))
            .map(|(q, _)| q.clone())
            .collect()
    }
}

/// Selects negatives from ranked retrievals (best first), skipping each
/// mention's gold. Every mention keeps at most `cap` negatives. Under
/// [`NegativeBalance::PerEntity`] candidates are admitted in order of rank
/// across the whole corpus, and an entity stops being admitted once it has
/// been used `cap × positives` times, so the overflow dropped is always the
/// lowest-ranked.
pub fn mine_from_rankings<S: AsRef<str>>(
    rankings: &[Vec<S>],
    golds: &[S],
    positives: &FrequencyTable,
    cap: usize,
    balance: NegativeBalance,
) -> HardNegativeSet {
    assert_eq!(rankings.len(), golds.len(), "one gold per ranking");
    let candidates: Vec<Vec<&str>> = rankings
        .iter()
        .zip(golds)
        .map(|(r, g)| r.iter().map(AsRef::as_ref).filter(|q| *q != g.as_ref()).collect())
        .collect();
    let per_mention = match balance {
        NegativeBalance::Unbalanced => candidates
            .iter()
            .map(|c| c.iter().take(cap).map(|q| q.to_string()).collect())
            .collect(),
        NegativeBalance::PerEntity => {
            let mut order: Vec<(usize, usize)> = candidates
                .iter()
                .enumerate()
                .flat_map(|(m, c)| (0..c.len()).map(move |r| (r, m)))
                .collect();
            order.sort_unstable();
            let mut used: HashMap<&str, u64> = HashMap::new();
            let mut kept: Vec<Vec<(usize, String)>> = vec![Vec::new(); candidates.len()];
            for (rank, m) in order {
                if kept[m].len() >= cap {
                    continue;
                }
                let q = candidates[m][rank];
                let n = used.entry(q).or_insert(0);
                if *n < cap as u64 * positives.get(q) {
                    *n += 1;
                    kept[m].push((rank, q.to_string()));
                }
            }
            kept.into_iter()
                .map(|k| k.into_iter().map(|(_, q)| q).collect())
                .collect()
        }
    };
    HardNegativeSet::from_lists(per_mention)
}

/// Mines from precomputed query encodings against a frozen index.
pub fn mine_with_queries<T: Scalar>(
    queries: &Array2<T>,
    golds: &[String],
    index: &EntityIndex<T>,
    positives: &FrequencyTable,
    cap: usize,
    top_k_scan: usize,
    balance: NegativeBalance,
) -> Result<HardNegativeSet> {
    let mut rankings = Vec::with_capacity(queries.nrows());
    for start in (0..queries.nrows()).step_by(QUERY_CHUNK) {
        let end = (start + QUERY_CHUNK).min(queries.nrows());
        let scores = index.score_batch(&queries.slice(s![start..end, ..]).to_owned())?;
        for row in scores.rows() {
            rankings.push(
                top_k_indices(row, top_k_scan)
                    .into_iter()
                    .map(|i| index.qids()[i].clone())
                    .collect::<Vec<_>>(),
            );
        }
    }
    Ok(mine_from_rankings(&rankings, golds, positives, cap, balance))
}

/// Retrieves `top_k_scan` entities for every training mention with the
/// model's mention tower and keeps the incorrect ones as negatives.
#[allow(clippy::too_many_arguments)]
pub fn mine_hard_negatives<T: Scalar>(
    model: &DualEncoder<T>,
    vocab: &SubwordVocab,
    train: &MentionCorpus,
    index: &EntityIndex<T>,
    positives: &FrequencyTable,
    cap: usize,
    top_k_scan: usize,
    balance: NegativeBalance,
) -> Result<HardNegativeSet> {
    let max_len = model.mention.config.max_len;
    let inputs: Vec<_> = train
        .mentions()
        .iter()
        .map(|m| build_mention_input(vocab, m, max_len))
        .collect();
    let queries = encode_all(&model.mention, &inputs)?;
    let golds: Vec<String> = train.mentions().iter().map(|m| m.gold_qid.clone()).collect();
    mine_with_queries(&queries, &golds, index, positives, cap, top_k_scan, balance)
}

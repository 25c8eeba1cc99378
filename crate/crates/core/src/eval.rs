//! Frequency-binned recall, micro/macro aggregation and report files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{FrequencyTable, MentionCorpus};
use crate::error::{Error, Result};
use crate::model::DualEncoder;
use crate::retrieval::{alias_lookup, encode_all, AliasTable, EntityIndex};
use crate::scalar::Scalar;
use crate::tokenizer::{build_mention_input, SubwordVocab};

pub const K_VALUES: [usize; 3] = [1, 10, 100];
const QUERY_CHUNK: usize = 1024;

/// Half-open bins over training frequency; the last bin is unbounded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyBins {
    edges: Vec<u64>,
}

impl Default for FrequencyBins {
    fn default() -> Self {
        FrequencyBins {
            edges: vec![0, 1, 10, 100, 1_000, 10_000],
        }
    }
}

fn short_count(n: u64) -> String {
    if n >= 1000 && n % 1000 == 0 {
        format!("{}k", n / 1000)
    } else {
        n.to_string()
    }
}

impl FrequencyBins {
    pub fn new(edges: Vec<u64>) -> Result<Self> {
        if edges.first() != Some(&0) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("bin edges must start at 0 and increase strictly".into()));
        }
        Ok(FrequencyBins { edges })
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edges(&self) -> &[u64] {
        &self.edges
    }

    /// `(lo, hi)` of bin `i`; `hi` is `None` for the last bin.
    pub fn bounds(&self, i: usize) -> (u64, Option<u64>) {
        (self.edges[i], self.edges.get(i + 1).copied())
    }

    pub fn assign_bin(&self, count: u64) -> usize {
        self.edges.partition_point(|&e| e <= count) - 1
    }

    /// `[10,100)` or `[10k,+)`.
    pub fn label(&self, i: usize) -> String {
        match self.bounds(i) {
            (lo, Some(hi)) => format!("[{}, {})", short_count(lo), short_count(hi)),
            (lo, None) => format!("[{}, +)", short_count(lo)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub mention_id: usize,
    pub lang: String,
    pub gold_qid: String,
    pub bin: usize,
    /// 1-based rank of the gold entity; `None` when it cannot be retrieved.
    pub rank: Option<usize>,
}

impl QueryResult {
    pub fn hit(&self, k: usize) -> bool {
        self.rank.is_some_and(|r| r <= k)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub queries: Vec<QueryResult>,
}

/// Per-query hits at `k` and their mean (0 for an empty set).
pub fn recall_at_k(result: &EvalResult, k: usize) -> (Vec<u8>, f64) {
    let hits: Vec<u8> = result.queries.iter().map(|q| q.hit(k) as u8).collect();
    let mean = if hits.is_empty() {
        0.0
    } else {
        hits.iter().map(|&h| h as f64).sum::<f64>() / hits.len() as f64
    };
    (hits, mean)
}

/// Rank of `gold` under the retrieval order (score descending, ties to
/// the lower row).
pub fn rank_in_scores<T: Scalar>(scores: ArrayView1<T>, gold: usize) -> usize {
    let g = scores[gold];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > g || (s == g && j < gold))
        .count()
}

/// Stable identifier of a query set: SHA-256 over (mention id, language, gold).
pub fn query_set_id(result: &EvalResult) -> String {
    let mut h = Sha256::new();
    for q in &result.queries {
        h.update(format!("{}\t{}\t{}\n", q.mention_id, q.lang, q.gold_qid).as_bytes());
    }
    hex::encode(h.finalize())
}

/// Ranks every eval mention's gold entity against the whole index.
/// Mention ids are positions in `queries`.
pub fn evaluate_dense<T: Scalar>(
    model: &DualEncoder<T>,
    vocab: &SubwordVocab,
    index: &EntityIndex<T>,
    queries: &MentionCorpus,
    freq: &FrequencyTable,
    bins: &FrequencyBins,
) -> Result<EvalResult> {
    let m_len = model.mention.config.max_len;
    let mentions = queries.mentions();
    let mut out = Vec::with_capacity(mentions.len());
    for start in (0..mentions.len()).step_by(QUERY_CHUNK) {
        let chunk = &mentions[start..(start + QUERY_CHUNK).min(mentions.len())];
        let inputs: Vec<_> = chunk.iter().map(|m| build_mention_input(vocab, m, m_len)).collect();
        let scores = index.score_batch(&encode_all(&model.mention, &inputs)?)?;
        for (i, (m, row)) in chunk.iter().zip(scores.rows()).enumerate() {
            out.push(QueryResult {
                mention_id: start + i,
                lang: m.lang.clone(),
                gold_qid: m.gold_qid.clone(),
                bin: bins.assign_bin(freq.get(&m.gold_qid)),
                rank: index.row_of(&m.gold_qid).map(|g| rank_in_scores(row, g)),
            });
        }
    }
    Ok(EvalResult { queries: out })
}

/// Ranks from prior-ordered alias-table candidates; unseen surfaces and
/// entities missing from the surface's entry rank at infinity.
pub fn evaluate_alias(
    table: &AliasTable,
    queries: &MentionCorpus,
    freq: &FrequencyTable,
    bins: &FrequencyBins,
) -> EvalResult {
    let max_k = *K_VALUES.last().expect("k values");
    let queries = queries
        .mentions()
        .iter()
        .enumerate()
        .map(|(i, m)| QueryResult {
            mention_id: i,
            lang: m.lang.clone(),
            gold_qid: m.gold_qid.clone(),
            bin: bins.assign_bin(freq.get(&m.gold_qid)),
            rank: alias_lookup(table, &m.span, max_k).rank_of(&m.gold_qid),
        })
        .collect();
    EvalResult { queries }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub r1: f64,
    pub r10: f64,
    pub r100: f64,
}

impl Recall {
    fn of(qs: &[&QueryResult]) -> Option<Recall> {
        if qs.is_empty() {
            return None;
        }
        let n = qs.len() as f64;
        let at = |k| qs.iter().filter(|q| q.hit(k)).count() as f64 / n;
        Some(Recall {
            r1: at(1),
            r10: at(10),
            r100: at(100),
        })
    }

    fn mean<'a>(rows: impl Iterator<Item = &'a Recall>) -> Option<Recall> {
        let rows: Vec<&Recall> = rows.collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some(Recall {
            r1: rows.iter().map(|r| r.r1).sum::<f64>() / n,
            r10: rows.iter().map(|r| r.r10).sum::<f64>() / n,
            r100: rows.iter().map(|r| r.r100).sum::<f64>() / n,
        })
    }

    pub fn get(&self, k: usize) -> f64 {
        match k {
            1 => self.r1,
            10 => self.r10,
            100 => self.r100,
            _ => panic!("recall is reported for k in {K_VALUES:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub lo: u64,
    pub hi: Option<u64>,
    pub label: String,
    pub queries: usize,
    /// `None` for an empty bin.
    #[serde(flatten)]
    pub recall: Option<Recall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageRow {
    pub lang: String,
    pub queries: usize,
    #[serde(flatten)]
    pub recall: Recall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub query_set: String,
    pub total_queries: usize,
    pub bins: Vec<BinRow>,
    pub languages: Vec<LanguageRow>,
    pub micro: Recall,
    /// Unweighted mean over nonempty bins.
    #[serde(rename = "macro")]
    pub macro_avg: Recall,
    /// Unweighted mean over languages.
    pub language_macro: Recall,
    /// Labels of bins without queries, left out of the macro average.
    pub empty_bins: Vec<String>,
}

impl EvalReport {
    pub fn bin(&self, label: &str) -> Option<&BinRow> {
        self.bins.iter().find(|b| b.label == label)
    }

    /// JSON with a fixed field order and trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("report JSON: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Aligned table: one row per nonempty bin, then micro and macro.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12}{:>9}{:>8}{:>8}{:>8}\n",
            "Bin", "Queries", "R@1", "R@10", "R@100"
        );
        let row = |label: &str, n: usize, r: &Recall| {
            format!("{label:<12}{n:>9}{:>8.3}{:>8.3}{:>8.3}\n", r.r1, r.r10, r.r100)
        };
        for b in &self.bins {
            if let Some(r) = &b.recall {
                out.push_str(&row(&b.label, b.queries, r));
            }
        }
        out.push_str(&row("micro-avg", self.total_queries, &self.micro));
        out.push_str(&row("macro-avg", self.total_queries, &self.macro_avg));
        out
    }
}

/// Bins every query by its gold entity's training count; micro is the mean
/// over queries, macro the unweighted mean over nonempty bins.
pub fn aggregate(result: &EvalResult, bins: &FrequencyBins, freq: &FrequencyTable) -> EvalReport {
    let mut by_bin: Vec<Vec<&QueryResult>> = vec![Vec::new(); bins.len()];
    let mut by_lang: BTreeMap<&str, Vec<&QueryResult>> = BTreeMap::new();
    for q in &result.queries {
        by_bin[bins.assign_bin(freq.get(&q.gold_qid))].push(q);
        by_lang.entry(q.lang.as_str()).or_default().push(q);
    }
    let bin_rows: Vec<BinRow> = by_bin
        .iter()
        .enumerate()
        .map(|(i, qs)| {
            let (lo, hi) = bins.bounds(i);
            BinRow {
                lo,
                hi,
                label: bins.label(i),
                queries: qs.len(),
                recall: Recall::of(qs),
            }
        })
        .collect();
    let languages: Vec<LanguageRow> = by_lang
        .into_iter()
        .map(|(lang, qs)| LanguageRow {
            lang: lang.to_string(),
            queries: qs.len(),
            recall: Recall::of(&qs).expect("nonempty"),
        })
        .collect();
    let all: Vec<&QueryResult> = result.queries.iter().collect();
    let zero = Recall {
        r1: 0.0,
        r10: 0.0,
        r100: 0.0,
    };
    EvalReport {
        query_set: query_set_id(result),
        total_queries: all.len(),
        micro: Recall::of(&all).unwrap_or(zero),
        macro_avg: Recall::mean(bin_rows.iter().filter_map(|b| b.recall.as_ref())).unwrap_or(zero),
        language_macro: Recall::mean(languages.iter().map(|l| &l.recall)).unwrap_or(zero),
        empty_bins: bin_rows
            .iter()
            .filter(|b| b.recall.is_none())
            .map(|b| b.label.clone())
            .collect(),
        bins: bin_rows,
        languages,
    }
}

/// Writes `path` (JSON) and `path` with extension `txt` (table); returns both paths.
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<(PathBuf, PathBuf)> {
    let table = path.with_extension("txt");
    let write = |p: &Path, text: &str| {
        std::fs::File::create(p)
            .and_then(|mut f| f.write_all(text.as_bytes()))
            .map_err(|e| Error::io(p, e))
    };
    write(path, &report.to_json())?;
    write(&table, &report.to_table())?;
    Ok((path.to_path_buf(), table))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(id: usize, lang: &str, gold: &str, rank: Option<usize>) -> QueryResult {
        QueryResult {
            mention_id: id,
            lang: lang.into(),
            gold_qid: gold.into(),
            bin: 0,
            rank,
        }
    }

    #[test]
    fn bins() {
        let b = FrequencyBins::default();
        assert_eq!(b.assign_bin(0), 0);
        assert_eq!(b.assign_bin(9), 1);
        assert_eq!(b.assign_bin(10), 2);
        assert_eq!(b.assign_bin(10_000), 5);
        assert_eq!(b.assign_bin(u64::MAX), 5);
        assert_eq!(b.label(0), "[0, 1)");
        assert_eq!(b.label(4), "[1k, 10k)");
        assert_eq!(b.label(5), "[10k, +)");
        assert!(FrequencyBins::new(vec![1, 2]).is_err());
    }

    #[test]
    fn recall_counts() {
        let r = EvalResult {
            queries: vec![q(0, "en", "Q1", Some(1)), q(1, "en", "Q1", Some(3)), q(2, "en", "Q1", Some(200))],
        };
        assert!((recall_at_k(&r, 100).1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(recall_at_k(&r, 1).0, [1, 0, 0]);
        let inf = EvalResult {
            queries: vec![q(0, "en", "Q1", None)],
        };
        for k in K_VALUES {
            assert_eq!(recall_at_k(&inf, k).1, 0.0);
        }
    }

    #[test]
    fn rank_ties_follow_row_order() {
        let s = ndarray::array![0.5, 0.9, 0.5, 0.1];
        assert_eq!(rank_in_scores(s.view(), 1), 1);
        assert_eq!(rank_in_scores(s.view(), 0), 2);
        assert_eq!(rank_in_scores(s.view(), 2), 3);
        assert_eq!(rank_in_scores(s.view(), 3), 4);
    }

    #[test]
    fn report_layout_and_round_trip() {
        let freq = FrequencyTable {
            counts: [("Q1".to_string(), 5), ("Q2".to_string(), 50)].into_iter().collect(),
        };
        let r = EvalResult {
            queries: vec![
                q(0, "en", "Q1", Some(1)),
                q(1, "de", "Q2", Some(20)),
                q(2, "de", "Q0", None),
            ],
        };
        let rep = aggregate(&r, &FrequencyBins::default(), &freq);
        assert_eq!(rep.empty_bins.len(), 3);
        assert_eq!(rep.to_table().lines().count(), 1 + 3 + 2);
        assert_eq!(EvalReport::from_json(&rep.to_json()).unwrap(), rep);
        assert!((rep.macro_avg.r100 - 2.0 / 3.0).abs() < 1e-12);
        assert!((rep.language_macro.r1 - 0.5).abs() < 1e-12);
    }
}

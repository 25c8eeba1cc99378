//! Exact top-k entity retrieval and the alias-table baseline.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::MentionCorpus;
use crate::error::{Error, Result};
use crate::kb::{select_description, KnowledgeBase, LangUsageStats};
use crate::model::{normalize_rows, DualEncoder, Encoder, EncodingVector, EntityTower};
use crate::scalar::Scalar;
use crate::tokenizer::{build_entity_input, SubwordVocab, TokenSequence};

const INDEX_MAGIC: &[u8; 8] = b"MELIDX01";
const ENCODE_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate<S> {
    pub qid: String,
    pub score: S,
}

/// Candidates ordered by descending score, ties by ascending qid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateList<S> {
    pub entries: Vec<Candidate<S>>,
}

impl<S> CandidateList<S> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn qids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|c| c.qid.as_str())
    }

    /// 1-based position of `qid`.
    pub fn rank_of(&self, qid: &str) -> Option<usize> {
        self.entries.iter().position(|c| c.qid == qid).map(|p| p + 1)
    }
}

/// Score-descending, index-ascending comparison of two entries.
fn by_score_then_index<T: PartialOrd>(a: (T, usize), b: (T, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Indices of the `k` best scores, best first; ties go to the lower index.
pub fn top_k_indices<T: Scalar>(scores: ArrayView1<T>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| by_score_then_index((scores[a], a), (scores[b], b));
    if k < idx.len() {
        if k == 0 {
            return Vec::new();
        }
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Unit-normalized entity encodings, rows sorted by qid.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityIndex<T> {
    qids: Vec<String>,
    matrix: Array2<T>,
    model_tag: String,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    d_enc: usize,
    count: usize,
    model_tag: String,
}

impl<T: Scalar> EntityIndex<T> {
    /// Normalizes `rows` and orders them by qid, so the result does not
    /// depend on the order entities were supplied in.
    pub fn from_rows(qids: Vec<String>, rows: Array2<T>, model_tag: impl Into<String>) -> Result<Self> {
        if qids.len() != rows.nrows() {
            return Err(Error::Shape(format!("{} qids for {} rows", qids.len(), rows.nrows())));
        }
        let mut order: Vec<usize> = (0..qids.len()).collect();
        order.sort_by(|&a, &b| qids[a].cmp(&qids[b]));
        if order.windows(2).any(|w| qids[w[0]] == qids[w[1]]) {
            return Err(Error::Shape("duplicate qid in index".into()));
        }
        let zero: Vec<String> = rows
            .rows()
            .into_iter()
            .zip(&qids)
            .filter(|(r, _)| r.iter().all(|v| *v == T::zero()))
            .map(|(_, q)| q.clone())
            .collect();
        if !zero.is_empty() {
            return Err(Error::Unencodable(zero));
        }
        let sorted = rows.select(Axis(0), &order);
        let (matrix, _) = normalize_rows(&sorted);
        Ok(EntityIndex {
            qids: order.iter().map(|&i| qids[i].clone()).collect(),
            matrix,
            model_tag: model_tag.into(),
        })
    }

    pub fn qids(&self) -> &[String] {
        &self.qids
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.matrix
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn len(&self) -> usize {
        self.qids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qids.is_empty()
    }

    pub fn d_enc(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn row_of(&self, qid: &str) -> Option<usize> {
        self.qids.binary_search_by(|q| q.as_str().cmp(qid)).ok()
    }

    /// Cosine of the query against every row.
    pub fn scores(&self, query: &EncodingVector<T>) -> Result<Array1<T>> {
        if query.len() != self.d_enc() {
            return Err(Error::Shape(format!("query of length {} for d_enc {}", query.len(), self.d_enc())));
        }
        let q = query.normalized()?;
        Ok(self.matrix.dot(&q.0))
    }

    /// Exact top-k by full scan.
    pub fn search(&self, query: &EncodingVector<T>, k: usize) -> Result<CandidateList<T>> {
        let scores = self.scores(query)?;
        Ok(self.candidates(scores.view(), k))
    }

    /// Row `i` of the result answers row `i` of `queries`.
    pub fn search_batch(&self, queries: &Array2<T>, k: usize) -> Result<Vec<CandidateList<T>>> {
        let scores = self.score_batch(queries)?;
        Ok(scores.rows().into_iter().map(|s| self.candidates(s, k)).collect())
    }

    /// Queries × entities cosine matrix.
    pub fn score_batch(&self, queries: &Array2<T>) -> Result<Array2<T>> {
        if queries.ncols() != self.d_enc() {
            return Err(Error::Shape(format!("queries of width {} for d_enc {}", queries.ncols(), self.d_enc())));
        }
        let (q, norms) = normalize_rows(queries);
        if norms.iter().any(|n| *n == T::zero()) {
            return Err(Error::ZeroVector);
        }
        Ok(q.dot(&self.matrix.t()))
    }

    fn candidates(&self, scores: ArrayView1<T>, k: usize) -> CandidateList<T> {
        let entries = top_k_indices(scores, k)
            .into_iter()
            .map(|i| Candidate {
                qid: self.qids[i].clone(),
                score: scores[i],
            })
            .collect();
        CandidateList { entries }
    }

    /// Binary layout: magic, u32 header length, JSON header, row-major f32
    /// little-endian matrix, then each qid as u32 byte length + UTF-8.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&IndexHeader {
            d_enc: self.d_enc(),
            count: self.len(),
            model_tag: self.model_tag.clone(),
        })
        .expect("header");
        let mut out = Vec::with_capacity(16 + header.len() + self.matrix.len() * 4);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.matrix.iter() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        for q in &self.qids {
            out.extend_from_slice(&(q.len() as u32).to_le_bytes());
            out.extend_from_slice(q.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("index file: {m}"));
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(bad("truncated"));
            }
            let (a, b) = r.split_at(n);
            r = b;
            Ok(a)
        };
        if take(8)? != INDEX_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let hlen = u32_at(take(4)?);
        let header: IndexHeader =
            serde_json::from_slice(take(hlen)?).map_err(|e| bad(&e.to_string()))?;
        let data = take(header.count * header.d_enc * 4)?;
        let values: Vec<T> = data
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        let mut qids = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let n = u32_at(take(4)?);
            let s = std::str::from_utf8(take(n)?).map_err(|_| bad("qid is not UTF-8"))?;
            qids.push(s.to_string());
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let matrix = Array2::from_shape_vec((header.count, header.d_enc), values)
            .map_err(|e| bad(&e.to_string()))?;
        Ok(EntityIndex {
            qids,
            matrix,
            model_tag: header.model_tag,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Entity-tower inputs for every KB entity, from its selected description.
/// Entities without any description are reported together.
pub fn entity_inputs(
    kb: &KnowledgeBase,
    stats: &LangUsageStats,
    vocab: &SubwordVocab,
    max_len: usize,
) -> Result<(Vec<String>, Vec<TokenSequence>)> {
    let mut qids = Vec::with_capacity(kb.len());
    let mut inputs = Vec::with_capacity(kb.len());
    let mut missing = Vec::new();
    for e in kb.entities() {
        match select_description(e, stats) {
            Ok(d) => {
                qids.push(e.qid.clone());
                inputs.push(build_entity_input(vocab, d, max_len));
            }
            Err(_) => missing.push(e.qid.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Unencodable(missing));
    }
    Ok((qids, inputs))
}

/// Encodes inputs in fixed-size chunks.
pub fn encode_all<T: Scalar>(encoder: &Encoder<T>, inputs: &[TokenSequence]) -> Result<Array2<T>> {
    let mut out = Array2::zeros((inputs.len(), encoder.config.d_enc));
    for (i, chunk) in inputs.chunks(ENCODE_CHUNK).enumerate() {
        let rows = encoder.encode_batch(chunk)?;
        let start = i * ENCODE_CHUNK;
        out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&rows);
    }
    Ok(out)
}

/// Index over every KB entity: Model F encodes each entity's selected
/// description, Model E copies its table row.
pub fn build_index<T: Scalar>(
    model: &DualEncoder<T>,
    kb: &KnowledgeBase,
    stats: &LangUsageStats,
    vocab: &SubwordVocab,
    model_tag: &str,
) -> Result<EntityIndex<T>> {
    match &model.entity {
        EntityTower::Featurized(enc) => {
            let (qids, inputs) = entity_inputs(kb, stats, vocab, enc.config.max_len)?;
            let rows = encode_all(enc, &inputs)?;
            EntityIndex::from_rows(qids, rows, model_tag)
        }
        EntityTower::Embedding(table) => {
            let mut rows = Vec::with_capacity(kb.len());
            let mut missing = Vec::new();
            for q in kb.qids() {
                match table.row_of(q) {
                    Some(r) => rows.push(r),
                    None => missing.push(q.clone()),
                }
            }
            if !missing.is_empty() {
                return Err(Error::Unencodable(missing));
            }
            let matrix = table.vectors.select(Axis(0), &rows);
            EntityIndex::from_rows(kb.qids().cloned().collect(), matrix, model_tag)
        }
    }
}

pub fn normalize_surface(s: &str) -> String {
    s.nfc().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AliasEntry {
    pub qid: String,
    pub count: u64,
    pub prior: f64,
}

/// Surface string → entities by descending prior, pooled over languages.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AliasTable {
    pub table: BTreeMap<String, Vec<AliasEntry>>,
}

impl AliasTable {
    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn entries(&self, surface: &str) -> &[AliasEntry] {
        self.table
            .get(&normalize_surface(surface))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// TSV rows `surface, qid, count, prior`.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for (surface, entries) in &self.table {
            for e in entries {
                writeln!(w, "{}\t{}\t{}\t{}", surface, e.qid, e.count, e.prior).map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table: BTreeMap<String, Vec<AliasEntry>> = BTreeMap::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let parse = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(parse(format!("expected 4 columns, found {}", cols.len())));
            }
            let count = cols[2].parse().map_err(|e| parse(format!("count: {e}")))?;
            let prior = cols[3].parse().map_err(|e| parse(format!("prior: {e}")))?;
            table.entry(cols[0].to_string()).or_default().push(AliasEntry {
                qid: cols[1].to_string(),
                count,
                prior,
            });
        }
        Ok(AliasTable { table })
    }
}

/// prior(q | s) = count(s → q) / count(s) over the training mentions.
/// Surfaces are compared after NFC normalization, without case folding.
pub fn build_alias_table(train: &MentionCorpus) -> AliasTable {
    let mut counts: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for m in train.mentions() {
        *counts
            .entry(normalize_surface(&m.span))
            .or_default()
            .entry(m.gold_qid.clone())
            .or_default() += 1;
    }
    let table = counts
        .into_iter()
        .map(|(surface, by_qid)| {
            let total: u64 = by_qid.values().sum();
            let mut entries: Vec<AliasEntry> = by_qid
                .into_iter()
                .map(|(qid, count)| AliasEntry {
                    qid,
                    count,
                    prior: count as f64 / total as f64,
                })
                .collect();
            // BTreeMap order makes the sort's tie order qid ascending.
            entries.sort_by(|a, b| b.count.cmp(&a.count));
            (surface, entries)
        })
        .collect();
    AliasTable { table }
}

/// Top-k entities for a surface by prior; empty for unseen surfaces.
pub fn alias_lookup(table: &AliasTable, surface: &str, k: usize) -> CandidateList<f64> {
    let entries = table
        .entries(surface)
        .iter()
        .take(k)
        .map(|e| Candidate {
            qid: e.qid.clone(),
            score: e.prior,
        })
        .collect();
    CandidateList { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::MentionRecord;
    use ndarray::array;

    fn mention(span: &str, qid: &str) -> MentionRecord {
        MentionRecord {
            doc_id: "d".into(),
            lang: "en".into(),
            title: "t".into(),
            left: String::new(),
            span: span.into(),
            right: String::new(),
            gold_qid: qid.into(),
        }
    }

    #[test]
    fn alias_priors() {
        let mut ms: Vec<_> = (0..3).map(|_| mention("X", "Q1")).collect();
        ms.push(mention("X", "Q2"));
        ms.push(mention("Y", "Q3"));
        let table = build_alias_table(&MentionCorpus::from_mentions(ms));
        let x = table.entries("X");
        assert_eq!(x[0].qid, "Q1");
        assert_eq!(x[0].prior, 0.75);
        assert_eq!(table.entries("Y")[0].prior, 1.0);
        assert_eq!(alias_lookup(&table, "X", 1).qids().collect::<Vec<_>>(), ["Q1"]);
        assert_eq!(alias_lookup(&table, "X", 10).len(), 2);
        assert!(alias_lookup(&table, "Z", 5).is_empty());
    }

    #[test]
    fn alias_nfc() {
        let composed = "Caf\u{e9}";
        let decomposed = "Cafe\u{301}";
        let table = build_alias_table(&MentionCorpus::from_mentions(vec![
            mention(composed, "Q1"),
            mention(decomposed, "Q1"),
        ]));
        assert_eq!(table.len(), 1);
        assert_eq!(table.entries(decomposed)[0].count, 2);
    }

    #[test]
    fn alias_tsv_round_trip() {
        let table = build_alias_table(&MentionCorpus::from_mentions(vec![
            mention("A", "Q2"),
            mention("A", "Q1"),
            mention("B", "Q1"),
        ]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("alias.tsv");
        table.write_tsv(&p).unwrap();
        assert_eq!(AliasTable::read_tsv(&p).unwrap(), table);
        // equal counts: qid order
        assert_eq!(table.entries("A")[0].qid, "Q1");
    }

    #[test]
    fn search_self_and_ties() {
        let rows = array![[1.0, 0.0], [0.0, 2.0], [3.0, 0.0]];
        let idx = EntityIndex::<f64>::from_rows(vec!["Qc".into(), "Qb".into(), "Qa".into()], rows, "t").unwrap();
        assert_eq!(idx.qids(), ["Qa", "Qb", "Qc"]);
        let res = idx.search(&EncodingVector(array![1.0, 0.0]), 5).unwrap();
        assert_eq!(res.qids().collect::<Vec<_>>(), ["Qa", "Qc", "Qb"]);
        let res = idx.search(&EncodingVector(array![0.0, 5.0]), 1).unwrap();
        assert_eq!(res.entries[0].qid, "Qb");
        assert!((res.entries[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_row_rejected() {
        let rows = array![[1.0, 0.0], [0.0, 0.0]];
        let err = EntityIndex::<f64>::from_rows(vec!["Q1".into(), "Q2".into()], rows, "t").unwrap_err();
        assert!(matches!(err, Error::Unencodable(q) if q == ["Q2"]));
    }

    #[test]
    fn index_bytes_round_trip() {
        let rows = array![[1.0f32, 2.0, 3.0], [0.5, -1.0, 0.25]];
        let idx = EntityIndex::from_rows(vec!["Q1".into(), "Q2".into()], rows, "model-f").unwrap();
        let back = EntityIndex::<f32>::from_bytes(&idx.to_bytes()).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes(), idx.to_bytes());
        assert!(EntityIndex::<f32>::from_bytes(&idx.to_bytes()[..20]).is_err());
    }
}

//! Linked-mention corpus: anchor extraction, holdout splitting, frequency counts.
//!
//! Documents use a small wikitext subset: `== Heading ==` section headings and
//! `[[target|anchor text]]` / `[[target]]` links.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;

/// Characters of left/right context kept on each side of a mention.
pub const CONTEXT_CHARS: usize = 500;

/// Redirect chains longer than this are treated as broken.
pub const MAX_REDIRECT_HOPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub lang: String,
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub page_entity: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MentionRecord {
    pub doc_id: String,
    pub lang: String,
    pub title: String,
    pub left: String,
    pub span: String,
    pub right: String,
    pub gold_qid: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MentionCorpus {
    mentions: Vec<MentionRecord>,
    provenance: BTreeMap<String, Option<String>>,
}

impl MentionCorpus {
    pub fn new(
        mentions: Vec<MentionRecord>,
        provenance: BTreeMap<String, Option<String>>,
    ) -> Self {
        MentionCorpus {
            mentions,
            provenance,
        }
    }

    /// A corpus with no page-entity information.
    pub fn from_mentions(mentions: Vec<MentionRecord>) -> Self {
        let provenance = mentions.iter().map(|m| (m.doc_id.clone(), None)).collect();
        MentionCorpus::new(mentions, provenance)
    }

    pub fn mentions(&self) -> &[MentionRecord] {
        &self.mentions
    }

    pub fn provenance(&self) -> &BTreeMap<String, Option<String>> {
        &self.provenance
    }

    pub fn page_entity(&self, doc_id: &str) -> Option<&str> {
        self.provenance.get(doc_id).and_then(|p| p.as_deref())
    }

    pub fn len(&self) -> usize {
        self.mentions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mentions.is_empty()
    }

    /// Keeps mentions satisfying `keep`, and the provenance of documents that
    /// still contribute mentions.
    pub fn filter(&self, keep: impl Fn(&MentionRecord) -> bool) -> MentionCorpus {
        let mentions: Vec<_> = self.mentions.iter().filter(|m| keep(m)).cloned().collect();
        let docs: BTreeSet<&str> = mentions.iter().map(|m| m.doc_id.as_str()).collect();
        let provenance = self
            .provenance
            .iter()
            .filter(|(d, _)| docs.contains(d.as_str()))
            .map(|(d, p)| (d.clone(), p.clone()))
            .collect();
        MentionCorpus::new(mentions, provenance)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.mentions)
    }

    pub fn write_provenance(&self, path: &Path) -> Result<()> {
        let rows = self
            .provenance
            .iter()
            .map(|(d, p)| vec![d.clone(), p.clone().unwrap_or_default()]);
        write_tsv(path, rows)
    }

    pub fn read(mentions: &Path, provenance: Option<&Path>) -> Result<Self> {
        let mentions: Vec<MentionRecord> = read_jsonl(mentions)?;
        let Some(path) = provenance else {
            return Ok(MentionCorpus::from_mentions(mentions));
        };
        let mut prov = BTreeMap::new();
        for (line, cols) in read_tsv(path)? {
            if cols.len() != 2 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("expected 2 columns, found {}", cols.len()),
                });
            }
            let page = (!cols[1].is_empty()).then(|| cols[1].clone());
            prov.insert(cols[0].clone(), page);
        }
        Ok(MentionCorpus::new(mentions, prov))
    }
}

/// Training-mention count per gold entity; absent entities count 0.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub counts: BTreeMap<String, u64>,
}

impl FrequencyTable {
    pub fn get(&self, qid: &str) -> u64 {
        self.counts.get(qid).copied().unwrap_or(0)
    }
}

pub fn count_entity_frequencies(train: &MentionCorpus) -> FrequencyTable {
    let mut counts = BTreeMap::new();
    for m in train.mentions() {
        *counts.entry(m.gold_qid.clone()).or_insert(0) += 1;
    }
    FrequencyTable { counts }
}

/// Truncates the body at the first heading listed for the document's language.
pub fn strip_trailing_sections(
    doc: &Document,
    patterns: &BTreeMap<String, Vec<String>>,
) -> Document {
    let Some(headings) = patterns.get(&doc.lang) else {
        return doc.clone();
    };
    let body = &doc.body;
    let mut search = 0;
    while let Some(rel) = body[search..].find("==") {
        let open = search + rel;
        let inner_start = open + body[open..].len() - body[open..].trim_start_matches('=').len();
        let Some(close_rel) = body[inner_start..].find("==") else {
            break;
        };
        let heading = body[inner_start..inner_start + close_rel].trim();
        if headings.iter().any(|h| h == heading) {
            let mut out = doc.clone();
            out.body = body[..open].trim_end().to_string();
            return out;
        }
        let close = inner_start + close_rel;
        search = close + body[close..].len() - body[close..].trim_start_matches('=').len();
    }
    doc.clone()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractDiagnostics {
    pub anchors: usize,
    pub unresolved_title: usize,
    pub broken_redirect: usize,
    pub empty_anchor: usize,
}

impl ExtractDiagnostics {
    pub fn dropped(&self) -> usize {
        self.unresolved_title + self.broken_redirect + self.empty_anchor
    }

    pub fn merge(&mut self, other: ExtractDiagnostics) {
        self.anchors += other.anchors;
        self.unresolved_title += other.unresolved_title;
        self.broken_redirect += other.broken_redirect;
        self.empty_anchor += other.empty_anchor;
    }
}

/// `(language, title) -> qid`.
pub type TitleMap = HashMap<(String, String), String>;

/// Wikipedia title normalization: surrounding whitespace dropped, spaces as underscores.
pub fn normalize_title(title: &str) -> String {
    title.trim().replace(' ', "_")
}

struct Anchor {
    target: String,
    start: usize,
    end: usize,
}

/// Removes link markup, returning the plain text and the character ranges
/// of the anchors within it.
fn render_markup(body: &str) -> (String, Vec<Anchor>) {
    let mut text = String::with_capacity(body.len());
    let mut chars = 0usize;
    let mut anchors = Vec::new();
    let mut rest = body;
    let push = |text: &mut String, chars: &mut usize, s: &str| {
        for c in s.chars() {
            if c != '[' && c != ']' && c != '|' {
                text.push(c);
                *chars += 1;
            }
        }
    };
    while let Some(open) = rest.find("[[") {
        push(&mut text, &mut chars, &rest[..open]);
        let after = &rest[open + 2..];
        let Some(close) = after.find("]]") else {
            push(&mut text, &mut chars, after);
            rest = "";
            break;
        };
        let inner = &after[..close];
        let (target, label) = match inner.split_once('|') {
            Some((t, l)) => (t, l),
            None => (inner, inner),
        };
        let start = chars;
        push(&mut text, &mut chars, label);
        anchors.push(Anchor {
            target: target.to_string(),
            start,
            end: chars,
        });
        rest = &after[close + 2..];
    }
    push(&mut text, &mut chars, rest);
    (text, anchors)
}

fn resolve_redirects<'a>(
    title: &'a str,
    redirects: &'a HashMap<String, String>,
) -> Option<&'a str> {
    let mut current = title;
    for _ in 0..=MAX_REDIRECT_HOPS {
        match redirects.get(current) {
            Some(next) => current = next,
            None => return Some(current),
        }
    }
    None
}

pub fn extract_anchors(
    doc: &Document,
    redirects: &HashMap<String, String>,
    title_to_qid: &TitleMap,
) -> (Vec<MentionRecord>, ExtractDiagnostics) {
    let (text, anchors) = render_markup(&doc.body);
    let chars: Vec<char> = text.chars().collect();
    let mut diag = ExtractDiagnostics::default();
    let mut out = Vec::new();
    for a in anchors {
        diag.anchors += 1;
        let span: String = chars[a.start..a.end].iter().collect();
        if span.trim().is_empty() {
            diag.empty_anchor += 1;
            continue;
        }
        let target = normalize_title(&a.target);
        let Some(resolved) = resolve_redirects(&target, redirects) else {
            diag.broken_redirect += 1;
            continue;
        };
        let Some(qid) = title_to_qid.get(&(doc.lang.clone(), resolved.to_string())) else {
            diag.unresolved_title += 1;
            continue;
        };
        let left_from = a.start.saturating_sub(CONTEXT_CHARS);
        let right_to = (a.end + CONTEXT_CHARS).min(chars.len());
        out.push(MentionRecord {
            doc_id: doc.doc_id.clone(),
            lang: doc.lang.clone(),
            title: doc.title.clone(),
            left: chars[left_from..a.start].iter().collect(),
            span,
            right: chars[a.end..right_to].iter().collect(),
            gold_qid: qid.clone(),
        });
    }
    (out, diag)
}

/// Strips trailing sections and extracts anchors from every document, in order.
pub fn extract_corpus(
    docs: &[Document],
    patterns: &BTreeMap<String, Vec<String>>,
    redirects: &HashMap<String, String>,
    title_to_qid: &TitleMap,
) -> (MentionCorpus, ExtractDiagnostics) {
    let mut mentions = Vec::new();
    let mut provenance = BTreeMap::new();
    let mut diag = ExtractDiagnostics::default();
    for doc in docs {
        let cleaned = strip_trailing_sections(doc, patterns);
        let (found, d) = extract_anchors(&cleaned, redirects, title_to_qid);
        diag.merge(d);
        mentions.extend(found);
        provenance.insert(doc.doc_id.clone(), doc.page_entity.clone());
    }
    (MentionCorpus::new(mentions, provenance), diag)
}

/// Sends every mention from a page about a held-out entity to the held-out
/// side, in every language edition.
pub fn split_holdout(
    corpus: &MentionCorpus,
    held_out_page_entities: &BTreeSet<String>,
) -> (MentionCorpus, MentionCorpus) {
    let is_held = |m: &MentionRecord| {
        corpus
            .page_entity(&m.doc_id)
            .is_some_and(|p| held_out_page_entities.contains(p))
    };
    (corpus.filter(|m| !is_held(m)), corpus.filter(is_held))
}

/// Removes mentions whose gold entity is not in the KB; returns the drop count.
pub fn drop_unknown_gold(corpus: &MentionCorpus, kb: &KnowledgeBase) -> (MentionCorpus, usize) {
    let kept = corpus.filter(|m| kb.contains(&m.gold_qid));
    let dropped = corpus.len() - kept.len();
    (kept, dropped)
}

/// Uniform sample without replacement of up to `per_lang` mentions per
/// language; the result keeps corpus order.
pub fn sample_balanced_eval(heldout: &MentionCorpus, per_lang: usize, seed: u64) -> MentionCorpus {
    let mut by_lang: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, m) in heldout.mentions().iter().enumerate() {
        by_lang.entry(m.lang.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for pool in by_lang.values() {
        let take = per_lang.min(pool.len());
        let picked = rand::seq::index::sample(&mut rng, pool.len(), take);
        chosen.extend(picked.into_iter().map(|j| pool[j]));
    }
    chosen.sort_unstable();
    let mentions: Vec<_> = chosen
        .into_iter()
        .map(|i| heldout.mentions()[i].clone())
        .collect();
    let docs: BTreeSet<&str> = mentions.iter().map(|m| m.doc_id.as_str()).collect();
    let provenance = heldout
        .provenance()
        .iter()
        .filter(|(d, _)| docs.contains(d.as_str()))
        .map(|(d, p)| (d.clone(), p.clone()))
        .collect();
    MentionCorpus::new(mentions, provenance)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("row serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads tab-separated rows, skipping blank lines; yields 1-based line numbers.
pub fn read_tsv(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        rows.push((idx + 1, line.split('\t').map(str::to_string).collect()));
    }
    Ok(rows)
}

pub fn write_tsv(path: &Path, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        writeln!(out, "{}", row.join("\t")).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn columns_error(path: &Path, line: usize, want: usize, got: usize) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("expected {want} columns, found {got}"),
    }
}

/// `from<TAB>to` redirect pairs.
pub fn read_redirects(path: &Path) -> Result<HashMap<String, String>> {
    read_tsv(path)?
        .into_iter()
        .map(|(line, cols)| match cols.as_slice() {
            [from, to] => Ok((normalize_title(from), normalize_title(to))),
            _ => Err(columns_error(path, line, 2, cols.len())),
        })
        .collect()
}

/// `lang<TAB>title<TAB>qid` rows.
pub fn read_title_map(path: &Path) -> Result<TitleMap> {
    read_tsv(path)?
        .into_iter()
        .map(|(line, cols)| match cols.as_slice() {
            [lang, title, qid] => Ok(((lang.clone(), normalize_title(title)), qid.clone())),
            _ => Err(columns_error(path, line, 3, cols.len())),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(body: &str) -> Document {
        Document {
            doc_id: "d1".into(),
            lang: "xx".into(),
            title: "T".into(),
            body: body.into(),
            page_entity: None,
        }
    }

    fn patterns() -> BTreeMap<String, Vec<String>> {
        [("xx".to_string(), vec!["References".to_string()])].into()
    }

    fn m(doc_id: &str, lang: &str, gold: &str) -> MentionRecord {
        MentionRecord {
            doc_id: doc_id.into(),
            lang: lang.into(),
            title: String::new(),
            left: String::new(),
            span: "s".into(),
            right: String::new(),
            gold_qid: gold.into(),
        }
    }

    #[test]
    fn strips_reference_section() {
        let out = strip_trailing_sections(&doc("...text == References == junk"), &patterns());
        assert_eq!(out.body, "...text");
        let same = doc("no == See also == headings of interest");
        assert_eq!(strip_trailing_sections(&same, &patterns()), same);
        let all = strip_trailing_sections(&doc("== References ==\n* x"), &patterns());
        assert_eq!(all.body, "");
    }

    #[test]
    fn anchor_with_context() {
        let titles: TitleMap = [(("xx".into(), "Paris_(city)".into()), "Q90".into())].into();
        let (ms, diag) = extract_anchors(
            &doc("visited [[Paris_(city)|Paris]] today"),
            &HashMap::new(),
            &titles,
        );
        assert_eq!(diag.dropped(), 0);
        assert_eq!(ms.len(), 1);
        assert_eq!(ms[0].span, "Paris");
        assert_eq!(ms[0].gold_qid, "Q90");
        assert!(ms[0].left.ends_with("visited "));
        assert!(ms[0].right.starts_with(" today"));
    }

    #[test]
    fn unresolvable_anchor_is_tallied() {
        let (ms, diag) = extract_anchors(&doc("a [[Nowhere]] b"), &HashMap::new(), &TitleMap::new());
        assert!(ms.is_empty());
        assert_eq!(diag.unresolved_title, 1);
        assert_eq!(diag.dropped(), 1);
    }

    #[test]
    fn follows_redirect() {
        let redirects: HashMap<String, String> = [("A".into(), "B".into())].into();
        let titles: TitleMap = [(("xx".into(), "B".into()), "Q7".into())].into();
        let (ms, _) = extract_anchors(&doc("see [[A]]"), &redirects, &titles);
        assert_eq!(ms[0].gold_qid, "Q7");
        assert_eq!(ms[0].span, "A");
    }

    #[test]
    fn redirect_cycle_and_long_chain_are_dropped() {
        let cyc: HashMap<String, String> = [("A".into(), "B".into()), ("B".into(), "A".into())].into();
        let titles: TitleMap = [(("xx".into(), "A".into()), "Q1".into())].into();
        let (ms, diag) = extract_anchors(&doc("[[A]]"), &cyc, &titles);
        assert!(ms.is_empty());
        assert_eq!(diag.broken_redirect, 1);

        let chain: HashMap<String, String> =
            (0..11).map(|i| (format!("T{i}"), format!("T{}", i + 1))).collect();
        let end: TitleMap = [(("xx".into(), "T11".into()), "Q1".into())].into();
        assert_eq!(extract_anchors(&doc("[[T0]]"), &chain, &end).0.len(), 0);
        assert_eq!(extract_anchors(&doc("[[T1]]"), &chain, &end).0.len(), 1);
    }

    #[test]
    fn context_is_capped_and_clean() {
        let titles: TitleMap = [(("xx".into(), "X".into()), "Q1".into())].into();
        let long = "w ".repeat(400);
        let short = "v ".repeat(100);
        let body = format!("{long}[[Y|other]] {short}[[X|here]] [[Z]] {long}");
        let (ms, diag) = extract_anchors(&doc(&body), &HashMap::new(), &titles);
        assert_eq!(diag.anchors, 3);
        assert_eq!(ms.len(), 1);
        assert_eq!(ms[0].left.chars().count(), CONTEXT_CHARS);
        assert_eq!(ms[0].right.chars().count(), CONTEXT_CHARS);
        assert!(ms[0].left.contains("other"));
        assert!(!ms[0].left.contains('[') && !ms[0].right.contains(']'));
    }

    #[test]
    fn holdout_by_page_entity_across_languages() {
        let corpus = MentionCorpus::new(
            vec![m("a_xx", "xx", "Q1"), m("a_yy", "yy", "Q2"), m("b_xx", "xx", "Q3")],
            [
                ("a_xx".to_string(), Some("P1".to_string())),
                ("a_yy".to_string(), Some("P1".to_string())),
                ("b_xx".to_string(), Some("P2".to_string())),
            ]
            .into(),
        );
        let (train, held) = split_holdout(&corpus, &["P1".to_string()].into());
        assert_eq!(train.len(), 1);
        assert_eq!(train.mentions()[0].doc_id, "b_xx");
        assert_eq!(held.len(), 2);
        let (all, none) = split_holdout(&corpus, &BTreeSet::new());
        assert_eq!(all, corpus);
        assert!(none.is_empty());
    }

    #[test]
    fn frequencies() {
        assert_eq!(count_entity_frequencies(&MentionCorpus::default()).get("Q1"), 0);
        let corpus = MentionCorpus::from_mentions(vec![
            m("d", "xx", "Q1"),
            m("d", "xx", "Q1"),
            m("d", "xx", "Q2"),
            m("d", "xx", "Q1"),
        ]);
        let f = count_entity_frequencies(&corpus);
        assert_eq!(f.get("Q1"), 3);
        assert_eq!(f.get("Q9"), 0);
    }

    #[test]
    fn balanced_sampling() {
        let mut ms = Vec::new();
        ms.extend((0..5000).map(|i| m(&format!("d{i}"), "xx", "Q1")));
        ms.extend((0..3).map(|i| m(&format!("e{i}"), "yy", "Q1")));
        let corpus = MentionCorpus::from_mentions(ms);
        let s = sample_balanced_eval(&corpus, 1000, 7);
        let count = |l: &str| s.mentions().iter().filter(|x| x.lang == l).count();
        assert_eq!(count("xx"), 1000);
        assert_eq!(count("yy"), 3);
        assert_eq!(s, sample_balanced_eval(&corpus, 1000, 7));
        assert_ne!(s, sample_balanced_eval(&corpus, 1000, 8));
        assert_eq!(s.provenance().len(), 1003);
    }

    #[test]
    fn drops_mentions_outside_kb() {
        let kb = KnowledgeBase::from_entities([crate::kb::Entity {
            qid: "Q1".into(),
            names: Default::default(),
            descriptions: vec![],
            wiki_langs: Default::default(),
            type_ids: Default::default(),
        }])
        .unwrap();
        let corpus = MentionCorpus::from_mentions(vec![m("d", "xx", "Q1"), m("e", "xx", "Q2")]);
        let (kept, dropped) = drop_unknown_gold(&corpus, &kb);
        assert_eq!((kept.len(), dropped), (1, 1));
        assert!(!kept.provenance().contains_key("e"));
    }
}

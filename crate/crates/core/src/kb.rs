//! Knowledge-base ingestion, scoping filters, and primary-description choice.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::MentionCorpus;
use crate::error::{Error, Result};

/// Wikimedia-internal administrative classes. An item that is an instance or
/// subclass of any of these is not a linkable entity.
pub const ADMIN_BLOCKLIST: [&str; 14] = [
    "Q4167836",  // category
    "Q24046192", // category stub
    "Q20010800", // user category
    "Q11266439", // template
    "Q11753321", // navigational template
    "Q19842659", // user template
    "Q21528878", // redirect page
    "Q17362920", // duplicated page
    "Q14204246", // project page
    "Q21025364", // project page
    "Q17442446", // internal item
    "Q26267864", // KML file
    "Q4663903",  // portal
    "Q15184295", // module
];

pub fn default_blocklist() -> BTreeSet<String> {
    ADMIN_BLOCKLIST.iter().map(|s| s.to_string()).collect()
}

/// Accepts the shapes of Wikipedia edition codes (`en`, `zh-yue`, `be_x_old`, `simple`).
pub fn is_valid_lang_code(code: &str) -> bool {
    !code.is_empty()
        && code.len() <= 16
        && code
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-' || b == b'_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptionSource {
    Wikipedia,
    Wikidata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionCandidate {
    #[serde(rename = "lang")]
    pub language: String,
    pub source: DescriptionSource,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub qid: String,
    #[serde(default)]
    pub names: BTreeMap<String, String>,
    #[serde(default)]
    pub descriptions: Vec<DescriptionCandidate>,
    #[serde(default)]
    pub wiki_langs: BTreeSet<String>,
    #[serde(default)]
    pub type_ids: BTreeSet<String>,
}

impl Entity {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.qid.is_empty() {
            return Err("empty qid".into());
        }
        for lang in self.names.keys().chain(self.wiki_langs.iter()) {
            if !is_valid_lang_code(lang) {
                return Err(format!("invalid language code {lang:?}"));
            }
        }
        for d in &self.descriptions {
            if !is_valid_lang_code(&d.language) {
                return Err(format!("invalid language code {:?}", d.language));
            }
            if d.text.trim().is_empty() {
                return Err(format!("blank {} description", d.language));
            }
        }
        Ok(())
    }

    fn languages(&self) -> impl Iterator<Item = &String> {
        self.names
            .keys()
            .chain(self.descriptions.iter().map(|d| &d.language))
    }
}

/// Entities keyed (and therefore iterated) by qid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    entities: BTreeMap<String, Entity>,
    kb_langs: BTreeSet<String>,
}

impl KnowledgeBase {
    pub fn from_entities(entities: impl IntoIterator<Item = Entity>) -> Result<Self> {
        let mut kb = KnowledgeBase::default();
        for e in entities {
            kb.insert(e)?;
        }
        Ok(kb)
    }

    pub fn insert(&mut self, entity: Entity) -> Result<()> {
        if self.entities.contains_key(&entity.qid) {
            return Err(Error::DuplicateQid(entity.qid));
        }
        self.kb_langs.extend(entity.languages().cloned());
        self.entities.insert(entity.qid.clone(), entity);
        Ok(())
    }

    pub fn get(&self, qid: &str) -> Option<&Entity> {
        self.entities.get(qid)
    }

    pub fn contains(&self, qid: &str) -> bool {
        self.entities.contains_key(qid)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Entities in ascending qid order.
    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn qids(&self) -> impl Iterator<Item = &String> {
        self.entities.keys()
    }

    pub fn kb_langs(&self) -> &BTreeSet<String> {
        &self.kb_langs
    }

    fn retain(self, keep: impl Fn(&Entity) -> bool) -> Self {
        let entities = self.entities.into_values().filter(|e| keep(e));
        KnowledgeBase::from_entities(entities).expect("subset of a valid KB")
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for e in self.entities() {
            let line = serde_json::to_string(e).expect("entity serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn load_kb(path: &Path) -> Result<KnowledgeBase> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_kb(BufReader::new(file), path)
}

pub fn read_kb(reader: impl BufRead, path: &Path) -> Result<KnowledgeBase> {
    let mut kb = KnowledgeBase::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let entity: Entity = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        entity.validate().map_err(parse_err)?;
        kb.insert(entity)?;
    }
    Ok(kb)
}

/// Drops every entity whose `type_ids` intersect `blocklist`.
pub fn filter_admin_entities(kb: KnowledgeBase, blocklist: &BTreeSet<String>) -> KnowledgeBase {
    if blocklist.is_empty() {
        return kb;
    }
    kb.retain(|e| e.type_ids.is_disjoint(blocklist))
}

/// Keeps exactly the entities with a page in at least one Wikipedia edition.
pub fn require_wikipedia_page(kb: KnowledgeBase) -> KnowledgeBase {
    kb.retain(|e| !e.wiki_langs.is_empty())
}

/// Per-entity and global mention counts by context language.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LangUsageStats {
    pub per_entity: BTreeMap<String, BTreeMap<String, u64>>,
    pub global: BTreeMap<String, u64>,
}

impl LangUsageStats {
    pub fn entity_count(&self, qid: &str, lang: &str) -> u64 {
        self.per_entity
            .get(qid)
            .and_then(|m| m.get(lang))
            .copied()
            .unwrap_or(0)
    }

    pub fn global_count(&self, lang: &str) -> u64 {
        self.global.get(lang).copied().unwrap_or(0)
    }
}

pub fn compute_lang_usage(train: &MentionCorpus) -> LangUsageStats {
    let mut stats = LangUsageStats::default();
    for m in train.mentions() {
        *stats
            .per_entity
            .entry(m.gold_qid.clone())
            .or_default()
            .entry(m.lang.clone())
            .or_default() += 1;
        *stats.global.entry(m.lang.clone()).or_default() += 1;
    }
    stats
}

/// Picks the primary description: Wikipedia before WikiData, then by the
/// entity's own mention count in the description language, then by the
/// global count of that language, then by language code.
pub fn select_description<'e>(
    e: &'e Entity,
    stats: &LangUsageStats,
) -> Result<&'e DescriptionCandidate> {
    select_from(e, e.descriptions.iter(), stats)
}

/// As [`select_description`], restricted to candidates in `langs`
/// (the languages the tokenizer was built for).
pub fn select_description_among<'e>(
    e: &'e Entity,
    stats: &LangUsageStats,
    langs: &BTreeSet<String>,
) -> Result<&'e DescriptionCandidate> {
    select_from(
        e,
        e.descriptions.iter().filter(|d| langs.contains(&d.language)),
        stats,
    )
}

fn select_from<'e>(
    e: &Entity,
    candidates: impl Iterator<Item = &'e DescriptionCandidate>,
    stats: &LangUsageStats,
) -> Result<&'e DescriptionCandidate> {
    candidates
        .min_by(|a, b| {
            let key = |d: &DescriptionCandidate| {
                (
                    d.source,
                    std::cmp::Reverse(stats.entity_count(&e.qid, &d.language)),
                    std::cmp::Reverse(stats.global_count(&d.language)),
                )
            };
            key(a)
                .cmp(&key(b))
                .then_with(|| a.language.cmp(&b.language))
                .then_with(|| a.text.cmp(&b.text))
        })
        .ok_or_else(|| Error::NoDescription(e.qid.clone()))
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use super::*;
    use crate::corpus::MentionRecord;

    fn desc(lang: &str, source: DescriptionSource, text: &str) -> DescriptionCandidate {
        DescriptionCandidate {
            language: lang.into(),
            source,
            text: text.into(),
        }
    }

    fn entity(qid: &str) -> Entity {
        Entity {
            qid: qid.into(),
            names: BTreeMap::new(),
            descriptions: vec![],
            wiki_langs: BTreeSet::new(),
            type_ids: BTreeSet::new(),
        }
    }

    fn mention(qid: &str, lang: &str) -> MentionRecord {
        MentionRecord {
            doc_id: "d".into(),
            lang: lang.into(),
            title: String::new(),
            left: String::new(),
            span: "x".into(),
            right: String::new(),
            gold_qid: qid.into(),
        }
    }

    fn parse(text: &str) -> Result<KnowledgeBase> {
        read_kb(Cursor::new(text), Path::new("kb.jsonl"))
    }

    #[test]
    fn empty_file_gives_empty_kb() {
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn two_lines_union_languages() {
        let kb = parse(concat!(
            r#"{"qid":"Q1","names":{"en":"One"},"descriptions":[{"lang":"fr","source":"wikipedia","text":"un"}],"wiki_langs":["fr"],"type_ids":[]}"#,
            "\n",
            r#"{"qid":"Q2","names":{"de":"Zwei"},"descriptions":[{"lang":"es","source":"wikidata","text":"dos"}],"wiki_langs":[],"type_ids":["Q5"]}"#,
            "\n"
        ))
        .unwrap();
        assert_eq!(kb.len(), 2);
        let langs: Vec<_> = kb.kb_langs().iter().map(String::as_str).collect();
        assert_eq!(langs, ["de", "en", "es", "fr"]);
    }

    #[test]
    fn duplicate_qid_is_rejected() {
        let line = r#"{"qid":"Q1","names":{},"descriptions":[],"wiki_langs":[],"type_ids":[]}"#;
        match parse(&format!("{line}\n{line}\n")) {
            Err(Error::DuplicateQid(q)) => assert_eq!(q, "Q1"),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let good = r#"{"qid":"Q1","names":{},"descriptions":[],"wiki_langs":[],"type_ids":[]}"#;
        match parse(&format!("{good}\n{{not json\n")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let blank = r#"{"qid":"Q9","descriptions":[{"lang":"en","source":"wikipedia","text":"  "}]}"#;
        assert!(matches!(parse(blank), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn admin_filter() {
        let mut cat = entity("Q1");
        cat.type_ids.insert("Q4167836".into());
        let plain = entity("Q2");
        let kb = KnowledgeBase::from_entities([cat, plain]).unwrap();
        let filtered = filter_admin_entities(kb.clone(), &default_blocklist());
        assert!(!filtered.contains("Q1"));
        assert!(filtered.contains("Q2"));
        assert_eq!(filter_admin_entities(kb.clone(), &BTreeSet::new()), kb);
    }

    #[test]
    fn wikipedia_page_filter() {
        let mut radio = entity("Q3511500");
        radio.wiki_langs = ["ca", "es", "fr"].iter().map(|s| s.to_string()).collect();
        let orphan = entity("Q2");
        let kb = KnowledgeBase::from_entities([radio.clone(), orphan]).unwrap();
        let kept = require_wikipedia_page(kb);
        assert_eq!(kept.len(), 1);
        assert!(kept.contains("Q3511500"));
        let all = KnowledgeBase::from_entities([radio]).unwrap();
        assert_eq!(require_wikipedia_page(all.clone()), all);
    }

    #[test]
    fn catalan_description_for_si_radio() {
        use DescriptionSource::Wikipedia;
        let mut e = entity("Q3511500");
        e.descriptions = vec![
            desc("es", Wikipedia, "Nou Si Ràdio fue una cadena de radio"),
            desc("fr", Wikipedia, "Sí Ràdio est une station de radio"),
            desc("ca", Wikipedia, "Sí Ràdio fou una emissora de ràdio"),
        ];
        let mut train = Vec::new();
        train.extend(std::iter::repeat_with(|| mention("Q3511500", "ca")).take(9));
        train.extend(std::iter::repeat_with(|| mention("Q3511500", "es")).take(4));
        train.extend(std::iter::repeat_with(|| mention("Q3511500", "fr")).take(3));
        let stats = compute_lang_usage(&MentionCorpus::from_mentions(train));
        assert_eq!(select_description(&e, &stats).unwrap().language, "ca");
    }

    #[test]
    fn global_count_breaks_entity_ties() {
        use DescriptionSource::Wikipedia;
        let mut e = entity("Q1");
        e.descriptions = vec![desc("de", Wikipedia, "d"), desc("fr", Wikipedia, "f")];
        let mut stats = LangUsageStats::default();
        stats.per_entity.insert(
            "Q1".into(),
            [("de".to_string(), 2), ("fr".to_string(), 2)].into(),
        );
        stats.global = [("de".to_string(), 50), ("fr".to_string(), 100)].into();
        assert_eq!(select_description(&e, &stats).unwrap().language, "fr");
    }

    #[test]
    fn wikipedia_source_comes_first() {
        use DescriptionSource::{Wikidata, Wikipedia};
        let mut e = entity("Q1");
        e.descriptions = vec![desc("en", Wikidata, "short"), desc("xx", Wikipedia, "page")];
        let mut stats = LangUsageStats::default();
        stats.per_entity.insert("Q1".into(), [("en".to_string(), 99)].into());
        assert_eq!(select_description(&e, &stats).unwrap().language, "xx");
    }

    #[test]
    fn single_and_missing_candidates() {
        let mut e = entity("Q1");
        assert!(matches!(
            select_description(&e, &LangUsageStats::default()),
            Err(Error::NoDescription(_))
        ));
        e.descriptions = vec![desc("yy", DescriptionSource::Wikidata, "only")];
        assert_eq!(
            select_description(&e, &LangUsageStats::default()).unwrap().text,
            "only"
        );
        let restricted: BTreeSet<String> = ["zz".to_string()].into();
        assert!(select_description_among(&e, &LangUsageStats::default(), &restricted).is_err());
    }

    #[test]
    fn usage_counts() {
        assert_eq!(
            compute_lang_usage(&MentionCorpus::default()),
            LangUsageStats::default()
        );
        let corpus = MentionCorpus::from_mentions(vec![
            mention("Q1", "xx"),
            mention("Q1", "xx"),
            mention("Q1", "yy"),
            mention("Q1", "xx"),
        ]);
        let stats = compute_lang_usage(&corpus);
        assert_eq!(stats.per_entity["Q1"], [("xx".into(), 3), ("yy".into(), 1)].into());
        assert_eq!(stats.global_count("xx"), 3);
    }
}

//! Subword vocabulary induction and encoder input layouts.
//!
//! Words are split on whitespace and punctuation. Word-internal pieces carry
//! the `##` continuation prefix, as in WordPiece.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::corpus::MentionRecord;
use crate::error::{Error, Result};
use crate::kb::DescriptionCandidate;

pub const CONTINUATION: &str = "##";

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const ENT_START: u32 = 4;
pub const ENT_END: u32 = 5;

pub const SPECIALS: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[E]", "[/E]"];

/// Segment labels of the mention layout.
pub const SEG_TITLE: u8 = 0;
pub const SEG_LEFT: u8 = 1;
pub const SEG_MENTION: u8 = 2;
pub const SEG_RIGHT: u8 = 3;
/// Entity side of a cross-attention pair.
pub const SEG_PAIR_ENTITY: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    longest: usize,
}

/// A fixed-length encoder input. Positions at or beyond `true_len` hold `[PAD]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub true_len: usize,
}

impl TokenSequence {
    /// Pads `ids` and `segments` (which must have equal length, at most
    /// `max_len`) out to `max_len`.
    pub fn from_parts(mut ids: Vec<u32>, mut segments: Vec<u8>, max_len: usize) -> Self {
        assert!(ids.len() <= max_len && ids.len() == segments.len(), "ids and segments must fit max_len");
        let true_len = ids.len();
        ids.resize(max_len, PAD);
        segments.resize(max_len, 0);
        TokenSequence {
            ids,
            segments,
            true_len,
        }
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// The unpadded prefix.
    pub fn active(&self) -> (&[u32], &[u8]) {
        (&self.ids[..self.true_len], &self.segments[..self.true_len])
    }
}

/// Whitespace and punctuation pre-tokenization.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut words = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                words.push(&text[s..i]);
            }
        } else if !c.is_alphanumeric() {
            if let Some(s) = start.take() {
                words.push(&text[s..i]);
            }
            words.push(&text[i..i + c.len_utf8()]);
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        words.push(&text[s..]);
    }
    words
}

fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION}{c}")
            }
        })
        .collect()
}

fn join_pieces(a: &str, b: &str) -> String {
    format!("{a}{}", b.strip_prefix(CONTINUATION).unwrap_or(b))
}

/// Greedy pair-merge vocabulary induction. The most frequent adjacent pair is
/// merged first; equal counts go to the lexicographically smallest pair.
pub fn train_vocab<S: AsRef<str>>(
    corpus_text: impl IntoIterator<Item = S>,
    target_size: usize,
) -> Result<SubwordVocab> {
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for text in corpus_text {
        for w in split_words(text.as_ref()) {
            *word_counts.entry(w.to_string()).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, u64)> = word_counts
        .into_iter()
        .map(|(w, c)| (initial_symbols(&w), c))
        .collect();
    let alphabet: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    let minimum = SPECIALS.len() + alphabet.len();
    if target_size < minimum {
        return Err(Error::VocabTooSmall {
            target: target_size,
            minimum,
        });
    }
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet);
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();

    while tokens.len() < target_size {
        let mut pairs: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (syms, count) in &words {
            for w in syms.windows(2) {
                *pairs.entry((&w[0], &w[1])).or_default() += count;
            }
        }
        // BTreeMap iterates pairs in ascending order, so the first maximum wins ties.
        let Some(((a, b), _)) = pairs
            .iter()
            .fold(None, |best: Option<(&(&str, &str), u64)>, (pair, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((pair, c)),
            })
        else {
            break;
        };
        let (a, b) = (a.to_string(), b.to_string());
        let merged = join_pieces(&a, &b);
        for (syms, _) in words.iter_mut() {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == a && syms[i + 1] == b {
                    syms[i] = merged.clone();
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        if known.insert(merged.clone()) {
            tokens.push(merged);
        }
    }
    Ok(SubwordVocab::from_tokens(tokens))
}

impl SubwordVocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let longest = tokens
            .iter()
            .map(|t| t.strip_prefix(CONTINUATION).unwrap_or(t).chars().count())
            .max()
            .unwrap_or(0);
        SubwordVocab {
            tokens,
            index,
            longest,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest-match per word; a character no piece covers becomes `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in split_words(text) {
            let chars: Vec<char> = word.chars().collect();
            let mut start = 0;
            while start < chars.len() {
                let prefix = if start == 0 { "" } else { CONTINUATION };
                let max_end = chars.len().min(start + self.longest);
                let found = (start + 1..=max_end).rev().find_map(|end| {
                    let piece: String = chars[start..end].iter().collect();
                    self.id(&format!("{prefix}{piece}")).map(|id| (id, end))
                });
                match found {
                    Some((id, end)) => {
                        out.push(id);
                        start = end;
                    }
                    None => {
                        out.push(UNK);
                        start += 1;
                    }
                }
            }
        }
        out
    }

    /// One token per line; line number is the ID.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, special) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(special) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected special token {special}"),
                });
            }
        }
        let vocab = SubwordVocab::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: "duplicate tokens".into(),
            });
        }
        Ok(vocab)
    }
}

/// Sequence layout `[CLS] title [SEP] left [E] mention [/E] right`.
///
/// The title takes at most a quarter of `max_len`. After the fixed tokens,
/// title and mention, the remainder is split evenly between the two contexts
/// (odd token to the left); the left keeps its rightmost tokens and the right
/// its leftmost. A mention too long for the remainder loses its tail.
pub fn build_mention_input(vocab: &SubwordVocab, m: &MentionRecord, max_len: usize) -> TokenSequence {
    assert!(max_len >= 8, "mention inputs need max_len >= 8");
    let (ids, segs) = mention_tokens(vocab, m, max_len);
    TokenSequence::from_parts(ids, segs, max_len)
}

fn mention_tokens(vocab: &SubwordVocab, m: &MentionRecord, max_len: usize) -> (Vec<u32>, Vec<u8>) {
    let mut title = vocab.tokenize(&m.title);
    title.truncate(max_len / 4);
    let mut mention = vocab.tokenize(&m.span);
    let left = vocab.tokenize(&m.left);
    let right = vocab.tokenize(&m.right);

    let remaining = max_len - 4 - title.len();
    mention.truncate(remaining);
    let context = remaining - mention.len();
    let right_budget = context / 2;
    let left_budget = context - right_budget;
    let left = &left[left.len().saturating_sub(left_budget)..];
    let right = &right[..right.len().min(right_budget)];

    let mut ids = Vec::with_capacity(max_len);
    let mut segs = Vec::with_capacity(max_len);
    let mut push = |block: &[u32], seg: u8| {
        ids.extend_from_slice(block);
        segs.extend(std::iter::repeat(seg).take(block.len()));
    };
    push(&[CLS], SEG_TITLE);
    push(&title, SEG_TITLE);
    push(&[SEP], SEG_TITLE);
    push(left, SEG_LEFT);
    push(&[ENT_START], SEG_MENTION);
    push(&mention, SEG_MENTION);
    push(&[ENT_END], SEG_MENTION);
    push(right, SEG_RIGHT);
    (ids, segs)
}

/// `[CLS] description`, truncated to `max_len`.
pub fn build_entity_input(
    vocab: &SubwordVocab,
    d: &DescriptionCandidate,
    max_len: usize,
) -> TokenSequence {
    assert!(max_len >= 1);
    let mut ids = vec![CLS];
    let mut body = vocab.tokenize(&d.text);
    body.truncate(max_len - 1);
    ids.extend(body);
    let segs = vec![0; ids.len()];
    TokenSequence::from_parts(ids, segs, max_len)
}

/// Cross-attention input: the mention layout within `max_len / 2`, then
/// `[SEP]` and the description tokens (segment [`SEG_PAIR_ENTITY`]) in the rest.
pub fn build_pair_input(
    vocab: &SubwordVocab,
    m: &MentionRecord,
    d: &DescriptionCandidate,
    max_len: usize,
) -> TokenSequence {
    assert!(max_len >= 16, "pair inputs need max_len >= 16");
    let (mut ids, mut segs) = mention_tokens(vocab, m, max_len / 2);
    ids.push(SEP);
    segs.push(SEG_PAIR_ENTITY);
    let mut desc = vocab.tokenize(&d.text);
    desc.truncate(max_len - ids.len());
    segs.extend(std::iter::repeat(SEG_PAIR_ENTITY).take(desc.len()));
    ids.extend(desc);
    TokenSequence::from_parts(ids, segs, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::DescriptionSource;

    fn vocab_of(extra: &[&str]) -> SubwordVocab {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(extra.iter().map(|s| s.to_string()));
        SubwordVocab::from_tokens(tokens)
    }

    fn mention(title: &str, left: &str, span: &str, right: &str) -> MentionRecord {
        MentionRecord {
            doc_id: "d".into(),
            lang: "xx".into(),
            title: title.into(),
            left: left.into(),
            span: span.into(),
            right: right.into(),
            gold_qid: "Q1".into(),
        }
    }

    #[test]
    fn merges_repeated_pair() {
        let v = train_vocab(["aaab aaab"], 16).unwrap();
        assert!(v.id("##aa").is_some(), "{:?}", v.tokens());
        // Merging stops once every word is a single symbol.
        assert_eq!(v.id("aaab"), Some(v.len() as u32 - 1));
    }

    #[test]
    fn minimum_size_is_character_level() {
        let v = train_vocab(["ab ba"], 6 + 4).unwrap();
        assert_eq!(v.len(), 10);
        assert!(v.tokens()[6..].iter().all(|t| t.trim_start_matches("##").chars().count() == 1));
        assert!(matches!(
            train_vocab(["ab ba"], 9),
            Err(Error::VocabTooSmall { minimum: 10, .. })
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let text = ["the cat sat on the mat", "a bat and a cat"];
        assert_eq!(train_vocab(text, 40).unwrap(), train_vocab(text, 40).unwrap());
    }

    #[test]
    fn tokenize_cases() {
        let v = vocab_of(&["x", "##y", "xyz", "ab"]);
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.tokenize("xyz"), [v.id("xyz").unwrap()]);
        assert_eq!(v.tokenize("xy"), [v.id("x").unwrap(), v.id("##y").unwrap()]);
        assert_eq!(v.tokenize("q"), [UNK]);
        assert_eq!(v.tokenize("ab, x"), [v.id("ab").unwrap(), UNK, v.id("x").unwrap()]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = train_vocab(["some text for the vocab file"], 30).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(SubwordVocab::load(&path).unwrap(), v);
        std::fs::write(&path, "a\nb\n").unwrap();
        assert!(SubwordVocab::load(&path).is_err());
    }

    #[test]
    fn minimal_mention_layout() {
        let v = vocab_of(&["m"]);
        let seq = build_mention_input(&v, &mention("", "", "m", ""), 64);
        let m = v.id("m").unwrap();
        assert_eq!(&seq.ids[..5], &[CLS, SEP, ENT_START, m, ENT_END]);
        assert_eq!(seq.true_len, 5);
        assert!(seq.ids[5..].iter().all(|&i| i == PAD));
        assert_eq!(seq.ids.len(), 64);
        assert_eq!(&seq.segments[..5], &[0, 0, 2, 2, 2]);
    }

    #[test]
    fn title_capped_at_quarter() {
        let v = vocab_of(&["t", "m"]);
        let title = vec!["t"; 40].join(" ");
        let seq = build_mention_input(&v, &mention(&title, "", "m", ""), 64);
        let title_positions = seq.ids.iter().filter(|&&i| i == v.id("t").unwrap()).count();
        assert_eq!(title_positions, 16);
    }

    #[test]
    fn context_truncation_keeps_nearest_tokens() {
        // 64 - 4 fixed - 16 title - 24 mention = 20 → 10 tokens per side.
        let words: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let mut extra = refs.clone();
        extra.extend(["t", "m"]);
        let v = vocab_of(&extra);
        let title = vec!["t"; 16].join(" ");
        let span = vec!["m"; 24].join(" ");
        let left = refs.join(" ");
        let right = refs.join(" ");
        let seq = build_mention_input(&v, &mention(&title, &left, &span, &right), 64);
        assert_eq!(seq.true_len, 64);
        let left_ids: Vec<u32> = seq
            .ids
            .iter()
            .zip(&seq.segments)
            .filter(|(_, &s)| s == SEG_LEFT)
            .map(|(&i, _)| i)
            .collect();
        let expected: Vec<u32> = refs[90..].iter().map(|w| v.id(w).unwrap()).collect();
        assert_eq!(left_ids, expected);
        let right_ids: Vec<u32> = seq
            .ids
            .iter()
            .zip(&seq.segments)
            .filter(|(_, &s)| s == SEG_RIGHT)
            .map(|(&i, _)| i)
            .collect();
        let expected: Vec<u32> = refs[..10].iter().map(|w| v.id(w).unwrap()).collect();
        assert_eq!(right_ids, expected);
    }

    #[test]
    fn oversized_mention_keeps_markers() {
        let v = vocab_of(&["m"]);
        let span = vec!["m"; 30].join(" ");
        let seq = build_mention_input(&v, &mention("", "", &span, ""), 8);
        assert_eq!(seq.ids, vec![CLS, SEP, ENT_START, 6, 6, 6, 6, ENT_END]);
    }

    #[test]
    fn entity_input_truncates() {
        let v = vocab_of(&["d"]);
        let long = DescriptionCandidate {
            language: "xx".into(),
            source: DescriptionSource::Wikipedia,
            text: vec!["d"; 200].join(" "),
        };
        let seq = build_entity_input(&v, &long, 64);
        assert_eq!((seq.ids.len(), seq.true_len), (64, 64));
        assert!(seq.segments.iter().all(|&s| s == 0));
        let short = DescriptionCandidate {
            text: "d".into(),
            ..long.clone()
        };
        let seq = build_entity_input(&v, &short, 64);
        assert_eq!(seq.true_len, 2);
        assert_eq!(seq, build_entity_input(&v, &short, 64));
    }

    #[test]
    fn pair_input_budgets() {
        let v = vocab_of(&["m", "d"]);
        let desc = |n: usize| DescriptionCandidate {
            language: "xx".into(),
            source: DescriptionSource::Wikipedia,
            text: vec!["d"; n].join(" "),
        };
        let m = mention("", "", "m", "");
        let short = build_pair_input(&v, &m, &desc(3), 32);
        // [CLS][SEP][E] m [/E] + [SEP] + 3 description tokens
        assert_eq!(short.true_len, 5 + 1 + 3);
        assert_eq!(&short.segments[5..9], &[SEG_PAIR_ENTITY; 4]);
        let long = build_pair_input(&v, &m, &desc(100), 32);
        assert_eq!(long.true_len, 32);
        let d = v.id("d").unwrap();
        assert_eq!(long.ids.iter().filter(|&&i| i == d).count(), 32 - 6);
        assert_eq!(long, build_pair_input(&v, &m, &desc(100), 32));
    }
}

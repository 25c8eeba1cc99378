//! Seeded synthetic KB and corpus with pseudo-languages and Zipfian mention counts.
//!
//! Every entity has a two-word name, a type and four attribute concepts.
//! Names and concept words are spelled differently in each pseudo-language
//! by a per-language syllable permutation, so descriptions and mention
//! contexts agree across languages in meaning but not in surface form. Each language's description mentions only three of the
//! four attributes, in its own order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use mel_core::corpus::{write_jsonl, write_tsv, Document};
use mel_core::kb::{DescriptionCandidate, DescriptionSource, Entity, ADMIN_BLOCKLIST};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const N_TYPES: usize = 12;
const N_CONCEPTS: usize = 240;
const N_FILLERS: usize = 30;
const ATTRIBUTES: usize = 4;
const DESC_ATTRIBUTES: usize = 3;
const REDIRECT_RATE: f64 = 0.1;
const BROKEN_PER_DOC: usize = 1;
const EXTRA_ADMIN_FRAC: f64 = 0.02;
const EXTRA_PAGELESS_FRAC: f64 = 0.02;
const SINGLE_LANGUAGE_FRAC: f64 = 0.1;
const WIKIDATA_FRAC: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_entities: usize,
    pub n_languages: usize,
    pub zipf_exponent: f64,
    pub mentions_per_language: usize,
    /// Fraction of canonical names shared by two entities.
    pub ambiguity_rate: f64,
    /// Fraction of entities whose mentions all fall in held-out documents.
    pub zero_shot_frac: f64,
    /// Fraction of entities whose pages are held out, in every language.
    pub heldout_page_frac: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_entities: 500,
            n_languages: 2,
            zipf_exponent: 1.1,
            mentions_per_language: 10_000,
            ambiguity_rate: 0.3,
            zero_shot_frac: 0.1,
            heldout_page_frac: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(CliError::Config(format!("{name} must lie in [0, 1]")))
            }
        };
        frac("ambiguity_rate", self.ambiguity_rate)?;
        frac("zero_shot_frac", self.zero_shot_frac)?;
        frac("heldout_page_frac", self.heldout_page_frac)?;
        if self.n_entities < 4 || self.n_languages == 0 || self.mentions_per_language == 0 {
            return Err(CliError::Config("synthetic counts must be positive (n_entities >= 4)".into()));
        }
        if self.n_languages > 26 {
            return Err(CliError::Config("at most 26 pseudo-languages".into()));
        }
        if !(self.zipf_exponent >= 0.0) {
            return Err(CliError::Config("zipf_exponent must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn zero_shot_count(&self) -> usize {
        (self.zero_shot_frac * self.n_entities as f64).round() as usize
    }

    pub fn languages(&self) -> Vec<String> {
        (0..self.n_languages)
            .map(|i| format!("x{}", (b'a' + i as u8) as char))
            .collect()
    }
}

/// Inverse-CDF sampler of ranks `0..n` with `P(r) ∝ (r+1)^(−s)`.
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(n: usize, exponent: f64) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = (1..=n)
            .map(|r| {
                acc += (r as f64).powf(-exponent);
                acc
            })
            .collect();
        for c in cdf.iter_mut() {
            *c /= acc;
        }
        ZipfSampler { cdf }
    }

    pub fn probability(&self, rank: usize) -> f64 {
        self.cdf[rank] - if rank == 0 { 0.0 } else { self.cdf[rank - 1] }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

/// Generated KB, documents and side tables.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub languages: Vec<String>,
    /// Raw entities, including admin items and page-less items that
    /// ingestion filters out.
    pub kb_raw: Vec<Entity>,
    pub docs: Vec<Document>,
    pub redirects: Vec<(String, String)>,
    /// `(lang, title, qid)`.
    pub titles: Vec<(String, String, String)>,
    /// Trailing-section headings per language.
    pub headings: BTreeMap<String, Vec<String>>,
    pub heldout_pages: BTreeSet<String>,
    pub zero_shot: BTreeSet<String>,
    /// Kept entities by Zipf rank, most frequent first.
    pub by_rank: Vec<String>,
}

struct Lexicon {
    syllables: Vec<String>,
    /// Per language, a permutation of syllable indices.
    spellings: Vec<Vec<usize>>,
}

impl Lexicon {
    fn new(n_languages: usize, rng: &mut ChaCha8Rng) -> Self {
        let syllables: Vec<String> = CONSONANTS
            .iter()
            .flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}")))
            .collect();
        let spellings = (0..n_languages)
            .map(|_| {
                let mut p: Vec<usize> = (0..syllables.len()).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        Lexicon { syllables, spellings }
    }

    fn word(&self, parts: &[usize], lang: usize) -> String {
        parts
            .iter()
            .map(|&s| self.syllables[self.spellings[lang][s]].as_str())
            .collect()
    }

}

fn random_word(rng: &mut ChaCha8Rng, n_syllables: usize, lex: &Lexicon, used: &mut BTreeSet<Vec<usize>>) -> Vec<usize> {
    loop {
        let w: Vec<usize> = (0..n_syllables).map(|_| rng.gen_range(0..lex.syllables.len())).collect();
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

struct Profile {
    qid: String,
    given: Vec<usize>,
    family: Vec<usize>,
    /// 1 for the first holder of a name, 2 for the second, and so on.
    homonym: usize,
    ty: usize,
    attrs: Vec<usize>,
    langs: Vec<usize>,
}

impl Profile {
    /// Names are transliterated: each language spells the syllables its own way.
    fn name(&self, lex: &Lexicon, lang: usize) -> String {
        format!("{} {}", self.given_name(lex, lang), self.family_name(lex, lang))
    }

    fn given_name(&self, lex: &Lexicon, lang: usize) -> String {
        capitalize(&lex.word(&self.given, lang))
    }

    fn family_name(&self, lex: &Lexicon, lang: usize) -> String {
        capitalize(&lex.word(&self.family, lang))
    }

    /// Page title; later holders of a shared name get a numeric suffix.
    fn title(&self, lex: &Lexicon, lang: usize) -> String {
        let base = self.name(lex, lang).replace(' ', "_");
        if self.homonym == 1 {
            base
        } else {
            format!("{base}_({})", self.homonym)
        }
    }
}

/// Builds the corpus; identical specs give identical output.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus, CliError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let languages = spec.languages();
    let n_lang = languages.len();
    let lex = Lexicon::new(n_lang, &mut rng);
    let mut used = BTreeSet::new();
    let types: Vec<Vec<usize>> = (0..N_TYPES).map(|_| random_word(&mut rng, 3, &lex, &mut used)).collect();
    let concepts: Vec<Vec<usize>> = (0..N_CONCEPTS)
        .map(|i| random_word(&mut rng, 2 + i % 2, &lex, &mut used))
        .collect();
    let fillers: Vec<Vec<usize>> = (0..N_FILLERS)
        .map(|i| random_word(&mut rng, 1 + i % 2, &lex, &mut used)).collect();
    let type_qids: Vec<String> = (0..N_TYPES).map(|t| format!("Q{}", 900 + t)).collect();

    // Names: a given word and a family word; families repeat across entities.
    let n = spec.n_entities;
    let families: Vec<Vec<usize>> = (0..(n / 3).max(2))
        .map(|_| random_word(&mut rng, 2, &lex, &mut used))
        .collect();
    let mut qid_numbers: Vec<usize> = (0..n).map(|i| 1000 + i * 7).collect();
    qid_numbers.shuffle(&mut rng);
    let mut profiles: Vec<Profile> = Vec::with_capacity(n);
    for (i, &q) in qid_numbers.iter().enumerate() {
        let given = random_word(&mut rng, 2, &lex, &mut used);
        let family = families[rng.gen_range(0..families.len())].clone();
        let mut attrs: Vec<usize> = rand::seq::index::sample(&mut rng, N_CONCEPTS, ATTRIBUTES).into_vec();
        attrs.sort_unstable();
        let langs = if n_lang > 1 && rng.gen_bool(SINGLE_LANGUAGE_FRAC) {
            vec![rng.gen_range(0..n_lang)]
        } else {
            (0..n_lang).collect()
        };
        profiles.push(Profile {
            qid: format!("Q{q}"),
            given,
            family,
            homonym: 1,
            ty: i % N_TYPES,
            attrs,
            langs,
        });
    }
    // Ambiguous pairs share one canonical name: k / (n − k) = ambiguity_rate.
    let shared = ((spec.ambiguity_rate * n as f64) / (1.0 + spec.ambiguity_rate)).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for pair in order.chunks(2).take(shared.min(n / 2)) {
        if let [a, b] = *pair {
            profiles[b].given = profiles[a].given.clone();
            profiles[b].family = profiles[a].family.clone();
        }
    }
    let mut name_count: BTreeMap<(Vec<usize>, Vec<usize>), usize> = BTreeMap::new();
    for p in profiles.iter_mut() {
        let c = name_count.entry((p.given.clone(), p.family.clone())).or_insert(0);
        *c += 1;
        p.homonym = *c;
    }

    let mut by_rank: Vec<usize> = (0..n).collect();
    by_rank.shuffle(&mut rng);
    let zero_shot_idx: BTreeSet<usize> = {
        let lower = &by_rank[n / 5..];
        let picked = rand::seq::index::sample(&mut rng, lower.len(), spec.zero_shot_count().min(lower.len()));
        picked.into_iter().map(|i| lower[i]).collect()
    };
    let all_lang: Vec<usize> = (0..n).filter(|&i| profiles[i].langs.len() == n_lang).collect();
    let n_heldout = ((spec.heldout_page_frac * n as f64).ceil() as usize).clamp(1, all_lang.len());
    let heldout_idx: BTreeSet<usize> = rand::seq::index::sample(&mut rng, all_lang.len(), n_heldout)
        .into_iter()
        .map(|i| all_lang[i])
        .collect();

    // Gold assignment: one forced mention per entity, the rest by Zipf rank.
    // Forced mentions land in training pages (held-out pages for zero-shot
    // entities); Zipf draws for zero-shot entities also go to held-out pages.
    struct Slot {
        gold: usize,
        lang: usize,
        heldout_only: bool,
        training_only: bool,
    }
    let mut slots: Vec<Vec<Slot>> = (0..n_lang).map(|_| Vec::new()).collect();
    for i in 0..n {
        let p = &profiles[i];
        let lang = p.langs[rng.gen_range(0..p.langs.len())];
        let zs = zero_shot_idx.contains(&i);
        slots[lang].push(Slot {
            gold: i,
            lang,
            heldout_only: zs,
            training_only: !zs,
        });
    }
    let zipf = ZipfSampler::new(n, spec.zipf_exponent);
    for (lang, lang_slots) in slots.iter_mut().enumerate() {
        while lang_slots.len() < spec.mentions_per_language {
            let gold = by_rank[zipf.sample(&mut rng)];
            if !profiles[gold].langs.contains(&lang) {
                continue;
            }
            lang_slots.push(Slot {
                gold,
                lang,
                heldout_only: zero_shot_idx.contains(&gold),
                training_only: false,
            });
        }
    }

    let pages_in = |lang: usize, held: Option<bool>| -> Vec<usize> {
        (0..n)
            .filter(|i| profiles[*i].langs.contains(&lang))
            .filter(|i| held.map_or(true, |h| heldout_idx.contains(i) == h))
            .collect()
    };
    let mut doc_sentences: BTreeMap<(usize, usize), Vec<String>> = BTreeMap::new();
    let mut redirects: BTreeMap<String, String> = BTreeMap::new();
    let lang_word = |c: &[usize], l: usize| lex.word(c, l);
    for (lang, lang_slots) in slots.iter_mut().enumerate() {
        lang_slots.shuffle(&mut rng);
        let any = pages_in(lang, None);
        let held = pages_in(lang, Some(true));
        let train = pages_in(lang, Some(false));
        for s in lang_slots.iter() {
            let pool = if s.heldout_only {
                &held
            } else if s.training_only {
                &train
            } else {
                &any
            };
            let page = pool[rng.gen_range(0..pool.len())];
            let g = &profiles[s.gold];
            let surface = match rng.gen_range(0..20) {
                0..=12 => g.name(&lex, s.lang),
                13..=16 => g.family_name(&lex, s.lang),
                _ => format!("{}{}", g.name(&lex, s.lang), lex.syllables[lex.spellings[s.lang][0]]),
            };
            let title = g.title(&lex, s.lang);
            let target = if rng.gen_bool(REDIRECT_RATE) {
                let alias = format!("{}_{}", title, languages[s.lang].to_uppercase());
                redirects.insert(alias.clone(), title);
                alias
            } else {
                title
            };
            let mut attrs = g.attrs.clone();
            attrs.shuffle(&mut rng);
            let ctx = |c: usize| lang_word(&concepts[c], s.lang);
            let noise = rng.gen_bool(0.2);
            let a0 = if noise { rng.gen_range(0..N_CONCEPTS) } else { attrs[0] };
            let f = |rng: &mut ChaCha8Rng| lang_word(&fillers[rng.gen_range(0..N_FILLERS)], s.lang);
            let sentence = format!(
                "{} {} {} [[{}|{}]] {} {} {}.",
                f(&mut rng),
                f(&mut rng),
                ctx(a0),
                target.replace('_', " "),
                surface,
                ctx(attrs[1]),
                lang_word(&types[g.ty], s.lang),
                f(&mut rng),
            );
            doc_sentences.entry((lang, page)).or_default().push(sentence);
        }
    }

    let headings: BTreeMap<String, Vec<String>> = languages
        .iter()
        .enumerate()
        .map(|(l, code)| {
            (code.clone(), vec![capitalize(&lex.word(&[3, 17, 41], l))])
        })
        .collect();
    let mut docs = Vec::new();
    for ((lang, page), sentences) in &doc_sentences {
        let p = &profiles[*page];
        let mut body = sentences.join(" ");
        body.push_str(&format!("\n\n== {} ==\n", headings[&languages[*lang]][0]));
        // Links after the heading must not be extracted.
        let other = &profiles[(page + 1) % n];
        body.push_str(&format!(
            "* [[{}|{}]]\n",
            other.title(&lex, *lang).replace('_', " "),
            other.name(&lex, *lang)
        ));
        for b in 0..BROKEN_PER_DOC {
            let label = other.family_name(&lex, *lang);
            body = body.replacen(".", &format!(" [[Missing_page_{page}_{b}|{label}]]."), 1);
        }
        docs.push(Document {
            doc_id: format!("{}/{}", languages[*lang], p.title(&lex, *lang)),
            lang: languages[*lang].clone(),
            title: p.name(&lex, *lang),
            body,
            page_entity: Some(p.qid.clone()),
        });
    }

    let mut kb_raw: Vec<Entity> = profiles
        .iter()
        .map(|p| {
            let mut descriptions = Vec::new();
            for &l in &p.langs {
                let mut attrs = p.attrs.clone();
                attrs.shuffle(&mut rng);
                let words: Vec<String> = attrs[..DESC_ATTRIBUTES]
                    .iter()
                    .map(|&c| lang_word(&concepts[c], l))
                    .collect();
                descriptions.push(DescriptionCandidate {
                    language: languages[l].clone(),
                    source: DescriptionSource::Wikipedia,
                    text: format!("{} {} {}", p.name(&lex, l), lang_word(&types[p.ty], l), words.join(" ")),
                });
            }
            if rng.gen_bool(WIKIDATA_FRAC) {
                let l = rng.gen_range(0..n_lang);
                descriptions.push(DescriptionCandidate {
                    language: languages[l].clone(),
                    source: DescriptionSource::Wikidata,
                    text: format!("{} {}", lang_word(&types[p.ty], l), lang_word(&concepts[p.attrs[0]], l)),
                });
            }
            Entity {
                qid: p.qid.clone(),
                names: p.langs.iter().map(|&l| (languages[l].clone(), p.name(&lex, l))).collect(),
                descriptions,
                wiki_langs: p.langs.iter().map(|&l| languages[l].clone()).collect(),
                type_ids: [type_qids[p.ty].clone()].into_iter().collect(),
            }
        })
        .collect();
    let n_admin = ((EXTRA_ADMIN_FRAC * n as f64).ceil()) as usize;
    let n_pageless = ((EXTRA_PAGELESS_FRAC * n as f64).ceil()) as usize;
    for i in 0..n_admin + n_pageless {
        let admin = i < n_admin;
        let lang = languages[i % n_lang].clone();
        kb_raw.push(Entity {
            qid: format!("Q{}", 100 + i),
            names: [(lang.clone(), format!("Extra {i}"))].into_iter().collect(),
            descriptions: vec![DescriptionCandidate {
                language: lang.clone(),
                source: DescriptionSource::Wikidata,
                text: format!("extra item {i}"),
            }],
            wiki_langs: if admin { [lang].into_iter().collect() } else { BTreeSet::new() },
            type_ids: if admin {
                [ADMIN_BLOCKLIST[i % ADMIN_BLOCKLIST.len()].to_string()].into_iter().collect()
            } else {
                BTreeSet::new()
            },
        });
    }
    kb_raw.sort_by(|a, b| a.qid.cmp(&b.qid));

    let langs_ref = &languages;
    let lex = &lex;
    let titles = profiles
        .iter()
        .flat_map(|p| p.langs.iter().map(move |&l| (langs_ref[l].clone(), p.title(lex, l), p.qid.clone())))
        .collect();
    Ok(SyntheticCorpus {
        headings,
        kb_raw,
        docs,
        redirects: redirects.into_iter().collect(),
        titles,
        heldout_pages: heldout_idx.iter().map(|&i| profiles[i].qid.clone()).collect(),
        zero_shot: zero_shot_idx.iter().map(|&i| profiles[i].qid.clone()).collect(),
        by_rank: by_rank.iter().map(|&i| profiles[i].qid.clone()).collect(),
        languages,
    })
}

pub const KB_RAW_FILE: &str = "kb_raw.jsonl";
pub const DOCS_FILE: &str = "docs.jsonl";
pub const REDIRECTS_FILE: &str = "redirects.tsv";
pub const TITLES_FILE: &str = "titles.tsv";
pub const HEADINGS_FILE: &str = "headings.tsv";
pub const HELDOUT_FILE: &str = "heldout_pages.txt";

impl SyntheticCorpus {
    /// Writes the raw inputs of the pipeline into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_jsonl(&dir.join(KB_RAW_FILE), &self.kb_raw)?;
        write_jsonl(&dir.join(DOCS_FILE), &self.docs)?;
        write_tsv(
            &dir.join(REDIRECTS_FILE),
            self.redirects.iter().map(|(a, b)| vec![a.clone(), b.clone()]),
        )?;
        write_tsv(
            &dir.join(TITLES_FILE),
            self.titles.iter().map(|(l, t, q)| vec![l.clone(), t.clone(), q.clone()]),
        )?;
        write_tsv(
            &dir.join(HEADINGS_FILE),
            self.headings
                .iter()
                .flat_map(|(l, hs)| hs.iter().map(move |h| vec![l.clone(), h.clone()])),
        )?;
        let held: String = self.heldout_pages.iter().map(|q| format!("{q}\n")).collect();
        let path = dir.join(HELDOUT_FILE);
        std::fs::write(&path, held).map_err(|e| CliError::io(&path, e))
    }
}

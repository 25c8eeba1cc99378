use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kb::{select_description, DescriptionCandidate, KnowledgeBase, LangUsageStats};

/// Two descriptions of one entity in different languages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityPair {
    pub qid: String,
    pub primary_desc: DescriptionCandidate,
    pub alt_desc: DescriptionCandidate,
}

/// For every entity described in at least two languages: its primary
/// description paired with up to `cap` other-language descriptions drawn
/// without replacement.
pub fn build_entity_entity_pairs(
    kb: &KnowledgeBase,
    stats: &LangUsageStats,
    cap: usize,
    seed: u64,
) -> Vec<EntityPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for e in kb.entities() {
        let Ok(primary) = select_description(e, stats) else {
            continue;
        };
        let others: Vec<&DescriptionCandidate> = e
            .descriptions
            .iter()
            .filter(|d| d.language != primary.language)
            .collect();
        if others.is_empty() {
            continue;
        }
        let mut picked = sample(&mut rng, others.len(), cap.min(others.len())).into_vec();
        picked.sort_unstable();
        pairs.extend(picked.into_iter().map(|i| EntityPair {
            qid: e.qid.clone(),
            primary_desc: primary.clone(),
            alt_desc: others[i].clone(),
        }));
    }
    pairs
}

//! A family of toy languages sharing one latent grammar.
//!
//! Every language realizes the same proto-lexicon of concepts (function words,
//! content words, per-type triggers and per-type entity names) through its own
//! surface strings, so two languages look unrelated token by token while
//! sharing the distributional structure a model can transfer.

use std::collections::BTreeSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bio::Tag;
use super::{Corpus, TaggedSequence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Function,
    Content,
    Trigger,
    Entity,
}

/// Proto-lexicon sizes. Trigger and entity counts are per entity type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LexiconSizes {
    pub function: usize,
    pub content: usize,
    pub triggers: usize,
    pub entities: usize,
}

impl Default for LexiconSizes {
    fn default() -> Self {
        Self {
            function: 16,
            content: 48,
            triggers: 3,
            entities: 24,
        }
    }
}

impl LexiconSizes {
    fn per_category(&self, c: Category, n_types: usize) -> usize {
        match c {
            Category::Function => self.function,
            Category::Content => self.content,
            Category::Trigger => self.triggers * n_types,
            Category::Entity => self.entities * n_types,
        }
    }
}

/// Per-language knobs of the latent grammar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageParams {
    pub id: String,
    /// Probability that a new chunk is an entity mention.
    #[serde(default = "default_entity_rate")]
    pub entity_rate: f64,
    /// Probability that an entity mention comes with a type trigger word.
    #[serde(default = "default_trigger_rate")]
    pub trigger_rate: f64,
    /// Trigger placed after the mention instead of before it.
    #[serde(default)]
    pub trigger_after: bool,
    #[serde(default = "default_mean_len")]
    pub mean_len: usize,
}

fn default_entity_rate() -> f64 {
    0.15
}
fn default_trigger_rate() -> f64 {
    0.6
}
fn default_mean_len() -> usize {
    12
}

impl LanguageParams {
    pub fn named(id: &str) -> Self {
        Self {
            id: id.to_string(),
            entity_rate: default_entity_rate(),
            trigger_rate: default_trigger_rate(),
            trigger_after: false,
            mean_len: default_mean_len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub seed: u64,
    #[serde(default)]
    pub lexicon: LexiconSizes,
    /// Categories whose surface forms all languages share.
    #[serde(default)]
    pub shared: Vec<Category>,
    /// Zipf exponent for word choice within a category.
    #[serde(default = "default_zipf")]
    pub zipf: f64,
    #[serde(default = "default_types")]
    pub entity_types: usize,
    /// Successors per filler concept in the shared latent bigram grammar.
    #[serde(default = "default_branching")]
    pub branching: usize,
    /// Probability of leaving the grammar for a Zipf-random filler word.
    #[serde(default = "default_grammar_noise")]
    pub grammar_noise: f64,
    /// Probability that an entity word is borrowed from the next type's
    /// lexicon, so that only context tells the type apart.
    #[serde(default)]
    pub ambiguity: f64,
    pub languages: Vec<LanguageParams>,
}

fn default_branching() -> usize {
    3
}
fn default_grammar_noise() -> f64 {
    0.2
}

fn default_zipf() -> f64 {
    1.0
}
fn default_types() -> usize {
    3
}

/// Surface forms for each concept of the proto-lexicon, indexed by concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub function: Vec<String>,
    pub content: Vec<String>,
    /// `triggers[t]`, `entities[t]` for entity type `t`.
    pub triggers: Vec<Vec<String>>,
    pub entities: Vec<Vec<String>>,
}

impl Lexicon {
    pub fn surface_forms(&self) -> BTreeSet<&str> {
        self.function
            .iter()
            .chain(&self.content)
            .chain(self.triggers.iter().flatten())
            .chain(self.entities.iter().flatten())
            .map(String::as_str)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguageSpec {
    pub language_id: String,
    pub seed: u64,
    pub lexicon: Lexicon,
    pub entity_rate: f64,
    pub trigger_rate: f64,
    pub trigger_after: bool,
    pub mean_len: usize,
    pub zipf: f64,
    /// `successors[c]` for filler concept `c` (function words first, then
    /// content words); shared by every language of a family.
    pub successors: Vec<Vec<usize>>,
    pub grammar_noise: f64,
    pub ambiguity: f64,
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "kr",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

fn syllable_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    (0..n)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
        .collect()
}

impl FamilySpec {
    pub fn language_ids(&self) -> Vec<&str> {
        self.languages.iter().map(|l| l.id.as_str()).collect()
    }

    fn categories() -> [Category; 4] {
        [Category::Function, Category::Content, Category::Trigger, Category::Entity]
    }

    /// Distinct surface strings: one shared block, then one block per language.
    fn surface_pool(&self) -> Vec<String> {
        let per_lang: usize = Self::categories()
            .iter()
            .map(|&c| self.lexicon.per_category(c, self.entity_types))
            .sum();
        let needed = per_lang * (self.languages.len() + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0f_5u64);
        let mut seen = BTreeSet::new();
        let mut pool = Vec::with_capacity(needed);
        while pool.len() < needed {
            let w = syllable_word(&mut rng);
            if seen.insert(w.clone()) {
                pool.push(w);
            }
        }
        pool
    }

    /// Materializes one language: its surface lexicon is a seeded
    /// permutation of its block of the pool (or the shared block for shared
    /// categories).
    pub fn language(&self, id: &str) -> Result<SyntheticLanguageSpec> {
        let (index, params) = self
            .languages
            .iter()
            .enumerate()
            .find(|(_, l)| l.id == id)
            .ok_or_else(|| Error::Lookup {
                kind: "language",
                id: id.to_string(),
            })?;
        let pool = self.surface_pool();
        let per_lang = pool.len() / (self.languages.len() + 1);
        let lang_seed = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(lang_seed);

        let mut offset = 0;
        let mut take = |c: Category, rng: &mut ChaCha8Rng| -> Vec<String> {
            let n = self.lexicon.per_category(c, self.entity_types);
            let block = if self.shared.contains(&c) { 0 } else { index + 1 };
            let start = block * per_lang + offset;
            offset += n;
            let mut words = pool[start..start + n].to_vec();
            if block != 0 {
                words.shuffle(rng);
            }
            words
        };
        let function = take(Category::Function, &mut rng);
        let content = take(Category::Content, &mut rng);
        let split = |v: Vec<String>, k: usize| v.chunks(k).map(<[String]>::to_vec).collect::<Vec<_>>();
        let triggers = split(take(Category::Trigger, &mut rng), self.lexicon.triggers.max(1));
        let entities = split(take(Category::Entity, &mut rng), self.lexicon.entities.max(1));

        Ok(SyntheticLanguageSpec {
            language_id: params.id.clone(),
            seed: lang_seed,
            lexicon: Lexicon {
                function,
                content,
                triggers,
                entities,
            },
            entity_rate: params.entity_rate,
            trigger_rate: params.trigger_rate,
            trigger_after: params.trigger_after,
            mean_len: params.mean_len,
            zipf: self.zipf,
            successors: self.grammar(),
            grammar_noise: self.grammar_noise,
            ambiguity: self.ambiguity,
        })
    }

    /// The latent bigram grammar over filler concepts.
    pub fn grammar(&self) -> Vec<Vec<usize>> {
        let n = self.lexicon.function + self.lexicon.content;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6a3a_3a3a);
        (0..n)
            .map(|_| (0..self.branching).map(|_| rng.gen_range(0..n)).collect())
            .collect()
    }
}

fn zipf_table(n: usize, s: f64) -> Option<WeightedIndex<f64>> {
    if n == 0 {
        return None;
    }
    WeightedIndex::new((1..=n).map(|r| (r as f64).powf(-s))).ok()
}

/// Generates `n_sentences` sentences. A sentence is a run of chunks; each chunk
/// is either a filler word (function or content) or an entity mention of one
/// to three entity words, optionally flanked by a trigger of the same type.
/// Consecutive filler words follow the family's latent bigram grammar.
pub fn generate_language(spec: &SyntheticLanguageSpec, n_sentences: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lex = &spec.lexicon;
    let n_types = lex.entities.len();
    let fillers: Vec<&String> = lex.function.iter().chain(&lex.content).collect();
    let filler_dist = zipf_table(fillers.len(), spec.zipf);
    let triggers: Vec<_> = lex.triggers.iter().map(|t| zipf_table(t.len(), spec.zipf)).collect();
    let entities: Vec<_> = lex.entities.iter().map(|e| zipf_table(e.len(), spec.zipf * 0.5)).collect();
    let mean = spec.mean_len.max(2);

    let mut sequences = Vec::with_capacity(n_sentences);
    for _ in 0..n_sentences {
        let target = rng.gen_range(mean / 2..=mean + mean / 2).max(1);
        let mut tokens = Vec::new();
        let mut labels = Vec::new();
        let mut prev: Option<usize> = None;
        while tokens.len() < target {
            if n_types > 0 && rng.gen_bool(spec.entity_rate.clamp(0.0, 1.0)) {
                let t = rng.gen_range(0..n_types);
                let len = match rng.gen_range(0..10) {
                    0..=5 => 1,
                    6..=8 => 2,
                    _ => 3,
                };
                let trigger = if rng.gen_bool(spec.trigger_rate.clamp(0.0, 1.0)) {
                    triggers[t].as_ref().map(|d| lex.triggers[t][d.sample(&mut rng)].clone())
                } else {
                    None
                };
                if let (Some(w), false) = (&trigger, spec.trigger_after) {
                    tokens.push(w.clone());
                    labels.push(Tag::Outside);
                }
                for k in 0..len {
                    let source = if n_types > 1 && rng.gen_bool(spec.ambiguity.clamp(0.0, 1.0)) {
                        (t + 1) % n_types
                    } else {
                        t
                    };
                    if let Some(dist) = &entities[source] {
                        tokens.push(lex.entities[source][dist.sample(&mut rng)].clone());
                        labels.push(if k == 0 { Tag::Begin(t as u8) } else { Tag::Inside(t as u8) });
                    }
                }
                if let (Some(w), true) = (trigger, spec.trigger_after) {
                    tokens.push(w);
                    labels.push(Tag::Outside);
                }
                prev = None;
            } else {
                let Some(dist) = &filler_dist else { continue };
                let next = match prev {
                    Some(c) if !spec.successors[c].is_empty() && !rng.gen_bool(spec.grammar_noise.clamp(0.0, 1.0)) => {
                        *spec.successors[c].choose(&mut rng).expect("non-empty")
                    }
                    _ => dist.sample(&mut rng),
                };
                tokens.push(fillers[next].clone());
                labels.push(Tag::Outside);
                prev = Some(next);
            }
        }
        sequences.push(TaggedSequence { tokens, labels });
    }
    Corpus::new(sequences)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::bio::is_valid_bio;

    fn family(shared: Vec<Category>) -> FamilySpec {
        FamilySpec {
            seed: 7,
            lexicon: LexiconSizes::default(),
            shared,
            zipf: 1.0,
            entity_types: 3,
            branching: 3,
            grammar_noise: 0.2,
            ambiguity: 0.0,
            languages: vec![LanguageParams::named("src1"), LanguageParams::named("tgt1")],
        }
    }

    #[test]
    fn same_spec_same_corpus() {
        let spec = family(vec![]).language("src1").unwrap();
        let a = generate_language(&spec, 50);
        let b = generate_language(&spec, 50);
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert!(a.all_valid());
        for s in &a.sequences {
            assert!(is_valid_bio(&s.labels));
        }
    }

    #[test]
    fn zero_entity_rate_is_all_outside() {
        let mut spec = family(vec![]).language("src1").unwrap();
        spec.entity_rate = 0.0;
        let c = generate_language(&spec, 30);
        assert!(c.sequences.iter().flat_map(|s| &s.labels).all(|&t| t == Tag::Outside));
    }

    #[test]
    fn disjoint_permutations_share_no_surface_tokens() {
        let f = family(vec![]);
        let words = |id: &str| -> BTreeSet<String> {
            generate_language(&f.language(id).unwrap(), 300)
                .sequences
                .into_iter()
                .flat_map(|s| s.tokens)
                .collect()
        };
        let (a, b) = (words("src1"), words("tgt1"));
        assert!(a.len() > 50);
        assert_eq!(a.intersection(&b).count(), 0);
    }

    #[test]
    fn shared_categories_are_common() {
        let f = family(vec![Category::Function]);
        let a = f.language("src1").unwrap();
        let b = f.language("tgt1").unwrap();
        assert_eq!(a.lexicon.function, b.lexicon.function);
        assert_ne!(a.lexicon.content, b.lexicon.content);
    }

    #[test]
    fn entity_spans_come_from_the_lexicon() {
        let spec = family(vec![]).language("tgt1").unwrap();
        let c = generate_language(&spec, 100);
        let mut spans = 0;
        for s in &c.sequences {
            for (tok, tag) in s.tokens.iter().zip(&s.labels) {
                if let Some(t) = tag.entity_type() {
                    assert!(spec.lexicon.entities[t as usize].contains(tok));
                    spans += matches!(tag, Tag::Begin(_)) as usize;
                }
            }
        }
        assert!(spans > 20);
    }

    #[test]
    fn unknown_language_is_a_lookup_error() {
        assert!(matches!(family(vec![]).language("xx"), Err(Error::Lookup { .. })));
    }
}

//! Corpora, vocabularies, the synthetic language family and the assembly of
//! meta-training tasks.

pub mod bio;
pub mod conll;
pub mod synthetic;
pub mod tasks;
pub mod vocab;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use bio::{LabelScheme, Tag};
pub use conll::{load_conll, parse_conll, write_conll};
pub use synthetic::{generate_language, FamilySpec, SyntheticLanguageSpec};
pub use tasks::{build_meta_dataset, split_target, BatchCursor, MetaTask, SplitSpec, TargetSplits};
pub use vocab::Vocab;

pub const UNK_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const MASK_ID: usize = 2;

/// One sentence with a BIO tag per token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedSequence {
    pub tokens: Vec<String>,
    pub labels: Vec<Tag>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub sequences: Vec<TaggedSequence>,
    /// `I-X` tags relabeled to `B-X` while loading.
    pub repairs: usize,
}

impl Corpus {
    pub fn new(sequences: Vec<TaggedSequence>) -> Self {
        Self {
            sequences,
            repairs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn all_valid(&self) -> bool {
        self.sequences.iter().all(|s| bio::is_valid_bio(&s.labels))
    }

    /// Number of gold spans per entity type name.
    pub fn span_counts(&self, scheme: &LabelScheme) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.sequences {
            let idx: Vec<usize> = s.labels.iter().map(|&t| scheme.index(t)).collect();
            for span in crate::eval::extract_spans(&idx, scheme) {
                *counts.entry(scheme.type_name(span.entity).to_string()).or_default() += 1;
            }
        }
        counts
    }
}

/// A sequence encoded as ids, ready for the model.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

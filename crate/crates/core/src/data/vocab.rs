use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::bio::LabelScheme;
use super::{Corpus, Example, TaggedSequence, MASK_ID, PAD_ID, UNK_ID};
use crate::error::{Error, Result};

pub const SPECIALS: [&str; 3] = ["<unk>", "<pad>", "<mask>"];

/// Whitespace-token vocabulary. Ids 0, 1 and 2 are UNK, PAD and MASK; the rest
/// follow first appearance in corpus order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from(SPECIALS.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }
}

impl Vocab {
    pub fn build<'a>(corpora: impl IntoIterator<Item = &'a Corpus>) -> Self {
        let mut v = Self::default();
        for c in corpora {
            for s in &c.sequences {
                for t in &s.tokens {
                    v.add(t);
                }
            }
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn check_fits(&self, vocab_size: usize) -> Result<()> {
        if self.len() > vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but the model's vocab_size is {vocab_size}",
                self.len()
            )));
        }
        Ok(())
    }

    /// Encodes one sequence, truncating tokens and labels together to
    /// `max_len`. The flag reports whether truncation happened.
    pub fn encode(&self, seq: &TaggedSequence, scheme: &LabelScheme, max_len: usize) -> (Example, bool) {
        let n = seq.tokens.len().min(max_len);
        let ex = Example {
            tokens: seq.tokens[..n].iter().map(|t| self.id(t)).collect(),
            labels: seq.labels[..n].iter().map(|&l| scheme.index(l)).collect(),
        };
        (ex, n < seq.tokens.len())
    }

    /// Encodes a corpus; returns the examples and the truncation count.
    pub fn encode_corpus(&self, corpus: &Corpus, scheme: &LabelScheme, max_len: usize) -> (Vec<Example>, usize) {
        let mut truncated = 0;
        let examples = corpus
            .sequences
            .iter()
            .map(|s| {
                let (ex, t) = self.encode(s, scheme, max_len);
                truncated += t as usize;
                ex
            })
            .collect();
        (examples, truncated)
    }
}

const _: () = assert!(UNK_ID == 0 && PAD_ID == 1 && MASK_ID == 2);

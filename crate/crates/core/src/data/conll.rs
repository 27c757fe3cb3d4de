//! Two-column CoNLL files: `token<TAB>tag`, blank line between sentences.

use std::fs;
use std::path::Path;

use super::bio::{repair_bio, LabelScheme};
use super::{Corpus, TaggedSequence};
use crate::error::{Error, Result};

pub fn load_conll(path: impl AsRef<Path>, scheme: &LabelScheme) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    parse_conll(&text, scheme)
}

/// Parses CoNLL text. Invalid BIO transitions are repaired and counted in
/// [`Corpus::repairs`]; unknown tags are an error.
pub fn parse_conll(text: &str, scheme: &LabelScheme) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let flush = |tokens: &mut Vec<String>, labels: &mut Vec<_>, corpus: &mut Corpus| {
        if !tokens.is_empty() {
            let mut seq = TaggedSequence {
                tokens: std::mem::take(tokens),
                labels: std::mem::take(labels),
            };
            corpus.repairs += repair_bio(&mut seq.labels);
            corpus.sequences.push(seq);
        }
    };
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut labels, &mut corpus);
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        let (token, tag) = match line.split_once('\t') {
            Some((tok, tag)) => (tok, tag.trim()),
            None => line.trim().rsplit_once(char::is_whitespace).ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected `token<TAB>tag`, got `{line}`"),
            })?,
        };
        let parsed = scheme.parse(tag).ok_or_else(|| Error::Parse {
            line: n + 1,
            msg: format!("unknown tag `{tag}`"),
        })?;
        tokens.push(token.to_string());
        labels.push(parsed);
    }
    flush(&mut tokens, &mut labels, &mut corpus);
    Ok(corpus)
}

pub fn write_conll(corpus: &Corpus, scheme: &LabelScheme) -> String {
    let mut out = String::new();
    for (i, s) in corpus.sequences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (tok, &tag) in s.tokens.iter().zip(&s.labels) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(&scheme.render(tag));
            out.push('\n');
        }
    }
    out
}

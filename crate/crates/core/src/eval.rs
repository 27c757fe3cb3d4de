//! Entity-level micro precision, recall and F1.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{LabelScheme, Tag};
use crate::error::{Error, Result};

/// An entity mention covering `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub entity: u8,
    pub start: usize,
    pub end: usize,
}

/// Maximal spans of a label-index sequence. An `I-X` that does not continue
/// an `X` span opens a new one, as the loader's repair rule would.
pub fn extract_spans(labels: &[usize], scheme: &LabelScheme) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(u8, usize)> = None;
    for (i, &l) in labels.iter().enumerate() {
        let tag = scheme.tag(l).unwrap_or(Tag::Outside);
        let continues = matches!((tag, open), (Tag::Inside(x), Some((y, _))) if x == y);
        if continues {
            continue;
        }
        if let Some((entity, start)) = open.take() {
            spans.push(Span { entity, start, end: i });
        }
        if let Tag::Begin(x) | Tag::Inside(x) = tag {
            open = Some((x, i));
        }
    }
    if let Some((entity, start)) = open {
        spans.push(Span {
            entity,
            start,
            end: labels.len(),
        });
    }
    spans
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Percentages.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub total: SpanCounts,
    pub per_type: BTreeMap<String, SpanCounts>,
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Micro scores over a whole corpus; a predicted span counts only if type,
/// start and end all match a gold span of the same sequence.
pub fn micro_f1(gold: &[Vec<usize>], predicted: &[Vec<usize>], scheme: &LabelScheme) -> Result<Scores> {
    if gold.len() != predicted.len() {
        return Err(Error::Contract(format!(
            "{} gold sequences but {} predicted",
            gold.len(),
            predicted.len()
        )));
    }
    let mut total = SpanCounts::default();
    let mut per_type: BTreeMap<String, SpanCounts> =
        scheme.types().iter().map(|t| (t.clone(), SpanCounts::default())).collect();
    for (i, (g, p)) in gold.iter().zip(predicted).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Contract(format!(
                "sequence {i}: {} gold labels but {} predicted",
                g.len(),
                p.len()
            )));
        }
        let gs = extract_spans(g, scheme);
        let ps = extract_spans(p, scheme);
        let gset: HashSet<_> = gs.iter().collect();
        for s in &gs {
            per_type.get_mut(scheme.type_name(s.entity)).expect("type").gold += 1;
        }
        for s in &ps {
            let c = per_type.get_mut(scheme.type_name(s.entity)).expect("type");
            c.predicted += 1;
            if gset.contains(s) {
                c.correct += 1;
                total.correct += 1;
            }
        }
        total.gold += gs.len();
        total.predicted += ps.len();
    }
    let precision = percent(total.correct, total.predicted);
    let recall = percent(total.correct, total.gold);
    Ok(Scores {
        precision,
        recall,
        f1: f1_from(precision, recall),
        total,
        per_type,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(tags: &[&str]) -> Vec<usize> {
        let s = LabelScheme::wikiann();
        tags.iter().map(|t| s.index(s.parse(t).unwrap())).collect()
    }

    fn span(e: u8, start: usize, end: usize) -> Span {
        Span { entity: e, start, end }
    }

    #[test]
    fn spans() {
        let s = LabelScheme::wikiann();
        assert!(extract_spans(&idx(&["O", "O", "O"]), &s).is_empty());
        assert_eq!(
            extract_spans(&idx(&["B-PER", "I-PER", "O", "B-LOC"]), &s),
            vec![span(0, 0, 2), span(2, 3, 4)]
        );
        assert_eq!(extract_spans(&idx(&["B-PER", "B-PER"]), &s), vec![span(0, 0, 1), span(0, 1, 2)]);
        assert_eq!(
            extract_spans(&idx(&["I-ORG", "I-ORG", "I-PER"]), &s),
            vec![span(1, 0, 2), span(0, 2, 3)]
        );
    }

    #[test]
    fn perfect_and_half_recall() {
        let s = LabelScheme::wikiann();
        let gold = vec![idx(&["B-PER", "O", "O", "B-LOC"])];
        let r = micro_f1(&gold, &gold, &s).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (100.0, 100.0, 100.0));
        let pred = vec![idx(&["B-PER", "O", "O", "O"])];
        let r = micro_f1(&gold, &pred, &s).unwrap();
        assert_eq!((r.precision, r.recall), (100.0, 50.0));
        assert!((r.f1 - 66.67).abs() < 0.01);
        assert_eq!(r.per_type["LOC"], SpanCounts { gold: 1, predicted: 0, correct: 0 });
    }

    #[test]
    fn empty_predictions_give_zero() {
        let s = LabelScheme::wikiann();
        let r = micro_f1(&[idx(&["B-PER"])], &[idx(&["O"])], &s).unwrap();
        assert_eq!(r.f1, 0.0);
        assert!(micro_f1(&[idx(&["O"])], &[idx(&["O", "O"])], &s).is_err());
        assert!(micro_f1(&[], &[idx(&["O"])], &s).is_err());
    }
}

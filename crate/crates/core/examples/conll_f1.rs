//! Reads gold and predicted tags in CoNLL format and scores them at the
//! entity level.

use priming::data::{parse_conll, LabelScheme};
use priming::eval::micro_f1;

const GOLD: &str = "\
Ana\tB-PER
Silva\tI-PER
visited\tO
Lisbon\tB-LOC

The\tO
Acme\tB-ORG
Corp\tI-ORG
board\tO
";

// One boundary error (ORG cut short) and one missed location.
const PREDICTED: &str = "\
Ana\tB-PER
Silva\tI-PER
visited\tO
Lisbon\tO

The\tO
Acme\tB-ORG
Corp\tO
board\tO
";

fn main() -> priming::Result<()> {
    let scheme = LabelScheme::wikiann();
    let gold = parse_conll(GOLD, &scheme)?;
    let pred = parse_conll(PREDICTED, &scheme)?;
    println!("gold spans: {:?}", gold.span_counts(&scheme));
    let idx = |c: &priming::data::Corpus| -> Vec<Vec<usize>> {
        c.sequences.iter().map(|s| s.labels.iter().map(|&t| scheme.index(t)).collect()).collect()
    };
    let scores = micro_f1(&idx(&gold), &idx(&pred), &scheme)?;
    println!("P {:.2}  R {:.2}  F1 {:.2}", scores.precision, scores.recall, scores.f1);
    for (ty, c) in &scores.per_type {
        println!("  {ty}: gold {} predicted {} correct {}", c.gold, c.predicted, c.correct);
    }

    // Inconsistent tags are repaired on load and counted.
    let messy = parse_conll("Bo\tI-PER\nand\tO\nco\tI-ORG\n", &scheme)?;
    println!("repairs in a messy file: {}", messy.repairs);
    Ok(())
}

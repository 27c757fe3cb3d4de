//! The synthetic language family behind the desk experiments: a few
//! generated sentences per language and their entity statistics.

use priming::data::{generate_language, write_conll, LabelScheme};
use priming::harness::RunConfig;

fn main() -> priming::Result<()> {
    let cfg = RunConfig::desk();
    let family = &cfg.data.synthetic.as_ref().expect("desk config is synthetic").family;
    let scheme = LabelScheme::wikiann();
    for id in family.language_ids() {
        let spec = family.language(id)?;
        let corpus = generate_language(&spec, 500);
        let tokens: usize = corpus.sequences.iter().map(|s| s.tokens.len()).sum();
        println!(
            "{id}: {} sentences, {:.1} tokens each, spans {:?}",
            corpus.len(),
            tokens as f64 / corpus.len() as f64,
            corpus.span_counts(&scheme)
        );
        let mut sample = corpus.clone();
        sample.sequences.truncate(1);
        for line in write_conll(&sample, &scheme).lines() {
            println!("    {line}");
        }
    }
    Ok(())
}

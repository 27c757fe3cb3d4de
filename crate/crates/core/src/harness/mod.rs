//! Configuration, data preparation, experiment orchestration and reporting.

pub mod commands;
mod config;
mod experiment;
mod report;

pub use commands::{load_model, save_model, CommandArgs, Outcome};
pub use config::{ConllLanguage, DataConfig, ExperimentConfig, RunConfig, SyntheticData};
pub use experiment::{
    adapter_seed, diagonal_check, matrix_settings, Experiment, DiagonalCheck, MatrixCell, MatrixResult,
};
pub use report::{mean_by, render_matrix, render_table, read_jsonl, write_jsonl, JsonlWriter};

use crate::data::{
    generate_language, load_conll, split_target, Corpus, Example, LabelScheme, TargetSplits, Vocab,
};
use crate::error::{Error, Result};

/// Everything the experiments consume, derived deterministically from the
/// config.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub scheme: LabelScheme,
    pub vocab: Vocab,
    /// Labeled corpora by language, in config order.
    pub corpora: Vec<(String, Corpus)>,
    pub sources: Vec<(String, Vec<Example>)>,
    pub targets: Vec<(String, TargetSplits)>,
    /// Unlabeled token sequences for pretraining.
    pub unlabeled: Vec<Vec<usize>>,
    pub truncated: usize,
    pub repairs: usize,
}

impl PreparedData {
    pub fn target(&self, id: &str) -> Result<&TargetSplits> {
        self.targets
            .iter()
            .find(|(t, _)| t == id)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Lookup {
                kind: "target language",
                id: id.to_string(),
            })
    }

    pub fn target_ids(&self) -> Vec<String> {
        self.targets.iter().map(|(t, _)| t.clone()).collect()
    }
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let d = &cfg.data;
    let scheme = LabelScheme::new(d.entity_types.clone());
    let mut labeled: Vec<(String, Corpus)> = Vec::new();
    let mut unlabeled_corpora: Vec<Corpus> = Vec::new();
    match &d.synthetic {
        Some(s) => {
            if s.family.entity_types != scheme.types().len() {
                return Err(Error::Config(format!(
                    "family has {} entity types, label scheme has {}",
                    s.family.entity_types,
                    scheme.types().len()
                )));
            }
            for id in s.family.language_ids() {
                let spec = s.family.language(id)?;
                let mut all = generate_language(&spec, s.sentences + s.unlabeled_sentences);
                let rest = all.sequences.split_off(s.sentences);
                unlabeled_corpora.push(Corpus::new(rest));
                labeled.push((id.to_string(), all));
            }
        }
        None => {
            for c in &d.conll {
                let corpus = load_conll(&c.path, &scheme)?;
                labeled.push((c.id.clone(), corpus));
            }
        }
    }
    let vocab = Vocab::build(labeled.iter().map(|(_, c)| c).chain(&unlabeled_corpora));
    vocab.check_fits(cfg.model.vocab_size)?;
    let max_len = cfg.model.max_seq_len;
    let mut truncated = 0;
    let mut encode = |c: &Corpus| {
        let (ex, t) = vocab.encode_corpus(c, &scheme, max_len);
        truncated += t;
        ex
    };
    let lookup = |id: &str| labeled.iter().find(|(l, _)| l == id).map(|(_, c)| c).expect("validated");
    let mut sources = Vec::new();
    for id in &d.sources {
        sources.push((id.clone(), encode(lookup(id))));
    }
    let mut targets = Vec::new();
    let mut unlabeled: Vec<Vec<usize>> = Vec::new();
    for id in &d.targets {
        let ex = encode(lookup(id));
        let splits = split_target(id, &ex, &d.split)?;
        if d.synthetic.is_none() {
            // Only the training portion of a real target counts as unlabeled text.
            unlabeled.extend(splits.train.iter().map(|e| e.tokens.clone()));
        }
        targets.push((id.clone(), splits));
    }
    if d.synthetic.is_some() {
        for c in &unlabeled_corpora {
            unlabeled.extend(encode(c).into_iter().map(|e| e.tokens));
        }
    } else {
        for (_, ex) in &sources {
            unlabeled.extend(ex.iter().map(|e| e.tokens.clone()));
        }
    }
    let repairs = labeled.iter().map(|(_, c)| c.repairs).sum();
    Ok(PreparedData {
        scheme,
        vocab,
        corpora: labeled,
        sources,
        targets,
        unlabeled,
        truncated,
        repairs,
    })
}

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{FamilySpec, SplitSpec};
use crate::error::{Error, Result};
use crate::finetune::{FineTuneConfig, FineTuneSetting};
use crate::meta::PrimingConfig;
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;

/// Synthetic family: `sentences` labeled sentences per language plus
/// `unlabeled_sentences` more for pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub family: FamilySpec,
    pub sentences: usize,
    #[serde(default)]
    pub unlabeled_sentences: usize,
}

/// One CoNLL file per language; splits are carved from it in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConllLanguage {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub synthetic: Option<SyntheticData>,
    #[serde(default)]
    pub conll: Vec<ConllLanguage>,
    /// Entity types of the label scheme.
    #[serde(default = "default_types")]
    pub entity_types: Vec<String>,
}

fn default_types() -> Vec<String> {
    vec!["PER".into(), "ORG".into(), "LOC".into()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Rows of the settings × languages table.
    #[serde(default = "default_settings")]
    pub settings: Vec<FineTuneSetting>,
}

fn default_settings() -> Vec<FineTuneSetting> {
    FineTuneSetting::TABLE.to_vec()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            settings: default_settings(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub priming: PrimingConfig,
    #[serde(default)]
    pub finetune: FineTuneConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl RunConfig {
    /// Parses TOML. Unknown keys are collected and reported together.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let mut unknown = Vec::new();
        let cfg: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::Config(format!("schema error: {}", e.to_string().trim())))?;
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok((Self::from_toml(&text)?, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.priming.validate()?;
        self.finetune.validate()?;
        let d = &self.data;
        let n_labels = 1 + 2 * d.entity_types.len();
        if self.model.n_labels != n_labels {
            return Err(Error::Config(format!(
                "model.n_labels is {} but the label scheme has {n_labels} labels",
                self.model.n_labels
            )));
        }
        if d.sources.is_empty() || d.targets.is_empty() {
            return Err(Error::Config("data.sources and data.targets must be non-empty".into()));
        }
        match (&d.synthetic, d.conll.is_empty()) {
            (Some(_), false) => return Err(Error::Config("give data.synthetic or data.conll, not both".into())),
            (None, true) => return Err(Error::Config("give data.synthetic or data.conll".into())),
            _ => {}
        }
        let known: Vec<&str> = match &d.synthetic {
            Some(s) => s.family.language_ids(),
            None => d.conll.iter().map(|c| c.id.as_str()).collect(),
        };
        let missing: Vec<&str> = d
            .sources
            .iter()
            .chain(&d.targets)
            .map(String::as_str)
            .filter(|id| !known.contains(id))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("languages without data: {}", missing.join(", "))));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        Ok(())
    }

    /// A small configuration over the synthetic family; what the examples
    /// and tests start from.
    pub fn desk() -> Self {
        let text = include_str!("../../configs/desk.toml");
        Self::from_toml(text).expect("bundled desk config is valid")
    }
}

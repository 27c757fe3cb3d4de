//! Downstream fine-tuning settings and the training loop with best-validation
//! selection.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchCursor, Example, LabelScheme};
use crate::error::{Error, Result};
use crate::eval::{micro_f1, Scores};
use crate::model::{count_trainable_fraction, AdapterInit, ParamFraction, PartitionedModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Partition;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FineTuneSetting {
    FullFt,
    HeadTuning,
    AdapterTuning,
    MetaPrimeAt,
    FtPrimeAt,
    MamlLoopPrimeAt,
    OneStepPrimeAt,
    MetaPrimeFullft,
    MamlLoopPrimeFullft,
    NoprimeFullft,
}

/// Which priming stage produces a setting's initial θ_p and θ_a.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimingKind {
    /// Parameter-efficient inner loop, configured S.
    Meta,
    /// Plain multi-task fine-tuning of all partitions.
    Finetune,
    /// Inner loop also updates θ_p.
    MamlLoop,
    /// Parameter-efficient inner loop with S = 1.
    OneStep,
}

impl PrimingKind {
    pub const ALL: [PrimingKind; 4] = [Self::Meta, Self::Finetune, Self::MamlLoop, Self::OneStep];

    pub fn name(self) -> &'static str {
        match self {
            Self::Meta => "meta",
            Self::Finetune => "finetune",
            Self::MamlLoop => "maml_loop",
            Self::OneStep => "one_step",
        }
    }
}

impl FineTuneSetting {
    pub const ALL: [FineTuneSetting; 10] = [
        Self::FullFt,
        Self::HeadTuning,
        Self::AdapterTuning,
        Self::MetaPrimeAt,
        Self::FtPrimeAt,
        Self::MamlLoopPrimeAt,
        Self::OneStepPrimeAt,
        Self::MetaPrimeFullft,
        Self::MamlLoopPrimeFullft,
        Self::NoprimeFullft,
    ];

    /// The seven rows of the main results table, in order.
    pub const TABLE: [FineTuneSetting; 7] = [
        Self::FullFt,
        Self::HeadTuning,
        Self::AdapterTuning,
        Self::MetaPrimeAt,
        Self::FtPrimeAt,
        Self::MamlLoopPrimeAt,
        Self::OneStepPrimeAt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::FullFt => "FULL_FT",
            Self::HeadTuning => "HEAD_TUNING",
            Self::AdapterTuning => "ADAPTER_TUNING",
            Self::MetaPrimeAt => "META_PRIME_AT",
            Self::FtPrimeAt => "FT_PRIME_AT",
            Self::MamlLoopPrimeAt => "MAML_LOOP_PRIME_AT",
            Self::OneStepPrimeAt => "ONE_STEP_PRIME_AT",
            Self::MetaPrimeFullft => "META_PRIME_FULLFT",
            Self::MamlLoopPrimeFullft => "MAML_LOOP_PRIME_FULLFT",
            Self::NoprimeFullft => "NOPRIME_FULLFT",
        }
    }

    /// Short row label for tables.
    pub fn label(self) -> &'static str {
        match self {
            Self::FullFt => "1/FT",
            Self::HeadTuning => "2/HT",
            Self::AdapterTuning => "3/AT",
            Self::MetaPrimeAt => "4/MP->AT",
            Self::FtPrimeAt => "5/FTP->AT",
            Self::MamlLoopPrimeAt => "6/MP[MAML]->AT",
            Self::OneStepPrimeAt => "7/MP[1 step]->AT",
            Self::MetaPrimeFullft => "MP->FT",
            Self::MamlLoopPrimeFullft => "MP[MAML]->FT",
            Self::NoprimeFullft => "noP->FT",
        }
    }

    pub fn priming(self) -> Option<PrimingKind> {
        match self {
            Self::MetaPrimeAt | Self::MetaPrimeFullft => Some(PrimingKind::Meta),
            Self::FtPrimeAt => Some(PrimingKind::Finetune),
            Self::MamlLoopPrimeAt | Self::MamlLoopPrimeFullft => Some(PrimingKind::MamlLoop),
            Self::OneStepPrimeAt => Some(PrimingKind::OneStep),
            Self::FullFt | Self::HeadTuning | Self::AdapterTuning | Self::NoprimeFullft => None,
        }
    }

    /// Whether the model carries the adapter. Settings without one never
    /// hold it frozen; it is simply absent.
    pub fn has_adapter(self) -> bool {
        !matches!(self, Self::FullFt | Self::HeadTuning | Self::NoprimeFullft)
    }

    /// θ_p is trained too.
    pub fn is_full(self) -> bool {
        matches!(
            self,
            Self::FullFt | Self::NoprimeFullft | Self::MetaPrimeFullft | Self::MamlLoopPrimeFullft
        )
    }

    pub fn trainable_partitions(self) -> Vec<Partition> {
        if self == Self::HeadTuning {
            vec![Partition::Head]
        } else if self.is_full() {
            if self.has_adapter() {
                Partition::ALL.to_vec()
            } else {
                vec![Partition::Pretrained, Partition::Head]
            }
        } else {
            vec![Partition::Lightweight, Partition::Head]
        }
    }
}

impl fmt::Display for FineTuneSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FineTuneSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|x| x.name() == norm)
            .ok_or_else(|| Error::Lookup {
                kind: "setting",
                id: s.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    /// AdamW learning rate when θ_p is trainable.
    pub lr_full: f64,
    /// AdamW learning rate for adapter and head tuning.
    pub lr_pe: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Validation F1 is measured at step 0 and every `eval_every` steps.
    pub eval_every: usize,
    pub adamw: AdamWConfig,
    pub adapter_init: AdapterInit,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            lr_full: 5e-5,
            lr_pe: 1e-3,
            steps: 200,
            batch_size: 8,
            eval_every: 25,
            adamw: AdamWConfig::default(),
            adapter_init: AdapterInit::default(),
        }
    }
}

impl FineTuneConfig {
    pub fn lr(&self, setting: FineTuneSetting) -> f64 {
        if setting.is_full() {
            self.lr_full
        } else {
            self.lr_pe
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_full > 0.0 && self.lr_pe > 0.0) {
            return Err(Error::Config("fine-tuning learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub f1: f64,
}

#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    /// Parameters at the best validation point.
    pub model: PartitionedModel,
    pub best_step: usize,
    pub best_f1: f64,
    pub trace: Vec<ValidationPoint>,
}

/// Arg-max predictions for every example, scored against its labels.
pub fn evaluate(model: &PartitionedModel, task: &str, examples: &[Example], scheme: &LabelScheme) -> Result<Scores> {
    let gold: Vec<Vec<usize>> = examples.iter().map(|e| e.labels.clone()).collect();
    let pred = examples
        .iter()
        .map(|e| model.predict(&e.tokens, task))
        .collect::<Result<Vec<_>>>()?;
    micro_f1(&gold, &pred, scheme)
}

/// Trains the setting's partitions of `init` on `train` for `cfg.steps` AdamW
/// steps and returns the parameters with the best validation F1 (earliest on
/// ties, step 0 included). Everything else stays bit-identical to `init`.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    setting: FineTuneSetting,
    init: &PartitionedModel,
    task: &str,
    train: &[Example],
    validation: &[Example],
    scheme: &LabelScheme,
    cfg: &FineTuneConfig,
    seed: u64,
) -> Result<FineTuneOutcome> {
    cfg.validate()?;
    if setting.has_adapter() != init.has_adapter() {
        return Err(Error::Contract(format!(
            "{setting} expects {} adapter",
            if setting.has_adapter() { "an" } else { "no" }
        )));
    }
    if !init.has_head(task) {
        return Err(Error::Lookup {
            kind: "task head",
            id: task.to_string(),
        });
    }
    let parts = setting.trainable_partitions();
    let lr = cfg.lr(setting);
    let mut model = init.clone();
    model.registry_mut().set_trainable(&parts);
    let mut opt = AdamW::new(cfg.adamw);
    let mut cursor = BatchCursor::new(train.len(), cfg.batch_size, seed)?;

    let f1 = evaluate(&model, task, validation, scheme)?.f1;
    let mut trace = vec![ValidationPoint {
        step: 0,
        train_loss: None,
        f1,
    }];
    let mut best = (0, f1, model.clone());
    let mut recent = Vec::new();
    for step in 1..=cfg.steps {
        let batch = cursor.next_batch(train);
        let (loss, grads) = model.loss_and_grad(&batch, task, &parts)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{setting} on {task}, step {step}"),
                loss,
            });
        }
        recent.push(loss);
        opt.step(model.registry_mut(), &grads, lr, &parts)?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let f1 = evaluate(&model, task, validation, scheme)?.f1;
            let mean = recent.iter().sum::<f64>() / recent.len() as f64;
            recent.clear();
            trace.push(ValidationPoint {
                step,
                train_loss: Some(mean),
                f1,
            });
            if f1 > best.1 {
                best = (step, f1, model.clone());
            }
        }
    }
    let (best_step, best_f1, model) = best;
    Ok(FineTuneOutcome {
        model,
        best_step,
        best_f1,
        trace,
    })
}

/// One line of the results JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: FineTuneSetting,
    pub language: String,
    pub seed: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub scores: Scores,
    pub trainable_fraction: ParamFraction,
    pub trainable_percent: String,
    pub best_step: usize,
}

impl EvalReport {
    pub fn new(
        setting: FineTuneSetting,
        language: &str,
        seed: u64,
        scores: Scores,
        fraction: ParamFraction,
        best_step: usize,
    ) -> Self {
        Self {
            setting,
            language: language.to_string(),
            seed,
            precision: scores.precision,
            recall: scores.recall,
            f1: scores.f1,
            scores,
            trainable_fraction: fraction,
            trainable_percent: fraction.display_percent(),
            best_step,
        }
    }
}

/// The single-task fraction for `setting`, as reported next to F1.
pub fn setting_fraction(model: &PartitionedModel, setting: FineTuneSetting) -> ParamFraction {
    count_trainable_fraction(model.config(), setting)
}

/// A fresh `ChaCha8Rng` for one (purpose, seed) pair.
pub fn seeded(seed: u64, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PreparedData, RunConfig};
use crate::error::{Error, Result};
use crate::finetune::{evaluate, finetune, seeded, setting_fraction, EvalReport, FineTuneOutcome, FineTuneSetting, PrimingKind};
use crate::meta::{ft_prime_with, prime_with, InnerMode, PrimingConfig, PrimingOutcome, StepLog};
use crate::model::PartitionedModel;
use crate::pretrain::{pretrain_encoder, PretrainLog};

/// Seed of the fresh adapter that priming starts from and that plain adapter
/// tuning uses, so both begin at the same θ_a.
pub fn adapter_seed(seed: u64) -> u64 {
    seed.wrapping_add(0xada7)
}

/// Runs settings on prepared data, caching the pretrained encoder and each
/// (priming kind, seed) result.
pub struct Experiment {
    pub cfg: RunConfig,
    pub data: PreparedData,
    pretrained: Option<PartitionedModel>,
    primed: BTreeMap<(PrimingKind, u64), PartitionedModel>,
    step_sink: Option<Box<dyn FnMut(PrimingKind, u64, &[StepLog]) -> Result<()>>>,
    pretrain_log: Vec<PretrainLog>,
}

impl Experiment {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let data = super::prepare_data(&cfg)?;
        Ok(Self {
            cfg,
            data,
            pretrained: None,
            primed: BTreeMap::new(),
            step_sink: None,
            pretrain_log: Vec::new(),
        })
    }

    /// Receives every priming step record as it is produced.
    pub fn on_priming_step(&mut self, sink: impl FnMut(PrimingKind, u64, &[StepLog]) -> Result<()> + 'static) {
        self.step_sink = Some(Box::new(sink));
    }

    /// Uses `model` as the pretrained encoder instead of pretraining one.
    pub fn set_pretrained(&mut self, model: PartitionedModel) -> Result<()> {
        if model.config() != &self.cfg.model {
            return Err(Error::Config("pretrained model config differs from the run config".into()));
        }
        if model.has_adapter() || !model.head_tasks().is_empty() {
            return Err(Error::Contract("pretrained checkpoint must hold only encoder parameters".into()));
        }
        self.pretrained = Some(model);
        Ok(())
    }

    pub fn pretrain_log(&self) -> &[PretrainLog] {
        &self.pretrain_log
    }

    pub fn pretrained(&mut self) -> Result<&PartitionedModel> {
        if self.pretrained.is_none() {
            let (model, log) = pretrain_encoder(&self.cfg.model, &self.data.unlabeled, &self.cfg.pretrain, |_| {})?;
            self.pretrain_log = log;
            self.pretrained = Some(model);
        }
        Ok(self.pretrained.as_ref().expect("just set"))
    }

    pub fn priming_config(&self, kind: PrimingKind, seed: u64) -> PrimingConfig {
        let mut p = self.cfg.priming.clone();
        p.seed = seed;
        match kind {
            PrimingKind::Meta | PrimingKind::Finetune => p.inner_mode = InnerMode::PeSim,
            PrimingKind::OneStep => {
                p.inner_mode = InnerMode::PeSim;
                p.inner_steps = 1;
            }
            PrimingKind::MamlLoop => p.inner_mode = InnerMode::FullMaml,
        }
        p
    }

    /// Pretrained encoder plus the seed's fresh adapter.
    pub fn priming_start(&mut self, seed: u64) -> Result<PartitionedModel> {
        let init = self.cfg.finetune.adapter_init;
        let mut m = self.pretrained()?.clone();
        m.add_adapter(init, &mut seeded(adapter_seed(seed), 0))?;
        Ok(m)
    }

    pub fn run_priming(&mut self, kind: PrimingKind, seed: u64) -> Result<PrimingOutcome> {
        let start = self.priming_start(seed)?;
        let tasks = crate::data::build_meta_dataset(&self.data.sources, &self.cfg.data.split)?;
        let pcfg = self.priming_config(kind, seed);
        let mut sink = self.step_sink.take();
        let on_step = |records: &[StepLog]| match sink.as_mut() {
            Some(f) => f(kind, seed, records),
            None => Ok(()),
        };
        let out = match kind {
            PrimingKind::Finetune => ft_prime_with(&start, &tasks, &pcfg, on_step),
            _ => prime_with(&start, &tasks, &pcfg, on_step),
        };
        self.step_sink = sink;
        out
    }

    pub fn primed(&mut self, kind: PrimingKind, seed: u64) -> Result<&PartitionedModel> {
        if !self.primed.contains_key(&(kind, seed)) {
            let out = self.run_priming(kind, seed)?;
            self.primed.insert((kind, seed), out.model);
        }
        Ok(&self.primed[&(kind, seed)])
    }

    /// Stores an externally produced primed model for `(kind, seed)`.
    pub fn set_primed(&mut self, kind: PrimingKind, seed: u64, model: PartitionedModel) {
        self.primed.insert((kind, seed), model);
    }

    fn language_index(&self, language: &str) -> Result<u64> {
        self.data
            .targets
            .iter()
            .position(|(t, _)| t == language)
            .map(|i| i as u64)
            .ok_or_else(|| Error::Lookup {
                kind: "target language",
                id: language.to_string(),
            })
    }

    /// The starting point of `setting`: the pretrained or primed encoder,
    /// adapter if the setting has one, and a fresh head for `language`.
    pub fn initial_model(&mut self, setting: FineTuneSetting, language: &str, seed: u64) -> Result<PartitionedModel> {
        let li = self.language_index(language)?;
        let mut model = match setting.priming() {
            Some(kind) => self.primed(kind, seed)?.clone(),
            None if setting.has_adapter() => self.priming_start(seed)?,
            None => self.pretrained()?.clone(),
        };
        model.remove_heads();
        model.add_head(language, &mut seeded(seed, 30 + li))?;
        Ok(model)
    }

    /// Fine-tunes `init` on the language's train split, then scores the best
    /// checkpoint on its test split.
    pub fn finetune_and_test(
        &self,
        setting: FineTuneSetting,
        init: &PartitionedModel,
        language: &str,
        seed: u64,
    ) -> Result<(FineTuneOutcome, EvalReport)> {
        let li = self.language_index(language)?;
        let split = self.data.target(language)?;
        let out = finetune(
            setting,
            init,
            language,
            &split.train,
            &split.validation,
            &self.data.scheme,
            &self.cfg.finetune,
            seeded(seed, 40 + li).gen(),
        )?;
        let report = self.test_report(setting, &out.model, language, seed, out.best_step)?;
        Ok((out, report))
    }

    pub fn test_report(
        &self,
        setting: FineTuneSetting,
        model: &PartitionedModel,
        language: &str,
        seed: u64,
        best_step: usize,
    ) -> Result<EvalReport> {
        let split = self.data.target(language)?;
        let scores = evaluate(model, language, &split.test, &self.data.scheme)?;
        Ok(EvalReport::new(setting, language, seed, scores, setting_fraction(model, setting), best_step))
    }

    pub fn run(&mut self, setting: FineTuneSetting, language: &str, seed: u64) -> Result<EvalReport> {
        let init = self.initial_model(setting, language, seed)?;
        Ok(self.finetune_and_test(setting, &init, language, seed)?.1)
    }

    /// Every (seed, setting, target language) combination, in that nesting
    /// order. `on_report` sees each report as soon as it exists.
    pub fn run_grid(
        &mut self,
        settings: &[FineTuneSetting],
        seeds: &[u64],
        mut on_report: impl FnMut(&EvalReport) -> Result<()>,
    ) -> Result<Vec<EvalReport>> {
        let languages = self.data.target_ids();
        let mut out = Vec::new();
        for &seed in seeds {
            for &setting in settings {
                for lang in &languages {
                    let r = self.run(setting, lang, seed)?;
                    on_report(&r)?;
                    out.push(r);
                }
            }
            // Primed models of finished seeds are no longer needed.
            self.primed.retain(|&(_, s), _| s != seed);
        }
        Ok(out)
    }
}

/// The four cells of the priming × fine-tuning matrix, row-major with rows
/// PE-simulating and full-MAML priming, columns adapter and full fine-tuning.
pub fn matrix_settings() -> [FineTuneSetting; 4] {
    [
        FineTuneSetting::MetaPrimeAt,
        FineTuneSetting::MetaPrimeFullft,
        FineTuneSetting::MamlLoopPrimeAt,
        FineTuneSetting::MamlLoopPrimeFullft,
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub setting: FineTuneSetting,
    pub priming: String,
    pub finetuning: String,
    /// Mean over target languages, per seed.
    pub per_seed: BTreeMap<u64, f64>,
    /// Mean over seeds, per target language.
    pub per_language: BTreeMap<String, f64>,
    pub mean: f64,
}

/// Within one fine-tuning column, the cell whose priming simulates that
/// fine-tuning against the other priming strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalCheck {
    pub seed: u64,
    pub finetuning: String,
    pub diagonal: FineTuneSetting,
    pub off_diagonal: FineTuneSetting,
    pub diagonal_f1: f64,
    pub off_diagonal_f1: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub cells: Vec<MatrixCell>,
    pub checks: Vec<DiagonalCheck>,
}

impl MatrixResult {
    pub fn from_reports(reports: &[EvalReport]) -> Self {
        let cells = matrix_settings()
            .into_iter()
            .map(|setting| {
                let rs: Vec<&EvalReport> = reports.iter().filter(|r| r.setting == setting).collect();
                let mut per_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
                let mut per_language: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                for r in &rs {
                    per_seed.entry(r.seed).or_default().push(r.f1);
                    per_language.entry(r.language.clone()).or_default().push(r.f1);
                }
                let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
                let per_seed: BTreeMap<u64, f64> = per_seed.iter().map(|(k, v)| (*k, mean(v))).collect();
                let per_language = per_language.iter().map(|(k, v)| (k.clone(), mean(v))).collect();
                let all: Vec<f64> = per_seed.values().copied().collect();
                MatrixCell {
                    setting,
                    priming: match setting.priming() {
                        Some(PrimingKind::MamlLoop) => "full-sim",
                        _ => "PE-sim",
                    }
                    .into(),
                    finetuning: if setting.is_full() { "full FT" } else { "AT" }.into(),
                    per_seed,
                    per_language,
                    mean: if all.is_empty() { f64::NAN } else { mean(&all) },
                }
            })
            .collect::<Vec<_>>();
        let checks = diagonal_check(&cells);
        Self { cells, checks }
    }

    /// Replications (seeds) in which both columns satisfy the diagonal.
    pub fn seeds_holding(&self) -> (usize, usize) {
        let mut by_seed: BTreeMap<u64, bool> = BTreeMap::new();
        for c in &self.checks {
            let e = by_seed.entry(c.seed).or_insert(true);
            *e &= c.holds;
        }
        (by_seed.values().filter(|&&h| h).count(), by_seed.len())
    }
}

pub fn diagonal_check(cells: &[MatrixCell]) -> Vec<DiagonalCheck> {
    let cell = |s: FineTuneSetting| cells.iter().find(|c| c.setting == s);
    let pairs = [
        ("AT", FineTuneSetting::MetaPrimeAt, FineTuneSetting::MamlLoopPrimeAt),
        ("full FT", FineTuneSetting::MamlLoopPrimeFullft, FineTuneSetting::MetaPrimeFullft),
    ];
    let mut out = Vec::new();
    for (col, diag, off) in pairs {
        let (Some(d), Some(o)) = (cell(diag), cell(off)) else { continue };
        for (seed, &df) in &d.per_seed {
            let Some(&of) = o.per_seed.get(seed) else { continue };
            out.push(DiagonalCheck {
                seed: *seed,
                finetuning: col.into(),
                diagonal: diag,
                off_diagonal: off,
                diagonal_f1: df,
                off_diagonal_f1: of,
                holds: df >= of,
            });
        }
    }
    out
}

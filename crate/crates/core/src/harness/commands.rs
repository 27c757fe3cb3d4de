//! The subcommands behind the `priming` binary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::report::write_text;
use super::{
    matrix_settings, read_jsonl, render_matrix, render_table, write_jsonl, Experiment, JsonlWriter, MatrixResult,
    RunConfig,
};
use crate::checkpoint;
use crate::data::write_conll;
use crate::error::{Error, Result};
use crate::finetune::{EvalReport, FineTuneSetting, PrimingKind};
use crate::meta::StepLog;
use crate::model::PartitionedModel;

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct CommandArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub setting: Option<FineTuneSetting>,
    pub language: Option<String>,
}

impl CommandArgs {
    fn out_dir(&self) -> Result<&Path> {
        let out = self.out.as_deref().unwrap_or(Path::new("runs/latest"));
        fs::create_dir_all(out)?;
        Ok(out)
    }

    /// Loads the config and records its exact text in the run directory.
    fn run_config(&self) -> Result<RunConfig> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| Error::Config("--config is required".into()))?;
        let (mut cfg, text) = RunConfig::load(path)?;
        fs::write(self.out_dir()?.join("config.toml"), text)?;
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        Ok(cfg)
    }

    fn seed(&self, cfg: &RunConfig) -> u64 {
        self.seed.unwrap_or(cfg.seeds[0])
    }
}

/// What a subcommand produced, printed as JSON on success.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Outcome {
    pub command: String,
    pub artifacts: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<serde_json::Value>,
}

pub fn load_model(path: &Path, cfg: &RunConfig) -> Result<PartitionedModel> {
    let (registry, _) = checkpoint::load(path, Some(&cfg.model.hash()))?;
    PartitionedModel::from_registry(cfg.model.clone(), registry)
}

pub fn save_model(path: &Path, model: &PartitionedModel) -> Result<()> {
    checkpoint::save(path, model.registry(), &model.config().hash())
}

fn priming_kind(setting: Option<FineTuneSetting>) -> Result<PrimingKind> {
    match setting {
        None => Ok(PrimingKind::Meta),
        Some(s) => s.priming().ok_or_else(|| Error::Config(format!("{s} involves no priming"))),
    }
}

fn attach_step_log(exp: &mut Experiment, out: &Path) -> Result<()> {
    let dir = out.join("priming_logs");
    fs::create_dir_all(&dir)?;
    let mut current: Option<((PrimingKind, u64), JsonlWriter)> = None;
    exp.on_priming_step(move |kind, seed, records: &[StepLog]| {
        if current.as_ref().map(|(k, _)| *k) != Some((kind, seed)) {
            let path = dir.join(format!("{}_seed{seed}.jsonl", kind.name()));
            current = Some(((kind, seed), JsonlWriter::create(path)?));
        }
        let w = &mut current.as_mut().expect("set above").1;
        for r in records {
            w.write(r)?;
        }
        Ok(())
    });
    Ok(())
}

fn experiment(args: &CommandArgs, cfg: RunConfig, out: &Path, pretrained_from_init: bool) -> Result<Experiment> {
    let mut exp = Experiment::new(cfg)?;
    if pretrained_from_init {
        if let Some(p) = &args.init_checkpoint {
            let m = load_model(p, &exp.cfg)?;
            exp.set_pretrained(m)?;
        }
    }
    attach_step_log(&mut exp, out)?;
    Ok(exp)
}

pub fn generate_data(args: &CommandArgs) -> Result<Outcome> {
    let cfg = args.run_config()?;
    let out = args.out_dir()?.join("data");
    fs::create_dir_all(&out)?;
    let data = super::prepare_data(&cfg)?;
    let mut artifacts = Vec::new();
    let mut languages = serde_json::Map::new();
    for (id, corpus) in &data.corpora {
        let path = out.join(format!("{id}.conll"));
        write_text(&path, &write_conll(corpus, &data.scheme))?;
        artifacts.push(path);
        languages.insert(
            id.clone(),
            serde_json::json!({
                "sentences": corpus.len(),
                "spans": corpus.span_counts(&data.scheme),
            }),
        );
    }
    let vocab_path = out.join("vocab.json");
    fs::write(&vocab_path, serde_json::to_vec(&data.vocab)?)?;
    artifacts.push(vocab_path);
    let summary = serde_json::json!({
        "vocab_size": data.vocab.len(),
        "unlabeled_sentences": data.unlabeled.len(),
        "truncated": data.truncated,
        "repairs": data.repairs,
        "languages": languages,
    });
    let summary_path = out.join("summary.json");
    fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?)?;
    artifacts.push(summary_path);
    Ok(Outcome {
        command: "generate-data".into(),
        artifacts,
        summary: Some(summary),
    })
}

pub fn pretrain(args: &CommandArgs) -> Result<Outcome> {
    let cfg = args.run_config()?;
    let out = args.out_dir()?.to_path_buf();
    let mut exp = Experiment::new(cfg)?;
    let model = exp.pretrained()?.clone();
    let ckpt = out.join("pretrained.ckpt");
    save_model(&ckpt, &model)?;
    let log = out.join("pretrain_log.jsonl");
    write_jsonl(&log, exp.pretrain_log())?;
    Ok(Outcome {
        command: "pretrain".into(),
        artifacts: vec![ckpt, log],
        summary: exp.pretrain_log().last().map(|l| serde_json::json!({ "final_loss": l.loss })),
    })
}

/// Primes from `--init-checkpoint` (an encoder, optionally with adapter) or
/// from a freshly pretrained encoder. `--setting` picks the priming variant.
pub fn prime(args: &CommandArgs) -> Result<Outcome> {
    let cfg = args.run_config()?;
    let out = args.out_dir()?.to_path_buf();
    let seed = args.seed(&cfg);
    let kind = priming_kind(args.setting)?;
    let mut exp = experiment(args, cfg, &out, false)?;
    let start = match &args.init_checkpoint {
        Some(p) => {
            let mut m = load_model(p, &exp.cfg)?;
            if !m.has_adapter() {
                exp.set_pretrained(m)?;
                m = exp.priming_start(seed)?;
            }
            m
        }
        None => exp.priming_start(seed)?,
    };
    let tasks = crate::data::build_meta_dataset(&exp.data.sources, &exp.cfg.data.split)?;
    let pcfg = exp.priming_config(kind, seed);
    let log_path = out.join(format!("priming_{}_seed{seed}.jsonl", kind.name()));
    let mut log = JsonlWriter::create(&log_path)?;
    let on_step = |records: &[StepLog]| records.iter().try_for_each(|r| log.write(r));
    let outcome = match kind {
        PrimingKind::Finetune => crate::meta::ft_prime_with(&start, &tasks, &pcfg, on_step)?,
        _ => crate::meta::prime_with(&start, &tasks, &pcfg, on_step)?,
    };
    let ckpt = out.join(format!("primed_{}_seed{seed}.ckpt", kind.name()));
    save_model(&ckpt, &outcome.model)?;
    let last = outcome.log.last().map(|l| l.query_loss);
    Ok(Outcome {
        command: "prime".into(),
        artifacts: vec![ckpt, log_path],
        summary: Some(serde_json::json!({ "outer_steps": pcfg.outer_steps, "final_query_loss": last })),
    })
}

/// Fine-tunes one setting on one (or every) target language and reports
/// test F1. `--init-checkpoint` supplies the pretrained or primed encoder.
pub fn finetune(args: &CommandArgs) -> Result<Outcome> {
    let cfg = args.run_config()?;
    let out = args.out_dir()?.to_path_buf();
    let seed = args.seed(&cfg);
    let setting = args.setting.unwrap_or(FineTuneSetting::MetaPrimeAt);
    let mut exp = experiment(args, cfg, &out, false)?;
    if let Some(p) = &args.init_checkpoint {
        let m = load_model(p, &exp.cfg)?;
        match setting.priming() {
            Some(kind) => {
                if !m.has_adapter() {
                    return Err(Error::Contract(format!("{setting} needs a primed checkpoint with an adapter")));
                }
                exp.set_primed(kind, seed, m);
            }
            None => {
                let mut enc = m;
                enc.remove_adapter();
                enc.remove_heads();
                exp.set_pretrained(enc)?;
            }
        }
    }
    let languages = match &args.language {
        Some(l) => vec![l.clone()],
        None => exp.data.target_ids(),
    };
    let results = out.join("results.jsonl");
    let mut writer = JsonlWriter::append(&results)?;
    let mut artifacts = vec![results.clone()];
    let mut reports = Vec::new();
    for lang in &languages {
        let init = exp.initial_model(setting, lang, seed)?;
        let (tuned, report) = exp.finetune_and_test(setting, &init, lang, seed)?;
        let stem = format!("finetuned_{}_{lang}_seed{seed}", setting.name().to_lowercase());
        let ckpt = out.join(format!("{stem}.ckpt"));
        save_model(&ckpt, &tuned.model)?;
        let trace = out.join(format!("{stem}.validation.jsonl"));
        write_jsonl(&trace, &tuned.trace)?;
        writer.write(&report)?;
        artifacts.push(ckpt);
        artifacts.push(trace);
        reports.push(report);
    }
    Ok(Outcome {
        command: "finetune".into(),
        artifacts,
        summary: Some(serde_json::to_value(
            reports.iter().map(|r| (r.language.clone(), r.f1)).collect::<Vec<_>>(),
        )?),
    })
}

/// Scores a fine-tuned checkpoint on a target's test split.
pub fn evaluate(args: &CommandArgs) -> Result<Outcome> {
    let cfg = args.run_config()?;
    let out = args.out_dir()?.to_path_buf();
    let path = args
        .init_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("--init-checkpoint is required".into()))?;
    let language = args
        .language
        .clone()
        .ok_or_else(|| Error::Config("--language is required".into()))?;
    let seed = args.seed(&cfg);
    let exp = Experiment::new(cfg)?;
    let model = load_model(path, &exp.cfg)?;
    let setting = match args.setting {
        Some(s) => s,
        None if model.has_adapter() => FineTuneSetting::AdapterTuning,
        None => FineTuneSetting::FullFt,
    };
    let report = exp.test_report(setting, &model, &language, seed, 0)?;
    let path = out.join("eval.jsonl");
    JsonlWriter::append(&path)?.write(&report)?;
    Ok(Outcome {
        command: "evaluate".into(),
        artifacts: vec![path],
        summary: Some(serde_json::to_value(&report)?),
    })
}

/// The settings × languages grid over all seeds.
pub fn table(args: &CommandArgs) -> Result<Outcome> {
    let cfg = args.run_config()?;
    let out = args.out_dir()?.to_path_buf();
    let settings = match args.setting {
        Some(s) => vec![s],
        None => cfg.experiment.settings.clone(),
    };
    let seeds = cfg.seeds.clone();
    let mut exp = experiment(args, cfg, &out, true)?;
    let path = out.join("results.jsonl");
    let mut writer = JsonlWriter::create(&path)?;
    let reports = exp.run_grid(&settings, &seeds, |r| writer.write(r))?;
    let md = out.join("table.md");
    write_text(&md, &render_table(&reports))?;
    Ok(Outcome {
        command: "table".into(),
        artifacts: vec![path, md],
        summary: None,
    })
}

pub fn matrix(args: &CommandArgs) -> Result<Outcome> {
    let cfg = args.run_config()?;
    let out = args.out_dir()?.to_path_buf();
    let seeds = cfg.seeds.clone();
    let mut exp = experiment(args, cfg, &out, true)?;
    let path = out.join("matrix.jsonl");
    let mut writer = JsonlWriter::create(&path)?;
    let reports = exp.run_grid(&matrix_settings(), &seeds, |r| writer.write(r))?;
    let result = MatrixResult::from_reports(&reports);
    let json = out.join("matrix.json");
    fs::write(&json, serde_json::to_vec_pretty(&result)?)?;
    let md = out.join("matrix.md");
    write_text(&md, &render_matrix(&result))?;
    let (ok, n) = result.seeds_holding();
    Ok(Outcome {
        command: "matrix".into(),
        artifacts: vec![path, json, md],
        summary: Some(serde_json::json!({ "diagonal_holds": ok, "replications": n })),
    })
}

/// Renders markdown from whatever result files the run directory holds.
pub fn report(args: &CommandArgs) -> Result<Outcome> {
    let out = args.out_dir()?.to_path_buf();
    let mut text = String::new();
    let results = out.join("results.jsonl");
    if results.exists() {
        let reports: Vec<EvalReport> = read_jsonl(&results)?;
        text.push_str("## Settings\n\n");
        text.push_str(&render_table(&reports));
    }
    let matrix = out.join("matrix.jsonl");
    if matrix.exists() {
        let reports: Vec<EvalReport> = read_jsonl(&matrix)?;
        text.push_str("\n## Priming strategy matrix\n\n");
        text.push_str(&render_matrix(&MatrixResult::from_reports(&reports)));
    }
    if text.is_empty() {
        return Err(Error::Input(format!(
            "{} holds neither results.jsonl nor matrix.jsonl",
            out.display()
        )));
    }
    let path = out.join("report.md");
    write_text(&path, &text)?;
    Ok(Outcome {
        command: "report".into(),
        artifacts: vec![path],
        summary: None,
    })
}

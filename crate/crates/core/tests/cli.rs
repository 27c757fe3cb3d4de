mod common;

use std::fs;

use common::{cli, cli_err, cli_ok, fixture, s, TINY};

#[test]
fn unknown_config_keys_give_an_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, TINY.replace("[pretrain]", "[pretrain]\nwarmup = 3\nsteeps = 2")).unwrap();
    let out = dir.path().join("run");
    let err = cli_err(&["pretrain", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(err["error"]["kind"], "config");
    let msg = err["error"]["message"].as_str().unwrap();
    assert!(msg.contains("pretrain.warmup") && msg.contains("pretrain.steeps"), "{msg}");
}

#[test]
fn missing_inputs_give_error_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let tiny = fixture("tiny.toml");

    let err = cli_err(&["pretrain", "--out", s(&out)]);
    assert_eq!(err["error"]["kind"], "config");

    let missing = dir.path().join("nope.ckpt");
    let err = cli_err(&["prime", "--config", s(&tiny), "--out", s(&out), "--init-checkpoint", s(&missing)]);
    assert_eq!(err["error"]["kind"], "checkpoint");
    assert!(err["error"]["message"].as_str().unwrap().contains("nope.ckpt"));

    let err = cli_err(&["finetune", "--config", s(&tiny), "--setting", "NOT_A_SETTING"]);
    assert_eq!(err["error"]["kind"], "usage");

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"definitely not a checkpoint").unwrap();
    let err = cli_err(&["evaluate", "--config", s(&tiny), "--out", s(&out), "--init-checkpoint", s(&garbage), "--language", "tgt_a"]);
    assert_eq!(err["error"]["kind"], "checkpoint");

    assert!(cli(&["--help"]).status.success());
}

#[test]
fn generate_data_writes_conll_and_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let tiny = fixture("tiny.toml");
    let o = cli_ok(&["generate-data", "--config", s(&tiny), "--out", s(&out)]);
    assert_eq!(o["command"], "generate-data");
    for lang in ["src_a", "src_b", "tgt_a"] {
        let text = fs::read_to_string(out.join("data").join(format!("{lang}.conll"))).unwrap();
        let scheme = priming::data::LabelScheme::wikiann();
        let corpus = priming::data::parse_conll(&text, &scheme).unwrap();
        assert_eq!(corpus.len(), 100);
        assert_eq!(corpus.repairs, 0);
    }
    assert!(out.join("data/vocab.json").exists());
    assert_eq!(fs::read_to_string(out.join("config.toml")).unwrap(), TINY);
}

#[test]
fn priming_zero_outer_steps_round_trips_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let zero = dir.path().join("zero");
    let cfg = dir.path().join("zero.toml");
    fs::write(&cfg, TINY.replace("outer_steps = 6", "outer_steps = 0")).unwrap();

    cli_ok(&["pretrain", "--config", s(&cfg), "--out", s(&run)]);
    cli_ok(&["prime", "--config", s(&cfg), "--out", s(&run), "--init-checkpoint", s(&run.join("pretrained.ckpt"))]);
    let with_adapter = run.join("primed_meta_seed0.ckpt");
    cli_ok(&["prime", "--config", s(&cfg), "--out", s(&zero), "--init-checkpoint", s(&with_adapter)]);
    let again = zero.join("primed_meta_seed0.ckpt");
    assert_eq!(fs::read(&with_adapter).unwrap(), fs::read(&again).unwrap());
    assert_eq!(fs::read_to_string(zero.join("priming_meta_seed0.jsonl")).unwrap(), "");
}

/// pretrain → prime → finetune → evaluate → report, as a user would chain them.
fn pipeline(dir: &std::path::Path) {
    let tiny = fixture("tiny.toml");
    let d = s(dir);
    cli_ok(&["pretrain", "--config", s(&tiny), "--out", d]);
    let pre = dir.join("pretrained.ckpt");
    cli_ok(&["prime", "--config", s(&tiny), "--out", d, "--init-checkpoint", s(&pre)]);
    let primed = dir.join("primed_meta_seed0.ckpt");
    cli_ok(&["finetune", "--config", s(&tiny), "--out", d, "--init-checkpoint", s(&primed), "--setting", "META_PRIME_AT"]);
    cli_ok(&["finetune", "--config", s(&tiny), "--out", d, "--init-checkpoint", s(&pre), "--setting", "adapter-tuning"]);
    cli_ok(&["finetune", "--config", s(&tiny), "--out", d, "--init-checkpoint", s(&pre), "--setting", "HEAD_TUNING"]);
    let tuned = dir.join("finetuned_meta_prime_at_tgt_a_seed0.ckpt");
    let o = cli_ok(&["evaluate", "--config", s(&tiny), "--out", d, "--init-checkpoint", s(&tuned), "--language", "tgt_a", "--setting", "META_PRIME_AT"]);
    assert_eq!(o["summary"]["setting"], "META_PRIME_AT");
    cli_ok(&["report", "--out", d]);
}

#[test]
fn pipeline_is_byte_deterministic_and_reports_render() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());

    let mut compared = 0;
    for entry in fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        let name = name.to_str().unwrap().to_string();
        if name.ends_with(".jsonl") || name.ends_with(".ckpt") || name.ends_with(".md") {
            let x = fs::read(a.path().join(&name)).unwrap();
            let y = fs::read(b.path().join(&name)).unwrap();
            assert!(x == y, "{name} differs between identical runs");
            compared += 1;
        }
    }
    assert!(compared >= 10, "only {compared} artifacts compared");

    let results = fs::read_to_string(a.path().join("results.jsonl")).unwrap();
    assert_eq!(results.lines().count(), 3);
    // The evaluation of the saved checkpoint reproduces the fine-tuning report.
    let tuned: serde_json::Value = serde_json::from_str(results.lines().next().unwrap()).unwrap();
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("eval.jsonl")).unwrap()).unwrap();
    assert_eq!(tuned["f1"], eval["f1"]);

    let report = fs::read_to_string(a.path().join("report.md")).unwrap();
    assert!(report.contains("| 4/MP->AT (") && report.contains("| 2/HT ("), "{report}");
    let bold_rows = report.lines().filter(|l| l.contains("**")).count();
    assert!(bold_rows >= 1, "{report}");
}

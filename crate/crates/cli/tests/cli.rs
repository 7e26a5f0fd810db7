use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kvbabel_cli::commands::{MatrixReport, MetaReport};
use kvbabel_cli::config::ExperimentConfig;
use kvbabel_cli::run::read_json;

const TINY: &str = r#"{
  "data": {"tokens_per_language": 3000, "eval_tokens": 1500, "eval_windows": 4, "eval_batch": 2,
           "prompt_source_tokens": 2000},
  "pretrain": {"total_steps": 4, "warmup_steps": 1, "batch_size": 2, "seq_len": 16, "prefix_len": 8},
  "train": {"total_steps": 3, "warmup_steps": 1, "batch_size": 2, "seq_len": 16, "prefix_len": 8,
            "paths_per_step": 2},
  "portability": {
    "tasks": {"num_tasks": 4, "completions_per_task": 4, "completion_len": 4, "eval_holdout": 2,
              "context_len": 4},
    "meta_test_tasks": 2,
    "prompt": {"steps": 2},
    "meta": {"steps": 2, "tasks_per_step": 1, "warmup_steps": 1}
  }
}"#;

fn kv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvbabel"))
        .args(args)
        .env_remove("KVBABEL_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = kv(args);
    assert!(
        out.status.success(),
        "kvbabel {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = kv(args);
    assert!(!out.status.success(), "kvbabel {args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn tiny(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pretrained(dir: &Path, recipe: &str) -> PathBuf {
    let run = dir.join("run");
    ok(&["pretrain", "--run", s(&run), "--recipe", recipe, "--config", &tiny(dir)]);
    run
}

#[test]
fn pipeline_runs_and_report_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let run = pretrained(dir.path(), "seeds-2");
    for name in ["config.json", "metrics.csv", "checkpoints/lm-seed-0.kvbl", "checkpoints/lm-seed-1.kvbl"] {
        assert!(run.join(name).exists(), "{name}");
    }
    ok(&["train-translator", "--run", s(&run)]);
    ok(&["train-translator", "--run", s(&run), "--baseline", "linear"]);
    ok(&["eval", "--run", s(&run), "--mode", "translator"]);
    ok(&["meta", "--run", s(&run)]);

    let m: MatrixReport = read_json(&run.join("matrix.json")).unwrap();
    assert_eq!(m.models, ["seed-0", "seed-1"]);
    for x in [&m.identity, &m.linear, &m.translator] {
        let x = x.as_ref().unwrap();
        assert!(x.get(0, 1).unwrap().is_finite());
    }
    let meta: MetaReport = read_json(&run.join("meta.json")).unwrap();
    assert_eq!(meta.before.translated.unwrap().tasks, 2);
    assert!(run.join("checkpoints/adapters-meta.kvbl").exists());

    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    for kind in ["pretrain_lm", "meta_lm"] {
        assert!(metrics.contains(kind), "{kind}");
    }

    let out = dir.path().join("report");
    ok(&["report", s(&run), "--out", s(&out)]);
    let first: Vec<Vec<u8>> = ["curves.csv", "translator_eval.csv", "portability.csv"]
        .iter()
        .map(|f| std::fs::read(out.join(f)).unwrap())
        .collect();
    ok(&["report", s(&run), "--out", s(&out)]);
    for (f, before) in ["curves.csv", "translator_eval.csv", "portability.csv"].iter().zip(&first) {
        assert_eq!(&std::fs::read(out.join(f)).unwrap(), before, "{f}");
    }
    let table = String::from_utf8(first[1].clone()).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);
    assert!(!out.join(".lock").exists());
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        ok(&["pretrain", "--run", s(&run), "--config", &cfg, "--seed", "3"]);
        ok(&["train-translator", "--run", s(&run)]);
        outputs.push((
            std::fs::read(run.join("metrics.csv")).unwrap(),
            std::fs::read(run.join("checkpoints/adapters.kvbl")).unwrap(),
        ));
    }
    assert!(outputs[0] == outputs[1]);
}

#[test]
fn seed_flag_beats_environment_beats_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 2}"#).unwrap();
    let seed_of = |run: &Path| read_json::<ExperimentConfig>(&run.join("config.json")).unwrap().seed;
    let run = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let run = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_kvbabel"));
        // No checkpoints exist, so the command stops after the config snapshot.
        cmd.args(["train-translator", "--run", s(&run), "--config", s(&cfg)]);
        cmd.env_remove("KVBABEL_SEED");
        if let Some(e) = env {
            cmd.env("KVBABEL_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        assert!(!cmd.output().unwrap().status.success());
        seed_of(&run)
    };
    assert_eq!(run("file", None, None), 2);
    assert_eq!(run("env", Some("4"), None), 4);
    assert_eq!(run("flag", Some("4"), Some("6")), 6);
}

#[test]
fn locked_run_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".lock"), "").unwrap();
    let err = fails(&["pretrain", "--run", s(&run), "--config", &tiny(dir.path())]);
    assert!(err.contains("locked"), "{err}");
    assert!(!run.join("config.json").exists());
}

#[test]
fn missing_finetune_parent_is_a_file_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    let recipe = ExperimentConfig::recipe(kvbabel_cli::config::Recipe::FinetuneSplit);
    v["recipe"] = "finetune-split".into();
    v["models"] = serde_json::to_value(&recipe.models[1..2]).unwrap();
    std::fs::write(&cfg, v.to_string()).unwrap();
    let run = dir.path().join("run");
    let base = dir.path().join("empty");
    let err = fails(&["pretrain", "--run", s(&run), "--config", s(&cfg), "--base", s(&base)]);
    assert!(err.contains("file error") && err.contains("lm-base.kvbl"), "{err}");
}

#[test]
fn indivisible_shared_width_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let err = fails(&["train-translator", "--run", s(&run), "--config", &tiny(dir.path()), "--shared-dim", "33"]);
    assert!(err.contains("shared_dim"), "{err}");
    assert!(!run.join("metrics.csv").exists());
    assert!(!run.join("data").exists());
}

#[test]
fn checkpoints_recipe_saves_the_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let run = pretrained(dir.path(), "checkpoints");
    let mid = std::fs::read(run.join("checkpoints/lm-mid.kvbl")).unwrap();
    let last = std::fs::read(run.join("checkpoints/lm-final.kvbl")).unwrap();
    assert_ne!(mid, last);
}

#[test]
fn extension_reports_zero_shot_paths() {
    let dir = tempfile::tempdir().unwrap();
    let run = pretrained(dir.path(), "extension");
    ok(&["train-translator", "--run", s(&run)]);
    let before: MatrixReport = read_json(&run.join("matrix.json")).unwrap();
    assert_eq!(before.models, ["seed-0", "seed-1", "seed-2"]);

    let ext = dir.path().join("ext");
    ok(&["extend", "--run", s(&ext), "--base", s(&run), "--pool", s(&run)]);
    let m: MatrixReport = read_json(&ext.join("matrix.json")).unwrap();
    assert_eq!(m.models, ["seed-0", "seed-1", "seed-2", "seed-3"]);
    // Partners 0 and 1 leave the newcomer's paths to and from seed-2 unseen.
    let mut unseen: Vec<(usize, usize)> = m.zero_shot.iter().map(|&(i, j, _)| (i, j)).collect();
    unseen.sort();
    assert_eq!(unseen, [(2, 3), (3, 2)]);
    assert!(m.trained_mean.unwrap().is_finite());
}

#[test]
fn report_rejects_metrics_without_required_columns() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    let cfg = ExperimentConfig::recipe(kvbabel_cli::config::Recipe::Seeds2);
    kvbabel_cli::run::write_json(&run.join("config.json"), &cfg).unwrap();
    std::fs::write(run.join("metrics.csv"), "step,value\n0,1\n").unwrap();
    let err = fails(&["report", s(&run), "--out", s(&dir.path().join("out"))]);
    assert!(err.contains("missing metrics columns: path_src, path_dst, loss_kind, lr"), "{err}");
}

#[test]
fn report_orders_runs_by_recipe_then_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for (name, recipe, seed) in [("z", "seeds-2", 1), ("y", "seeds-2", 0), ("x", "sizes", 0)] {
        let run = dir.path().join(name);
        std::fs::create_dir_all(&run).unwrap();
        let mut cfg = ExperimentConfig::recipe(serde_json::from_value(recipe.into()).unwrap());
        cfg.seed = seed;
        kvbabel_cli::run::write_json(&run.join("config.json"), &cfg).unwrap();
        std::fs::write(
            run.join("metrics.csv"),
            "step,path_src,path_dst,loss_kind,value,lr\n0,0,0,pretrain_lm,1.5,0.001\n",
        )
        .unwrap();
        runs.push(run);
    }
    let out = dir.path().join("out");
    let mut args = vec!["report"];
    args.extend(runs.iter().map(|r| s(r)));
    args.extend(["--out", s(&out)]);
    ok(&args);
    let curves = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    let order: Vec<&str> = curves.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(order, ["y", "z", "x"]);
}

#[test]
fn finetune_split_pools_only_the_children() {
    let dir = tempfile::tempdir().unwrap();
    let run = pretrained(dir.path(), "finetune-split");
    for name in ["base", "tuned-a", "tuned-b"] {
        assert!(run.join(format!("checkpoints/lm-{name}.kvbl")).exists(), "{name}");
    }
    ok(&["train-translator", "--run", s(&run), "--baseline", "identity"]);
    let m: MatrixReport = read_json(&run.join("matrix.json")).unwrap();
    assert_eq!(m.models, ["tuned-a", "tuned-b"]);
    assert!(m.linear.is_none() && m.translator.is_none());
}

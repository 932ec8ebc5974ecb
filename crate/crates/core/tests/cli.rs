use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::process::{Command, Output};

use prerank::checkpoint::{load_teacher, load_two_tower};
use prerank::experiments::ExperimentConfig;
use prerank::layers::ParamSet;
use prerank::metrics::read_reports;
use prerank::samples::read_samples;

const TINY: &str = r#"
seed = 3
teacher = "learned"

[data]
n_users = 60
n_queries = 40
n_items = 400
n_requests = 300
train_fraction = 0.8
teacher_requests = 200

[policy]
matching_pool = 100
prerank_size = 20

[model]
field_width = 4
term_width = 4
proj_width = 4
title_width = 4
hidden = [16, 8]
output_width = 8

[teacher_config]
epochs = 1

[train]
epochs = 2

[ablation]
suite = "loss"
seeds = [1, 2]
"#;

fn run(cmd: &str, config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prerank")).arg(cmd).arg(config).arg(out).output().unwrap()
}

fn ok(cmd: &str, config: &Path, out: &Path) -> String {
    let o = run(cmd, config, out);
    assert!(o.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn every_subcommand_runs_on_a_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    ExperimentConfig::load(&config).unwrap();
    let out = dir.path().join("run");

    ok("simulate", &config, &out);
    let logs = fs::read(out.join("logs.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_slice(logs.split(|&b| b == b'\n').next().unwrap()).unwrap();
    for field in ["request_id", "user_id", "query_id", "timestamp", "matching_out", "prerank_out", "exposures", "clicks", "purchases", "other_scenario_purchases"] {
        assert!(first.get(field).is_some(), "log line lacks {field}");
    }
    let catalog: serde_json::Value = serde_json::from_slice(&fs::read(out.join("catalog.json")).unwrap()).unwrap();
    assert!(catalog.get("format_version").is_some());
    ok("simulate", &config, &out);
    assert_eq!(fs::read(out.join("logs.jsonl")).unwrap(), logs);

    ok("build-samples", &config, &out);
    let samples = read_samples(BufReader::new(fs::File::open(out.join("samples.jsonl")).unwrap())).unwrap();
    assert!(!samples.is_empty());
    assert!(samples.iter().all(|s| s.check_invariants().is_ok()));

    ok("train", &config, &out);
    let model = load_two_tower(&fs::read_to_string(out.join("model.ckpt")).unwrap()).unwrap();
    assert!(load_teacher(&fs::read_to_string(out.join("model.ckpt")).unwrap()).is_err());
    assert!(model.is_finite());

    ok("train-teacher", &config, &out);
    load_teacher(&fs::read_to_string(out.join("teacher.ckpt")).unwrap()).unwrap();
    assert!(out.join("calibration.json").exists());

    ok("train-baseline", &config, &out);
    for f in ["baseline_ctr.ckpt", "baseline_cvr.ckpt"] {
        load_two_tower(&fs::read_to_string(out.join(f)).unwrap()).unwrap();
    }

    ok("evaluate", &config, &out);
    let tsv = fs::read_to_string(out.join("report.tsv")).unwrap();
    for name in ["model", "teacher", "logging_policy", "random"] {
        assert!(tsv.lines().any(|l| l.starts_with(name)), "report lacks {name}:\n{tsv}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.get("runs").is_some());

    ok("curve", &config, &out);
    let curves = read_reports(BufReader::new(fs::File::open(out.join("curves.jsonl")).unwrap())).unwrap();
    assert!(curves.iter().any(|r| r.metric == "asph"));
    assert!(curves.iter().all(|r| r.check().is_ok()));

    ok("ablate", &config, &out);
    let table = fs::read_to_string(out.join("ablation.tsv")).unwrap();
    assert!(table.lines().count() >= 3, "{table}");
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let missing_seed = dir.path().join("missing_seed.toml");
    fs::write(&missing_seed, "[data]\nn_users = 5\n").unwrap();
    let bad_policy = dir.path().join("bad_policy.toml");
    fs::write(&bad_policy, "seed = 1\n[policy]\nmatching_pool = 30\nprerank_size = 50\n").unwrap();
    for config in [&missing_seed, &bad_policy, &dir.path().join("absent.toml")] {
        for cmd in ["simulate", "train", "ablate"] {
            let o = run(cmd, config, &out);
            assert!(!o.status.success(), "{cmd} accepted {}", config.display());
            assert!(!o.stderr.is_empty());
        }
    }
    let good = dir.path().join("good.toml");
    fs::write(&good, TINY).unwrap();
    assert!(!run("evaluate", &good, &dir.path().join("empty")).status.success());
}

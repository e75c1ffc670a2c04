use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
seed = 5

[cohort]
n_patients = 10
split = [0.4, 0.2, 0.4]

[phantom]
n_fractions = 3

[stage1]
epochs = 1

[stage2]
epochs = 1

[evaluation]
n_bootstrap = 50

[ablation]
n_bootstrap = 20
specs = [
  { mode = "organ_masked", organs = "prostate" },
  { mode = "mask_only", organs = "both" },
]
"#;

fn fractrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fractrack"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn manifest(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

fn files(m: &Value) -> BTreeMap<String, String> {
    serde_json::from_value(m["files"].clone()).unwrap()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn small_run_is_complete_deterministic_and_reusable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        assert_ok(&fractrack(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]));
    }

    let m = manifest(&out_a);
    let listed = files(&m);
    for rel in [
        "cohort/manifest.jsonl",
        "cohort/ground_truth.json",
        "pairs/splits.json",
        "pairs/f1fl.jsonl",
        "pairs/all.jsonl",
        "pairs/simf1.jsonl",
        "train/f1fl/loss.csv",
        "train/all/epoch_000.frck",
        "train/best.frck",
        "eval/metrics.json",
        "eval/logits_all.jsonl",
        "eval/pairwise.csv",
        "eval/pairwise.png",
        "saliency/peaks.csv",
        "saliency/group_average.frv",
        "restrict/crops.jsonl",
        "ablate/report.json",
        "ablate/report.csv",
        "stats/lme.json",
        "stats/slopes.csv",
        "stats/organ_change.json",
        "stats/tests.json",
        "study/pairs.jsonl",
        "report/summary.md",
    ] {
        assert!(listed.contains_key(rel), "{rel} missing from manifest");
        assert!(out_a.join(rel).exists(), "{rel} not written");
    }
    // Every file on disk except the manifest is listed.
    let mut on_disk = Vec::new();
    let mut stack = vec![out_a.clone()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                on_disk.push(p.strip_prefix(&out_a).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    on_disk.retain(|p| p != "manifest.json");
    on_disk.sort();
    assert_eq!(on_disk, listed.keys().cloned().collect::<Vec<_>>());

    // JSON outputs carry the config hash.
    let hash = m["config_hash"].as_str().unwrap();
    for rel in listed.keys().filter(|k| k.ends_with(".json")) {
        let v: Value = serde_json::from_str(&std::fs::read_to_string(out_a.join(rel)).unwrap()).unwrap();
        assert_eq!(v["config_hash"], hash, "{rel}");
    }
    let metrics: Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("eval/metrics.json")).unwrap()).unwrap();
    assert!(metrics["metrics"]["f1fl"]["accuracy"].is_number());

    // Same config and seed, same bytes.
    assert_eq!(files(&manifest(&out_b)), listed);

    // `--only eval` reuses the checkpoint instead of retraining.
    let ckpt = out_a.join("train/best.frck");
    let before = std::fs::metadata(&ckpt).unwrap().modified().unwrap();
    let train_record = m["stages"]["train"].clone();
    std::thread::sleep(std::time::Duration::from_millis(20));
    let o = fractrack(&[
        "run",
        "--only",
        "eval",
        "--config",
        &cfg,
        "--out",
        out_a.to_str().unwrap(),
    ]);
    assert_ok(&o);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("[eval]") && !err.contains("[train]"), "{err}");
    assert_eq!(std::fs::metadata(&ckpt).unwrap().modified().unwrap(), before);
    let m2 = manifest(&out_a);
    assert_eq!(m2["stages"]["train"], train_record);
    assert_eq!(
        m2["stages"]["eval"]["inputs"]["train/best.frck"],
        listed["train/best.frck"]
    );
    assert_eq!(files(&m2), listed);

    // Tampering is reported as stale.
    std::fs::write(out_a.join("eval/pairwise.csv"), "edited").unwrap();
    let o = fractrack(&["report", "--config", &cfg, "--out", out_a.to_str().unwrap()]);
    assert_ok(&o);
    let summary = std::fs::read_to_string(out_a.join("report/summary.md")).unwrap();
    assert!(summary.contains("stale: eval/pairwise.csv"), "{summary}");

    // A different seed changes the outputs.
    let out_c = dir.path().join("c");
    assert_ok(&fractrack(&[
        "run",
        "--only",
        "synth",
        "--seed",
        "6",
        "--config",
        &cfg,
        "--out",
        out_c.to_str().unwrap(),
    ]));
    assert_ne!(files(&manifest(&out_c))["cohort/manifest.jsonl"], "");
    assert_ne!(
        files(&manifest(&out_c))["cohort/P0000/F1_image.frv"],
        listed["cohort/P0000/F1_image.frv"]
    );
}

#[test]
fn config_errors_exit_2_and_stage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    let bad_key = write_config(dir.path(), "[cohort]\nn_patient = 4\n");
    let o = fractrack(&["synth", "--config", &bad_key, "--out", out_s]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_patient"));

    let invalid = write_config(dir.path(), "[stage1]\nepochs = 0\n");
    assert_eq!(
        fractrack(&["synth", "--config", &invalid, "--out", out_s])
            .status
            .code(),
        Some(2)
    );

    let missing = dir.path().join("nope.toml");
    assert_eq!(
        fractrack(&["synth", "--config", missing.to_str().unwrap(), "--out", out_s])
            .status
            .code(),
        Some(2)
    );

    let cfg = write_config(dir.path(), SMALL);
    assert_eq!(
        fractrack(&["run", "--only", "evall", "--config", &cfg, "--out", out_s])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(fractrack(&["frobnicate"]).status.code(), Some(2));

    // Eval before training: the stage fails and names itself.
    let o = fractrack(&["eval", "--config", &cfg, "--out", out_s]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `eval` failed"));
}

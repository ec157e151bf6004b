use std::path::Path;
use std::process::{Command, Output};

use dsg_core::corpus_io::{read_corpus, read_weights, write_corpus, write_weights};
use dsg_core::pipeline::{build_config, PipelineParams};
use dsg_core::Guard;
use tempfile::TempDir;

const SPEC: &str = r#"{
  "d_model": 64,
  "d_sae_true": 64,
  "forget_feature_ids": [5, 17, 40],
  "p_fire_forget": 0.5,
  "p_fire_retain": 0.05,
  "p_fire_background": 0.1,
  "seq_len": [16, 48],
  "n_sequences": 120,
  "noise_sigma": 0.02
}"#;

fn dsg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsg"))
        .current_dir(dir)
        .env_remove("DSG_SEED")
        .args(args)
        .output()
        .expect("spawn dsg")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = dsg(dir, args);
    assert!(
        out.status.success(),
        "dsg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn synth_dir(seed: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("spec.json"), SPEC).unwrap();
    ok(dir.path(), &["--seed", seed, "synth", "--spec", "spec.json", "--out-dir", "data"]);
    dir
}

#[test]
fn file_chain_matches_in_process_pipeline() {
    let dir = synth_dir("11");
    let d = dir.path();
    let w = "data/planted.dsgw";
    ok(d, &["stats", "--weights", w, "--corpus", "data/forget.dsga", "--out", "f.dsgs"]);
    ok(d, &["stats", "--weights", w, "--corpus", "data/retain.dsga", "--out", "r.dsgs"]);
    ok(d, &["select", "--forget-stats", "f.dsgs", "--retain-stats", "r.dsgs", "--p-ratio", "95", "--n-feats", "20", "--out", "sel.json"]);
    ok(d, &["calibrate", "--config", "sel.json", "--weights", w, "--retain", "data/retain.dsga", "--p-dyn", "95", "--out", "cal.json"]);
    ok(d, &["guard", "--weights", w, "--corpus", "data/forget.dsga", "--config", "cal.json", "--clamp", "500", "--out", "g.dsga", "--verdicts", "v.csv"]);

    let p = read_weights(d.join(w)).unwrap();
    let forget = read_corpus(d.join("data/forget.dsga")).unwrap();
    let retain = read_corpus(d.join("data/retain.dsga")).unwrap();
    let cfg = build_config(&p, &forget, &retain, &PipelineParams::default()).unwrap();
    let file_cfg = std::fs::read_to_string(d.join("cal.json")).unwrap();
    assert_eq!(file_cfg, cfg.to_json().unwrap());

    let verdicts = Guard::new(&p, &cfg).unwrap().guard_corpus(&forget).unwrap();
    let mut csv = Vec::new();
    verdicts.write_csv(&mut csv).unwrap();
    assert_eq!(std::fs::read(d.join("v.csv")).unwrap(), csv);
    let guarded = read_corpus(d.join("g.dsga")).unwrap();
    assert_eq!(guarded, forget.with_blocks(&verdicts.modified_blocks()).unwrap());
}

#[test]
fn zero_shot_path_needs_no_config() {
    let dir = synth_dir("12");
    let d = dir.path();
    std::fs::write(d.join("ids.txt"), "# planted forget features\n5, 17\n40\n").unwrap();
    ok(d, &[
        "guard", "--weights", "data/planted.dsgw", "--corpus", "data/forget.dsga",
        "--features-file", "ids.txt", "--tau-override", "0.6", "--clamp", "500",
        "--out", "g.dsga", "--verdicts", "v.csv",
    ]);
    let p = read_weights(d.join("data/planted.dsgw")).unwrap();
    let forget = read_corpus(d.join("data/forget.dsga")).unwrap();
    let verdicts = Guard::from_parts(&p, vec![5, 17, 40], 0.6, 500.0)
        .unwrap()
        .guard_corpus(&forget)
        .unwrap();
    let mut csv = Vec::new();
    verdicts.write_csv(&mut csv).unwrap();
    assert_eq!(std::fs::read(d.join("v.csv")).unwrap(), csv);
    assert!(d.join("g.dsga.manifest.json").exists());
}

#[test]
fn guard_without_tau_is_a_validation_error() {
    let dir = synth_dir("13");
    let d = dir.path();
    std::fs::write(d.join("ids.txt"), "5 17 40").unwrap();
    let args = [
        "guard", "--weights", "data/planted.dsgw", "--corpus", "data/retain.dsga",
        "--features-file", "ids.txt", "--out", "g.dsga", "--verdicts", "v.csv",
    ];
    assert_eq!(code(&dsg(d, &args)), 2);
    assert!(!d.join("g.dsga").exists());
    assert!(!d.join("v.csv").exists());
    let mut with_static = args.to_vec();
    with_static.push("--static");
    ok(d, &with_static);
}

#[test]
fn verify_passes_on_fresh_seed() {
    let dir = TempDir::new().unwrap();
    let out = dsg(dir.path(), &["verify", "--out", "report.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let checks = report["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 4);
    assert!(checks.iter().all(|c| c["status"] == "pass"));
    assert!(report["seed"].is_u64());
}

#[test]
fn exit_codes() {
    let dir = synth_dir("14");
    let d = dir.path();
    assert_eq!(code(&dsg(d, &["--help"])), 0);
    assert_eq!(code(&dsg(d, &["--version"])), 0);
    assert_eq!(code(&dsg(d, &["no-such-command"])), 1);
    assert_eq!(code(&dsg(d, &["stats", "--weights", "data/planted.dsgw"])), 1);

    ok(d, &["stats", "--weights", "data/planted.dsgw", "--corpus", "data/forget.dsga", "--out", "f.dsgs"]);
    let bad_pct = dsg(d, &["select", "--forget-stats", "f.dsgs", "--retain-stats", "f.dsgs", "--p-ratio", "150", "--out", "s.json"]);
    assert_eq!(code(&bad_pct), 2);
    assert!(!d.join("s.json").exists());

    let mut bytes = std::fs::read(d.join("data/forget.dsga")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(d.join("corrupt.dsga"), &bytes).unwrap();
    let out = dsg(d, &["stats", "--weights", "data/planted.dsgw", "--corpus", "corrupt.dsga", "--out", "c.dsgs"]);
    assert_eq!(code(&out), 4);
    assert!(!d.join("c.dsgs").exists());
    assert_eq!(code(&dsg(d, &["stats", "--weights", "missing.dsgw", "--corpus", "corrupt.dsga", "--out", "c.dsgs"])), 4);
}

#[test]
fn seed_env_fallback_and_manifest() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for dir in [&a, &b] {
        std::fs::write(dir.path().join("spec.json"), SPEC).unwrap();
    }
    ok(a.path(), &["--seed", "99", "synth", "--spec", "spec.json", "--out-dir", "data"]);
    let out = Command::new(env!("CARGO_BIN_EXE_dsg"))
        .current_dir(b.path())
        .env("DSG_SEED", "99")
        .args(["synth", "--spec", "spec.json", "--out-dir", "data"])
        .output()
        .unwrap();
    assert!(out.status.success());
    for f in ["forget.dsga", "retain.dsga", "truth.json", "planted.dsgw"] {
        assert_eq!(
            std::fs::read(a.path().join("data").join(f)).unwrap(),
            std::fs::read(b.path().join("data").join(f)).unwrap(),
            "{f}"
        );
    }
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(b.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["subcommand"], "synth");
    assert_eq!(m["seed"], 99);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 4);
    assert!(m["input_digests"]["spec.json"].as_str().unwrap().len() == 64);
    for key in ["engine_version", "started_at", "finished_at", "flags"] {
        assert!(!m[key].is_null(), "{key}");
    }

    let c = TempDir::new().unwrap();
    std::fs::write(c.path().join("spec.json"), SPEC).unwrap();
    assert_eq!(code(&dsg(c.path(), &["synth", "--spec", "spec.json", "--out-dir", "data"])), 2);
}

#[test]
fn stats_shards_merge_to_whole() {
    let dir = synth_dir("15");
    let d = dir.path();
    let forget = read_corpus(d.join("data/forget.dsga")).unwrap();
    let half = forget.n_sequences() / 2;
    let part = |range: std::ops::Range<usize>| {
        let seqs = range
            .map(|i| (forget.spans()[i].tag.clone(), forget.sequence_rows(i).to_vec()))
            .collect();
        dsg_core::ActivationCorpus::from_sequences(forget.d_model(), seqs).unwrap()
    };
    write_corpus(d.join("a.dsga"), &part(0..half)).unwrap();
    write_corpus(d.join("b.dsga"), &part(half..forget.n_sequences())).unwrap();
    let w = "data/planted.dsgw";
    ok(d, &["stats", "--weights", w, "--corpus", "a.dsga", "--out", "a.dsgs"]);
    ok(d, &["stats", "--weights", w, "--corpus", "b.dsga", "--out", "b.dsgs"]);
    ok(d, &["stats", "--weights", w, "--corpus", "data/forget.dsga", "--out", "all.dsgs"]);
    ok(d, &["merge-stats", "--out", "m.dsgs", "a.dsgs", "b.dsgs"]);
    let m = dsg_core::corpus_io::read_stats(d.join("m.dsgs")).unwrap();
    let all = dsg_core::corpus_io::read_stats(d.join("all.dsgs")).unwrap();
    assert_eq!(m.n_tokens(), all.n_tokens());
    for (x, y) in m.sum_sq().iter().zip(all.sum_sq()) {
        assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
    }
}

#[test]
fn train_sequential_and_eval_commands_produce_outputs() {
    let dir = synth_dir("16");
    let d = dir.path();
    let p = read_weights(d.join("data/planted.dsgw")).unwrap();
    write_weights(d.join("copy.dsgw"), &p).unwrap();
    ok(d, &["--seed", "3", "train-sae", "--corpus", "data/retain.dsga", "--d-sae", "64", "--steps", "20", "--out", "t.dsgw"]);
    assert_eq!(read_weights(d.join("t.dsgw")).unwrap().d_sae(), 64);

    let w = "copy.dsgw";
    ok(d, &["sequential", "--strategy", "union", "--weights", w, "--retain", "data/retain.dsga", "--folds", "data/forget.dsga", "data/forget.dsga", "--out-dir", "seq"]);
    for f in ["step-1.json", "step-2.json", "manifest.json"] {
        assert!(d.join("seq").join(f).exists(), "{f}");
    }
    assert_eq!(code(&dsg(d, &["sequential", "--strategy", "some", "--weights", w, "--retain", "data/retain.dsga", "--folds", "data/forget.dsga", "--out-dir", "seq2"])), 1);

    ok(d, &["stats", "--weights", w, "--corpus", "data/forget.dsga", "--out", "f.dsgs"]);
    ok(d, &["stats", "--weights", w, "--corpus", "data/retain.dsga", "--out", "r.dsgs"]);
    ok(d, &["select", "--forget-stats", "f.dsgs", "--retain-stats", "r.dsgs", "--out", "sel.json"]);
    ok(d, &["calibrate", "--config", "sel.json", "--weights", w, "--retain", "data/retain.dsga", "--out", "cal.json"]);

    ok(d, &["eval", "sweep", "--axis", "p_dyn", "--grid", "50,95", "--weights", w, "--forget", "data/forget.dsga", "--retain", "data/retain.dsga", "--out", "sweep.csv"]);
    let sweep = std::fs::read_to_string(d.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    ok(d, &["eval", "histogram", "--weights", w, "--config", "cal.json", "--corpus", "f=data/forget.dsga", "--corpus", "r=data/retain.dsga", "--bins", "10", "--out", "h.csv"]);
    let hist = std::fs::read_to_string(d.join("h.csv")).unwrap();
    assert_eq!(hist.lines().count(), 21);
    ok(d, &["eval", "tvd", "--weights", w, "--config", "cal.json", "--a", "data/forget.dsga", "--b", "data/retain.dsga", "--iters", "50", "--out", "t.json"]);
    let t: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("t.json")).unwrap()).unwrap();
    let tvd = t["tvd"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&tvd));
    ok(d, &["eval", "bench", "--weights", w, "--config", "cal.json", "--corpus", "data/retain.dsga", "--out", "b.json"]);
    assert!(d.join("b.json.manifest.json").exists());
}

//! End-to-end CLI checks: the full gen-data -> train -> decode -> sample ->
//! eval -> analyze pipeline on a miniature task, plus exit-code contracts.

use std::path::Path;
use std::process::{Command, Output};

fn daglat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daglat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_mini_config(path: &Path) {
    std::fs::write(
        path,
        "# miniature run\n\
         vocab_size = 16\n\
         src_len_min = 3\n\
         src_len_max = 4\n\
         train_size = 24\n\
         valid_size = 8\n\
         test_size = 8\n\
         d = 16\n\
         layers = 1\n\
         heads = 2\n\
         lambda = 2\n\
         l_max = 16\n\
         max_src_len = 8\n\
         stage1_steps = 4\n\
         stage2_epochs = 1\n\
         max_tokens = 80\n\
         eval_interval = 2\n\
         eval_subset = 4\n\
         eval_k = 2\n\
         k = 8\n\
         keep_ratio = 0.5\n\
         seed = 3\n",
    )
    .unwrap();
}

#[test]
fn full_pipeline_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    write_mini_config(&cfg);
    let data = dir.path().join("data");
    let work = dir.path().join("work");
    let cfg_s = cfg.to_str().unwrap();
    let data_s = data.to_str().unwrap();
    let work_s = work.to_str().unwrap();

    // gen-data writes the three corpus files and the vocabulary
    let out = daglat(&["gen-data", "--config", cfg_s, "--out", data_s]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["train.tsv", "valid.tsv", "test.tsv", "vocab.txt", "config.resolved.cfg"] {
        assert!(data.join(f).exists(), "missing {f}");
    }

    // train writes checkpoints, metrics, and the resolved config
    let out = daglat(&["train", "--config", cfg_s, "--data", data_s, "--workdir", work_s]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(work.join("final.cdat").exists());
    assert!(work.join("stage1.cdat").exists());
    assert!(work.join("config.resolved.cfg").exists());
    let metrics = std::fs::read_to_string(work.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() >= 2);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("dp_loss").is_some());
        assert!(v.get("wall_time").is_some());
    }

    let ckpt = work.join("final.cdat");
    let ckpt_s = ckpt.to_str().unwrap();
    let vocab_s = data.join("vocab.txt");
    let vocab_s = vocab_s.to_str().unwrap();

    // decode emits one line per input line
    let input = dir.path().join("input.txt");
    std::fs::write(&input, "w5 w6 w7\nw8 w9 w10\n").unwrap();
    let decoded = dir.path().join("decoded.txt");
    let out = daglat(&[
        "decode",
        "--checkpoint",
        ckpt_s,
        "--vocab",
        vocab_s,
        "--input",
        input.to_str().unwrap(),
        "--out",
        decoded.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&decoded).unwrap();
    assert_eq!(text.lines().count(), 2);

    // --dump-paths adds path and score fields
    let out = daglat(&[
        "decode", "--checkpoint", ckpt_s, "--vocab", vocab_s,
        "--input", input.to_str().unwrap(), "--out", "-", "--dump-paths",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for line in text.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 4, "line: {line}");
        assert!(fields[1].starts_with('0'), "paths start at position 0");
        assert!(fields[2].parse::<f64>().is_ok());
        assert!(fields[3].parse::<f64>().is_ok());
    }

    // sample is seed-deterministic
    let s1 = daglat(&[
        "sample", "--checkpoint", ckpt_s, "--vocab", vocab_s,
        "--input", input.to_str().unwrap(), "--out", "-", "--k", "8", "--seed", "5",
    ]);
    let s2 = daglat(&[
        "sample", "--checkpoint", ckpt_s, "--vocab", vocab_s,
        "--input", input.to_str().unwrap(), "--out", "-", "--k", "8", "--seed", "5",
    ]);
    assert!(s1.status.success());
    assert_eq!(s1.stdout, s2.stdout);

    // eval emits one JSON object with the report fields
    let out = daglat(&[
        "eval", "--checkpoint", ckpt_s, "--vocab", vocab_s,
        "--data", data.join("test.tsv").to_str().unwrap(), "--k", "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    for field in ["corpus_bleu", "ncm", "oracle_bleu", "exact_valid_match_rate", "multi_ref_bleu"]
    {
        assert!(report.get(field).is_some(), "missing {field}");
    }

    // analyze emits JSON-lines with a growing-k oracle curve
    let out = daglat(&[
        "analyze", "--checkpoint", ckpt_s, "--vocab", vocab_s,
        "--data", data.join("test.tsv").to_str().unwrap(), "--k", "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 8);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let curve = first.get("oracle_bleu_at").unwrap().as_object().unwrap();
    assert!(curve.contains_key("1") && curve.contains_key("4"));

    // usage errors exit 1
    let out = daglat(&["decode", "--unknown-flag", "x"]);
    assert_eq!(out.status.code(), Some(1));
    let out = daglat(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
    let out = daglat(&[]);
    assert_eq!(out.status.code(), Some(1));

    // runtime errors exit 2
    let out = daglat(&[
        "decode", "--checkpoint", "/nonexistent.cdat", "--vocab", vocab_s,
        "--input", input.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // config with unknown key exits 1
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "not_a_key = 1\n").unwrap();
    let out = daglat(&["gen-data", "--config", bad.to_str().unwrap(), "--out", data_s]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_halt_and_resume_via_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    write_mini_config(&cfg);
    let data = dir.path().join("data");
    let work = dir.path().join("work");
    let cfg_s = cfg.to_str().unwrap();
    let data_s = data.to_str().unwrap();
    let work_s = work.to_str().unwrap();

    let out = daglat(&["gen-data", "--config", cfg_s, "--out", data_s]);
    assert!(out.status.success());

    let out = daglat(&[
        "train", "--config", cfg_s, "--data", data_s, "--workdir", work_s,
        "--halt-after-steps", "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(work.join("state.cdat").exists());
    assert!(!work.join("final.cdat").exists());

    let out = daglat(&["train", "--config", cfg_s, "--data", data_s, "--workdir", work_s]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(work.join("final.cdat").exists());
    assert!(!work.join("state.cdat").exists());
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn seqrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqrec"))
        .env("SEQREC_OUT", dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn generate_is_deterministic_and_manifest_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "generate", "--count", "40", "--seed", "7", "--o-max", "3", "--d-max", "2",
    ];
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = seqrec(tmp.path(), &[&args[..], &["--out", dir.to_str().unwrap()]].concat());
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let bytes_a = fs::read(a.join("dataset.jsonl")).unwrap();
    let bytes_b = fs::read(b.join("dataset.jsonl")).unwrap();
    assert_eq!(bytes_a, bytes_b, "same seed must give identical datasets");

    // manifest statistics agree with a re-scan of the file
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let mut ops = std::collections::BTreeMap::<String, u64>::new();
    let mut count = 0u64;
    for line in String::from_utf8(bytes_a).unwrap().lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        *ops.entry(rec["o"].as_u64().unwrap().to_string()).or_default() += 1;
        count += 1;
    }
    assert_eq!(manifest["count"].as_u64().unwrap(), count);
    for (k, n) in &ops {
        assert_eq!(manifest["ops"][k].as_u64().unwrap(), *n);
    }
    assert!(a.join("config.toml").exists());
}

#[test]
fn generate_config_file_with_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[generate]\ncount = 5\nseed = 3\n[generate.generator]\no_max = 2\n").unwrap();
    let from_file = tmp.path().join("file");
    let out = seqrec(
        tmp.path(),
        &["generate", "--config", cfg.to_str().unwrap(), "--out", from_file.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let lines = fs::read_to_string(from_file.join("dataset.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 5);

    // the --count flag wins over the file value
    let overridden = tmp.path().join("flag");
    let out = seqrec(
        tmp.path(),
        &[
            "generate", "--config", cfg.to_str().unwrap(), "--count", "7",
            "--out", overridden.to_str().unwrap(),
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let lines = fs::read_to_string(overridden.join("dataset.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 7);
    let effective = fs::read_to_string(overridden.join("config.toml")).unwrap();
    assert!(effective.contains("count = 7"));
    assert!(effective.contains("o_max = 2"));
}

#[test]
fn generate_sigma_train_adds_corruption_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("noisy");
    let out = seqrec(
        tmp.path(),
        &[
            "generate", "--mode", "float", "--count", "10", "--seed", "5",
            "--sigma-train", "0.5", "--out", dir.to_str().unwrap(),
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    for line in fs::read_to_string(dir.join("dataset.jsonl")).unwrap().lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        let sigma = rec["sigma"].as_f64().unwrap();
        assert!((0.0..0.5).contains(&sigma));
        assert!(rec["noisy_terms"].is_array());
    }
}

#[test]
fn predict_oracle_recovers_successor_relation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = seqrec(
        tmp.path(),
        &["predict", "--oracle", "--terms", "1 2 4 7 11 16", "--n-pred", "1"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("add u1 n"), "missing relation in: {text}");
    assert!(text.contains("next: 22"), "missing extrapolation in: {text}");
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let tmp = tempfile::tempdir().unwrap();
    // malformed input number: usage (2)
    let out = seqrec(tmp.path(), &["predict", "--oracle", "--terms", "1 2 x"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    // no backend selected: usage (2)
    let out = seqrec(tmp.path(), &["predict", "--terms", "1 2 3"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    // missing checkpoint file: data (3)
    let out = seqrec(
        tmp.path(),
        &["predict", "--checkpoint", "/nonexistent.bin", "--terms", "1 2 3"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    // enumeration space above the guard: usage (2)
    let out = seqrec(
        tmp.path(),
        &["enumerate-fit", "--terms", "1 2 3", "--max-ops", "4"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    // unknown flag: clap usage (2)
    let out = seqrec(tmp.path(), &["generate", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_tau_sweep_is_monotone() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("eval");
    let out = seqrec(
        tmp.path(),
        &[
            "evaluate", "--oracle", "--n-items", "15", "--o-max", "2", "--d-max", "2",
            "--l-min", "10", "--l-max", "14", "--seed", "11", "--n-pred", "5",
            "--out", dir.to_str().unwrap(),
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let sweep = report["tau_sweep"].as_array().unwrap();
    let accs: Vec<f64> = sweep.iter().map(|p| p[1].as_f64().unwrap()).collect();
    assert!(accs.windows(2).all(|w| w[0] <= w[1]), "not monotone: {accs:?}");
    assert!(dir.join("items.jsonl").exists());
    assert!(dir.join("config.toml").exists());
}

#[test]
fn oeis_report_covers_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let stripped = tmp.path().join("stripped");
    fs::write(
        &stripped,
        "# header\n\
         A000027 ,1,2,3,4,5,6,7,8,9,10,11,12,13,14,15,16,17,18,19,20,21,22,23,24,25,\n\
         A000290 ,0,1,4,9,16,25,36,49,64,81,100,121,144,169,196,225,256,289,324,361,400,441,484,529,576,\n",
    )
    .unwrap();
    let keywords = tmp.path().join("keywords");
    fs::write(&keywords, "A000027 easy,core,nonn\nA000290 easy,core,nonn\n").unwrap();
    let dir = tmp.path().join("oeis");
    let out = seqrec(
        tmp.path(),
        &[
            "oeis", "--oracle", "--stripped", stripped.to_str().unwrap(),
            "--keywords", keywords.to_str().unwrap(),
            "--n-input", "15,20", "--n-pred", "1,5",
            "--out", dir.to_str().unwrap(),
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4);
    let pairs: Vec<(u64, u64)> = cells
        .iter()
        .map(|c| (c["n_input"].as_u64().unwrap(), c["n_pred"].as_u64().unwrap()))
        .collect();
    assert_eq!(pairs, vec![(15, 1), (15, 5), (20, 1), (20, 5)]);
    let manifest = fs::read_to_string(dir.join("set_manifest.txt")).unwrap();
    assert!(manifest.contains("A000027"));
}

#[test]
fn train_checkpoint_resume_and_embed_sim() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("train");
    let small = [
        "--batch-size", "2", "--o-max", "2", "--d-max", "1", "--l-min", "6", "--l-max", "8",
        "--int-base", "100", "--digits-per-token", "2",
        "--layers", "1", "--heads", "2", "--dim", "16", "--ff-dim", "32",
        "--max-positions", "64",
    ];
    let out = seqrec(
        tmp.path(),
        &[&["train", "--steps", "5", "--out", dir.to_str().unwrap()], &small[..]].concat(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("step 5"));
    let ckpt = dir.join("checkpoint.bin");
    assert!(ckpt.exists());
    assert!(dir.join("metrics.jsonl").exists());
    for line in fs::read_to_string(dir.join("metrics.jsonl")).unwrap().lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["loss"].as_f64().unwrap().is_finite());
        assert!(rec["lr"].as_f64().unwrap() > 0.0);
    }

    // resume continues the step counter in the same output dir
    let out = seqrec(
        tmp.path(),
        &[
            &[
                "train", "--steps", "8", "--resume", ckpt.to_str().unwrap(),
                "--out", dir.to_str().unwrap(),
            ],
            &small[..],
        ]
        .concat(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("step 8"), "{}", stdout(&out));

    // the exported similarity matrix has a unit diagonal
    let sim_dir = tmp.path().join("sim");
    let out = seqrec(
        tmp.path(),
        &[
            "embed-sim", "--checkpoint", ckpt.to_str().unwrap(),
            "--int-base", "100", "--digits-per-token", "2",
            "--tokens", "add sub n", "--out", sim_dir.to_str().unwrap(),
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(sim_dir.join("similarity.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "token,add,sub,n");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "add");
    assert_eq!(row[1], "1");

    // wrong encoding flags mean a different vocabulary: data error
    let out = seqrec(
        tmp.path(),
        &["embed-sim", "--checkpoint", ckpt.to_str().unwrap(), "--tokens", "add"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn out_root_env_is_respected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = seqrec(tmp.path(), &["count", "--max-ops", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(tmp.path().join("count/counts.json").exists());
    assert!(tmp.path().join("count/config.toml").exists());
}

#[test]
fn refine_accumulates_residual_corrections() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("refine");
    let out = seqrec(
        tmp.path(),
        &[
            "refine", "--oracle", "--values", "2 3 6 11 18 27 38 51 66 83",
            "--ns", "0 1 2 3 4 5 6 7 8 9", "--depth", "2",
            "--out", dir.to_str().unwrap(),
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let result: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("refinement.json")).unwrap()).unwrap();
    let rounds = result["rounds"].as_array().unwrap();
    assert!(!rounds.is_empty());
    let last = rounds.last().unwrap();
    assert!(last["residual_after"].as_f64().unwrap() <= 1e-9);
}

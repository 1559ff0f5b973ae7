use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ssod_core::checkpoint::{Checkpoint, ModelState};
use ssod_core::detector::{ArchConfig, DetectorState};
use ssod_core::report::read_sidecar;

fn ssod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssod")).args(args).output().expect("spawn ssod")
}

fn ok(args: &[&str]) -> String {
    let out = ssod(args);
    assert!(
        out.status.success(),
        "ssod {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, count: usize) -> serde_json::Value {
    json(&ok(&["gen-data", "--out", s(dir), "--count", &count.to_string(), "--labeled-frac", "0.25", "--seed", "3"]))
}

const SHORT: [&str; 8] = [
    "--set",
    "total_steps=6",
    "--set",
    "decay_points=4,5",
    "--set",
    "batch_size=4",
    "--set",
    "checkpoint_every=3",
];

fn train(data: &Path, out: &Path, mode: &str, extra: &[&str]) -> serde_json::Value {
    let mut args = vec!["train", "--data", s(data), "--mode", mode, "--out", s(out)];
    args.extend(SHORT);
    args.extend(extra);
    json(&ok(&args))
}

fn final_models(run: &Path) -> Vec<ModelState> {
    Checkpoint::load(&run.join("checkpoints/step_00000006.ckpt")).unwrap().models
}

#[test]
fn gen_data_counts_hash_and_refusals() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let out = json(&ok(&["gen-data", "--out", s(&a), "--count", "2000", "--labeled-frac", "0.1", "--seed", "7"]));
    assert_eq!(out["n_labeled"], 200);
    assert_eq!(out["n_unlabeled"], 1800);

    let b = tmp.path().join("b");
    let again = json(&ok(&["gen-data", "--out", s(&b), "--count", "2000", "--labeled-frac", "0.1", "--seed", "7"]));
    assert_eq!(out["dataset_hash"], again["dataset_hash"]);

    let refused = ssod(&["gen-data", "--out", s(&a), "--count", "10"]);
    assert_eq!(refused.status.code(), Some(2));
    let forced = json(&ok(&["gen-data", "--out", s(&a), "--count", "10", "--force"]));
    assert_eq!(forced["count"], 10);

    let bad = ssod(&["gen-data", "--out", s(&tmp.path().join("c")), "--labeled-frac", "1.5"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("--labeled-frac"));
}

#[test]
fn unknown_config_key_exits_2_listing_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 20);
    let out = ssod(&["train", "--data", s(&data), "--out", s(&tmp.path().join("r")), "--set", "learning_rate=0.1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate") && err.contains("lambda_u") && err.contains("tau"), "{err}");

    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "tau = 0.5\nbogus = 1\n").unwrap();
    let out = ssod(&["train", "--data", s(&data), "--out", s(&tmp.path().join("r")), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn config_precedence_defaults_file_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 20);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# file layer\ntau = 0.7\nalpha_m = 2.0\nmode = instant-star\n").unwrap();
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--config", s(&cfg), "--mode", "instant", "--out", s(&run)];
    args.extend(SHORT);
    args.extend(["--set", "tau=0.8"]);
    ok(&args);
    let m = json(&std::fs::read_to_string(run.join("manifest.json")).unwrap());
    let c = &m["config"];
    assert_eq!(c["mode"], "INSTANT");
    assert_eq!(c["tau"], 0.8);
    assert_eq!(c["alpha_m"], 2.0);
    assert_eq!(c["lambda_u"], 1.0);
    assert_eq!(c["decay_points"], serde_json::json!([4, 5]));
    assert_eq!(m["status"], "finished");
    assert_eq!(m["steps_completed"], 6);
    let hash = m["dataset"]["hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    let artifacts = m["artifacts"].as_object().unwrap();
    assert!(artifacts.contains_key("metrics.jsonl"));
    assert!(artifacts.contains_key("checkpoints/step_00000006.ckpt"));
    assert!(run.join("plots").is_dir());
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 6);
}

#[test]
fn default_config_echoes_reference_hyperparameters() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 20);
    let run = tmp.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&run), "--stop-after", "1"]);
    let m = json(&std::fs::read_to_string(run.join("manifest.json")).unwrap());
    let c = &m["config"];
    for (k, v) in [
        ("lambda", 1.0),
        ("lambda_u", 1.0),
        ("tau", 0.9),
        ("alpha_m", 1.0),
        ("lr0", 0.01),
        ("momentum", 0.9),
        ("weight_decay", 1e-4),
    ] {
        assert_eq!(c[k].as_f64(), Some(v), "{k}");
    }
    assert_eq!(c["batch_size"], 16);
    assert_eq!(c["total_steps"], 18_000);
    assert_eq!(c["decay_points"], serde_json::json!([12_000, 16_500]));
    assert_eq!(m["status"], "stopped");
}

#[test]
fn modes_differ_only_in_mode_and_zero_weight_matches_supervised() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 24);
    let sup = tmp.path().join("sup");
    let inst = tmp.path().join("inst");
    let zero = tmp.path().join("zero");
    train(&data, &sup, "supervised", &[]);
    train(&data, &inst, "instant", &[]);
    train(&data, &zero, "instant", &["--set", "lambda_u=0"]);

    let manifest = |p: &Path| json(&std::fs::read_to_string(p.join("manifest.json")).unwrap());
    let (ms, mi) = (manifest(&sup), manifest(&inst));
    let mut cs = ms["config"].clone();
    let mut ci = mi["config"].clone();
    assert_ne!(cs["mode"], ci["mode"]);
    cs["mode"] = serde_json::Value::Null;
    ci["mode"] = serde_json::Value::Null;
    assert_eq!(cs, ci);
    assert_eq!(ms["dataset"], mi["dataset"]);

    let a = final_models(&sup);
    let b = final_models(&zero);
    assert_eq!(a[0].detector.params, b[0].detector.params);
    assert_eq!(a[0].velocity, b[0].velocity);
    assert_ne!(a[0].detector.params, final_models(&inst)[0].detector.params);
}

#[test]
fn identical_runs_produce_identical_artifacts_and_resume_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 24);
    let one = tmp.path().join("one");
    let two = tmp.path().join("two");
    train(&data, &one, "instant-star", &[]);
    train(&data, &two, "instant-star", &[]);
    let ck = |p: &Path| std::fs::read(p.join("checkpoints/step_00000006.ckpt")).unwrap();
    assert_eq!(ck(&one), ck(&two));
    let m1 = ssod_core::trainer::read_metrics(&one.join("metrics.jsonl")).unwrap();
    let m2 = ssod_core::trainer::read_metrics(&two.join("metrics.jsonl")).unwrap();
    assert!(m1.iter().zip(&m2).all(|(a, b)| a.same_values(b)));

    let part = tmp.path().join("part");
    let stopped = train(&data, &part, "instant-star", &["--stop-after", "4"]);
    assert_eq!(stopped["status"], "stopped");
    assert!(part.join("checkpoints/step_00000004.ckpt").exists());
    // a second start without --resume is refused
    let mut args = vec!["train", "--data", s(&data), "--mode", "instant-star", "--out", s(&part)];
    args.extend(SHORT);
    assert_eq!(ssod(&args).status.code(), Some(2));
    let resumed = train(&data, &part, "instant-star", &["--resume"]);
    assert_eq!(resumed["status"], "finished");
    assert_eq!(ck(&part), ck(&one));
    let m3 = ssod_core::trainer::read_metrics(&part.join("metrics.jsonl")).unwrap();
    assert_eq!(m3.len(), 6);
    assert!(m1.iter().zip(&m3).all(|(a, b)| a.same_values(b)));
}

#[test]
fn locked_run_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 20);
    let run = tmp.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".lock"), "1").unwrap();
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run)];
    args.extend(SHORT);
    let out = ssod(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn data_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 20);
    let run = tmp.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_ssod"))
        .args(["train", "--out", s(&run), "--stop-after", "1"])
        .env("SSOD_DATA_ROOT", &data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let missing = Command::new(env!("CARGO_BIN_EXE_ssod"))
        .args(["train", "--out", s(&tmp.path().join("r2"))])
        .env_remove("SSOD_DATA_ROOT")
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

fn write_checkpoint(path: &Path, state: DetectorState) {
    Checkpoint {
        step: 0,
        models: vec![ModelState::new(state)],
        config: serde_json::json!({}),
    }
    .save(path)
    .unwrap();
}

#[test]
fn eval_empty_model_missing_checkpoint_and_golden() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 20);

    let missing = ssod(&["eval", "--checkpoint", s(&tmp.path().join("nope.ckpt")), "--data", s(&data)]);
    assert_eq!(missing.status.code(), Some(2));

    // background logit dominates everywhere: no detections at all
    let mut empty = DetectorState::init(&ArchConfig::default(), 0).unwrap();
    empty.zero_head();
    let k = empty.arch.num_classes + 5;
    let bias = empty.head_bias_mut();
    for slot in 0..bias.len() / k {
        bias[slot * k] = 50.0;
    }
    let ck = tmp.path().join("empty.ckpt");
    write_checkpoint(&ck, empty);
    let out_json = tmp.path().join("eval.json");
    let r = json(&ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--split", "heldout", "--out", s(&out_json)]));
    assert_eq!((r["ap50"].as_f64(), r["ap75"].as_f64(), r["map_5095"].as_f64()), (Some(0.0), Some(0.0), Some(0.0)));
    assert_eq!(r["n_detections"], 0);
    assert_eq!(json(&std::fs::read_to_string(&out_json).unwrap()), r);

    // fixed-seed run scored against the stored result of its first verified run
    let gdata = tmp.path().join("gdata");
    gen(&gdata, 40);
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--data", s(&gdata), "--mode", "instant", "--out", s(&run)];
    args.extend(["--set", "total_steps=300", "--set", "batch_size=8", "--set", "checkpoint_every=300", "--set", "tau=0.5"]);
    ok(&args);
    let ck = run.join("checkpoints/step_00000300.ckpt");
    let got = json(&ok(&["eval", "--checkpoint", s(&ck), "--data", s(&gdata), "--split", "heldout"]));
    let golden_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/eval_short_run.json");
    let golden = json(&std::fs::read_to_string(golden_path).unwrap());
    assert!(golden["n_detections"].as_u64().unwrap() > 0);
    for key in ["ap50", "ap75", "map_5095"] {
        let (g, e) = (got[key].as_f64().unwrap(), golden[key].as_f64().unwrap());
        assert!((g - e).abs() < 1e-9, "{key}: {g} vs golden {e}");
    }
    for key in ["n_images", "n_gt", "n_detections"] {
        assert_eq!(got[key], golden[key], "{key}");
    }
}

#[test]
fn sweep_runs_each_value_and_rejects_unknown_params() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 20);
    let bad = ssod(&["sweep", "--data", s(&data), "--param", "momentum", "--values", "0.1,0.2", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(bad.status.code(), Some(2));

    let sweep = tmp.path().join("sweep");
    let mut args = vec!["sweep", "--data", s(&data), "--param", "tau", "--values", "0.3,0.9", "--out", s(&sweep)];
    args.extend(SHORT);
    ok(&args);
    for v in ["tau=0.3", "tau=0.9"] {
        let m = json(&std::fs::read_to_string(sweep.join(v).join("manifest.json")).unwrap());
        assert_eq!(m["status"], "finished");
    }
    let m03 = json(&std::fs::read_to_string(sweep.join("tau=0.3/manifest.json")).unwrap());
    assert_eq!(m03["config"]["tau"], 0.3);
    let summary = json(&std::fs::read_to_string(sweep.join("summary.json")).unwrap());
    assert_eq!(summary["param"], "tau");
    assert_eq!(summary["rows"].as_array().unwrap().len(), 2);
    let tsv = std::fs::read_to_string(sweep.join("summary.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3);
    assert!(tsv.starts_with("tau\tAP50\tAP75\tmAP"));

    let plots = tmp.path().join("plots");
    let printed = ok(&["report", s(&sweep), "--out", s(&plots)]);
    assert!(printed.contains("sweep_summary.svg"));
    let side = read_sidecar(&plots.join("sweep_summary.tsv")).unwrap();
    assert_eq!(side[0].points.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0.3, 0.9]);
}

#[test]
fn report_plots_match_logs_and_name_bad_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 20);
    let run = tmp.path().join("run");
    train(&data, &run, "instant-star", &["--pseudo-quality", "5", "--set", "tau=0.3"]);
    let printed = ok(&["report", s(&run)]);
    let plots = run.join("plots");
    for stem in ["annotations_per_image", "losses", "pseudo_label_map"] {
        assert!(printed.contains(&format!("{stem}.svg")));
        assert!(std::fs::read_to_string(plots.join(format!("{stem}.svg"))).unwrap().contains("<svg"));
    }

    let metrics = ssod_core::trainer::read_metrics(&run.join("metrics.jsonl")).unwrap();
    let ann = read_sidecar(&plots.join("annotations_per_image.tsv")).unwrap();
    assert_eq!(ann[0].name, "n1");
    assert_eq!(ann[1].name, "n2");
    for (i, m) in metrics.iter().enumerate() {
        assert_eq!(ann[0].points[i], (m.step as f64, m.n1));
        assert_eq!(ann[1].points[i], (m.step as f64, m.n2));
    }
    let losses = read_sidecar(&plots.join("losses.tsv")).unwrap();
    let unsup = losses.iter().find(|s| s.name == "loss_unsup").unwrap();
    assert_eq!(unsup.points.iter().map(|p| p.1).collect::<Vec<_>>(), metrics.iter().map(|m| m.loss_unsup).collect::<Vec<_>>());
    let pq = read_sidecar(&plots.join("pseudo_label_map.tsv")).unwrap();
    assert_eq!(pq.len(), 2);
    assert_eq!(pq[1].name, "co-rectify");
    assert_eq!(pq[0].points.iter().map(|p| p.0).collect::<Vec<_>>(), vec![3.0, 6.0]);

    // two runs overlay with prefixed series names
    let other = tmp.path().join("other");
    train(&data, &other, "instant", &[]);
    let both = tmp.path().join("both");
    ok(&["report", s(&run), s(&other), "--out", s(&both)]);
    let names: Vec<String> = read_sidecar(&both.join("losses.tsv")).unwrap().into_iter().map(|s| s.name).collect();
    assert!(names.contains(&"run:loss_total".to_string()) && names.contains(&"other:loss_total".to_string()));

    let text = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{not json";
    std::fs::write(run.join("metrics.jsonl"), lines.join("\n")).unwrap();
    let out = ssod(&["report", s(&run)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

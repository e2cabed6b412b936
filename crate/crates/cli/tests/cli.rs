use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tridiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tridiff"))
        .args(args)
        .env_remove("TRIDIFF_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tridiff(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    tridiff(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `root` with its bytes, sorted by relative path.
fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn tiny_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["gen-data", "--scenes", "2", "--views", "8", "--resolution", "32", "--seed", "3", "--out", s(&data)]);
    data
}

fn tiny_train(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "train", "--preset", "tiny", "--set", "warmup_steps=1", "--steps", "2", "--data", s(data), "--out", s(out),
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

fn run_config(run: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(run.join("config.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_counts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let stdout = ok(&["gen-data", "--scenes", "3", "--views", "4", "--resolution", "16", "--seed", "7", "--out", s(&a)]);
    assert!(stdout.contains("3 scenes, 12 views"), "{stdout}");
    ok(&["gen-data", "--scenes", "3", "--views", "4", "--resolution", "16", "--seed", "7", "--out", s(&b)]);
    let snap = snapshot(&a);
    assert_eq!(snap.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "png")).count(), 12);
    assert_eq!(snap, snapshot(&b));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest[0]["views"][0]["fov_deg"], 50.0);
}

#[test]
fn train_flags_map_onto_the_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let run = dir.path().join("run");
    tiny_train(&data, &run, &[]);
    let cfg = run_config(&run);
    assert_eq!(cfg["model"]["num_views"], 4);
    assert_eq!(cfg["train"]["num_novel_views"], 2);
    assert!(run.join("final.ckpt").exists());
    assert_eq!(std::fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 2);

    let run2 = dir.path().join("run2");
    tiny_train(
        &data,
        &run2,
        &["--views", "2", "--no-novel-supervision", "--camera-cond", "adaln", "--mode", "text"],
    );
    let cfg = run_config(&run2);
    assert_eq!(cfg["model"]["num_views"], 2);
    assert_eq!(cfg["train"]["num_input_views"], 2);
    assert_eq!(cfg["train"]["num_novel_views"], 0);
    assert_eq!(cfg["model"]["camera_cond"], "adaln");
    assert_eq!(cfg["model"]["mode"], "text");
}

#[test]
fn config_file_and_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let file = dir.path().join("run.toml");
    std::fs::write(&file, "preset = \"tiny\"\nwarmup_steps = 1\ntotal_steps = 2\nlearning_rate = 0.001\n").unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&file), "--set", "learning_rate=0.002", "--data", s(&data), "--out", s(&run)]);
    let cfg = run_config(&run);
    assert_eq!(cfg["train"]["learning_rate"], 0.002);
    assert_eq!(cfg["train"]["total_steps"], 2);

    // The environment variable supplies the default configuration path.
    let run_env = dir.path().join("run_env");
    let out = Command::new(env!("CARGO_BIN_EXE_tridiff"))
        .args(["train", "--data", s(&data), "--out", s(&run_env)])
        .env("TRIDIFF_CONFIG", &file)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(run_config(&run_env)["train"]["learning_rate"], 0.001);
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let out = dir.path().join("out");
    let o = s(&out);
    assert_eq!(code(&["train", "--preset", "tiny", "--data", s(&data), "--out", o, "--views", "3"]), 2);
    assert_eq!(code(&["train", "--preset", "nope", "--data", s(&data), "--out", o]), 2);
    assert_eq!(code(&["train", "--preset", "tiny", "--set", "bogus=1", "--data", s(&data), "--out", o]), 2);
    assert_eq!(code(&["train", "--preset", "tiny", "--out", o]), 2);
    assert_eq!(code(&["train", "--bogus-flag"]), 2);
    let missing = dir.path().join("missing");
    assert_eq!(
        code(&["train", "--preset", "tiny", "--set", "warmup_steps=1", "--steps", "2", "--data", s(&missing), "--out", o]),
        1
    );
    assert_eq!(code(&["sample", "--checkpoint", s(&missing), "--out", o]), 1);
}

#[test]
fn sample_is_deterministic_and_checks_the_mode() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let run = dir.path().join("run");
    tiny_train(&data, &run, &[]);
    let ckpt = run.join("final.ckpt");
    let image = data.join("images/scene00000_view000.png");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stdout = ok(&["sample", "--checkpoint", s(&ckpt), "--image", s(&image), "--steps", "5", "--seed", "1", "--out", s(&a)]);
    assert!(stdout.contains("5 denoiser calls"), "{stdout}");
    ok(&["sample", "--checkpoint", s(&ckpt), "--image", s(&image), "--steps", "5", "--seed", "1", "--out", s(&b)]);
    let snap = snapshot(&a);
    let names: Vec<_> = snap.iter().map(|(p, _)| p.to_str().unwrap().to_string()).collect();
    assert_eq!(names, ["mesh.obj", "turntable.png", "view_0.png", "view_1.png", "view_2.png", "view_3.png"]);
    assert_eq!(snap, snapshot(&b));

    let c = dir.path().join("c");
    assert_eq!(code(&["sample", "--checkpoint", s(&ckpt), "--prompt", "a red sphere", "--out", s(&c)]), 2);
    assert_eq!(code(&["sample", "--checkpoint", s(&ckpt), "--out", s(&c)]), 2);
    // A configuration describing a different network conflicts with the checkpoint.
    assert_eq!(
        code(&["sample", "--checkpoint", s(&ckpt), "--image", s(&image), "--preset", "micro", "--out", s(&c)]),
        2
    );
}

#[test]
fn eval_writes_reports_and_flags_failures() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let run = dir.path().join("run");
    tiny_train(&data, &run, &[]);
    let ckpt = run.join("final.ckpt");
    let ev = dir.path().join("ev");
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--steps", "2", "--holdout-views", "3", "--out", s(&ev)]);
    let csv = std::fs::read_to_string(ev.join("report.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("scene,psnr_db,ssim,chamfer"));
    assert_eq!(csv.lines().count(), 4);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(ev.join("report.json")).unwrap()).unwrap();
    assert!(json["psnr_db"].is_number());
    assert!(json["ssim"].is_number());
    assert!(json.get("chamfer").is_some());

    // Images at the wrong resolution make every scene fail.
    let wrong = dir.path().join("wrong");
    ok(&["gen-data", "--scenes", "1", "--views", "4", "--resolution", "16", "--out", s(&wrong)]);
    let out = tridiff(&["eval", "--checkpoint", s(&ckpt), "--data", s(&wrong), "--steps", "2", "--out", s(&ev)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scene 0 failed"));
}

#[test]
fn help_cites_published_defaults() {
    let train = ok(&["train", "--help"]);
    for flag in ["--views", "--no-novel-supervision", "--camera-cond", "--mode", "--seed", "--config"] {
        assert!(train.contains(flag), "{flag}");
    }
    assert!(train.contains("four is the published default"));
    assert!(ok(&["sample", "--help"]).contains("5 is the published value"));
    assert!(ok(&["eval", "--help"]).contains("20 follows the published protocol"));
    assert!(ok(&["gen-data", "--help"]).contains("50 is the fixed published setting"));
}

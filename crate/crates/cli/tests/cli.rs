use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sof(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sof"))
        .current_dir(dir)
        .env_remove("SOF_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = sof(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Every file under `root` except run records, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.json" {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const TOY: &[&str] = &["--steps", "30", "--width", "8", "--latent-dim", "8", "--hyper-hidden", "16", "--rays", "32"];

fn toy_pipeline(dir: &Path) {
    ok(dir, &["--threads", "1", "--seed", "3", "gen-data", "--out", "data", "--scenes", "2", "--views", "3", "--res", "16"]);
    let mut train = vec!["--threads", "1", "train", "--data", "data", "--out", "model"];
    train.extend_from_slice(TOY);
    ok(dir, &train);
    ok(dir, &["--threads", "1", "render", "--checkpoint", "model/checkpoint.sofc", "--views", "3", "--out", "render"]);
    ok(dir, &["--threads", "1", "--seed", "9", "sample", "--checkpoint", "model/checkpoint.sofc", "--count", "2", "--out", "sample"]);
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    toy_pipeline(a.path());
    toy_pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.len() > 20);
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{} differs", k.display());
    }
    for sub in ["data", "model", "render", "sample"] {
        let ra = fs::read(a.path().join(sub).join("run.json")).unwrap();
        assert_eq!(ra, fs::read(b.path().join(sub).join("run.json")).unwrap());
    }
}

#[test]
fn commands_write_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let msg = ok(d, &["gen-data", "--out", "data", "--scenes", "2", "--views", "2", "--res", "16"]);
    assert!(msg.contains("wrote 4 segmaps"), "{msg}");
    assert_eq!(fs::read_to_string(d.join("data/manifest.txt")).unwrap().lines().count(), 4);

    ok(d, &["train", "--data", "data", "--out", "init", "--steps", "0", "--width", "8", "--latent-dim", "8", "--hyper-hidden", "16"]);
    assert!(d.join("init/checkpoint.sofc").exists());
    let log = fs::read_to_string(d.join("init/train_log.csv")).unwrap();
    assert_eq!(log.trim(), "step,loss,lr,miou");

    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("init/run.json")).unwrap()).unwrap();
    assert_eq!(record["command"], "train");
    assert_eq!(record["config"]["train"]["steps"], 0);
    assert_eq!(record["config"]["train"]["width"], 8);

    ok(d, &["render", "--checkpoint", "init/checkpoint.sofc", "--out", "orbit"]);
    let pngs = fs::read_dir(d.join("orbit"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 15);

    ok(d, &["edit", "--checkpoint", "init/checkpoint.sofc", "--instance", "1", "--amount", "0", "--out", "edit"]);
    assert_eq!(fs::read(d.join("edit/source.sofs")).unwrap(), fs::read(d.join("edit/edited.sofs")).unwrap());
    ok(d, &["edit", "--checkpoint", "init/checkpoint.sofc", "--amount", "-2.5", "--out", "edit2"]);

    ok(
        d,
        &[
            "project",
            "--checkpoint",
            "init/checkpoint.sofc",
            "--target",
            "data/scene_0000/view_000.sofs",
            "--camera",
            "data/scene_0000/view_000.cam",
            "--steps",
            "40",
            "--out",
            "proj",
        ],
    );
    let trace = fs::read_to_string(d.join("proj/trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("step,miou,best_miou,loss"));
    let best: Vec<f64> = lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(best.len() >= 2);
    assert!(best.windows(2).all(|w| w[1] >= w[0]));

    let msg = ok(d, &["mc-export", "--sphere-radius", "0.5", "--grid", "32", "--out", "mesh"]);
    assert!(msg.contains("vertices"));
    let obj = fs::read_to_string(d.join("mesh/mesh.obj")).unwrap();
    assert!(obj.lines().any(|l| l.starts_with("f ")));
    assert!(d.join("mesh/run.json").exists());
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[train]\nstepz = 3\n").unwrap();
    let out = sof(d, &["--config", "bad.toml", "gen-data", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));

    let out = sof(d, &["train", "--data", "missing", "--out", "m"]);
    assert_eq!(out.status.code(), Some(3));

    fs::write(d.join("short.cam"), "16 16 10 10 8 8\n1 0 0 0\n0 1 0 0\n").unwrap();
    ok(d, &["gen-data", "--out", "data", "--scenes", "1", "--views", "1", "--res", "8"]);
    ok(d, &["train", "--data", "data", "--out", "m", "--steps", "0", "--width", "8", "--latent-dim", "8", "--hyper-hidden", "16"]);
    let out = sof(d, &["render", "--checkpoint", "m/checkpoint.sofc", "--camera", "short.cam", "--out", "r"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"), "{}", String::from_utf8_lossy(&out.stderr));

    let out = sof(d, &["render", "--checkpoint", "m/checkpoint.sofc", "--instance", "5", "--out", "r"]);
    assert_eq!(out.status.code(), Some(2));

    let blocker = d.join("file");
    fs::write(&blocker, "").unwrap();
    let out = sof(d, &["gen-data", "--out", "file/sub", "--scenes", "1", "--views", "1", "--res", "8"]);
    assert_eq!(out.status.code(), Some(3));

    let out = sof(d, &["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_root_variable_supplies_the_default_directory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_sof"))
        .current_dir(d)
        .env("SOF_DATA_ROOT", d.join("root"))
        .env("RUST_LOG", "warn")
        .args(["gen-data", "--scenes", "1", "--views", "2", "--res", "8"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("root/manifest.txt").exists());
}

#[test]
fn siw_check_reports_every_identity() {
    let dir = tempfile::tempdir().unwrap();
    let msg = ok(dir.path(), &["siw-check", "--resolution", "32", "--out", "report"]);
    assert!(msg.lines().count() >= 10);
    assert!(msg.lines().all(|l| l.starts_with("PASS ")), "{msg}");
    assert!(dir.path().join("report/report.txt").exists());
    let out = sof(dir.path(), &["siw-check", "--resolution", "30"]);
    assert_eq!(out.status.code(), Some(2));
}

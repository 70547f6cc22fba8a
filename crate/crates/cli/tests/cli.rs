use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

const TINY: &str = "\
perception.resolution = 32
net.tower_width = 2
net.head_channels = 4
net.tower_depth = 2
learn.episodes_grasp_agnostic = 6
learn.episodes_grasp_explore = 4
learn.episodes_push_training = 3
learn.episodes_alternating = 2
learn.checkpoint_every = 2
learn.calibration_scenes = 4
learn.episode_action_cap = 4
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pushgrasp"));
    for (k, _) in std::env::vars() {
        if k.starts_with("PUSHGRASP_") {
            c.env_remove(k);
        }
    }
    c
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.txt");
    fs::write(&p, TINY).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn pushgrasp")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_checkpoints_and_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    ok(&run(&["--config", s(&cfg), "train", "--stage", "grasp_agnostic", "--out", s(&out)]));
    assert!(out.join("checkpoints/grasp_agnostic_final.ckpt").exists());
    assert!(out.join("checkpoints/grasp_agnostic_final.ckpt.meta").exists());
    assert!(out.join("checkpoints/grasp_agnostic_ep00006.ckpt").exists());
    assert!(out.join("config.txt").exists() && out.join("run.json").exists());
    assert!(!out.join("LOCK").exists());
    let episodes = fs::read_to_string(out.join("logs/episodes.jsonl")).unwrap();
    assert_eq!(episodes.lines().count(), 6);
    let actions = fs::read_to_string(out.join("logs/actions.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(actions.lines().next().unwrap()).unwrap();
    assert_eq!(first["run_id"], "run");
    assert_eq!(first["stage"], "grasp_agnostic");

    // Retraining without --resume refuses.
    let again = run(&["--config", s(&cfg), "train", "--stage", "grasp_agnostic", "--out", s(&out)]);
    assert_eq!(again.status.code(), Some(7));
}

#[test]
fn push_training_requires_a_grasp_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    let r = run(&["--config", s(&cfg), "train", "--stage", "push_training", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(6));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("error[prerequisite]") && err.contains("grasp_explore"), "{err}");
}

#[test]
fn interrupted_training_resumes_to_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let sets = ["--set", "learn.episodes_grasp_agnostic=30", "--set", "learn.checkpoint_every=3"];

    let full = tmp.path().join("a/run");
    let mut args = vec!["--config", s(&cfg)];
    args.extend(sets);
    let mut a = args.clone();
    a.extend(["train", "--stage", "grasp_agnostic", "--out", s(&full)]);
    ok(&run(&a));

    let cut = tmp.path().join("b/run");
    let mut a = args.clone();
    a.extend(["train", "--stage", "grasp_agnostic", "--out", s(&cut)]);
    let mut child = bin().args(&a).stdout(Stdio::null()).stderr(Stdio::null()).spawn().unwrap();
    let meta = cut.join("checkpoints/grasp_agnostic_ep00006.ckpt.meta");
    let start = Instant::now();
    while !meta.exists() && start.elapsed() < Duration::from_secs(120) {
        std::thread::sleep(Duration::from_millis(5));
    }
    let _ = child.kill();
    let _ = child.wait();
    let _ = fs::remove_file(cut.join("LOCK"));

    let mut a = args.clone();
    a.extend(["train", "--stage", "grasp_agnostic", "--out", s(&cut), "--resume"]);
    ok(&run(&a));
    for log in ["logs/episodes.jsonl", "logs/actions.jsonl"] {
        assert_eq!(fs::read(full.join(log)).unwrap(), fs::read(cut.join(log)).unwrap(), "{log}");
    }
    assert_eq!(
        fs::read(full.join("checkpoints/grasp_agnostic_final.ckpt")).unwrap(),
        fs::read(cut.join("checkpoints/grasp_agnostic_final.ckpt")).unwrap()
    );
}

#[test]
fn config_changes_are_refused_on_an_existing_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    ok(&run(&["--config", s(&cfg), "train", "--stage", "grasp_agnostic", "--out", s(&out)]));
    let r = run(&["--set", "learn.learning_rate=0.5", "train", "--stage", "grasp_explore", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(7));
    assert!(String::from_utf8_lossy(&r.stderr).contains("learn.learning_rate"));
    // The snapshot alone reproduces the run's config.
    ok(&run(&["train", "--stage", "grasp_explore", "--out", s(&out)]));
    assert!(out.join("checkpoints/grasp_explore_final.ckpt").exists());
}

#[test]
fn locked_run_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("LOCK"), "1").unwrap();
    let r = run(&["--config", s(&cfg), "train", "--stage", "grasp_agnostic", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(11));
    assert!(String::from_utf8_lossy(&r.stderr).contains("error[locked]"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run(&["--set", "learn.nope=1", "gen-scenes", "--scenario", "pile", "--objects", "10", "--count", "1", "--out", s(tmp.path())]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("learn.nope"));
}

#[test]
fn scene_corpora_are_deterministic_and_certified() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let out = ok(&run(&["gen-scenes", "--scenario", "packed", "--objects", "5", "--count", "6", "--seed", "9", "--out", s(d)]));
        assert!(out.contains("(6 certified)"), "{out}");
    }
    for i in 0..6 {
        let name = format!("scene_{i:04}.json");
        let x = fs::read_to_string(a.join(&name)).unwrap();
        assert_eq!(x, fs::read_to_string(b.join(&name)).unwrap());
        let v: serde_json::Value = serde_json::from_str(&x).unwrap();
        assert_eq!(v["certificate"], true);
    }

    let empty = tmp.path().join("empty");
    ok(&run(&["gen-scenes", "--scenario", "pile", "--objects", "20", "--count", "0", "--out", s(&empty)]));
    assert_eq!(fs::read_dir(&empty).unwrap().count(), 0);
}

#[test]
fn eval_replay_and_compare_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run_dir = tmp.path().join("run");
    ok(&run(&["--config", s(&cfg), "train", "--stage", "all", "--out", s(&run_dir)]));
    let ckpt = run_dir.join("checkpoints/alternating_final.ckpt");

    let ev = tmp.path().join("eval");
    let table = ok(&run(&[
        "--config", s(&cfg), "eval", "--checkpoint", s(&ckpt), "--scenario", "pile", "--objects", "10", "--scenes", "3", "--out", s(&ev),
    ]));
    assert!(table.contains("C (%)") && table.contains("pile"), "{table}");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("summary_pile_10.json")).unwrap()).unwrap();
    assert_eq!(summary["n_runs"], 3);
    let records = ev.join("records_pile_10.jsonl");
    assert_eq!(fs::read_to_string(&records).unwrap().lines().count(), 3);

    let replay = ok(&run(&["replay", "--records", s(&records), "--index", "1"]));
    assert!(replay.contains("zero divergence"), "{replay}");

    let cmp = ok(&run(&["compare", s(&ev.join("summary_pile_10.json")), "--out", s(&tmp.path().join("cmp.txt"))]));
    assert!(cmp.contains("ref-full-scale") && cmp.contains("98.98 ± 1.01"), "{cmp}");

    // Single scene: no spread to report.
    let one = tmp.path().join("one");
    ok(&run(&["eval", "--agent", "random", "--scenario", "packed", "--objects", "5", "--scenes", "1", "--out", s(&one)]));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(one.join("summary_packed_5.json")).unwrap()).unwrap();
    assert!(summary["C"]["stderr"].is_null(), "{summary}");
}

#[test]
fn replay_reports_divergence_and_corrupt_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let ev = tmp.path().join("eval");
    ok(&run(&["eval", "--agent", "random", "--scenario", "pile", "--objects", "10", "--scenes", "2", "--out", s(&ev)]));
    let records = ev.join("records_pile_10.jsonl");
    ok(&run(&["replay", "--records", s(&records)]));

    // Editing the first recorded action forces a divergence at step 0.
    let text = fs::read_to_string(&records).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    let k = v["actions"][0]["k"].as_u64().unwrap();
    v["actions"][0]["k"] = ((k + 1) % 16).into();
    lines[0] = v.to_string();
    let edited = ev.join("edited.jsonl");
    fs::write(&edited, lines.join("\n") + "\n").unwrap();
    let r = run(&["replay", "--records", s(&edited)]);
    assert_eq!(r.status.code(), Some(12));
    assert!(String::from_utf8_lossy(&r.stderr).contains("step 0"));

    let corrupt = ev.join("corrupt.jsonl");
    fs::write(&corrupt, format!("{}\n{{\"scenario\": \n", lines[1])).unwrap();
    let r = run(&["replay", "--records", s(&corrupt)]);
    assert_eq!(r.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 2"), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn plots_are_written() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run_dir = tmp.path().join("run");
    ok(&run(&["--config", s(&cfg), "train", "--stage", "grasp_agnostic", "--out", s(&run_dir)]));
    ok(&run(&["plot", "--run", s(&run_dir), "--kind", "curves"]));
    assert!(run_dir.join("plots/curves_grasp_agnostic.png").exists());
    ok(&run(&["plot", "--run", s(&run_dir), "--kind", "heatmap"]));
    let heatmaps = fs::read_dir(run_dir.join("plots")).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("heatmap_")).count();
    assert!(heatmaps > 0);
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const QUICK: &str =
    "[scene]\ncount = 3\nwidth = 96\nheight = 96\n[train]\niterations = 8\nsnapshot_every = 4\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pseudoflow"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn quick_config(dir: &Path) -> PathBuf {
    let path = dir.join("quick.cfg");
    std::fs::write(&path, QUICK).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = run(&["train", "--out", "unused"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--config"), "{err}");
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn bad_config_exits_2_and_missing_poses_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "[scene]\ncount = 0\n").unwrap();
    let out = run(&[
        "train",
        "--config",
        s(&bad),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = quick_config(dir.path());
    let out = run(&[
        "eval",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("empty")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_is_reproducible_across_thread_counts_and_eval_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, threads) in [(&a, "1"), (&b, "2")] {
        let o = run(&[
            "train",
            "--config",
            s(&cfg),
            "--out",
            s(out),
            "--seed",
            "5",
            "--threads",
            threads,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let fa = files_under(&a);
    assert!(fa.iter().any(|p| p.ends_with("training.csv")));
    assert!(fa
        .iter()
        .any(|p| p.ends_with("poses/scene_002_refined.pose")));
    for p in &fa {
        let q = b.join(p.strip_prefix(&a).unwrap());
        assert_eq!(
            std::fs::read(p).unwrap(),
            std::fs::read(&q).unwrap(),
            "{}",
            p.display()
        );
    }

    let o = run(&["eval", "--config", s(&cfg), "--out", s(&a), "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stored = std::fs::read_to_string(a.join("evaluation.csv")).unwrap();
    let recomputed = std::fs::read_to_string(a.join("evaluation_recomputed.csv")).unwrap();
    for (x, y) in stored.lines().zip(recomputed.lines()) {
        let x: Vec<&str> = x.split(',').collect();
        assert_eq!(x[..x.len() - 1].join(","), y);
    }
    assert_eq!(stored.lines().count(), recomputed.lines().count());
}

#[test]
fn ablate_reports_four_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let out = dir.path().join("abl");
    let o = run(&["ablate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let variants: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(variants, ["neither", "photo_only", "flow_only", "both"]);
    for v in variants {
        assert!(out.join(v).join("summary.json").is_file());
    }
}

#[test]
fn scene_gen_and_render_debug_stay_inside_out() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let scenes = dir.path().join("scenes");
    let o = run(&["scene-gen", "--config", s(&cfg), "--out", s(&scenes)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for id in 0..3 {
        let d = scenes.join(format!("scene_{id:03}"));
        for f in [
            "mesh.obj",
            "real.ppm",
            "truth.pose",
            "initial.pose",
            "render_0.ppm",
            "render_3_depth.pgm",
        ] {
            assert!(d.join(f).is_file(), "{f} missing in scene {id}");
        }
        let text = std::fs::read_to_string(d.join("truth.pose")).unwrap();
        assert_eq!(text.split_whitespace().count(), 12);
    }

    let debug = dir.path().join("debug");
    let o = run(&[
        "render-debug",
        "--config",
        s(&cfg),
        "--out",
        s(&debug),
        "--scene",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "render_0_color.ppm",
        "render_0_depth.pgm",
        "render_0_coord.ppm",
        "render_0_sigma.pgm",
    ] {
        assert!(debug.join(f).is_file(), "{f} missing");
    }

    let mut top: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    top.sort();
    assert_eq!(top, ["debug", "quick.cfg", "scenes"]);

    let o = run(&[
        "render-debug",
        "--config",
        s(&cfg),
        "--out",
        s(&debug),
        "--scene",
        "7",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

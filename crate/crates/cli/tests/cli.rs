use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_featbridge");

fn repo_config(name: &str) -> String {
    format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn run(config: &Path, args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.arg("--config").arg(config).args(args).env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn featbridge")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let text = format!(
        "[data]\nroot = {}\nclips = 2\nframes = 5\nheight = 64\nwidth = 64\nobjects = 2\n\
         [train]\nsteps = 3\npretrain_steps = 2\ncheckpoint_every = 2\nchunk_frames = 5\n\
         [infer]\nsteps = 2\nchunk_frames = 5\n\
         [eval]\npairs = 20\n",
        dir.join("data").display()
    );
    let path = dir.join("tiny.conf");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn shapes_at_full_resolution() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().display().to_string();
    let o = run(
        Path::new(&repo_config("full.conf")),
        &["shapes"],
        &[("FEATBRIDGE_DATA_ROOT", &root)],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("video\t[93,704,1280,3]"), "{out}");
    assert!(out.contains("features\t[93,176,320,1024]"), "{out}");
    assert!(out.contains("aligned\t[93,44,80,"), "{out}");
    assert!(out.contains("condition\t[24,44,80,64]"), "{out}");
    assert!(tmp.path().join("run.txt").exists());
}

#[test]
fn out_of_range_k_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let o = run(&cfg, &["infer", "--k", "99"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("[1, 32]"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn unknown_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.conf");
    std::fs::write(&path, "[data]\nroot = x\n[train]\nlearning_rate = 1\n").unwrap();
    let o = run(&path, &["shapes"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("learning_rate") && err.contains("[train]"), "{err}");
}

#[test]
fn missing_root_names_key_and_section() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("noroot.conf");
    std::fs::write(&path, "[train]\nsteps = 1\n").unwrap();
    let o = run(&path, &["shapes"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("root") && err.contains("[data]"), "{err}");
}

#[test]
fn gen_fit_train_infer_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    for cmd in ["gen", "fit-pca", "train"] {
        let o = run(&cfg, &[cmd], &[]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let data = tmp.path().join("data");
    let run_dir = data.join("run");
    assert!(run_dir.join("final.bin").exists());
    assert!(run_dir.join("ckpt_000002.bin").exists());
    assert!(run_dir.join("ckpt_000003.bin").exists());
    let log = std::fs::read_to_string(run_dir.join("train_log.txt")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");
    let run_txt = std::fs::read_to_string(run_dir.join("run.txt")).unwrap();
    assert!(run_txt.contains("# git = ") && run_txt.contains("[train]"), "{run_txt}");

    let gen_dir = tmp.path().join("gen");
    let gen_arg = gen_dir.display().to_string();
    let o = run(&cfg, &["infer", "--k", "8", "--out", &gen_arg], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(gen_dir.join("clip_0000").join("frame_00004.png").exists());

    let o = run(&cfg, &["eval", "--gen-dir", &gen_arg], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    for m in ["clip_real\t", "warp_ssim\t", "sfid\t", "skid\t", "miou\t", "per_class_iou\t"] {
        assert!(out.contains(m), "{m} missing from {out}");
    }

    let basis = data.join("pca_basis.bin");
    std::fs::remove_file(&basis).unwrap();
    let o = run(&cfg, &["train"], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(&basis.display().to_string()), "{}", stderr(&o));
}

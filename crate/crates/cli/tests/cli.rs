use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mtkd::config::TrainConfig;
use mtkd::export::decode_pgm;
use mtkd::mole::mole_param_count;

const TOY: &str = "\
# small enough for a debug-speed test
image_size = 16
student.embed_dim = 16
student.num_heads = 2
mole.rank = 4
batch_size = 4
eval.images = 8
steps = 4
";

fn distill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distill")).args(args).output().expect("binary runs")
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn missing_config_is_usage_error() {
    let o = distill(&["distill", "--stage", "finetune"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn unknown_flag_is_usage_error() {
    let o = distill(&["inspect-params", "--config", "x", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn config_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "bad.cfg", "seed = 1\n\nmole.rnk = 4\n");
    let o = distill(&["inspect-params", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn zero_experts_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "e0.cfg", "mole.experts = 0\n");
    assert_eq!(distill(&["inspect-params", "--config", &cfg]).status.code(), Some(3));
}

fn printed_ratio(out: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix("mole_ratio="))
        .expect("ratio line")
        .parse()
        .unwrap()
}

#[test]
fn inspect_ratio_matches_closed_form_and_grows_with_rank() {
    let dir = tempfile::tempdir().unwrap();
    let mut last = 0.0;
    for r in [4, 16, 32, 48] {
        let text = format!("mole.rank = {r}\n");
        let cfg = write_cfg(dir.path(), "r.cfg", &text);
        let o = distill(&["inspect-params", "--config", &cfg]);
        assert!(o.status.success(), "{}", stderr(&o));
        let ratio = printed_ratio(&stdout(&o));
        let parsed = TrainConfig::parse(&text).unwrap();
        let closed = mole_param_count(&parsed.student, &parsed.mole);
        assert_eq!(format!("{ratio:.4}"), format!("{:.4}", closed.ratio));
        assert!(ratio > last);
        last = ratio;
    }
}

#[test]
fn distill_writes_artifacts_and_resume_matches_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = write_cfg(dir.path(), "full.cfg", TOY);
    let half = write_cfg(dir.path(), "half.cfg", &TOY.replace("steps = 4", "steps = 2"));
    let one = dir.path().join("one");
    let two = dir.path().join("two");

    let o = distill(&["distill", "--config", &full, "--stage", "finetune", "--out", one.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("L_text=") && stdout(&o).contains("L_kd=") && stdout(&o).contains("L_total="));
    assert!(one.join("checkpoint.mvkd").exists());

    let out = two.to_str().unwrap();
    assert!(distill(&["distill", "--config", &half, "--stage", "finetune", "--out", out]).status.success());
    let ckpt = two.join("checkpoint.mvkd");
    let resumed_ckpt = dir.path().join("k.mvkd");
    fs::copy(&ckpt, &resumed_ckpt).unwrap();
    let o = distill(&[
        "distill",
        "--config",
        &full,
        "--stage",
        "finetune",
        "--resume",
        resumed_ckpt.to_str().unwrap(),
        "--out",
        out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(one.join("trace.csv")).unwrap(), fs::read(two.join("trace.csv")).unwrap());
    assert_eq!(fs::read(one.join("checkpoint.mvkd")).unwrap(), fs::read(ckpt).unwrap());
}

#[test]
fn resume_refuses_other_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "a.cfg", &TOY.replace("steps = 4", "steps = 1"));
    let out = dir.path().join("a");
    assert!(distill(&["distill", "--config", &cfg, "--stage", "pretrain", "--out", out.to_str().unwrap()])
        .status
        .success());
    let other = write_cfg(dir.path(), "b.cfg", &format!("{TOY}mole.experts = 2\n"));
    let ckpt = out.join("checkpoint.mvkd");
    let o = distill(&["distill", "--config", &other, "--stage", "finetune", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("fingerprint"));
}

#[test]
fn export_writes_valid_maps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "t.cfg", &TOY.replace("image_size = 16", "image_size = 32"));
    let run = dir.path().join("run");
    assert!(distill(&["distill", "--config", &cfg, "--stage", "finetune", "--out", run.to_str().unwrap()])
        .status
        .success());
    let maps = dir.path().join("maps");
    let ckpt = run.join("checkpoint.mvkd");
    let o = distill(&[
        "export-attention",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        &cfg,
        "--image-seed",
        "7",
        "--out",
        maps.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for stem in ["clip_attn", "student_attn"] {
        let (w, h, px) = decode_pgm(&fs::read(maps.join(format!("{stem}.pgm"))).unwrap()).unwrap();
        assert_eq!((w, h, px.len()), (4, 4, 16));
        let csv = fs::read_to_string(maps.join(format!("{stem}.csv"))).unwrap();
        let total: f64 = csv
            .lines()
            .flat_map(|l| l.split(','))
            .map(|v| v.parse::<f64>().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "{stem} sums to {total}");
    }
}

#[test]
fn export_missing_checkpoint_is_io_error_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.mvkd");
    let o = distill(&[
        "export-attention",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--image-seed",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("nope.mvkd"));
}

#[test]
fn zero_step_ladder_shares_the_initial_student() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "z.cfg", &TOY.replace("steps = 4", "steps = 0"));
    let out = dir.path().join("ab");
    let o = distill(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    let variants: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(variants, ["mse-baseline", "+adapter", "+mole", "+token-w", "+teacher-w"]);
    for r in &rows {
        assert_eq!(r[2], r[3], "l_kd moved without training");
        assert_eq!(r[4], rows[0][4], "text loss differs at init");
        assert_eq!(r[6], rows[0][6]);
    }
    let sum = |r: &Vec<&str>| r[8].parse::<f64>().unwrap();
    assert!((sum(&rows[0]) - 1.0).abs() < 1e-6);
    assert!((sum(&rows[3]) - 2.0).abs() < 1e-6);
}

#[test]
fn ablate_accepts_a_subset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "z.cfg", &TOY.replace("steps = 4", "steps = 1"));
    let out = dir.path().join("ab");
    let o = distill(&["ablate", "--config", &cfg, "--matrix", "mse-baseline,full", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("ablation.csv")).unwrap().lines().count(), 3);
    let bad = distill(&["ablate", "--config", &cfg, "--matrix", "bogus", "--out", out.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn verify_passes() {
    let o = distill(&["verify"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

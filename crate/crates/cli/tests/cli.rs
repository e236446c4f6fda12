use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gtr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gtr"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(
        &p,
        format!("preset = tiny\ntrain_samples = 4\neval_samples = 3\n{extra}"),
    )
    .unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(gtr(&[]).status.code(), Some(1));
    assert_eq!(gtr(&["train", "--steps", "x"]).status.code(), Some(1));
    assert_eq!(
        gtr(&["gradcheck", "--fusion", "sideways"]).status.code(),
        Some(1)
    );
    assert_eq!(gtr(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_files_exit_two() {
    let o = gtr(&["params", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "colour = blue\n");
    assert_eq!(gtr(&["params", "--config", &cfg]).status.code(), Some(1));
}

#[test]
fn corrupt_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("bad.gtrc");
    fs::write(&ck, b"not a checkpoint").unwrap();
    let o = gtr(&[
        "infer",
        "--ckpt",
        ck.to_str().unwrap(),
        "--video",
        "x.gtrv",
        "--query",
        "red",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn params_and_flops_print_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let p = gtr(&["params", "--config", &cfg]);
    assert!(p.status.success());
    let n: u64 = stdout(&p)
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(n > 0);
    let f = gtr(&["flops", "--config", &cfg]);
    assert!(f.status.success());
    assert!(stdout(&f).contains("FLOPs"));
}

#[test]
fn gradcheck_passes() {
    let o = gtr(&["gradcheck", "--fusion", "stepwise"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("parameter,max_rel"));
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "");
    let ck = d.join("model.gtrc");
    let ck_s = ck.to_str().unwrap();

    let t = gtr(&["train", "--config", &cfg, "--steps", "3", "--out", ck_s]);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    assert!(ck.exists());
    let trace = fs::read_to_string(d.join("model.gtrc.loss.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);

    let report = d.join("report.json");
    let e = gtr(&[
        "eval",
        "--config",
        &cfg,
        "--ckpt",
        ck_s,
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let json = fs::read_to_string(&report).unwrap();
    for key in [
        "r1_iou03", "r1_iou05", "r1_iou07", "r5_iou03", "r5_iou05", "r5_iou07", "mean_iou", "qps",
    ] {
        assert!(json.contains(&format!("\"{key}\"")), "{key} missing");
    }

    let data = d.join("data");
    let g = gtr(&[
        "gen-data",
        "--count",
        "2",
        "--seed",
        "5",
        "--out-dir",
        data.to_str().unwrap(),
    ]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    let clip = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "gtrv"))
        .unwrap();
    let clip_s = clip.to_str().unwrap();

    let i = gtr(&[
        "infer",
        "--ckpt",
        ck_s,
        "--video",
        clip_s,
        "--query",
        "red square topleft",
    ]);
    assert!(i.status.success(), "{}", String::from_utf8_lossy(&i.stderr));
    let out = stdout(&i);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("rank,start,end,confidence"));
    let conf: Vec<f64> = lines
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(!conf.is_empty());
    assert!(conf.windows(2).all(|w| w[0] >= w[1]));

    let k = gtr(&["tokenize-dump", "--config", &cfg, "--video", clip_s]);
    assert!(k.status.success(), "{}", String::from_utf8_lossy(&k.stderr));
    let dump = stdout(&k);
    let tokens: usize = dump.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert_eq!(dump.lines().count(), tokens + 2);

    let attn = d.join("attn.csv");
    let a = gtr(&[
        "attn-dump",
        "--ckpt",
        ck_s,
        "--sample",
        "0",
        "--layer",
        "0",
        "--out",
        attn.to_str().unwrap(),
    ]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let csv = fs::read_to_string(&attn).unwrap();
    assert!(csv.starts_with("query,token,modality,weight\n"));
    assert!(!csv.contains('\r'));

    let bad = gtr(&[
        "attn-dump",
        "--ckpt",
        ck_s,
        "--sample",
        "99",
        "--layer",
        "0",
        "--out",
        attn.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

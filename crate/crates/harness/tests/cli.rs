use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
dataset = "sequence"
vocab = 12
seq_len = 4
classes = 4
samples = 400
width = 4
heads = 1
depth = 1
pretrain_epochs = 2
epochs = 5
look_ahead = 2
denoiser_count = 1
imp_rounds = 5
soup_count = 2
soup_steps = 5
"#;

fn isp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isp"))
        .args(args)
        .output()
        .unwrap()
}

fn isp_env(args: &[&str], key: &str, value: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isp"))
        .args(args)
        .env(key, value)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "width = 4\n");
    let out = isp(&[
        "pretrain",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("dataset"), "{}", stderr(&out));
}

#[test]
fn unknown_keys_and_methods_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.toml", &format!("{TINY}lerning_rate = 1\n"));
    let out = isp(&[
        "pretrain",
        "--config",
        s(&bad),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("lerning_rate"));

    let cfg = write_config(dir.path(), "c.toml", TINY);
    let out = isp(&[
        "prune",
        "--config",
        s(&cfg),
        "--method",
        "magic",
        "--out",
        s(&dir.path().join("p")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for m in [
        "isp",
        "imp",
        "imp-rewind",
        "oneshot",
        "random",
        "progressive",
        "snip",
    ] {
        assert!(err.contains(m), "{err}");
    }
}

#[test]
fn unreachable_sparsity_exits_with_budget_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{TINY}mask_budget = 2\n"));
    let out = isp(&[
        "prune",
        "--config",
        s(&cfg),
        "--method",
        "isp",
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));

    let cfg = write_config(
        dir.path(),
        "d.toml",
        &format!("{TINY}look_ahead = 500\n").replace("look_ahead = 2\n", ""),
    );
    let out = isp(&[
        "prune",
        "--config",
        s(&cfg),
        "--method",
        "isp",
        "--out",
        s(&dir.path().join("p")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn zero_epoch_pretraining_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &TINY.replace("pretrain_epochs = 2", "pretrain_epochs = 0"),
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(isp(&["pretrain", "--config", s(&cfg), "--out", s(&a)])
        .status
        .success());
    assert!(isp(&["pretrain", "--config", s(&cfg), "--out", s(&b)])
        .status
        .success());
    let ca = std::fs::read(a.join("pretrained.ckpt")).unwrap();
    assert_eq!(ca, std::fs::read(b.join("pretrained.ckpt")).unwrap());
    let rec: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("record.json")).unwrap()).unwrap();
    assert_eq!(rec["ledger"]["total_steps"], 0);

    let other = isp(&[
        "pretrain",
        "--config",
        s(&cfg),
        "--seed",
        "9",
        "--out",
        s(&dir.path().join("c")),
    ]);
    assert!(other.status.success());
    assert_ne!(
        ca,
        std::fs::read(dir.path().join("c/pretrained.ckpt")).unwrap()
    );
}

#[test]
fn default_output_directory_follows_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &TINY.replace("pretrain_epochs = 2", "pretrain_epochs = 0"),
    );
    let root = dir.path().join("runs");
    let out = isp_env(
        &["pretrain", "--config", s(&cfg), "--seed", "4"],
        "ISP_OUT_DIR",
        &root,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let made: Vec<String> = std::fs::read_dir(&root)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(made.len(), 1);
    assert!(
        made[0].starts_with("pretrain-") && made[0].ends_with("-s4"),
        "{made:?}"
    );
    assert!(root.join(&made[0]).join("pretrained.ckpt").exists());
}

#[test]
fn prune_ims_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    let isp_dir = dir.path().join("isp");
    let out = isp(&[
        "prune",
        "--config",
        s(&cfg),
        "--method",
        "isp",
        "--out",
        s(&isp_dir),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in [
        "final.mask",
        "final.ckpt",
        "trace.jsonl",
        "ledger.json",
        "record.json",
        "summary.csv",
        "masks",
    ] {
        assert!(isp_dir.join(f).exists(), "{f}");
    }
    let summary = std::fs::read_to_string(isp_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(summary
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("isp-summary/1,"));

    let imp_dir = dir.path().join("imp");
    assert!(isp(&[
        "prune",
        "--config",
        s(&cfg),
        "--method",
        "imp",
        "--out",
        s(&imp_dir)
    ])
    .status
    .success());
    let ims_dir = dir.path().join("ims");
    let out = isp(&["ims", "--config", s(&cfg), "--out", s(&ims_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = std::fs::read_to_string(ims_dir.join("soup_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let report = dir.path().join("report");
    let out = isp(&[
        "report",
        s(&isp_dir),
        s(&imp_dir),
        s(&ims_dir),
        "--out",
        s(&report),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(report.join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert!(row.ends_with(",true"), "{row}");
    }
}

#[test]
fn report_on_nothing_writes_headers() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report");
    assert!(isp(&["report", "--out", s(&report)]).status.success());
    let csv = std::fs::read_to_string(report.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(csv.starts_with("schema,"));
}

#[test]
fn mask_compare_and_sweep_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{TINY}compare_round_steps = 5\n");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let mc = dir.path().join("mc");
    let out = isp(&["mask-compare", "--config", s(&cfg), "--out", s(&mc)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(mc.join("mask_compare.csv")).unwrap();
    // Two methods give three unordered pairs at each of three sparsities.
    assert_eq!(csv.lines().count(), 1 + 9);

    let sw = dir.path().join("sw");
    let out = isp(&[
        "sweep",
        "--config",
        s(&cfg),
        "--axis",
        "denoiser_count",
        "--values",
        "0,1,50",
        "--out",
        s(&sw),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(sw.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].contains(",ok,") && rows[1].contains(",ok,"));
    assert!(rows[2].contains("budget-exceeded"), "{}", rows[2]);
}

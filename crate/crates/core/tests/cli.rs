//! End-to-end checks of the `bdlab` binary: output formats, exit codes, and
//! edge-case behavior.

use backdoor_lab::data::{save_idx_dataset, synth::synthetic_digits};
use std::process::{Command, Output};

fn bdlab(dir: &std::path::Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdlab"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn gen_trigger_reports_the_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = bdlab(
        dir.path(),
        &[
            "gen-trigger", "--seed", &"07".repeat(32), "--m", "10", "--reps-h", "4", "--reps-v", "4",
            "--margin", "4", "--symmetry", "horizontal", "--out", "trigger.toml",
        ],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("m_effective=320"), "unexpected layout summary: {text}");
    assert!(dir.path().join("trigger.toml").exists());
}

#[test]
fn missing_required_argument_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bdlab(dir.path(), &["gen-trigger", "--m", "10", "--out", "x.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_seed_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bdlab(
        dir.path(),
        &["gen-trigger", "--seed", "nothex", "--m", "10", "--out", "x.toml"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = bdlab(
        dir.path(),
        &[
            "eval", "--checkpoint", "nope.json", "--clean-images", "nope-images",
            "--clean-labels", "nope-labels", "--out", "report.tsv",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn invalid_parameter_value_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = bdlab(
        dir.path(),
        &["gen-trigger", "--seed", &"07".repeat(32), "--m", "0", "--out", "x.toml"],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn zero_rate_poisoning_copies_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthetic_digits(40, 9);
    save_idx_dataset(&ds, dir.path().join("in-images"), dir.path().join("in-labels")).unwrap();
    let gen = bdlab(
        dir.path(),
        &[
            "gen-trigger", "--seed", &"07".repeat(32), "--m", "10", "--reps-h", "4", "--reps-v", "4",
            "--margin", "4", "--symmetry", "horizontal", "--out", "trigger.toml",
        ],
    );
    assert!(gen.status.success());
    let out = bdlab(
        dir.path(),
        &[
            "poison", "--images", "in-images", "--labels", "in-labels", "--trigger", "trigger.toml",
            "--rate", "0", "--target", "5", "--seed", "42",
            "--out-images", "out-images", "--out-labels", "out-labels", "--plan-out", "plan.json",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let read = |name: &str| std::fs::read(dir.path().join(name)).unwrap();
    assert_eq!(read("in-images"), read("out-images"));
    assert_eq!(read("in-labels"), read("out-labels"));
}

#[test]
fn reports_use_commented_metadata_and_a_tab_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = bdlab(
        dir.path(),
        &["bound", "--eta", "0.99", "--m-effective", "320", "--out", "bound.tsv"],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    let meta: Vec<&&str> = lines.iter().take_while(|l| l.starts_with("# ")).collect();
    assert!(!meta.is_empty(), "no metadata header in:\n{text}");
    assert!(meta.iter().all(|l| l.contains('\t')), "metadata lines must be `# key\\tvalue`");
    let table = &lines[meta.len()..];
    assert!(table.len() >= 2, "expected a header and at least one row in:\n{text}");
    let header_cols = table[0].split('\t').count();
    assert!(header_cols >= 2);
    assert!(table[1..].iter().all(|row| row.split('\t').count() == header_cols));
    assert_eq!(std::fs::read_to_string(dir.path().join("bound.tsv")).unwrap(), text);
}

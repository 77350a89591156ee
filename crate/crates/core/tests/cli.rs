use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kvplace(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvplace"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "--prompt-len=48 --decode-len=12 --layers=2";

#[test]
fn gen_trace_presets() {
    let dir = tempfile::tempdir().unwrap();
    for (preset, file) in [("low", "low.kvt"), ("high", "high.kvt")] {
        let mut args = vec!["gen-trace", "-o", file, "--preset", preset, "--seed", "4"];
        args.extend(SMALL.split(' '));
        let out = kvplace(&args, dir.path());
        assert!(out.status.success(), "{}", stderr(&out));
        let text = stdout(&out);
        assert!(text.contains(&format!("footprint_bytes={}", 2 * 60 * 4096)), "{text}");
        assert!(text.contains("mean_set_size="));
        let trace = fs::read_to_string(dir.path().join(file)).unwrap();
        assert!(trace.starts_with("KVTRACE v1 L=2 P=48 N=12 E=4096 W=0\n"));
    }
    assert_ne!(
        fs::read(dir.path().join("low.kvt")).unwrap(),
        fs::read(dir.path().join("high.kvt")).unwrap()
    );
}

#[test]
fn gen_trace_rejects_full_sparsity() {
    let dir = tempfile::tempdir().unwrap();
    let out = kvplace(&["gen-trace", "-o", "t.kvt", "--sparsity", "1.0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sparsity"));
    assert!(!dir.path().join("t.kvt").exists());
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(kvplace(&["simulate"], dir.path()).status.code(), Some(2));
}

#[test]
fn convert_scores_writes_top_k() {
    let dir = tempfile::tempdir().unwrap();
    // P = 3, N = 2, L = 1: steps see 3 and 4 past tokens.
    fs::write(dir.path().join("s.txt"), "1 0 0.1,0.9,0.5\n2 0 0.4,0.4,0.0,0.3\n").unwrap();
    let out = kvplace(
        &[
            "convert-scores",
            "--scores",
            "s.txt",
            "-o",
            "t.kvt",
            "--sparsity",
            "0.5",
            "--layers",
            "1",
            "--prompt-len",
            "3",
            "--decode-len",
            "2",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let trace = fs::read_to_string(dir.path().join("t.kvt")).unwrap();
    assert_eq!(trace, "KVTRACE v1 L=1 P=3 N=2 E=4096 W=0\n1 0 1,2\n2 0 0,1\n");
}

#[test]
fn convert_scores_reports_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.txt"), "1 0 0.1,0.9\n").unwrap();
    let out = kvplace(
        &[
            "convert-scores",
            "--scores",
            "s.txt",
            "-o",
            "t.kvt",
            "--sparsity",
            "0.5",
            "--layers",
            "1",
            "--prompt-len",
            "3",
            "--decode-len",
            "1",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("expected 3 scores"), "{}", stderr(&out));
}

fn write_config(dir: &Path, trace: &str, extra: &str) {
    let text = format!(
        "output_dir = \"out\"\nseed = 2\nkv_room_fraction = 0.3\n{trace}\n\
         [[policies]]\nkind = \"static\"\n[[policies]]\nkind = \"lookahead\"\nwindow = 4\nratio = 0.5\n{extra}"
    );
    fs::write(dir.join("exp.toml"), text).unwrap();
}

#[test]
fn run_from_trace_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-trace", "-o", "t.kvt", "--weight-bytes", "8192"];
    args.extend(SMALL.split(' '));
    assert!(kvplace(&args, dir.path()).status.success());
    write_config(dir.path(), "trace = { file = \"t.kvt\" }", "");
    let out = kvplace(&["run", "exp.toml", "--quiet", "--per-step"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).is_empty());
    let reports = fs::read_to_string(dir.path().join("out/reports.csv")).unwrap();
    assert_eq!(reports.lines().count(), 3);
    let cmp = fs::read_to_string(dir.path().join("out/comparison.csv")).unwrap();
    assert!(cmp.starts_with("point,policy,tokens_per_sec,vs_static,vs_unlimited_hbm\n"));
    let per_step = fs::read_to_string(dir.path().join("out/per_step/base__static.csv")).unwrap();
    assert_eq!(per_step.lines().count(), 1 + 2 * 12);
}

#[test]
fn missing_trace_file_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "trace = { file = \"nowhere.kvt\" }", "");
    let out = kvplace(&["run", "exp.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere.kvt"), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let synth = "[trace.synthetic]\nnum_layers = 1\nprompt_len = 8\ndecode_len = 4\nentry_bytes = 64\nsparsity = 0.5\nchurn = 0.1\n";
    write_config(dir.path(), synth, "[sa]\nalpha = 2.0\n");
    let out = kvplace(&["run", "exp.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sa.alpha"), "{}", stderr(&out));

    assert_eq!(kvplace(&["run", "absent.toml"], dir.path()).status.code(), Some(2));
}

#[test]
fn infeasible_trace_file_exits_3() {
    // A trace whose footprint exceeds DRAM capacity cannot be placed.
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-trace", "-o", "t.kvt"];
    args.extend(SMALL.split(' '));
    assert!(kvplace(&args, dir.path()).status.success());
    let text = "output_dir = \"out\"\ntrace = { file = \"t.kvt\" }\n[memory]\ndram_capacity = 1000\n\
                [[policies]]\nkind = \"static\"\n";
    fs::write(dir.path().join("exp.toml"), text).unwrap();
    let out = kvplace(&["run", "exp.toml"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let synth = "[trace.synthetic]\nnum_layers = 2\nprompt_len = 40\ndecode_len = 10\nentry_bytes = 4096\n\
                 weight_bytes_per_layer = 4096\nsparsity = 0.5\nchurn = 0.3\n";
    write_config(
        dir.path(),
        synth,
        "[[policies]]\nkind = \"sa_guided\"\n[sa]\nw_max = 10\n[sweep]\nsparsity = [0.4, 0.8]\n",
    );
    let mut snapshots = Vec::new();
    for jobs in ["1", "3"] {
        let out = kvplace(&["run", "exp.toml", "--quiet", "--jobs", jobs], dir.path());
        assert!(out.status.success(), "{}", stderr(&out));
        let mut files: Vec<_> = fs::read_dir(dir.path().join("out"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        snapshots.push(
            files
                .iter()
                .map(|p| (p.clone(), fs::read(p).unwrap()))
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(snapshots[0], snapshots[1]);
    assert_eq!(snapshots[0].len(), 4);

    let seeded = kvplace(&["run", "exp.toml", "--quiet", "--seed", "99"], dir.path());
    assert!(seeded.status.success());
    let reports = fs::read(dir.path().join("out/reports.csv")).unwrap();
    let before = &snapshots[0].iter().find(|(p, _)| p.ends_with("reports.csv")).unwrap().1;
    assert_ne!(&reports, before);
}

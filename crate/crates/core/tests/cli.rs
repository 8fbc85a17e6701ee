use std::process::{Command, Output};

fn seenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seenet"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_input_exits_2() {
    assert_eq!(seenet(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        seenet(&["gen-data", "--out", "x", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(seenet(&[]).status.code(), Some(2));
}

#[test]
fn invalid_values_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let out = out.to_str().unwrap();
    for (args, flag) in [
        (
            vec!["gen-data", "--out", out, "--classes", "1"],
            "--classes",
        ),
        (vec!["gen-data", "--out", out, "--side", "8"], "--side"),
        (
            vec!["gen-data", "--out", out, "--saliency-noise", "0.9"],
            "--saliency-noise",
        ),
        (
            vec!["train", "--data", out, "--out", out, "--delta-l", "0.8"],
            "--delta-l",
        ),
        (
            vec!["train", "--data", out, "--out", out, "--batch", "0"],
            "--batch",
        ),
        (
            vec!["train", "--data", out, "--out", out, "--strategy", "foo"],
            "--strategy",
        ),
        (
            vec![
                "proxy-gt",
                "--saliency",
                out,
                "--attention",
                out,
                "--labels",
                out,
                "--out",
                out,
                "--w",
                "0",
            ],
            "--w",
        ),
    ] {
        let o = seenet(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains(flag), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let missing = missing.to_str().unwrap();
    let o = seenet(&["train", "--data", missing, "--out", missing, "--iters", "1"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = seenet(&["eval", "--pred", missing, "--gt", missing, "--classes", "3"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn gradcheck_reports_json() {
    let o = seenet(&["gradcheck", "--seed", "1", "--trials", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["max_rel_error"].as_f64().unwrap() <= 1e-3);
}

#[test]
fn help_lists_defaults() {
    let o = seenet(&["train", "--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for needle in [
        "--strategy",
        "[default: seenet]",
        "--warmup",
        "[default: 500]",
        "--delta-h",
    ] {
        assert!(text.contains(needle), "missing {needle}");
    }
}

use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn strata(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_strata"))
        .args(args)
        .output()
        .expect("spawn strata")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

#[test]
fn cholesky_verify_passes() {
    let o = strata(&[
        "cholesky",
        "--N",
        "1024",
        "--B",
        "4",
        "--b",
        "2",
        "--grid",
        "2x2",
        "--ranks",
        "4",
        "--workers",
        "2",
        "--verify",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("residual"));
}

#[test]
fn rk4_verify_passes() {
    let o = strata(&[
        "rk4", "--N", "600", "--B", "4", "--b", "2", "--ranks", "2", "--steps", "5", "--verify",
    ]);
    assert!(o.status.success(), "{}", text(&o));
}

#[test]
fn simulate_writes_one_row_per_rank() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    let o = strata(&[
        "simulate",
        "cholesky",
        "--N",
        "4320",
        "--B",
        "18",
        "--b",
        "2",
        "--grid",
        "3x3",
        "--ranks",
        "9",
        "--stats",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let body = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = body.lines().collect();
    assert_eq!(
        lines[0],
        "rank,tasks_l0,tasks_l1,msgs_out,msgs_in,bytes,max_pending,work_proxy"
    );
    assert_eq!(lines.len(), 10);
    for (r, line) in lines[1..].iter().enumerate() {
        assert!(line.starts_with(&format!("{r},")));
    }
}

#[test]
fn simulate_stats_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let csv = dir.path().join(name);
        let o = strata(&[
            "simulate",
            "cholesky",
            "--N",
            "576",
            "--B",
            "6",
            "--b",
            "3",
            "--grid",
            "2x2",
            "--workers",
            "3",
            "--fuzz",
            "--seed",
            "11",
            "--stats",
            csv.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", text(&o));
        fs::read(csv).unwrap()
    };
    assert_eq!(run("a.csv"), run("b.csv"));
}

#[test]
fn grid_rank_mismatch_is_a_usage_error() {
    let o = strata(&["cholesky", "--N", "64", "--B", "4", "--grid", "2x3", "--ranks", "4"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("Usage"));
}

#[test]
fn other_usage_errors() {
    for args in [
        &["simulate", "cholesky", "--N", "64", "--B", "4", "--verify"][..],
        &["rk4", "--N", "64", "--grid", "2x2"][..],
        &["cholesky", "--B", "4"][..],
        &["cholesky", "--N", "64", "--B", "4", "--b", "2", "--n", "4"][..],
        &["cholesky", "--N", "63", "--B", "4"][..],
    ] {
        let o = strata(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", text(&o));
    }
}

#[test]
fn indefinite_input_fails_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.bin");
    let n = 8;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = if i == 5 { -1.0 } else { 1.0 };
    }
    strata::datahier::write_matrix(
        &path,
        strata::datahier::MatrixMeta {
            rows: n,
            cols: n,
            symmetry: strata::Symmetry::Full,
        },
        &a,
    )
    .unwrap();
    let o = strata(&["cholesky", "--input", path.to_str().unwrap(), "--B", "2", "--b", "2"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("pivot"), "{}", text(&o));
}

#[test]
fn trace_converts_to_json() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("t.tsv");
    let json = dir.path().join("t.json");
    let o = strata(&[
        "cholesky",
        "--N",
        "64",
        "--B",
        "4",
        "--b",
        "2",
        "--grid",
        "2x2",
        "--workers",
        "2",
        "--trace",
        tsv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let events = fs::read_to_string(&tsv).unwrap().lines().count() - 1;
    let o = strata(&["trace-convert", tsv.to_str().unwrap(), json.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let parsed: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(parsed.len(), events);
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn socket_ranks_agree_with_serial() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("ranks.txt");
    fs::write(
        &table,
        format!("0 127.0.0.1:{}\n1 127.0.0.1:{}\n", free_port(), free_port()),
    )
    .unwrap();
    let stats = dir.path().join("s{rank}.csv");
    let spawn = |rank: &str| {
        Command::new(env!("CARGO_BIN_EXE_strata"))
            .args([
                "cholesky",
                "--N",
                "128",
                "--B",
                "4",
                "--b",
                "2",
                "--grid",
                "2x1",
                "--workers",
                "2",
            ])
            .args(["--transport", "socket", "--verify", "--rank", rank, "--rank-table"])
            .arg(&table)
            .arg("--stats")
            .arg(&stats)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap()
    };
    let children = [spawn("0"), spawn("1")];
    for c in children {
        let o = c.wait_with_output().unwrap();
        assert!(o.status.success(), "{}", text(&o));
    }
    for r in 0..2 {
        let body = fs::read_to_string(Path::new(&dir.path().join(format!("s{r}.csv")))).unwrap();
        assert!(body.lines().nth(1).unwrap().starts_with(&format!("{r},")));
    }
}

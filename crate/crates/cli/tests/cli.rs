use std::path::PathBuf;
use std::process::{Command, Output};

fn contract(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../contracts")
        .join(format!("{name}.json"))
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tracenet"))
        .args(args)
        .env_remove("TRACENET_BUDGET")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn verify_holding_contract() {
    let o = run(&["verify", contract("atomic_swap_htlc").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("trustless execution: holds"));
    assert!(out.contains("cooperative trace: --tb(fund_A,int)-->"));
    assert!(!out.contains("strategy:"));
}

#[test]
fn verify_failing_contract() {
    let o = run(&[
        "verify",
        contract("atomic_swap_htlc_equal").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains("trustless execution: fails"));
    assert!(out.contains("--d(10)-->"));
}

#[test]
fn report_and_dot_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.txt");
    let dot = dir.path().join("rg.dot");
    let o = run(&[
        "verify",
        contract("update_no_abort").to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--dot",
        dot.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("strategy:\n  n"));
    assert!(std::fs::read_to_string(&dot)
        .unwrap()
        .starts_with("digraph rg {"));
    let names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.len(), 2, "leftover files: {names:?}");
}

#[test]
fn policy_override() {
    let path = contract("atomic_swap_htlc");
    let o = run(&[
        "verify",
        path.to_str().unwrap(),
        "--policy",
        "balance:A:150",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("policy: balance:int:150"));
    let o = run(&["verify", path.to_str().unwrap(), "--policy", "balance:Z:1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown actor `Z`"));
}

#[test]
fn budget_exhaustion_has_its_own_status() {
    let path = contract("atomic_swap_htlc");
    let o = run(&["graph", path.to_str().unwrap(), "--budget", "50"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("budget of 50"));
    let o = Command::new(env!("CARGO_BIN_EXE_tracenet"))
        .args(["graph", path.to_str().unwrap()])
        .env("TRACENET_BUDGET", "50")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn reorg_depth_flag() {
    let path = contract("one_sided_lock");
    let o = run(&["verify", path.to_str().unwrap(), "--reorg-depth", "1"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stdout(&o).contains("reorg:"));
}

#[test]
fn graph_prints_counts() {
    let o = run(&["graph", contract("one_sided_lock").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("nodes: 32\n"));
}

#[test]
fn stability_after_replay() {
    let path = contract("atomic_swap_htlc");
    let o = run(&[
        "stability",
        path.to_str().unwrap(),
        "--replay",
        "tx:fund_A,tx:fund_B",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("state stability: unstable"));
    let o = run(&[
        "stability",
        path.to_str().unwrap(),
        "--replay",
        "tx:fund_A@A,tx:fund_B@B,tx:swap_A@int,tx:swap_B",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("confirmed: fund_A fund_B swap_A swap_B"));
    let o = run(&[
        "stability",
        path.to_str().unwrap(),
        "--replay",
        "tx:fund_A,d:15,tx:abort_A",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("height: 35"));
}

#[test]
fn replay_errors() {
    let path = contract("atomic_swap_htlc");
    for bad in ["tx:swap_A", "tx:nothing", "x:1", "d:zero", "tx:fund_A@C"] {
        let o = run(&["stability", path.to_str().unwrap(), "--replay", bad]);
        assert_eq!(o.status.code(), Some(2), "{bad}");
    }
}

#[test]
fn update_verdicts() {
    let old = contract("atomic_swap_htlc");
    let o = run(&[
        "update",
        old.to_str().unwrap(),
        contract("update_coop_close").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("update safety: holds"));
    let o = run(&[
        "update",
        old.to_str().unwrap(),
        contract("update_no_abort").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("safe outcomes lost: 2"));
}

#[test]
fn bad_input_files() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"version\": 1,\n  oops\n}\n").unwrap();
    let o = run(&["verify", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    let o = run(&["verify", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cannot read"));
}

#[test]
fn usage_errors() {
    let o = run(&["verify"]);
    assert_eq!(o.status.code(), Some(2));
}

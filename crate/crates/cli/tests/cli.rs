use std::path::Path;
use std::process::{Command, Output};

fn logkv(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_logkv"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LOGKV_THREADS")
        .output()
        .expect("spawn logkv")
}

fn gen(dir: &Path, name: &str) {
    let out = logkv(
        &[
            "gen-trace",
            "--prompt-len",
            "48",
            "--decode-steps",
            "6",
            "--head-dim",
            "16",
            "--seed",
            "5",
            "--out",
            name,
        ],
        dir,
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn gen_validate_run_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "t.kvtr");

    let out = logkv(&["validate", "t.kvtr"], d);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("prompt_len=48"));

    let out = logkv(
        &[
            "run",
            "--trace",
            "t.kvtr",
            "--policy",
            "logquant,kivi",
            "--bits",
            "2,4",
            "--budget",
            "12",
            "--mode",
            "quantize_rest,evict_rest",
            "--out",
            "res",
        ],
        d,
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(d.join("res/metrics.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "trace_id,policy,mode,bits,budget,step,coverage,l1_error,fp_count,q_count,compression_ratio"
    );
    // 2 policies x (2 bit-widths + evict) x (6 steps + mean)
    assert_eq!(csv.lines().count(), 1 + 2 * 3 * 7);
    assert!(d.join("res/run.toml").exists());

    let out = logkv(&["report", "res/metrics.csv", "--out", "table.txt"], d);
    assert_eq!(out.status.code(), Some(0));
    let table = std::fs::read_to_string(d.join("table.txt")).unwrap();
    assert_eq!(table.lines().count(), 1 + 6);
}

#[test]
fn config_file_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("exp.toml"),
        "policies = [\"h2o\"]\nbudgets = [9]\nseed = 3\n[synthetic]\ncount = 2\n[synthetic.spec]\nprompt_len = 20\ndecode_steps = 3\nhead_dim = 8\nspike_min_distance = 4\n",
    )
    .unwrap();
    let run = |out: &str| logkv(&["run", "--config", "exp.toml", "--bits", "4", "--out", out], d);
    assert_eq!(run("a").status.code(), Some(0));
    assert_eq!(run("b").status.code(), Some(0));
    let a = std::fs::read(d.join("a/metrics.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b/metrics.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text
        .lines()
        .skip(1)
        .all(|l| l.contains(",h2o,quantize_rest,4,9,")));
    assert_eq!(text.lines().count(), 1 + 2 * 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "t.kvtr");
    let bytes = std::fs::read(d.join("t.kvtr")).unwrap();
    std::fs::write(d.join("short.kvtr"), &bytes[..bytes.len() - 8]).unwrap();
    std::fs::write(d.join("magic.kvtr"), [b"XXXX".as_slice(), &bytes[4..]].concat()).unwrap();

    let out = logkv(&["validate", "short.kvtr"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("payload short by 8 bytes"));
    let out = logkv(&["validate", "magic.kvtr"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
    assert_eq!(logkv(&["run", "--trace", "short.kvtr"], d).status.code(), Some(2));
    assert_eq!(logkv(&["validate", "missing.kvtr"], d).status.code(), Some(2));

    assert_eq!(
        logkv(&["run", "--trace", "t.kvtr", "--budget", "2"], d)
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        logkv(&["run", "--trace", "t.kvtr", "--bits", "3"], d)
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        logkv(&["run", "--trace", "t.kvtr", "--policy", "nope"], d)
            .status
            .code(),
        Some(1)
    );
    assert_eq!(logkv(&["run"], d).status.code(), Some(1));
    assert_eq!(logkv(&["frobnicate"], d).status.code(), Some(1));
    assert_eq!(
        logkv(&["run", "--config", "absent.toml"], d).status.code(),
        Some(1)
    );
    assert_eq!(logkv(&["--help"], d).status.code(), Some(0));
}

#[test]
fn thread_cap_env() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "t.kvtr");
    let run = |threads: &str, out: &str| {
        Command::new(env!("CARGO_BIN_EXE_logkv"))
            .args(["run", "--trace", "t.kvtr", "--budget", "12", "--out", out])
            .current_dir(d)
            .env("LOGKV_THREADS", threads)
            .output()
            .unwrap()
    };
    assert_eq!(run("1", "one").status.code(), Some(0));
    assert_eq!(run("4", "four").status.code(), Some(0));
    assert_eq!(
        std::fs::read(d.join("one/metrics.csv")).unwrap(),
        std::fs::read(d.join("four/metrics.csv")).unwrap()
    );
    assert_eq!(run("zero", "bad").status.code(), Some(1));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
server = "server-1"

[[users]]
name = "alice"
password = "pw-1"
r_cont = "mailto:alice@recovery.example"
"#;

fn tfa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfa"))
        .current_dir(dir)
        .args(args)
        .env_remove("TFA_SEED")
        .env_remove("TFA_OUT")
        .env_remove("TFA_STORE")
        .output()
        .expect("spawn tfa")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn provision(dir: &Path, store: &str) -> Output {
    fs::write(dir.join("cfg.toml"), CONFIG).unwrap();
    tfa(
        dir,
        &[
            "--seed",
            "7",
            "provision",
            "--config",
            "cfg.toml",
            "--store",
            store,
        ],
    )
}

#[test]
fn provision_writes_four_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = provision(dir.path(), "st");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = fs::read_dir(dir.path().join("st"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "card-alice.card",
            "rc.store",
            "server.store",
            "user-alice.store"
        ]
    );
}

#[test]
fn reprovision_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&provision(dir.path(), "a")), 0);
    assert_eq!(code(&provision(dir.path(), "b")), 0);
    for f in [
        "rc.store",
        "server.store",
        "user-alice.store",
        "card-alice.card",
    ] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn user_naming_unknown_server_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{CONFIG}server = \"server-9\"\n");
    fs::write(dir.path().join("bad.toml"), cfg).unwrap();
    let o = tfa(
        dir.path(),
        &["provision", "--config", "bad.toml", "--store", "st"],
    );
    assert_ne!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown principal"));
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), "server = [").unwrap();
    let o = tfa(
        dir.path(),
        &["provision", "--config", "cfg.toml", "--store", "st"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn empty_suite_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    let o = tfa(dir.path(), &["run", "--suite", "empty", "--out", "out"]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read_to_string(dir.path().join("out/report.jsonl")).unwrap(),
        ""
    );
}

const STORED: &str = r#"
id = "stored-login"
scheme = "proposed"
kind = "session-key"
user = "alice"
password = "pw-1"
trials = 3
stores = "st"
expect = "holds"
"#;

#[test]
fn scenario_runs_against_stores() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&provision(dir.path(), "st")), 0);
    fs::write(dir.path().join("s.toml"), STORED).unwrap();
    let o = tfa(dir.path(), &["run", "s.toml", "--out", "out"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("out/transcripts/stored-login.txt").exists());
}

#[test]
fn corrupted_store_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&provision(dir.path(), "st")), 0);
    let path = dir.path().join("st/server.store");
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    fs::write(&path, bytes).unwrap();
    fs::write(dir.path().join("s.toml"), STORED).unwrap();
    let o = tfa(dir.path(), &["run", "s.toml", "--out", "out"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("integrity"));
}

#[test]
fn unexpected_verdict_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("s.toml"),
        "id = \"x\"\nscheme = \"li\"\nkind = \"replay\"\ntrials = 2\nexpect = \"violated\"\n",
    )
    .unwrap();
    let o = tfa(dir.path(), &["run", "s.toml", "--out", "out"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn paper_attacks_then_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let o = tfa(
        dir.path(),
        &[
            "run",
            "--suite",
            "paper-attacks",
            "--out",
            "out",
            "--jobs",
            "4",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = tfa(dir.path(), &["matrix", "--out", "out"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let row = |name: &str| {
        text.lines().find(|l| l.starts_with(name)).map(|l| {
            l[name.len()..]
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ")
        })
    };
    assert_eq!(row("Prevents Replay Attack").as_deref(), Some("Y Y"));
    assert_eq!(
        row("Prevents Password Guessing Attack").as_deref(),
        Some("Y N")
    );
    assert_eq!(row("Supports Session Key").as_deref(), Some("Y Y"));
}

#[test]
fn matrix_without_results_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = tfa(dir.path(), &["matrix", "--out", "nowhere"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn env_overrides_seed() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    let run = |store: &str, seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_tfa"))
            .current_dir(dir.path())
            .env("TFA_SEED", seed)
            .args(["provision", "--config", "cfg.toml", "--store", store])
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("a", "7")), 0);
    assert_eq!(code(&run("b", "8")), 0);
    assert_ne!(
        fs::read(dir.path().join("a/card-alice.card")).unwrap(),
        fs::read(dir.path().join("b/card-alice.card")).unwrap()
    );
}

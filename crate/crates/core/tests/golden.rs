//! Byte-exact regression files. `TFA_UPDATE_GOLDEN=1` rewrites them.

use std::path::PathBuf;

use rand::RngCore;
use tfa_core::channel::{ProvisionSpec, System};
use tfa_core::crypto::{canonical_id, Rng};
use tfa_core::harness::{run_scenario, suite};

fn golden(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var_os("TFA_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected =
        std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == actual, "{name} drifted from its golden copy");
}

#[test]
fn rng_stream_seed_0() {
    let mut rng = Rng::new(0);
    let mut buf = [0u8; 64];
    rng.fill_bytes(&mut buf);
    let mut text = hex::encode(buf);
    text.push('\n');
    for _ in 0..4 {
        text.push_str(&rng.random_block().to_hex());
        text.push('\n');
    }
    golden("rng_seed0.txt", &text);
}

#[test]
fn provision_and_login_transcript() {
    let mut sys = System::provision(&ProvisionSpec::single("alice", "pw-1"), 42).unwrap();
    let id = canonical_id("alice").unwrap();
    assert!(sys.login(id, "pw-1").unwrap().mutual());
    assert!(!sys.login(id, "pw-2").unwrap().mutual());
    golden("provision_login_seed42.txt", &sys.net.transcript.to_text());
}

#[test]
fn paper_attacks_report_records() {
    let mut jsonl = String::new();
    for s in suite::paper_attacks() {
        jsonl.push_str(&run_scenario(&s).unwrap().verdict.to_json_line());
        jsonl.push('\n');
    }
    golden("paper_attacks.jsonl", &jsonl);
}

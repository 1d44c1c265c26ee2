//! Scenario suites: a directory of `*.toml` files, or the built-in
//! `paper-attacks` suite covering every matrix cell.

use std::path::Path;

use super::{Expect, HarnessError, Kind, Scenario, Scheme};
use crate::channel::attacks::Capabilities;
use crate::ec::CurveProfile;

pub const BUILTIN: &str = "paper-attacks";

/// Expected outcome of the legacy scheme per property.
fn legacy_expect(kind: Kind) -> Expect {
    match kind {
        Kind::Replay | Kind::Dos | Kind::Forgery | Kind::SessionKey => Expect::Holds,
        _ => Expect::Violated,
    }
}

fn capabilities(kind: Kind) -> Capabilities {
    let mut c = Capabilities::default();
    match kind {
        Kind::PasswordGuessing | Kind::Impersonation => c.card = true,
        Kind::KeyStealing | Kind::Masquerade | Kind::MutualAuth => c.database = true,
        _ => {}
    }
    c
}

fn scheme_name(s: Scheme) -> &'static str {
    match s {
        Scheme::Proposed => "proposed",
        Scheme::Li => "li",
    }
}

fn kind_name(k: Kind) -> String {
    serde_json::to_value(k)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

pub fn paper_attacks() -> Vec<Scenario> {
    let mut out = Vec::new();
    for scheme in [Scheme::Proposed, Scheme::Li] {
        for (n, kind) in Kind::ALL.into_iter().enumerate() {
            out.push(Scenario {
                id: format!("{}-{}", scheme_name(scheme), kind_name(kind)),
                scheme,
                kind,
                seed: 0x5eed_0000 + n as u64,
                trials: match kind {
                    Kind::PasswordGuessing
                    | Kind::KeyStealing
                    | Kind::PasswordRecovery
                    | Kind::CardRecovery => 3,
                    _ => 10,
                },
                curve: CurveProfile::Std256,
                capabilities: capabilities(kind),
                dictionary: None,
                dict_size: 2_000,
                user: None,
                password: None,
                stores: None,
                faults: Vec::new(),
                channel_faults: Vec::new(),
                expect: match scheme {
                    Scheme::Proposed => Expect::Holds,
                    Scheme::Li => legacy_expect(kind),
                },
            });
        }
    }
    out
}

/// Resolves `--suite`: the built-in name, or a directory whose `*.toml`
/// files are loaded in name order.
pub fn load_suite(spec: &str) -> Result<Vec<Scenario>, HarnessError> {
    if spec == BUILTIN {
        return Ok(paper_attacks());
    }
    let dir = Path::new(spec);
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e.map_err(|e| HarnessError::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "toml") {
            paths.push(p);
        }
    }
    paths.sort();
    paths.iter().map(|p| Scenario::load(p)).collect()
}

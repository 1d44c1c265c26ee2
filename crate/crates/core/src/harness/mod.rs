//! Scenario files, verdicts, reports and the feature matrix.
//!
//! A [`Scenario`] is a TOML document naming a scheme, a property kind, a
//! seed, a trial count and the adversary's capabilities. Running it yields
//! a [`Verdict`] (deterministic, serialized one per line) and the
//! transcript of everything that crossed the simulated network.

mod run;
pub mod stores;
pub mod suite;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::attacks::Capabilities;
use crate::channel::{ChannelFault, SimError, Transcript};
use crate::ec::CurveProfile;
use crate::li::LiError;
use crate::proposed::store::StoreError;
use crate::proposed::{FaultMode, FaultPoint};

pub use run::run_scenario;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Proposed,
    Li,
}

impl Scheme {
    /// Column label in the comparison matrix.
    pub fn column(self) -> &'static str {
        match self {
            Scheme::Proposed => "S1",
            Scheme::Li => "S5",
        }
    }
}

/// The property a scenario measures; one per matrix row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    PasswordGuessing,
    KeyStealing,
    Impersonation,
    Masquerade,
    Replay,
    PasswordRecovery,
    CardRecovery,
    MutualAuth,
    Dos,
    Forgery,
    SessionKey,
}

impl Kind {
    pub const ALL: [Kind; 11] = [
        Kind::PasswordGuessing,
        Kind::KeyStealing,
        Kind::Impersonation,
        Kind::Masquerade,
        Kind::Replay,
        Kind::PasswordRecovery,
        Kind::CardRecovery,
        Kind::MutualAuth,
        Kind::Dos,
        Kind::Forgery,
        Kind::SessionKey,
    ];

    pub fn row(self) -> &'static str {
        match self {
            Kind::PasswordGuessing => "Prevents Password Guessing Attack",
            Kind::KeyStealing => "Prevents Security Key Stealing",
            Kind::Impersonation => "Prevents User Impersonation Attack",
            Kind::Masquerade => "Prevents Server Masquerading Attack",
            Kind::Replay => "Prevents Replay Attack",
            Kind::PasswordRecovery => "Password Recovery",
            Kind::CardRecovery => "Smart Card Recovery",
            Kind::MutualAuth => "Provides Mutual Authentication",
            Kind::Dos => "Prevents Denial of Service Attack",
            Kind::Forgery => "Prevents Forgery Attack",
            Kind::SessionKey => "Supports Session Key",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expect {
    Holds,
    Violated,
}

impl Expect {
    pub fn of(holds: bool) -> Self {
        if holds {
            Expect::Holds
        } else {
            Expect::Violated
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub point: FaultPoint,
    #[serde(default = "once")]
    pub mode: FaultMode,
}

fn once() -> FaultMode {
    FaultMode::Once
}

fn default_trials() -> u64 {
    10
}

fn default_dict_size() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub scheme: Scheme,
    pub kind: Kind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: u64,
    /// Curve for the legacy scheme.
    #[serde(default)]
    pub curve: CurveProfile,
    #[serde(default)]
    pub capabilities: Capabilities,
    /// Word list, one candidate per line; a seeded synthetic list otherwise.
    #[serde(default)]
    pub dictionary: Option<PathBuf>,
    #[serde(default = "default_dict_size")]
    pub dict_size: usize,
    /// Victim name and password; guessing scenarios draw the password from
    /// the dictionary instead.
    #[serde(default)]
    pub user: Option<String>,
    #[serde(default)]
    pub password: Option<String>,
    /// Directory of provisioned stores to load instead of provisioning.
    #[serde(default)]
    pub stores: Option<PathBuf>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub channel_faults: Vec<ChannelFault>,
    pub expect: Expect,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let s: Scenario = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Reads a scenario; relative paths inside it resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut s = Scenario::parse(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut s.dictionary, &mut s.stores].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.id.trim().is_empty() {
            return Err(HarnessError::Config("scenario id is empty".into()));
        }
        self.capabilities
            .validate()
            .map_err(|e| HarnessError::Config(format!("{}: {e}", self.id)))?;
        if self.scheme == Scheme::Li && (!self.faults.is_empty() || self.stores.is_some()) {
            return Err(HarnessError::Config(format!(
                "{}: faults and stores apply to the proposed scheme only",
                self.id
            )));
        }
        if self.dict_size == 0 && self.dictionary.is_none() {
            return Err(HarnessError::Config(format!(
                "{}: empty dictionary",
                self.id
            )));
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(curve) = o.curve {
            self.curve = curve;
        }
        if let Some(dict) = &o.dict {
            self.dictionary = Some(dict.clone());
        }
        if let (Some(dir), Scheme::Proposed) = (&o.stores, self.scheme) {
            self.stores = Some(dir.clone());
        }
    }
}

/// Command-line settings that win over scenario files.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub curve: Option<CurveProfile>,
    pub dict: Option<PathBuf>,
    /// Provisioned stores for proposed-scheme scenarios.
    pub stores: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("legacy scheme: {0}")]
    Legacy(#[from] LiError),
    #[error("matrix: {0}")]
    Matrix(String),
}

impl From<crate::crypto::CryptoError> for HarnessError {
    fn from(e: crate::crypto::CryptoError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_owned(),
            source,
        }
    }

    /// 2 for configuration and I/O problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_)
            | HarnessError::Io { .. }
            | HarnessError::Store(_)
            | HarnessError::Matrix(_) => 2,
            HarnessError::Sim(_) | HarnessError::Legacy(_) => 1,
        }
    }
}

/// Outcome of one scenario. Contains nothing that depends on wall time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub scenario: String,
    pub scheme: Scheme,
    pub kind: Kind,
    pub property: String,
    pub seed: u64,
    pub trials: u64,
    pub holds: bool,
    pub expected: Expect,
    pub matched: bool,
    pub attack_attempts: u64,
    pub attack_successes: u64,
    pub transcript_lines: usize,
    pub transcript_digest: String,
    pub details: BTreeMap<String, serde_json::Value>,
}

impl Verdict {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("verdicts serialize")
    }
}

#[derive(Clone, Debug)]
pub struct Run {
    pub verdict: Verdict,
    pub transcript: Transcript,
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub runs: Vec<(Run, Duration)>,
}

impl Report {
    pub fn verdicts(&self) -> impl Iterator<Item = &Verdict> {
        self.runs.iter().map(|(r, _)| &r.verdict)
    }

    pub fn all_matched(&self) -> bool {
        self.verdicts().all(|v| v.matched)
    }

    pub fn exit_code(&self) -> i32 {
        if self.all_matched() {
            0
        } else {
            1
        }
    }

    pub fn jsonl(&self) -> String {
        let mut out = String::new();
        for v in self.verdicts() {
            out.push_str(&v.to_json_line());
            out.push('\n');
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<28} {:<3} {:<18} {:>7} {:>9} {:<8} {:<8} {:>9}",
            "scenario", "col", "kind", "trials", "attacks", "result", "expect", "ms"
        );
        for (run, time) in &self.runs {
            let v = &run.verdict;
            let _ = writeln!(
                out,
                "{:<28} {:<3} {:<18} {:>7} {:>4}/{:<4} {:<8} {:<8} {:>9}{}",
                v.scenario,
                v.scheme.column(),
                format!("{:?}", v.kind),
                v.trials,
                v.attack_successes,
                v.attack_attempts,
                if v.holds { "holds" } else { "violated" },
                if v.expected == Expect::Holds {
                    "holds"
                } else {
                    "violated"
                },
                time.as_millis(),
                if v.matched { "" } else { "  MISMATCH" }
            );
        }
        let matched = self.verdicts().filter(|v| v.matched).count();
        let _ = writeln!(out, "{matched}/{} scenarios as expected", self.runs.len());
        out
    }

    pub fn matrix(&self) -> Result<Matrix, HarnessError> {
        let v: Vec<Verdict> = self.verdicts().cloned().collect();
        Matrix::from_verdicts(&v)
    }
}

/// Runs scenarios on up to `jobs` threads; results keep input order.
pub fn run_all(scenarios: &[Scenario], jobs: usize) -> Result<Report, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let results: Vec<Result<(Run, Duration), HarnessError>> = pool.install(|| {
        scenarios
            .par_iter()
            .map(|s| {
                let t = Instant::now();
                run_scenario(s).map(|r| (r, t.elapsed()))
            })
            .collect()
    });
    let mut report = Report::default();
    for r in results {
        report.runs.push(r?);
    }
    Ok(report)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Verdict>, HarnessError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::Config(e.to_string())))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatrixRow {
    pub property: &'static str,
    pub s1: bool,
    pub s5: bool,
    /// Scenario ids behind each cell.
    pub evidence: (Vec<String>, Vec<String>),
}

/// The comparison matrix, every cell computed from verdicts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matrix {
    pub rows: Vec<MatrixRow>,
}

impl Matrix {
    /// A cell is `Y` when the property held in every scenario of that row
    /// and scheme.
    pub fn from_verdicts(verdicts: &[Verdict]) -> Result<Self, HarnessError> {
        let mut rows = Vec::new();
        for kind in Kind::ALL {
            let cell = |scheme: Scheme| -> Result<(bool, Vec<String>), HarnessError> {
                let vs: Vec<&Verdict> = verdicts
                    .iter()
                    .filter(|v| v.kind == kind && v.scheme == scheme)
                    .collect();
                if vs.is_empty() {
                    return Err(HarnessError::Matrix(format!(
                        "no {} result for \"{}\"",
                        scheme.column(),
                        kind.row()
                    )));
                }
                Ok((
                    vs.iter().all(|v| v.holds),
                    vs.iter().map(|v| v.scenario.clone()).collect(),
                ))
            };
            let (s1, e1) = cell(Scheme::Proposed)?;
            let (s5, e5) = cell(Scheme::Li)?;
            rows.push(MatrixRow {
                property: kind.row(),
                s1,
                s5,
                evidence: (e1, e5),
            });
        }
        Ok(Matrix { rows })
    }

    pub fn cell(&self, property: &str, scheme: Scheme) -> Option<bool> {
        let row = self.rows.iter().find(|r| r.property == property)?;
        Some(match scheme {
            Scheme::Proposed => row.s1,
            Scheme::Li => row.s5,
        })
    }

    pub fn render(&self) -> String {
        let yn = |b: bool| if b { "Y" } else { "N" };
        let mut out = format!("{:<40}{:<4}{}\n", "Properties", "S1", "S5");
        for r in &self.rows {
            let _ = writeln!(out, "{:<40}{:<4}{}", r.property, yn(r.s1), yn(r.s5));
        }
        out
    }

    /// The table plus the scenarios behind every cell.
    pub fn render_traced(&self) -> String {
        let mut out = self.render();
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}: S1 <- {}; S5 <- {}",
                r.property,
                r.evidence.0.join(", "),
                r.evidence.1.join(", ")
            );
        }
        out
    }
}

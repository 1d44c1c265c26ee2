//! Adversary strategies against the proposed scheme, played through a
//! [`System`]: replay, offline guessing, impersonation, masquerading,
//! database theft, flooding and in-flight modification.
//!
//! The adversary only touches the insecure channel: it reads
//! [`Network::observe_from`], injects with spoofed senders and, when it sits
//! in the middle, receives diverted traffic.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{observed_sessions, proposed_view, ObservedSession, PW};
use super::{SimError, System};
use crate::crypto::{hash, open_block64, Block32, Rng};
use crate::envelope::{Envelope, FieldId, Phase, Stat};
use crate::li::attacks::{Dictionary, GuessHit, NotFound};
use crate::proposed::{
    derive_bp, derive_xs_from_card, make_challenge, make_login_pair, recover_rn2, Addr, Event,
    ProposedCard, StepError, UserTask,
};
use crate::symbolic::{atom, guessing_verifiers};

/// What the adversary holds besides the insecure channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Capabilities {
    pub card: bool,
    pub password: bool,
    pub biometric: bool,
    /// A copy of the server's (and, for the proposed scheme, the RC's)
    /// database, without at-rest keys.
    pub database: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("card, password and biometric together are outside the adversary model")]
pub struct AllFactors;

impl Capabilities {
    pub fn validate(&self) -> Result<(), AllFactors> {
        if self.card && self.password && self.biometric {
            Err(AllFactors)
        } else {
            Ok(())
        }
    }
}

/// Acceptances and rejection reasons over a batch of attempts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub attempts: u64,
    pub accepted: u64,
    pub rejections: BTreeMap<String, u64>,
}

impl Tally {
    fn reject(&mut self, why: impl Into<String>) {
        *self.rejections.entry(why.into()).or_insert(0) += 1;
    }

    fn merge(&mut self, other: &Tally) {
        self.attempts += other.attempts;
        self.accepted += other.accepted;
        for (k, v) in &other.rejections {
            *self.rejections.entry(k.clone()).or_insert(0) += v;
        }
    }
}

pub fn error_label(e: &StepError) -> String {
    match e {
        StepError::VerificationFailure(c) => format!("{c:?}"),
        StepError::IllegalStat { .. } => "IllegalStat".into(),
        StepError::UnknownPrincipal => "UnknownPrincipal".into(),
        StepError::Malformed(_) => "Malformed".into(),
    }
}

fn discards_by(sys: &System, mark: usize, by: &Addr) -> Vec<StepError> {
    sys.events[mark..]
        .iter()
        .filter_map(|e| match e {
            Event::Discarded { by: b, error, .. } if b == by => Some(error.clone()),
            _ => None,
        })
        .collect()
}

fn authenticated(sys: &System, mark: usize, by: &Addr) -> bool {
    sys.events[mark..]
        .iter()
        .any(|e| matches!(e, Event::PeerAuthenticated { by: b } if b == by))
}

fn login_envelope(id: &Block32, sid: &Block32, m1: &Block32, m2: &Block32) -> Envelope {
    Envelope::new(Phase::Login, Stat::Login)
        .with(FieldId::Id, id.0)
        .with(FieldId::Sid, sid.0)
        .with(FieldId::M1, m1.0)
        .with(FieldId::M2, m2.0)
}

fn challenge_envelope(id: &Block32, sid: &Block32, m4: &Block32, m5: &Block32) -> Envelope {
    Envelope::new(Phase::Login, Stat::Auth)
        .with(FieldId::Id, id.0)
        .with(FieldId::Sid, sid.0)
        .with(FieldId::M4, m4.0)
        .with(FieldId::M5, m5.0)
}

/// Runs `n` honest logins and returns what the adversary saw of them.
pub fn capture_logins(
    sys: &mut System,
    id: Block32,
    pw: &str,
    n: usize,
) -> Result<Vec<ObservedSession>, SimError> {
    let start = sys.net.transcript.len();
    for _ in 0..n {
        let out = sys.login(id, pw)?;
        if !out.mutual() {
            return Err(SimError::PhaseFailed {
                phase: Phase::Login,
                reason: "honest login failed".into(),
            });
        }
    }
    let seen = sys.net.observe_from(start);
    Ok(observed_sessions(&seen, &id))
}

// ---------------------------------------------------------------------------
// Replay

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub scenarios: u64,
    /// Fresh challenges the server issued to replayed login pairs.
    pub fresh_challenges: u64,
    pub tally: Tally,
}

/// For each scenario: capture an honest login, replay `{M1, M2}` and answer
/// the fresh challenge with the captured `M7`; then replay the captured
/// login and confirmation back to back, verbatim.
pub fn replay_attack(
    sys: &mut System,
    id: Block32,
    pw: &str,
    scenarios: u64,
) -> Result<ReplayReport, SimError> {
    let sid = sys.sid();
    let server = Addr::Server(sid);
    let mut report = ReplayReport::default();
    for _ in 0..scenarios {
        let sessions = capture_logins(sys, id, pw, 1)?;
        let old = sessions.last().ok_or(SimError::PhaseFailed {
            phase: Phase::Login,
            reason: "nothing captured".into(),
        })?;
        let confirmation = old.confirmation.clone().ok_or(SimError::PhaseFailed {
            phase: Phase::Login,
            reason: "no confirmation captured".into(),
        })?;
        report.scenarios += 1;

        let mark = sys.events.len();
        sys.inject(Addr::Adversary, server.clone(), &old.login)?;
        let fresh = sys
            .net
            .take_inbox()
            .into_iter()
            .find(|(_, e)| e.stat == Stat::Auth)
            .and_then(|(_, e)| e.block32(FieldId::M4).ok());
        if fresh.is_some() && fresh != old.m4() {
            report.fresh_challenges += 1;
        }
        sys.inject(Addr::Adversary, server.clone(), &confirmation)?;
        tally_server(sys, mark, &server, &mut report.tally);

        let mark = sys.events.len();
        sys.net.inject(Addr::Adversary, server.clone(), &old.login);
        sys.net
            .inject(Addr::Adversary, server.clone(), &confirmation);
        sys.pump()?;
        sys.net.take_inbox();
        tally_server(sys, mark, &server, &mut report.tally);
    }
    Ok(report)
}

fn tally_server(sys: &System, mark: usize, server: &Addr, t: &mut Tally) {
    t.attempts += 1;
    if authenticated(sys, mark, server) {
        t.accepted += 1;
    }
    for e in discards_by(sys, mark, server) {
        t.reject(error_label(&e));
    }
}

// ---------------------------------------------------------------------------
// Offline guessing

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuessReport {
    pub candidates: usize,
    /// Candidates the adversary could tell apart from the rest.
    pub distinguishable: usize,
    pub evaluations: usize,
    pub verifiers: Vec<String>,
    pub fixpoint_rounds: usize,
    /// Modelled wire values checked against real bytes.
    pub model_bindings: usize,
    /// Secrets found derivable from card plus transcript.
    pub leaked: Vec<String>,
    pub recovered: Option<String>,
}

/// Dictionary attack with a stolen card and observed logins.
///
/// The adversary's derivation engine looks for any way to test a guess;
/// without one, no candidate can be told apart from the others and the
/// dictionary is never evaluated. `check` optionally ties the model to the
/// run's audited secrets and the victim's password.
pub fn offline_guess_proposed(
    card: &ProposedCard,
    sessions: &[ObservedSession],
    dict: &Dictionary,
    check: Option<(&crate::proposed::actors::Audit, &str)>,
) -> Result<GuessReport, String> {
    let view = proposed_view(card, sessions);
    let model_bindings = match check {
        Some((audit, pw)) => view.check_against(audit, pw)?,
        None => 0,
    };
    let k = view.knowledge();
    let verifiers = guessing_verifiers(&k, &atom(PW));
    let leaked = view
        .secrets()
        .iter()
        .filter(|s| k.derivable(s))
        .map(|s| format!("{s:?}"))
        .collect();
    let mut report = GuessReport {
        candidates: dict.len(),
        verifiers: verifiers.iter().map(|v| format!("{v:?}")).collect(),
        fixpoint_rounds: k.rounds,
        model_bindings,
        leaked,
        ..Default::default()
    };
    if !verifiers.is_empty() {
        report.distinguishable = dict.len();
    }
    Ok(report)
}

/// Out of model: the same attack when the adversary also holds `B`. It
/// opens `QX`, rebuilds `X_s` per guess and checks a captured `M1`.
pub fn offline_guess_with_biokey(
    card: &ProposedCard,
    session: &ObservedSession,
    b: &Block32,
    dict: &Dictionary,
) -> Result<GuessHit, NotFound> {
    let tc = card
        .qx
        .as_ref()
        .and_then(|qx| open_block64(qx, &crate::crypto::kdf_biokey(b)).ok());
    let Some(tc) = tc else {
        return Err(NotFound { evaluations: 0 });
    };
    let mut evaluations = 0;
    for candidate in dict.words() {
        evaluations += 1;
        let Ok(bp) = derive_bp(candidate, b) else {
            continue;
        };
        let xs = derive_xs_from_card(&tc, &bp);
        let rn2 = recover_rn2(&card.id, &xs, &session.m2);
        if make_login_pair(&card.id, &xs, &rn2).0 == session.m1 {
            return Ok(GuessHit {
                password: candidate.clone(),
                evaluations,
            });
        }
    }
    Err(NotFound { evaluations })
}

// ---------------------------------------------------------------------------
// Impersonation

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForgeStrategy {
    /// Fresh random `M1`, `M2`.
    Random,
    /// A captured `M2` with a fresh `M1`.
    MaskReuse,
    /// A captured `M1` with a fresh `M2`.
    StaleProof,
    /// Recombination of captured values: any hash-form value as `M1`, an
    /// xor of captured masked values as `M2`.
    Algebraic,
    /// `M1`, `M2` built from a key candidate lifted from the database.
    StolenKey,
}

/// Forged login requests without `X_s`. A request counts as accepted when
/// the server answers it with a challenge.
pub fn impersonation_attempt_proposed(
    sys: &mut System,
    id: Block32,
    pw: &str,
    attempts: u64,
    stolen: &[Block32],
    rng: &mut Rng,
) -> Result<BTreeMap<ForgeStrategy, Tally>, SimError> {
    let sid = sys.sid();
    let server = Addr::Server(sid);
    let seen = capture_logins(sys, id, pw, 2)?;
    let mut strategies = vec![
        ForgeStrategy::Random,
        ForgeStrategy::MaskReuse,
        ForgeStrategy::StaleProof,
        ForgeStrategy::Algebraic,
    ];
    if !stolen.is_empty() {
        strategies.push(ForgeStrategy::StolenKey);
    }
    let mut out: BTreeMap<ForgeStrategy, Tally> = BTreeMap::new();
    for n in 0..attempts {
        let strategy = strategies[n as usize % strategies.len()];
        let (m1, m2) = forge_login(strategy, &seen, &id, stolen, n, rng);
        let mark = sys.events.len();
        sys.inject(
            Addr::Adversary,
            server.clone(),
            &login_envelope(&id, &sid, &m1, &m2),
        )?;
        let challenged = sys
            .net
            .take_inbox()
            .iter()
            .any(|(_, e)| e.stat == Stat::Auth && e.get(FieldId::M4).is_some());
        let t = out.entry(strategy).or_default();
        t.attempts += 1;
        if challenged || authenticated(sys, mark, &server) {
            t.accepted += 1;
        }
        for e in discards_by(sys, mark, &server) {
            t.reject(error_label(&e));
        }
    }
    Ok(out)
}

fn forge_login(
    strategy: ForgeStrategy,
    seen: &[ObservedSession],
    id: &Block32,
    stolen: &[Block32],
    n: u64,
    rng: &mut Rng,
) -> (Block32, Block32) {
    let pick = |rng: &mut Rng| &seen[rng.gen_range(0..seen.len())];
    match strategy {
        ForgeStrategy::Random => (rng.random_block(), rng.random_block()),
        ForgeStrategy::MaskReuse => (rng.random_block(), pick(rng).m2),
        ForgeStrategy::StaleProof => (pick(rng).m1, rng.random_block()),
        ForgeStrategy::Algebraic => {
            let s = pick(rng);
            let hashes: Vec<Block32> = [Some(s.m1), s.m4(), s.m7()].into_iter().flatten().collect();
            let masks: Vec<Block32> = seen
                .iter()
                .flat_map(|s| [Some(s.m2), s.m5()])
                .flatten()
                .collect();
            let m1 = hashes[rng.gen_range(0..hashes.len())];
            let mut m2 = Block32::ZERO;
            let mut used = 0;
            for m in &masks {
                if rng.gen_range(0..2) == 1 {
                    m2 = m2 ^ *m;
                    used += 1;
                }
            }
            if used == 0 || (used == 1 && m1 == s.m1 && m2 == s.m2) {
                m2 = m2 ^ masks[masks.len() - 1] ^ masks[0];
            }
            (m1, m2)
        }
        ForgeStrategy::StolenKey => {
            let xs = stolen[n as usize % stolen.len()];
            make_login_pair(id, &xs, &rng.random_block())
        }
    }
}

// ---------------------------------------------------------------------------
// Masquerading

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MasqueradeStrategy {
    Random,
    /// A captured challenge from an earlier session.
    Replay,
    /// The user's own request reflected back as the challenge.
    Reflect,
    /// A captured `M4` with `M5` shifted by the change in `M2`.
    Algebraic,
    StolenKey,
}

/// The adversary sits between user and server and answers every login
/// request itself. A forged challenge counts as accepted when the user
/// authenticates the "server".
pub fn masquerade_attempt_proposed(
    sys: &mut System,
    id: Block32,
    pw: &str,
    attempts: u64,
    stolen: &[Block32],
    rng: &mut Rng,
) -> Result<BTreeMap<MasqueradeStrategy, Tally>, SimError> {
    let sid = sys.sid();
    let server = Addr::Server(sid);
    let user = Addr::User(id);
    let seen = capture_logins(sys, id, pw, 2)?;
    let mut strategies = vec![
        MasqueradeStrategy::Random,
        MasqueradeStrategy::Replay,
        MasqueradeStrategy::Reflect,
        MasqueradeStrategy::Algebraic,
    ];
    if !stolen.is_empty() {
        strategies.push(MasqueradeStrategy::StolenKey);
    }
    sys.net.divert.insert(server.clone());
    let mut out: BTreeMap<MasqueradeStrategy, Tally> = BTreeMap::new();
    let mut n = 0u64;
    while n < attempts {
        let latest = |sys: &mut System| {
            sys.net
                .take_inbox()
                .into_iter()
                .filter(|(from, e)| *from == user && e.stat == Stat::Login)
                .map(|(_, e)| e)
                .next_back()
        };
        let req = match latest(sys) {
            Some(r) => r,
            None => {
                if let Some(u) = sys.users.get_mut(&id) {
                    u.abandon();
                }
                sys.begin(id, UserTask::Login { pw: pw.into() })?;
                latest(sys).ok_or(SimError::PhaseFailed {
                    phase: Phase::Login,
                    reason: "user sent no login request".into(),
                })?
            }
        };
        let strategy = strategies[n as usize % strategies.len()];
        let reply = forge_challenge(strategy, &seen, &req, &id, &sid, stolen, n, rng);
        let mark = sys.events.len();
        sys.inject(server.clone(), user.clone(), &reply)?;
        n += 1;
        let t = out.entry(strategy).or_default();
        t.attempts += 1;
        if authenticated(sys, mark, &user) {
            t.accepted += 1;
        }
        for e in discards_by(sys, mark, &user) {
            t.reject(error_label(&e));
        }
    }
    sys.net.divert.remove(&server);
    sys.net.take_inbox();
    if let Some(u) = sys.users.get_mut(&id) {
        u.abandon();
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn forge_challenge(
    strategy: MasqueradeStrategy,
    seen: &[ObservedSession],
    req: &Envelope,
    id: &Block32,
    sid: &Block32,
    stolen: &[Block32],
    n: u64,
    rng: &mut Rng,
) -> Envelope {
    let m1 = req.block32(FieldId::M1).unwrap_or(Block32::ZERO);
    let m2 = req.block32(FieldId::M2).unwrap_or(Block32::ZERO);
    let old = &seen[n as usize % seen.len()];
    let (m4, m5) = match strategy {
        MasqueradeStrategy::Random => (rng.random_block(), rng.random_block()),
        MasqueradeStrategy::Replay => (
            old.m4().unwrap_or(Block32::ZERO),
            old.m5().unwrap_or(Block32::ZERO),
        ),
        MasqueradeStrategy::Reflect => (m1, m2),
        MasqueradeStrategy::Algebraic => (
            old.m4().unwrap_or(Block32::ZERO),
            old.m5().unwrap_or(Block32::ZERO) ^ old.m2 ^ m2,
        ),
        MasqueradeStrategy::StolenKey => {
            let xs = stolen[n as usize % stolen.len()];
            let rn2 = recover_rn2(id, &xs, &m2);
            make_challenge(id, &xs, &rn2, &rng.random_block())
        }
    };
    challenge_envelope(id, sid, &m4, &m5)
}

// ---------------------------------------------------------------------------
// Database theft

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyScan {
    /// 32-byte windows tried as key candidates.
    pub windows: usize,
    /// Candidates that explain a captured login.
    pub validated: Vec<Block32>,
    /// Audited secret blocks found anywhere in the database bytes.
    pub plaintext_secrets: usize,
}

/// Slides over `db` and keeps every 32-byte window that `validate` accepts.
pub fn scan_windows(db: &[u8], validate: impl Fn(&Block32) -> bool) -> (usize, Vec<Block32>) {
    let mut hits = Vec::new();
    let mut windows = 0;
    for w in db.windows(32) {
        windows += 1;
        let cand = Block32(w.try_into().expect("32-byte window"));
        if validate(&cand) && !hits.contains(&cand) {
            hits.push(cand);
        }
    }
    (windows, hits)
}

/// Steals both databases and looks for any value that works as `X_s`
/// against a captured login, plus any audited secret in the clear.
pub fn steal_keys_proposed(sys: &mut System, id: Block32, pw: &str) -> Result<KeyScan, SimError> {
    let seen = capture_logins(sys, id, pw, 1)?;
    let s = seen.last().cloned().ok_or(SimError::PhaseFailed {
        phase: Phase::Login,
        reason: "nothing captured".into(),
    })?;
    let validate = |x: &Block32| {
        let rn2 = recover_rn2(&id, x, &s.m2);
        make_login_pair(&id, x, &rn2).0 == s.m1
    };
    let mut scan = KeyScan::default();
    let secrets = sys.audit.secret_blocks();
    for db in [
        sys.rc.store.database_bytes(),
        sys.server.store.database_bytes(),
    ] {
        let (w, hits) = scan_windows(&db, validate);
        scan.windows += w;
        scan.validated.extend(hits);
        scan.plaintext_secrets += db
            .windows(32)
            .filter(|w| secrets.contains(<&[u8; 32]>::try_from(*w).expect("window")))
            .count();
    }
    Ok(scan)
}

// ---------------------------------------------------------------------------
// Flooding

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FloodReport {
    pub injected: u64,
    pub rejections: BTreeMap<String, u64>,
    pub state_unchanged: bool,
    pub honest_login_after: bool,
    pub open_sessions_after: usize,
}

/// Junk and well-formed-but-bogus traffic at server and user, then an
/// honest login.
pub fn flood_proposed(
    sys: &mut System,
    id: Block32,
    pw: &str,
    count: u64,
    rng: &mut Rng,
) -> Result<FloodReport, SimError> {
    let sid = sys.sid();
    let server = Addr::Server(sid);
    let before = (sys.server.store.clone(), sys.rc.store.clone());
    let mut report = FloodReport::default();
    let mark = sys.events.len();
    for n in 0..count {
        let r = (rng.random_block(), rng.random_block());
        match n % 6 {
            0 => {
                let len = 1 + rng.gen_range(0..96);
                let junk = (0..len).map(|_| rng.gen_range(0..256) as u8).collect();
                sys.net.inject_raw(Addr::Adversary, server.clone(), junk);
            }
            1 => sys.net.inject(
                Addr::Adversary,
                server.clone(),
                &login_envelope(&r.0, &sid, &r.1, &r.0),
            ),
            2 => sys.net.inject(
                Addr::Adversary,
                server.clone(),
                &login_envelope(&id, &sid, &r.0, &r.1),
            ),
            3 => sys.net.inject(
                Addr::Adversary,
                server.clone(),
                &Envelope::new(Phase::Login, Stat::Auth)
                    .with(FieldId::Id, id.0)
                    .with(FieldId::Sid, sid.0)
                    .with(FieldId::M7, r.0 .0),
            ),
            4 => sys.net.inject(
                Addr::Adversary,
                server.clone(),
                &Envelope::new(Phase::PasswordChange, Stat::Done)
                    .with(FieldId::Id, id.0)
                    .with(FieldId::Sid, sid.0),
            ),
            _ => sys.net.inject(
                server.clone(),
                Addr::User(id),
                &challenge_envelope(&id, &sid, &r.0, &r.1),
            ),
        }
        report.injected += 1;
        sys.pump()?;
        sys.net.take_inbox();
    }
    for e in sys.events[mark..].iter() {
        if let Event::Discarded { error, .. } = e {
            *report.rejections.entry(error_label(error)).or_insert(0) += 1;
        }
    }
    report.state_unchanged = sys.server.store == before.0 && sys.rc.store == before.1;
    report.open_sessions_after = sys.server.open_sessions();
    report.honest_login_after = sys.login(id, pw)?.mutual();
    Ok(report)
}

// ---------------------------------------------------------------------------
// In-flight modification

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForgeryTarget {
    /// A bit of `M1` or `M2` flipped on the way to the server.
    Request,
    /// A bit of `M4` or `M5` flipped on the way to the user.
    Challenge,
    /// A bit of `M7` flipped on the way to the server.
    Confirmation,
    /// `M1` of the live request spliced with `M2` of a captured one.
    Splice,
}

/// Man in the middle of honest logins, modifying one message per attempt.
/// An attempt is accepted when the receiver of the modified message goes
/// on as if it were genuine.
pub fn forgery_proposed(
    sys: &mut System,
    id: Block32,
    pw: &str,
    attempts: u64,
    rng: &mut Rng,
) -> Result<BTreeMap<ForgeryTarget, Tally>, SimError> {
    let sid = sys.sid();
    let (server, user) = (Addr::Server(sid), Addr::User(id));
    let seen = capture_logins(sys, id, pw, 1)?;
    sys.net.divert.insert(server.clone());
    sys.net.divert.insert(user.clone());
    let targets = [
        ForgeryTarget::Request,
        ForgeryTarget::Challenge,
        ForgeryTarget::Confirmation,
        ForgeryTarget::Splice,
    ];
    let mut out: BTreeMap<ForgeryTarget, Tally> = BTreeMap::new();
    for n in 0..attempts {
        let target = targets[n as usize % targets.len()];
        if let Some(u) = sys.users.get_mut(&id) {
            u.abandon();
        }
        sys.net.take_inbox();
        sys.begin(id, UserTask::Login { pw: pw.into() })?;
        let mut t = Tally {
            attempts: 1,
            ..Default::default()
        };
        let relay = |sys: &mut System, want: Stat, from: &Addr| -> Option<Envelope> {
            sys.net
                .take_inbox()
                .into_iter()
                .find(|(f, e)| f == from && e.stat == want)
                .map(|(_, e)| e)
        };
        let Some(mut req) = relay(sys, Stat::Login, &user) else {
            continue;
        };
        if matches!(target, ForgeryTarget::Request | ForgeryTarget::Splice) {
            if target == ForgeryTarget::Splice {
                let old = &seen[0].m2;
                *req.get_mut(FieldId::M2).expect("M2") = old.0.to_vec();
            } else {
                flip_bit(&mut req, [FieldId::M1, FieldId::M2], rng);
            }
            let mark = sys.events.len();
            sys.inject(user.clone(), server.clone(), &req)?;
            if relay(sys, Stat::Auth, &server).is_some() {
                t.accepted += 1;
            }
            for e in discards_by(sys, mark, &server) {
                t.reject(error_label(&e));
            }
            out.entry(target).or_default().merge(&t);
            continue;
        }
        sys.inject(user.clone(), server.clone(), &req)?;
        let Some(mut challenge) = relay(sys, Stat::Auth, &server) else {
            continue;
        };
        if target == ForgeryTarget::Challenge {
            flip_bit(&mut challenge, [FieldId::M4, FieldId::M5], rng);
            let mark = sys.events.len();
            sys.inject(server.clone(), user.clone(), &challenge)?;
            if authenticated(sys, mark, &user) {
                t.accepted += 1;
            }
            for e in discards_by(sys, mark, &user) {
                t.reject(error_label(&e));
            }
            out.entry(target).or_default().merge(&t);
            continue;
        }
        sys.inject(server.clone(), user.clone(), &challenge)?;
        let Some(mut confirm) = relay(sys, Stat::Auth, &user) else {
            continue;
        };
        flip_bit(&mut confirm, [FieldId::M7, FieldId::M7], rng);
        let mark = sys.events.len();
        sys.inject(user.clone(), server.clone(), &confirm)?;
        if authenticated(sys, mark, &server) {
            t.accepted += 1;
        }
        for e in discards_by(sys, mark, &server) {
            t.reject(error_label(&e));
        }
        out.entry(target).or_default().merge(&t);
    }
    sys.net.divert.clear();
    sys.net.take_inbox();
    if let Some(u) = sys.users.get_mut(&id) {
        u.abandon();
    }
    Ok(out)
}

fn flip_bit(env: &mut Envelope, fields: [FieldId; 2], rng: &mut Rng) {
    let field = fields[rng.gen_range(0..2)];
    if let Some(bytes) = env.get_mut(field) {
        let bit = rng.gen_range(0..bytes.len() * 8);
        bytes[bit / 8] ^= 1 << (bit % 8);
    }
}

/// `h(ID ∥ X)` for a key candidate, used by callers validating against a
/// legacy transcript.
pub fn legacy_m1(id: &Block32, x: &Block32) -> Block32 {
    hash([id.into(), x.into()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ProvisionSpec;
    use crate::crypto::canonical_id;

    fn alice(seed: u64) -> (System, Block32) {
        let sys = System::provision(&ProvisionSpec::single("alice", "pw-1"), seed).unwrap();
        (sys, canonical_id("alice").unwrap())
    }

    #[test]
    fn three_factors_are_out_of_model() {
        let all = Capabilities {
            card: true,
            password: true,
            biometric: true,
            database: false,
        };
        assert_eq!(all.validate(), Err(AllFactors));
        assert!(Capabilities {
            biometric: false,
            ..all
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn replays_fail_at_the_confirmation_check() {
        let (mut sys, id) = alice(11);
        let r = replay_attack(&mut sys, id, "pw-1", 5).unwrap();
        assert_eq!(r.scenarios, 5);
        assert_eq!(r.fresh_challenges, 5);
        assert_eq!(r.tally.accepted, 0);
        assert_eq!(r.tally.attempts, 10);
        assert_eq!(
            r.tally.rejections,
            BTreeMap::from([("Confirmation".into(), 10)])
        );
        assert!(sys.login(id, "pw-1").unwrap().mutual());
    }

    #[test]
    fn forged_requests_are_rejected() {
        let (mut sys, id) = alice(12);
        let mut rng = Rng::new(5);
        let out = impersonation_attempt_proposed(
            &mut sys,
            id,
            "pw-1",
            200,
            &[rng.random_block()],
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.len(), 5);
        for (s, t) in &out {
            assert_eq!(t.accepted, 0, "{s:?}");
            assert_eq!(t.rejections.get("LoginRequest"), Some(&t.attempts), "{s:?}");
        }
    }

    #[test]
    fn forged_challenges_are_rejected() {
        let (mut sys, id) = alice(13);
        let mut rng = Rng::new(6);
        let out = masquerade_attempt_proposed(&mut sys, id, "pw-1", 100, &[], &mut rng).unwrap();
        let total: u64 = out.values().map(|t| t.attempts).sum();
        assert_eq!(total, 100);
        for (s, t) in &out {
            assert_eq!(t.accepted, 0, "{s:?}");
            assert_eq!(
                t.rejections.get("ServerChallenge"),
                Some(&t.attempts),
                "{s:?} {t:?}"
            );
        }
        assert!(sys.login(id, "pw-1").unwrap().mutual());
    }

    #[test]
    fn honest_masquerade_sanity_with_the_real_key() {
        let (mut sys, id) = alice(14);
        let xs = Block32::from_slice(sys.audit.latest("xs").unwrap()).unwrap();
        let mut rng = Rng::new(7);
        let out = masquerade_attempt_proposed(&mut sys, id, "pw-1", 10, &[xs], &mut rng).unwrap();
        assert_eq!(out[&MasqueradeStrategy::StolenKey].accepted, 2);
    }

    #[test]
    fn stores_hold_no_usable_key() {
        let (mut sys, id) = alice(15);
        let scan = steal_keys_proposed(&mut sys, id, "pw-1").unwrap();
        assert!(scan.windows > 100);
        assert!(scan.validated.is_empty());
        assert_eq!(scan.plaintext_secrets, 0);
    }

    #[test]
    fn flood_leaves_the_system_usable() {
        let (mut sys, id) = alice(16);
        let mut rng = Rng::new(8);
        let r = flood_proposed(&mut sys, id, "pw-1", 60, &mut rng).unwrap();
        assert_eq!(r.injected, 60);
        assert!(r.state_unchanged);
        assert!(r.honest_login_after);
        assert_eq!(r.open_sessions_after, 0);
    }

    #[test]
    fn modified_messages_are_rejected() {
        let (mut sys, id) = alice(17);
        let mut rng = Rng::new(9);
        let out = forgery_proposed(&mut sys, id, "pw-1", 40, &mut rng).unwrap();
        assert_eq!(out.len(), 4);
        for (target, t) in &out {
            assert_eq!(t.attempts, 10, "{target:?}");
            assert_eq!(t.accepted, 0, "{target:?}");
        }
        assert_eq!(
            out[&ForgeryTarget::Confirmation]
                .rejections
                .get("Confirmation"),
            Some(&10)
        );
        assert!(sys.login(id, "pw-1").unwrap().mutual());
    }

    #[test]
    fn offline_guessing_finds_no_verifier() {
        let (mut sys, id) = alice(18);
        let seen = capture_logins(&mut sys, id, "pw-1", 2).unwrap();
        let card = sys.users[&id].card.clone().unwrap();
        let mut rng = Rng::new(10);
        let mut dict = Dictionary::synthetic(100, &mut rng);
        dict.plant("pw-1", 41);
        let r = offline_guess_proposed(&card, &seen, &dict, Some((&sys.audit, "pw-1"))).unwrap();
        assert!(r.verifiers.is_empty(), "{:?}", r.verifiers);
        assert!(r.leaked.is_empty(), "{:?}", r.leaked);
        assert_eq!(r.distinguishable, 0);
        assert_eq!(r.evaluations, 0);
        assert_eq!(r.model_bindings, 2 + 2 * 5);

        let b = sys.user_biometric_key(&id).unwrap();
        let hit = offline_guess_with_biokey(&card, &seen[0], &b, &dict).unwrap();
        assert_eq!((hit.password.as_str(), hit.evaluations), ("pw-1", 42));
        let empty = Dictionary::default();
        assert_eq!(
            offline_guess_proposed(&card, &seen, &empty, None)
                .unwrap()
                .evaluations,
            0
        );
    }
}

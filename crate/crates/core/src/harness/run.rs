//! One runner per (scheme, kind).

use std::collections::BTreeMap;

use rand::Rng as _;
use rand::RngCore;
use serde::Serialize;
use serde_json::Value;

use super::{stores, Expect, HarnessError, Kind, Run, Scenario, Scheme, Verdict};
use crate::biometric::{FuzzyExtractor, Template};
use crate::channel::attacks::{
    capture_logins, flood_proposed, forgery_proposed, impersonation_attempt_proposed, legacy_m1,
    masquerade_attempt_proposed, offline_guess_proposed, offline_guess_with_biokey, replay_attack,
    scan_windows, steal_keys_proposed, Tally,
};
use crate::channel::model::{legacy_view, observed_sessions, proposed_view, PW};
use crate::channel::{ProvisionSpec, SimError, System, Transcript};
use crate::crypto::{canonical_id, Block32, Rng};
use crate::ec::{point_digest, random_scalar, scalar_mul, Point};
use crate::envelope::Phase;
use crate::li::attacks::{
    extract_card, guess_password, impersonate_user, masquerade_server, Dictionary, MasqueradeMode,
};
use crate::li::{
    compute_m3, compute_m6, li_login, li_server_verify, li_user_finish, AuthReply, LiCard, LiError,
    LiServer, LoginRequest,
};
use crate::proposed::{Addr, ChannelClass, FaultMode, FaultPoint, Faults, ProposedCard, UserTask};
use crate::symbolic::{atom, guessing_verifiers, Knowledge};

const DEFAULT_USER: &str = "alice";
const DEFAULT_PASSWORD: &str = "correct-horse-battery";
const LI_SERVER: &str = "li-server";

struct Outcome {
    holds: bool,
    attempts: u64,
    successes: u64,
    details: BTreeMap<String, Value>,
    transcript: Transcript,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            holds: false,
            attempts: 0,
            successes: 0,
            details: BTreeMap::new(),
            transcript: Transcript::default(),
        }
    }

    fn detail(&mut self, key: &str, v: impl Serialize) {
        self.details.insert(
            key.to_owned(),
            serde_json::to_value(v).expect("details serialize"),
        );
    }

    fn tallies<K: Serialize + Ord>(&mut self, key: &str, t: &BTreeMap<K, Tally>) {
        self.attempts += t.values().map(|t| t.attempts).sum::<u64>();
        self.successes += t.values().map(|t| t.accepted).sum::<u64>();
        let by: BTreeMap<String, &Tally> = t
            .iter()
            .map(|(k, v)| {
                let name = serde_json::to_value(k)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default();
                (name, v)
            })
            .collect();
        self.detail(key, by);
    }
}

pub fn run_scenario(s: &Scenario) -> Result<Run, HarnessError> {
    s.validate()?;
    let mut rng = Rng::new(s.seed);
    let out = match s.scheme {
        Scheme::Proposed => proposed(s, &mut rng)?,
        Scheme::Li => legacy(s, &mut rng)?,
    };
    let verdict = Verdict {
        scenario: s.id.clone(),
        scheme: s.scheme,
        kind: s.kind,
        property: s.kind.row().to_owned(),
        seed: s.seed,
        trials: s.trials,
        holds: out.holds,
        expected: s.expect,
        matched: Expect::of(out.holds) == s.expect,
        attack_attempts: out.attempts,
        attack_successes: out.successes,
        transcript_lines: out.transcript.len(),
        transcript_digest: out.transcript.digest().to_hex(),
        details: out.details,
    };
    Ok(Run {
        verdict,
        transcript: out.transcript,
    })
}

fn dictionary(s: &Scenario, rng: &mut Rng) -> Result<Dictionary, HarnessError> {
    let dict = match &s.dictionary {
        Some(path) => Dictionary::load(path).map_err(|e| HarnessError::Config(e.to_string()))?,
        None => Dictionary::synthetic(s.dict_size, rng),
    };
    if dict.is_empty() {
        return Err(HarnessError::Config(format!("{}: empty dictionary", s.id)));
    }
    Ok(dict)
}

/// A victim password drawn from the dictionary, with the number of
/// evaluations a sequential search needs to reach it.
fn planted(dict: &Dictionary, rng: &mut Rng) -> (String, usize) {
    let word = dict.words()[rng.gen_range(0..dict.len())].clone();
    let first = dict.position(&word).expect("drawn from the dictionary");
    (word, first + 1)
}

fn victim_name(s: &Scenario) -> &str {
    s.user.as_deref().unwrap_or(DEFAULT_USER)
}

fn victim_password(s: &Scenario) -> String {
    s.password
        .clone()
        .unwrap_or_else(|| DEFAULT_PASSWORD.to_owned())
}

fn login_failed(reason: &str) -> HarnessError {
    HarnessError::Sim(SimError::PhaseFailed {
        phase: Phase::Login,
        reason: reason.to_owned(),
    })
}

// ---------------------------------------------------------------------------
// Proposed scheme

fn system(s: &Scenario, seed: u64, pw: &str) -> Result<(System, Block32), HarnessError> {
    let name = victim_name(s);
    let mut sys = match &s.stores {
        Some(dir) => stores::load_stores(dir, &[name], seed)?,
        None => System::provision(&ProvisionSpec::single(name, pw), seed)?,
    };
    if !matches!(s.kind, Kind::PasswordRecovery | Kind::CardRecovery) {
        for f in &s.faults {
            sys.faults.arm(f.point, f.mode);
        }
    }
    sys.net.set_faults(s.channel_faults.clone());
    Ok((sys, canonical_id(name)?))
}

fn stolen_keys(
    s: &Scenario,
    sys: &mut System,
    id: Block32,
    pw: &str,
    out: &mut Outcome,
) -> Result<Vec<Block32>, HarnessError> {
    if !s.capabilities.database {
        return Ok(Vec::new());
    }
    let scan = steal_keys_proposed(sys, id, pw)?;
    out.detail("database_windows", scan.windows);
    out.detail("database_keys", scan.validated.len());
    Ok(scan.validated)
}

fn proposed(s: &Scenario, rng: &mut Rng) -> Result<Outcome, HarnessError> {
    let mut out = Outcome::new();
    let pw = victim_password(s);
    match s.kind {
        Kind::SessionKey => {
            let (mut sys, id) = system(s, rng.next_u64(), &pw)?;
            let (mut mutual, mut equal) = (0u64, 0u64);
            for _ in 0..s.trials {
                let o = sys.login(id, &pw)?;
                mutual += o.mutual() as u64;
                equal += (o.user_key.is_some() && o.user_key == o.server_key) as u64;
            }
            let hits = sys.insecure_secret_hits();
            let forbidden = sys.net.forbidden_reads();
            out.detail("mutual", mutual);
            out.detail("keys_equal", equal);
            out.detail("insecure_secret_hits", hits);
            out.detail("forbidden_reads", forbidden);
            out.holds = s.trials > 0
                && mutual == s.trials
                && equal == s.trials
                && hits == 0
                && forbidden == 0;
            out.transcript = sys.net.transcript.clone();
        }
        Kind::PasswordGuessing => {
            let dict = dictionary(s, rng)?;
            let (mut distinguishable, mut leaked, mut verifiers, mut bindings) = (0, 0, 0, 0);
            let mut rounds = 0;
            for t in 0..s.trials {
                let (pw, expected) = match &s.stores {
                    Some(_) => (pw.clone(), dict.position(&pw).map(|i| i + 1).unwrap_or(0)),
                    None => planted(&dict, rng),
                };
                let (mut sys, id) = system(s, rng.next_u64(), &pw)?;
                let seen = capture_logins(&mut sys, id, &pw, 2)?;
                let full = sys.users[&id]
                    .card
                    .clone()
                    .ok_or_else(|| login_failed("no card"))?;
                let card = if s.capabilities.card {
                    full.clone()
                } else {
                    ProposedCard {
                        qx: None,
                        ..full.clone()
                    }
                };
                let check = s.stores.is_none().then_some((&sys.audit, pw.as_str()));
                let r = offline_guess_proposed(&card, &seen, &dict, check)
                    .map_err(|e| login_failed(&e))?;
                out.attempts += 1;
                out.successes += (r.distinguishable > 0) as u64;
                distinguishable += r.distinguishable;
                leaked += r.leaked.len();
                verifiers += r.verifiers.len();
                bindings += r.model_bindings;
                rounds = rounds.max(r.fixpoint_rounds);
                if t == 0 {
                    // Out of model: hand the adversary the biometric key too.
                    let b = sys
                        .user_biometric_key(&id)
                        .ok_or_else(|| login_failed("biometric"))?;
                    let hit = offline_guess_with_biokey(&full, &seen[0], &b, &dict).ok();
                    out.detail(
                        "with_biokey_recovered",
                        hit.as_ref().is_some_and(|h| h.password == pw),
                    );
                    out.detail("with_biokey_evaluations", hit.map(|h| h.evaluations));
                    out.detail("with_biokey_expected_evaluations", expected);
                }
                out.transcript.extend(&sys.net.transcript);
            }
            out.detail("dictionary_size", dict.len());
            out.detail("distinguishable", distinguishable);
            out.detail("verifiers", verifiers);
            out.detail("leaked_secrets", leaked);
            out.detail("model_bindings_checked", bindings);
            out.detail("fixpoint_rounds", rounds);
            out.holds = distinguishable == 0 && verifiers == 0 && leaked == 0;
        }
        Kind::KeyStealing => {
            let (mut validated, mut plaintext, mut leaked) = (0, 0, 0);
            for _ in 0..s.trials {
                let (mut sys, id) = system(s, rng.next_u64(), &pw)?;
                if s.capabilities.database {
                    let scan = steal_keys_proposed(&mut sys, id, &pw)?;
                    validated += scan.validated.len();
                    plaintext += scan.plaintext_secrets;
                } else {
                    capture_logins(&mut sys, id, &pw, 1)?;
                }
                let seen = observed_sessions(&sys.net.observe(), &id);
                let card = sys.users[&id]
                    .card
                    .clone()
                    .ok_or_else(|| login_failed("no card"))?;
                let view = proposed_view(&ProposedCard { qx: None, ..card }, &seen);
                let k = view.knowledge();
                leaked += view.secrets().iter().filter(|t| k.derivable(t)).count();
                out.attempts += 1;
                out.transcript.extend(&sys.net.transcript);
            }
            out.successes = validated as u64;
            out.detail("database_keys", validated);
            out.detail("plaintext_secrets", plaintext);
            out.detail("derivable_secrets", leaked);
            out.holds = validated == 0 && plaintext == 0 && leaked == 0;
        }
        Kind::Impersonation => {
            let (mut sys, id) = system(s, rng.next_u64(), &pw)?;
            let stolen = stolen_keys(s, &mut sys, id, &pw, &mut out)?;
            let t = impersonation_attempt_proposed(&mut sys, id, &pw, s.trials, &stolen, rng)?;
            out.tallies("strategies", &t);
            out.holds = out.successes == 0;
            out.transcript = sys.net.transcript.clone();
        }
        Kind::Masquerade => {
            let (mut sys, id) = system(s, rng.next_u64(), &pw)?;
            let stolen = stolen_keys(s, &mut sys, id, &pw, &mut out)?;
            let t = masquerade_attempt_proposed(&mut sys, id, &pw, s.trials, &stolen, rng)?;
            out.tallies("strategies", &t);
            out.holds = out.successes == 0;
            out.transcript = sys.net.transcript.clone();
        }
        Kind::Replay => {
            let (mut sys, id) = system(s, rng.next_u64(), &pw)?;
            let r = replay_attack(&mut sys, id, &pw, s.trials)?;
            out.attempts = r.tally.attempts;
            out.successes = r.tally.accepted;
            let only_confirmation = r.tally.rejections.keys().all(|k| k == "Confirmation");
            out.detail("scenarios", r.scenarios);
            out.detail("fresh_challenges", r.fresh_challenges);
            out.detail("rejections", &r.tally.rejections);
            out.detail("all_at_confirmation", only_confirmation);
            out.holds = out.successes == 0
                && only_confirmation
                && r.tally.rejections.values().sum::<u64>() == r.tally.attempts;
            out.transcript = sys.net.transcript.clone();
        }
        Kind::PasswordRecovery | Kind::CardRecovery => recovery(s, rng, &pw, &mut out)?,
        Kind::MutualAuth => {
            let (mut sys, id) = system(s, rng.next_u64(), &pw)?;
            let mut honest = 0u64;
            for _ in 0..s.trials {
                honest += sys.login(id, &pw)?.mutual() as u64;
            }
            let stolen = stolen_keys(s, &mut sys, id, &pw, &mut out)?;
            let m = masquerade_attempt_proposed(&mut sys, id, &pw, s.trials, &stolen, rng)?;
            let i = impersonation_attempt_proposed(&mut sys, id, &pw, s.trials, &stolen, rng)?;
            out.tallies("masquerade", &m);
            out.tallies("impersonation", &i);
            out.detail("honest_mutual", honest);
            out.holds = s.trials > 0 && honest == s.trials && out.successes == 0;
            out.transcript = sys.net.transcript.clone();
        }
        Kind::Dos => {
            let (mut sys, id) = system(s, rng.next_u64(), &pw)?;
            let r = flood_proposed(&mut sys, id, &pw, s.trials, rng)?;
            out.attempts = r.injected;
            out.detail("report", &r);
            out.holds = r.state_unchanged && r.honest_login_after;
            out.successes = (!out.holds) as u64;
            out.transcript = sys.net.transcript.clone();
        }
        Kind::Forgery => {
            let (mut sys, id) = system(s, rng.next_u64(), &pw)?;
            let t = forgery_proposed(&mut sys, id, &pw, s.trials, rng)?;
            out.tallies("targets", &t);
            out.holds = out.successes == 0;
            out.transcript = sys.net.transcript.clone();
        }
    }
    Ok(out)
}

/// Completion of the recovery phase, with a fault-injected revert first.
fn recovery(s: &Scenario, rng: &mut Rng, pw: &str, out: &mut Outcome) -> Result<(), HarnessError> {
    let (phase, default_point) = match s.kind {
        Kind::PasswordRecovery => (Phase::PasswordRecovery, FaultPoint::PrServerCheck),
        _ => (Phase::CardRecovery, FaultPoint::CrServerCheck),
    };
    let faults: Vec<(FaultPoint, FaultMode)> = if s.faults.is_empty() {
        vec![(default_point, FaultMode::Always)]
    } else {
        s.faults.iter().map(|f| (f.point, f.mode)).collect()
    };
    let task = |new: &str| match phase {
        Phase::PasswordRecovery => UserTask::PasswordRecovery { new: new.into() },
        _ => UserTask::CardRecovery { new: new.into() },
    };
    let (mut faulted_ok, mut clean_ok) = (0u64, 0u64);
    for t in 0..s.trials {
        let (mut sys, id) = system(s, rng.next_u64(), pw)?;
        let mut current = pw.to_owned();
        let mut ok = true;
        for (i, (point, mode)) in faults.iter().enumerate() {
            sys.faults = Faults::none();
            sys.faults.arm(*point, *mode);
            let new = format!("{pw}-f{t}-{i}");
            let mark = sys.start(id, task(&new))?;
            let done = sys.completed_since(mark, phase);
            if *mode == FaultMode::Once && done {
                current = new;
            }
            ok &= done == (*mode == FaultMode::Once)
                && sys.faults.fired(*point) >= 1
                && sys.check_invariants().is_ok()
                && sys.login(id, &current)?.mutual();
        }
        faulted_ok += ok as u64;
        sys.faults = Faults::none();
        let new = format!("{pw}-r{t}");
        let mark = sys.start(id, task(&new))?;
        let done = sys.completed_since(mark, phase)
            && sys.check_invariants().is_ok()
            && sys.login(id, &new)?.mutual()
            && !sys.login(id, &current)?.mutual();
        clean_ok += done as u64;
        out.transcript.extend(&sys.net.transcript);
    }
    out.detail("supported", true);
    out.detail(
        "fault_points",
        faults.iter().map(|f| f.0).collect::<Vec<_>>(),
    );
    out.detail("faulted_runs_ok", faulted_ok);
    out.detail("completed_runs", clean_ok);
    out.holds = s.trials > 0 && faulted_ok == s.trials && clean_ok == s.trials;
    Ok(())
}

// ---------------------------------------------------------------------------
// Legacy scheme

struct LiVictim {
    server: LiServer,
    card: LiCard,
    id: Block32,
    template: Template,
    fx: FuzzyExtractor,
    pw: String,
}

struct LiSession {
    req: LoginRequest,
    reply: AuthReply,
    user_sk: Result<Block32, LiError>,
    server_sk: Block32,
}

fn li_victim(s: &Scenario, pw: &str, rng: &mut Rng) -> Result<LiVictim, HarnessError> {
    let mut server = LiServer::generate(s.curve.params(), rng);
    let fx = FuzzyExtractor::default();
    let template = Template::random(fx.template_bits(), rng);
    let id = canonical_id(victim_name(s))?;
    let card = server.enroll(id, pw, &template, &fx, rng)?;
    Ok(LiVictim {
        server,
        card,
        id,
        template,
        fx,
        pw: pw.to_owned(),
    })
}

fn li_addrs(id: &Block32) -> Result<(Addr, Addr), HarnessError> {
    Ok((Addr::User(*id), Addr::Server(canonical_id(LI_SERVER)?)))
}

fn record_li(
    tr: &mut Transcript,
    v: &LiVictim,
    req: Option<&LoginRequest>,
    reply: Option<&AuthReply>,
    note: Option<&'static str>,
) -> Result<(), HarnessError> {
    let (user, server) = li_addrs(&v.id)?;
    let curve = &v.server.curve;
    if let Some(r) = req {
        tr.record(
            ChannelClass::Insecure,
            user.clone(),
            server.clone(),
            &r.to_envelope(curve),
            note,
        );
    }
    if let Some(r) = reply {
        tr.record(
            ChannelClass::Insecure,
            server,
            user,
            &r.to_envelope(curve),
            note,
        );
    }
    Ok(())
}

fn li_honest(v: &LiVictim, rng: &mut Rng, tr: &mut Transcript) -> Result<LiSession, HarnessError> {
    let curve = &v.server.curve;
    let (req, session) = li_login(&v.card, &v.id, &v.pw, &v.template, &v.fx, curve, rng)?;
    let (reply, ss) = li_server_verify(&req, &v.server, rng)?;
    record_li(tr, v, Some(&req), Some(&reply), None)?;
    let user_sk = li_user_finish(&reply, &session, curve);
    Ok(LiSession {
        req,
        reply,
        user_sk,
        server_sk: ss.sk,
    })
}

/// Database theft against the legacy server: every 32-byte window that
/// explains the captured `M3` is a working `X_s`.
fn li_stolen(v: &LiVictim, seen: &LiSession) -> Vec<Block32> {
    let curve = &v.server.curve;
    scan_windows(&v.server.database_bytes(), |x| {
        compute_m3(&legacy_m1(&v.id, x), &seen.req.m2, curve) == seen.req.m3
    })
    .1
}

/// One masquerade against an honest login; returns (user accepted, attacker
/// key equals the user's).
fn li_masquerade(
    v: &LiVictim,
    key: Block32,
    mode: MasqueradeMode,
    rng: &mut Rng,
    tr: &mut Transcript,
) -> Result<(bool, bool), HarnessError> {
    let curve = &v.server.curve;
    let (req, session) = li_login(&v.card, &v.id, &v.pw, &v.template, &v.fx, curve, rng)?;
    let masq = masquerade_server(key, curve.clone()).with_mode(mode);
    let (reply, attacker_sk) = match masq.respond(&req, rng) {
        Ok(r) => r,
        Err(_) => {
            // Wrong key: answer anyway with what it has.
            let m5 =
                scalar_mul(&random_scalar(curve, rng), &curve.g, curve).map_err(LiError::from)?;
            let m6 = compute_m6(&legacy_m1(&v.id, &key), &req.m2, &m5, curve);
            (AuthReply { m5, m6 }, None)
        }
    };
    record_li(tr, v, Some(&req), Some(&reply), Some("masquerade"))?;
    match li_user_finish(&reply, &session, curve) {
        Ok(sk) => Ok((true, attacker_sk == Some(sk))),
        Err(_) => Ok((false, false)),
    }
}

fn flip(b: &Block32, rng: &mut Rng) -> Block32 {
    let mut out = *b;
    let bit = rng.gen_range(0..256);
    out.0[bit / 8] ^= 1 << (bit % 8);
    out
}

fn legacy(s: &Scenario, rng: &mut Rng) -> Result<Outcome, HarnessError> {
    let mut out = Outcome::new();
    let pw = victim_password(s);
    let mut tr = Transcript::default();
    match s.kind {
        Kind::SessionKey => {
            let mut agreed = 0u64;
            for _ in 0..s.trials {
                let v = li_victim(s, &pw, rng)?;
                let session = li_honest(&v, rng, &mut tr)?;
                agreed += (session.user_sk.as_ref().ok() == Some(&session.server_sk)) as u64;
            }
            out.detail("mutual_with_equal_keys", agreed);
            out.holds = s.trials > 0 && agreed == s.trials;
        }
        Kind::PasswordGuessing | Kind::Impersonation => {
            let dict = dictionary(s, rng)?;
            let (mut recovered, mut exact_counts, mut impersonated, mut shared) = (0, 0, 0, 0);
            for t in 0..s.trials {
                let (pw, expected) = planted(&dict, rng);
                let v = li_victim(s, &pw, rng)?;
                li_honest(&v, rng, &mut tr)?;
                out.attempts += 1;
                if !s.capabilities.card {
                    continue;
                }
                let x = extract_card(&v.card);
                let Ok(hit) = guess_password(&x, &v.id, &dict) else {
                    continue;
                };
                recovered += (hit.password == pw) as u64;
                exact_counts += (hit.evaluations == expected) as u64;
                if s.kind == Kind::Impersonation {
                    let o = impersonate_user(&x, &v.id, &hit.password, &v.server, rng);
                    impersonated += o.succeeded() as u64;
                    shared += (o.attacker_sk.is_some() && o.attacker_sk == o.server_sk) as u64;
                    for env in &o.transcript {
                        let (user, server) = li_addrs(&v.id)?;
                        let (from, to) = if env.stat == crate::envelope::Stat::Login {
                            (user, server)
                        } else {
                            (server, user)
                        };
                        tr.record(ChannelClass::Insecure, from, to, env, Some("attacker"));
                    }
                    if t == 0 {
                        let wrong = impersonate_user(&x, &v.id, &format!("{pw}!"), &v.server, rng);
                        out.detail(
                            "wrong_guess_rejection",
                            wrong.rejection.map(|e| e.to_string()),
                        );
                    }
                }
            }
            out.detail("dictionary_size", dict.len());
            out.detail("recovered", recovered);
            out.detail("evaluations_equal_index_plus_one", exact_counts);
            let k = Knowledge::new(legacy_view(1));
            out.detail(
                "symbolic_verifiers",
                guessing_verifiers(&k, &atom(PW)).len(),
            );
            if s.kind == Kind::Impersonation {
                out.detail("impersonated", impersonated);
                out.detail("shared_session_keys", shared);
                out.successes = impersonated;
                out.holds = impersonated == 0;
            } else {
                out.successes = recovered;
                out.holds = recovered == 0;
            }
        }
        Kind::KeyStealing => {
            let mut validated = 0;
            for _ in 0..s.trials {
                let v = li_victim(s, &pw, rng)?;
                let seen = li_honest(&v, rng, &mut tr)?;
                out.attempts += 1;
                if s.capabilities.database {
                    let keys = li_stolen(&v, &seen);
                    validated += (keys.contains(&v.server.x_s)) as u64;
                }
            }
            out.successes = validated;
            out.detail("master_key_recovered", validated);
            out.holds = validated == 0;
        }
        Kind::Masquerade | Kind::MutualAuth => {
            let (mut accepted, mut keys_agree, mut honest) = (0u64, 0u64, 0u64);
            let mut arms: BTreeMap<&str, u64> = BTreeMap::new();
            for _ in 0..s.trials {
                let v = li_victim(s, &pw, rng)?;
                let seen = li_honest(&v, rng, &mut tr)?;
                honest += (seen.user_sk.as_ref().ok() == Some(&seen.server_sk)) as u64;
                let key = if s.capabilities.database {
                    li_stolen(&v, &seen).first().copied()
                } else {
                    None
                }
                .unwrap_or_else(|| rng.random_block());
                for (arm, mode) in [
                    ("fresh-ephemeral", MasqueradeMode::FreshEphemeral),
                    (
                        "replayed-m5",
                        MasqueradeMode::ReplayM5(seen.reply.m5.clone()),
                    ),
                ] {
                    let (ok, agree) = li_masquerade(&v, key, mode, rng, &mut tr)?;
                    out.attempts += 1;
                    accepted += ok as u64;
                    keys_agree += agree as u64;
                    *arms.entry(arm).or_insert(0) += ok as u64;
                }
            }
            out.successes = accepted;
            out.detail("user_accepted", &arms);
            out.detail("attacker_keys_agree", keys_agree);
            out.detail("honest_mutual", honest);
            out.holds = accepted == 0 && (s.kind == Kind::Masquerade || honest == s.trials);
        }
        Kind::Replay => {
            let v = li_victim(s, &pw, rng)?;
            let (mut responses, mut attacker_keys) = (0u64, 0u64);
            let curve = v.server.curve.clone();
            for _ in 0..s.trials {
                let old = li_honest(&v, rng, &mut tr)?;
                out.attempts += 1;
                let Ok((reply, ss)) = li_server_verify(&old.req, &v.server, rng) else {
                    continue;
                };
                responses += 1;
                record_li(&mut tr, &v, Some(&old.req), Some(&reply), Some("replayed"))?;
                let candidates = [
                    point_digest(&old.req.m2, &curve),
                    point_digest(&old.reply.m5, &curve),
                    point_digest(&reply.m5, &curve),
                    old.req.m3,
                    old.reply.m6,
                    reply.m6,
                ];
                attacker_keys += candidates.contains(&ss.sk) as u64;
            }
            out.successes = attacker_keys;
            out.detail("server_responses", responses);
            out.detail("attacker_session_keys", attacker_keys);
            out.holds = attacker_keys == 0;
        }
        Kind::PasswordRecovery | Kind::CardRecovery => {
            out.detail("supported", false);
            out.holds = false;
        }
        Kind::Dos => {
            let v = li_victim(s, &pw, rng)?;
            let curve = v.server.curve.clone();
            let before = v.server.database_bytes();
            let mut accepted = 0u64;
            for n in 0..s.trials {
                let a = random_scalar(&curve, rng);
                let point = scalar_mul(&a, &curve.g, &curve).map_err(LiError::from)?;
                let req = match n % 4 {
                    0 => LoginRequest {
                        id: rng.random_block(),
                        m2: point,
                        m3: rng.random_block(),
                    },
                    1 => LoginRequest {
                        id: v.id,
                        m2: Point::affine(1u32, 1u32),
                        m3: rng.random_block(),
                    },
                    2 => LoginRequest {
                        id: v.id,
                        m2: Point::Identity,
                        m3: rng.random_block(),
                    },
                    _ => LoginRequest {
                        id: v.id,
                        m2: point,
                        m3: rng.random_block(),
                    },
                };
                out.attempts += 1;
                accepted += li_server_verify(&req, &v.server, rng).is_ok() as u64;
            }
            let after = li_honest(&v, rng, &mut tr)?;
            let honest = after.user_sk.as_ref().ok() == Some(&after.server_sk);
            out.successes = accepted;
            out.detail("garbage_accepted", accepted);
            out.detail("honest_login_after", honest);
            out.holds = accepted == 0 && honest && v.server.database_bytes() == before;
        }
        Kind::Forgery => {
            let v = li_victim(s, &pw, rng)?;
            let curve = v.server.curve.clone();
            let mut by: BTreeMap<&str, Tally> = BTreeMap::new();
            for n in 0..s.trials {
                let (req, session) =
                    li_login(&v.card, &v.id, &v.pw, &v.template, &v.fx, &curve, rng)?;
                let (target, accepted) = match n % 4 {
                    0 | 1 => {
                        let forged = if n % 4 == 0 {
                            LoginRequest {
                                m3: flip(&req.m3, rng),
                                ..req.clone()
                            }
                        } else {
                            let a = random_scalar(&curve, rng);
                            LoginRequest {
                                m2: scalar_mul(&a, &curve.g, &curve).map_err(LiError::from)?,
                                ..req.clone()
                            }
                        };
                        record_li(&mut tr, &v, Some(&forged), None, Some("forged"))?;
                        let ok = li_server_verify(&forged, &v.server, rng).is_ok();
                        (
                            if n % 4 == 0 {
                                "request-m3"
                            } else {
                                "request-m2"
                            },
                            ok,
                        )
                    }
                    _ => {
                        let (reply, _) = li_server_verify(&req, &v.server, rng)?;
                        let forged = if n % 4 == 2 {
                            AuthReply {
                                m6: flip(&reply.m6, rng),
                                ..reply
                            }
                        } else {
                            let b = random_scalar(&curve, rng);
                            AuthReply {
                                m5: scalar_mul(&b, &curve.g, &curve).map_err(LiError::from)?,
                                ..reply
                            }
                        };
                        record_li(&mut tr, &v, Some(&req), Some(&forged), Some("forged"))?;
                        let ok = li_user_finish(&forged, &session, &curve).is_ok();
                        (if n % 4 == 2 { "reply-m6" } else { "reply-m5" }, ok)
                    }
                };
                let t = by.entry(target).or_default();
                t.attempts += 1;
                t.accepted += accepted as u64;
            }
            out.tallies("targets", &by);
            out.holds = out.successes == 0;
        }
    }
    out.transcript = tr;
    Ok(out)
}

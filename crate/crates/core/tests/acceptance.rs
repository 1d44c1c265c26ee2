//! End-to-end acceptance criteria. Runs without the libtest harness so that
//! every criterion prints exactly one line whether it passes or fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_traits::ToPrimitive;
use rand::Rng as _;
use sha2::{Digest, Sha256};

use tfa_core::biometric::{perturb_per_group, FuzzyExtractor, Template};
use tfa_core::channel::attacks::{
    impersonation_attempt_proposed, masquerade_attempt_proposed, offline_guess_proposed,
    replay_attack, Tally,
};
use tfa_core::channel::model::observed_sessions;
use tfa_core::channel::{ProvisionSpec, System};
use tfa_core::crypto::{canonical_id, open_block32, open_block64, Block32, Rng};
use tfa_core::ec::{add, scalar_mul, CurveParams, Point};
use tfa_core::harness::{run_all, run_scenario, suite, FaultSpec, Matrix};
use tfa_core::li::attacks::{
    extract_card, guess_password, impersonate_user, masquerade_server, Dictionary,
};
use tfa_core::li::{li_login, li_server_verify, li_user_finish, LiServer};
use tfa_core::proposed::{FaultMode, FaultPoint, UserTask};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn alice(pw: &str, seed: u64) -> (System, Block32) {
    let sys = System::provision(&ProvisionSpec::single("alice", pw), seed).expect("provision");
    (sys, canonical_id("alice").unwrap())
}

struct Victim {
    server: LiServer,
    card: tfa_core::li::LiCard,
    id: Block32,
    template: Template,
    fx: FuzzyExtractor,
}

fn li_victim(curve: CurveParams, pw: &str, rng: &mut Rng) -> Victim {
    let mut server = LiServer::generate(curve, rng);
    let fx = FuzzyExtractor::default();
    let template = Template::random(fx.template_bits(), rng);
    let id = canonical_id("alice").unwrap();
    let card = server.enroll(id, pw, &template, &fx, rng).unwrap();
    Victim {
        server,
        card,
        id,
        template,
        fx,
    }
}

fn legacy_completeness() -> Check {
    let t = Instant::now();
    let curve = CurveParams::tiny();
    let mut rng = Rng::new(1);
    let mut ok = 0;
    for i in 0..1000 {
        let pw = format!("pw-{i}");
        let v = li_victim(curve.clone(), &pw, &mut rng);
        let (req, us) =
            li_login(&v.card, &v.id, &pw, &v.template, &v.fx, &curve, &mut rng).unwrap();
        let (reply, ss) = li_server_verify(&req, &v.server, &mut rng).unwrap();
        if li_user_finish(&reply, &us, &curve).ok() == Some(ss.sk) {
            ok += 1;
        }
    }
    let took = t.elapsed();
    ensure(
        ok == 1000 && took < Duration::from_secs(10),
        format!("{ok}/1000 mutual with equal SK in {took:.2?}"),
    )
}

/// 50 victims whose passwords sit at random positions of a 10,000-word list.
fn planted_victims(seed: u64) -> (Dictionary, Vec<(String, usize)>) {
    let mut rng = Rng::new(seed);
    let dict = Dictionary::synthetic(10_000, &mut rng);
    let victims = (0..50)
        .map(|_| {
            let i = rng.gen_range(0..dict.len());
            (dict.words()[i].clone(), i)
        })
        .collect();
    (dict, victims)
}

fn legacy_guessing() -> Check {
    let (dict, victims) = planted_victims(2);
    let mut rng = Rng::new(20);
    let (mut recovered, mut exact) = (0, 0);
    for (pw, index) in &victims {
        let v = li_victim(CurveParams::tiny(), pw, &mut rng);
        if let Ok(hit) = guess_password(&extract_card(&v.card), &v.id, &dict) {
            recovered += (&hit.password == pw) as usize;
            exact += (hit.evaluations == index + 1) as usize;
        }
    }
    ensure(
        recovered == 50 && exact == 50,
        format!("recovered {recovered}/50, evaluations = index + 1 in {exact}/50"),
    )
}

fn legacy_impersonation() -> Check {
    let (dict, victims) = planted_victims(3);
    let mut rng = Rng::new(30);
    let mut ok = 0;
    for (pw, _) in &victims {
        let v = li_victim(CurveParams::tiny(), pw, &mut rng);
        let x = extract_card(&v.card);
        let Ok(hit) = guess_password(&x, &v.id, &dict) else {
            continue;
        };
        let o = impersonate_user(&x, &v.id, &hit.password, &v.server, &mut rng);
        ok +=
            (o.server_accepted && o.attacker_sk.is_some() && o.attacker_sk == o.server_sk) as usize;
    }
    ensure(ok == 50, format!("{ok}/50 accepted with shared SK"))
}

fn legacy_masquerade() -> Check {
    let curve = CurveParams::tiny();
    let mut rng = Rng::new(4);
    let mut ok = 0;
    for i in 0..50 {
        let pw = format!("pw-{i}");
        let v = li_victim(curve.clone(), &pw, &mut rng);
        let masq = masquerade_server(v.server.x_s, curve.clone());
        let (req, us) =
            li_login(&v.card, &v.id, &pw, &v.template, &v.fx, &curve, &mut rng).unwrap();
        let Ok((reply, attacker_sk)) = masq.respond(&req, &mut rng) else {
            continue;
        };
        if let Ok(sk) = li_user_finish(&reply, &us, &curve) {
            ok += (attacker_sk == Some(sk)) as usize;
        }
    }
    ensure(
        ok == 50,
        format!("{ok}/50 users accepted the masquerading server"),
    )
}

fn proposed_guessing() -> Check {
    let (dict, victims) = planted_victims(5);
    let (mut distinguishable, mut verifiers, mut leaked, mut bindings) = (0, 0, 0, 0);
    let mut rounds = usize::MAX;
    for (n, (pw, _)) in victims.iter().enumerate() {
        let (mut sys, id) = alice(pw, 500 + n as u64);
        for _ in 0..3 {
            assert!(sys.login(id, pw).unwrap().mutual());
        }
        let sessions = observed_sessions(&sys.net.observe(), &id);
        let card = sys.users[&id].card.clone().unwrap();
        let r = offline_guess_proposed(&card, &sessions, &dict, Some((&sys.audit, pw)))
            .map_err(|e| format!("model mismatch: {e}"))?;
        distinguishable += r.distinguishable;
        verifiers += r.verifiers.len();
        leaked += r.leaked.len();
        bindings += r.model_bindings;
        rounds = rounds.min(r.fixpoint_rounds);
    }
    ensure(
        distinguishable == 0 && verifiers == 0 && leaked == 0 && rounds >= 1 && bindings > 0,
        format!(
            "50 victims: {distinguishable} distinguishable, {verifiers} verifiers, \
             {leaked} leaked, {bindings} wire bindings checked, fixpoint reached"
        ),
    )
}

fn proposed_forgery_and_masquerade() -> Check {
    let t = Instant::now();
    let (mut sys, id) = alice("pw-1", 6);
    let mut rng = Rng::new(60);
    let imp = impersonation_attempt_proposed(&mut sys, id, "pw-1", 10_000, &[], &mut rng)
        .map_err(|e| e.to_string())?;
    let masq = masquerade_attempt_proposed(&mut sys, id, "pw-1", 10_000, &[], &mut rng)
        .map_err(|e| e.to_string())?;
    let took = t.elapsed();
    let count = |m: Vec<&Tally>| {
        m.iter()
            .fold((0, 0), |(a, b), t| (a + t.attempts, b + t.accepted))
    };
    let (ia, ix) = count(imp.values().collect());
    let (ma, mx) = count(masq.values().collect());
    ensure(
        ia == 10_000 && ma == 10_000 && ix == 0 && mx == 0 && took < Duration::from_secs(60),
        format!("{ix}/{ia} forged logins and {mx}/{ma} masquerades accepted in {took:.2?}"),
    )
}

fn proposed_replay() -> Check {
    let (mut sys, id) = alice("pw-1", 7);
    let r = replay_attack(&mut sys, id, "pw-1", 1000).map_err(|e| e.to_string())?;
    let at_confirmation = r.tally.rejections.get("Confirmation").copied().unwrap_or(0);
    ensure(
        r.scenarios == 1000
            && r.tally.accepted == 0
            && r.tally.attempts >= 1000
            && at_confirmation == r.tally.attempts
            && r.fresh_challenges == 1000,
        format!(
            "{} replays, {} accepted, rejections {:?}",
            r.tally.attempts, r.tally.accepted, r.tally.rejections
        ),
    )
}

fn proposed_honest() -> Check {
    let (mut sys, id) = alice("pw-1", 8);
    let mut ok = 0;
    for _ in 0..1000 {
        ok += sys.login(id, "pw-1").unwrap().mutual() as usize;
    }
    let hits = sys.insecure_secret_hits();
    ensure(
        ok == 1000 && hits == 0,
        format!("{ok}/1000 mutual with equal K_ses, {hits} secret hits on insecure channels"),
    )
}

/// Recomputes `open(SX) = SHA-256(open(HK) || open(EX))` from the raw stores.
fn cross_store_holds(sys: &System, id: &Block32) -> bool {
    let rc = &sys.rc.store;
    let server = &sys.server.store;
    let Some(sx) = server.users.get(id) else {
        return false;
    };
    let x_s = open_block32(sx, &server.sk).unwrap();
    let k_s = open_block32(&rc.servers[&server.sid], &rc.rk).unwrap();
    let tx = open_block64(&rc.users[id].ex, &rc.rk).unwrap();
    let mut h = Sha256::new();
    h.update(k_s.as_bytes());
    h.update(tx.as_bytes());
    h.finalize().as_slice() == x_s.as_bytes()
}

fn cross_store() -> Check {
    let mut held = 0;
    for run in 0..100 {
        let (mut sys, id) = alice("pw-1", 900 + run);
        held += cross_store_holds(&sys, &id) as usize;
        let steps = [
            UserTask::PasswordChange {
                old: "pw-1".into(),
                new: "pw-2".into(),
            },
            UserTask::PasswordRecovery { new: "pw-3".into() },
            UserTask::CardRecovery { new: "pw-4".into() },
        ];
        for task in steps {
            if sys.expect_phase(id, task).is_ok() {
                held += cross_store_holds(&sys, &id) as usize;
            }
        }
    }
    ensure(
        held == 400,
        format!("{held}/400 store snapshots satisfy the identity"),
    )
}

fn atomicity() -> Check {
    let mut violations = Vec::new();
    for point in FaultPoint::ALL {
        let (mut sys, id) = alice("pw-1", 1000);
        sys.faults.arm(point, FaultMode::Always);
        let task = match point.phase() {
            tfa_core::envelope::Phase::PasswordChange => UserTask::PasswordChange {
                old: "pw-1".into(),
                new: "pw-2".into(),
            },
            tfa_core::envelope::Phase::PasswordRecovery => {
                UserTask::PasswordRecovery { new: "pw-2".into() }
            }
            _ => UserTask::CardRecovery { new: "pw-2".into() },
        };
        let mark = sys.start(id, task).map_err(|e| e.to_string())?;
        let ok = !sys.completed_since(mark, point.phase())
            && sys.faults.fired(point) >= 1
            && sys.check_invariants().is_ok()
            && cross_store_holds(&sys, &id)
            && sys.login(id, "pw-1").unwrap().mutual()
            && !sys.login(id, "pw-2").unwrap().mutual();
        if !ok {
            violations.push(point);
        }
    }
    ensure(
        violations.is_empty() && FaultPoint::ALL.len() >= 15,
        format!(
            "{} injection points, violations {violations:?}",
            FaultPoint::ALL.len()
        ),
    )
}

fn fuzzy_extractor() -> Check {
    let fx = FuzzyExtractor::new(1024).map_err(|e| e.to_string())?;
    if fx.repetition() != 4 {
        return Err(format!("repetition {}", fx.repetition()));
    }
    let mut rng = Rng::new(11);
    let (mut reproduced, mut rejected) = (0, 0);
    for _ in 0..1000 {
        let b = Template::random(1024, &mut rng);
        let (key, helper) = fx.gen(&b, &mut rng).unwrap();
        let noisy = perturb_per_group(&b, 4, &mut rng);
        reproduced += (fx.rep(&noisy, &helper).ok() == Some(key)) as usize;
        let other = Template::random(1024, &mut rng);
        rejected += fx.rep(&other, &helper).is_err() as usize;
    }
    ensure(
        reproduced == 1000 && rejected >= 999,
        format!("reproduced {reproduced}/1000, unrelated rejected {rejected}/1000"),
    )
}

/// Columns S1 and S5 of the published comparison table.
const TABLE: [(&str, bool, bool); 11] = [
    ("Prevents Password Guessing Attack", true, false),
    ("Prevents Security Key Stealing", true, false),
    ("Prevents User Impersonation Attack", true, false),
    ("Prevents Server Masquerading Attack", true, false),
    ("Prevents Replay Attack", true, true),
    ("Password Recovery", true, false),
    ("Smart Card Recovery", true, false),
    ("Provides Mutual Authentication", true, false),
    ("Prevents Denial of Service Attack", true, true),
    ("Prevents Forgery Attack", true, true),
    ("Supports Session Key", true, true),
];

fn matrix() -> Check {
    let report = run_all(&suite::paper_attacks(), 4).map_err(|e| e.to_string())?;
    let verdicts: Vec<_> = report.verdicts().cloned().collect();
    let m = Matrix::from_verdicts(&verdicts).map_err(|e| e.to_string())?;
    let got: Vec<(&str, bool, bool)> = m.rows.iter().map(|r| (r.property, r.s1, r.s5)).collect();
    let wrong: Vec<&str> = TABLE
        .iter()
        .zip(&got)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0)
        .collect();
    ensure(
        got.len() == 11 && wrong.is_empty(),
        format!("22 cells compared, differing rows {wrong:?}"),
    )
}

/// Affine arithmetic on small integers, written independently of the crate.
struct Small {
    p: i64,
    a: i64,
}

impl Small {
    fn inv(&self, x: i64) -> i64 {
        let (mut r, mut base, mut e) = (1i64, x.rem_euclid(self.p), self.p - 2);
        while e > 0 {
            if e & 1 == 1 {
                r = r * base % self.p;
            }
            base = base * base % self.p;
            e >>= 1;
        }
        r
    }

    fn add(&self, u: Option<(i64, i64)>, v: Option<(i64, i64)>) -> Option<(i64, i64)> {
        let ((x1, y1), (x2, y2)) = match (u, v) {
            (None, q) | (q, None) => return q,
            (Some(u), Some(v)) => (u, v),
        };
        let p = self.p;
        let l = if x1 == x2 {
            if (y1 + y2) % p == 0 {
                return None;
            }
            (3 * x1 * x1 + self.a) % p * self.inv(2 * y1) % p
        } else {
            (y2 - y1).rem_euclid(p) * self.inv(x2 - x1) % p
        };
        let x3 = (l * l - x1 - x2).rem_euclid(p);
        Some((x3, (l * (x1 - x3) - y1).rem_euclid(p)))
    }
}

fn small(q: &Point) -> Option<(i64, i64)> {
    match q {
        Point::Identity => None,
        Point::Affine { x, y } => Some((x.to_i64().unwrap(), y.to_i64().unwrap())),
    }
}

fn ec_oracle() -> Check {
    let curve = CurveParams::tiny();
    let o = Small {
        p: curve.p.to_i64().unwrap(),
        a: curve.a.to_i64().unwrap(),
    };
    let n = curve.n.to_usize().unwrap();
    let g = small(&curve.g);
    let mut points = Vec::with_capacity(n);
    let mut acc = None;
    for k in 0..n {
        let got = scalar_mul(&k.into(), &curve.g, &curve).map_err(|e| e.to_string())?;
        if small(&got) != acc {
            return Err(format!("scalar_mul disagrees at k = {k}"));
        }
        points.push(got);
        acc = o.add(acc, g);
    }
    if acc.is_some() {
        return Err("n·G is not the identity".into());
    }
    // Index of every point, then the full addition table through the crate.
    let index: BTreeMap<Option<(i64, i64)>, usize> = points
        .iter()
        .enumerate()
        .map(|(i, q)| (small(q), i))
        .collect();
    if index.len() != n {
        return Err("multiples of G are not distinct".into());
    }
    let mut table = vec![0usize; n * n];
    for i in 0..n {
        for j in 0..n {
            let s = add(&points[i], &points[j], &curve).map_err(|e| e.to_string())?;
            let want = o.add(small(&points[i]), small(&points[j]));
            if small(&s) != want {
                return Err(format!("add disagrees at ({i}, {j})"));
            }
            table[i * n + j] = index[&want];
        }
    }
    let mut triples = 0u64;
    for i in 0..n {
        if table[i] != i || table[i * n] != i {
            return Err("identity law".into());
        }
        if !(0..n).any(|j| table[i * n + j] == 0) {
            return Err("inverse law".into());
        }
        for j in 0..n {
            if table[i * n + j] != table[j * n + i] {
                return Err("commutativity".into());
            }
            let ij = table[i * n + j];
            for k in 0..n {
                if table[ij * n + k] != table[i * n + table[j * n + k]] {
                    return Err(format!("associativity at ({i}, {j}, {k})"));
                }
                triples += 1;
            }
        }
    }
    ensure(
        triples == (n as u64).pow(3),
        format!("all k in [0, {n}) agree; group axioms over {triples} triples"),
    )
}

fn determinism() -> Check {
    let mut scenarios = suite::paper_attacks();
    let mut faulted = scenarios[5].clone();
    faulted.id = "faulted-recovery".into();
    faulted.faults = vec![
        FaultSpec {
            point: FaultPoint::PrRcNonce,
            mode: FaultMode::Once,
        },
        FaultSpec {
            point: FaultPoint::PrUserCheck,
            mode: FaultMode::Always,
        },
    ];
    scenarios.push(faulted);
    let parallel = run_all(&scenarios, 8).map_err(|e| e.to_string())?;
    let mut differing = Vec::new();
    for (s, (a, _)) in scenarios.iter().zip(&parallel.runs) {
        let b = run_scenario(s).map_err(|e| e.to_string())?;
        if a.verdict.to_json_line() != b.verdict.to_json_line()
            || a.transcript.to_text() != b.transcript.to_text()
        {
            differing.push(s.id.clone());
        }
    }
    ensure(
        differing.is_empty(),
        format!(
            "{} scenarios rerun, differing {differing:?}",
            scenarios.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 14] = [
        ("legacy completeness", legacy_completeness),
        ("legacy offline password guessing", legacy_guessing),
        ("legacy user impersonation", legacy_impersonation),
        ("legacy server masquerade", legacy_masquerade),
        ("proposed offline password guessing", proposed_guessing),
        (
            "proposed forged logins and masquerades",
            proposed_forgery_and_masquerade,
        ),
        ("proposed replay", proposed_replay),
        ("proposed honest login", proposed_honest),
        ("cross-store invariant", cross_store),
        ("fault-injection atomicity", atomicity),
        ("fuzzy extractor", fuzzy_extractor),
        ("feature matrix", matrix),
        ("ec oracle", ec_oracle),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {:>2} {tag} {name}: {detail} [{:.2?}]",
            n + 1,
            t.elapsed()
        );
    }
    println!("acceptance: {}/14 passed", 14 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

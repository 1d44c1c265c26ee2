//! Deterministic message fabric: a FIFO network with three channel classes,
//! insecure-channel faults, a transcript, and the [`System`] that wires the
//! three proposed-scheme actors together.

pub mod attacks;
pub mod model;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biometric::{FuzzyExtractor, Template};
use crate::crypto::{canonical_id, Block32, CryptoError, Rng, SymKey};
use crate::envelope::{Envelope, Phase};
use crate::proposed::actors::{Audit, Step};
use crate::proposed::store::UserRecord;
use crate::proposed::ProposedCard;
use crate::proposed::{
    Addr, ChannelClass, Cx, Event, Faults, RcActor, RcStore, ServerActor, ServerStore, UserActor,
    UserTask,
};

/// Deliveries allowed per [`System::run`] before giving up.
pub const DEFAULT_BUDGET: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("no quiescence after {0} deliveries")]
    NonTermination(usize),
    #[error("unknown user {0:?}")]
    UnknownUser(Block32),
    #[error("{phase:?} did not complete: {reason}")]
    PhaseFailed { phase: Phase, reason: String },
    #[error("identity: {0}")]
    Identity(#[from] CryptoError),
}

/// Scripted misbehaviour of the insecure channel. `step` counts insecure
/// sends from 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ChannelFault {
    Drop {
        step: u64,
    },
    Duplicate {
        step: u64,
    },
    /// XOR `mask` onto the trailing bytes of the encoded envelope.
    Corrupt {
        step: u64,
        mask: Vec<u8>,
    },
    /// Hold every insecure message back for `window` deliveries.
    Reorder {
        window: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub class: ChannelClass,
    pub from: Addr,
    pub to: Addr,
    pub bytes: Vec<u8>,
    pub note: Option<&'static str>,
}

impl TranscriptEntry {
    pub fn envelope(&self) -> Option<Envelope> {
        Envelope::decode(&self.bytes).ok()
    }

    pub fn line(&self) -> String {
        let label = match self.envelope() {
            Some(e) => format!("{:?}/{:?}", e.phase, e.stat),
            None => "undecodable".to_owned(),
        };
        let mut line = format!(
            "{:05} {} {} -> {} {} {}",
            self.seq,
            self.class.tag(),
            self.from,
            self.to,
            label,
            hex::encode(&self.bytes)
        );
        if let Some(n) = self.note {
            line.push_str(" #");
            line.push_str(n);
        }
        line
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn record(
        &mut self,
        class: ChannelClass,
        from: Addr,
        to: Addr,
        env: &Envelope,
        note: Option<&'static str>,
    ) -> u64 {
        self.record_bytes(class, from, to, env.encode(), note)
    }

    fn record_bytes(
        &mut self,
        class: ChannelClass,
        from: Addr,
        to: Addr,
        bytes: Vec<u8>,
        note: Option<&'static str>,
    ) -> u64 {
        let seq = self.entries.len() as u64;
        self.entries.push(TranscriptEntry {
            seq,
            class,
            from,
            to,
            bytes,
            note,
        });
        seq
    }

    /// One envelope per line, hex encoded, with channel annotations.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.line());
            out.push('\n');
        }
        out
    }

    pub fn digest(&self) -> Block32 {
        use sha2::{Digest, Sha256};
        Block32(Sha256::digest(self.to_text().as_bytes()).into())
    }

    pub fn insecure(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.entries
            .iter()
            .filter(|e| e.class == ChannelClass::Insecure)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Appends `other`, renumbering its entries.
    pub fn extend(&mut self, other: &Transcript) {
        for e in &other.entries {
            let seq = self.entries.len() as u64;
            self.entries.push(TranscriptEntry { seq, ..e.clone() });
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug)]
struct Delivery {
    from: Addr,
    to: Addr,
    bytes: Vec<u8>,
}

#[derive(Clone, Debug, Default)]
pub struct Network {
    queue: VecDeque<Delivery>,
    delayed: Vec<(u64, Delivery)>,
    faults: Vec<ChannelFault>,
    insecure_sent: u64,
    delivered: u64,
    pub transcript: Transcript,
    /// Insecure traffic addressed to any of these goes to the adversary.
    pub divert: BTreeSet<Addr>,
    inbox: VecDeque<(Addr, Envelope)>,
    adversary_reads: BTreeMap<ChannelClass, u64>,
}

impl Network {
    pub fn with_faults(faults: Vec<ChannelFault>) -> Self {
        Network {
            faults,
            ..Default::default()
        }
    }

    pub fn send(&mut self, from: Addr, to: Addr, class: ChannelClass, env: &Envelope) {
        let mut bytes = env.encode();
        if class != ChannelClass::Insecure {
            self.transcript
                .record_bytes(class, from.clone(), to.clone(), bytes.clone(), None);
            self.queue.push_back(Delivery { from, to, bytes });
            return;
        }
        self.insecure_sent += 1;
        let n = self.insecure_sent;
        let mut note = None;
        let mut copies = 1;
        let mut delay = 0;
        for f in &self.faults {
            match f {
                ChannelFault::Drop { step } if *step == n => copies = 0,
                ChannelFault::Duplicate { step } if *step == n => copies = 2,
                ChannelFault::Corrupt { step, mask } if *step == n => {
                    let start = bytes.len().saturating_sub(mask.len());
                    for (b, m) in bytes[start..].iter_mut().zip(mask) {
                        *b ^= m;
                    }
                    note = Some("corrupted");
                }
                ChannelFault::Reorder { window } => delay = *window,
                _ => {}
            }
        }
        let to = if self.divert.contains(&to) {
            Addr::Adversary
        } else {
            to
        };
        if copies == 0 {
            self.transcript
                .record_bytes(class, from, to, bytes, Some("dropped"));
            return;
        }
        for i in 0..copies {
            let note = if i == 1 { Some("duplicate") } else { note };
            self.transcript
                .record_bytes(class, from.clone(), to.clone(), bytes.clone(), note);
            let d = Delivery {
                from: from.clone(),
                to: to.clone(),
                bytes: bytes.clone(),
            };
            if delay > 0 {
                self.delayed.push((self.delivered + delay, d));
            } else {
                self.queue.push_back(d);
            }
        }
    }

    pub fn set_faults(&mut self, faults: Vec<ChannelFault>) {
        self.faults = faults;
    }

    /// Adversary injection onto the insecure channel, spoofing `from`.
    pub fn inject(&mut self, from: Addr, to: Addr, env: &Envelope) {
        self.transcript.record(
            ChannelClass::Insecure,
            from.clone(),
            to.clone(),
            env,
            Some("injected"),
        );
        self.queue.push_back(Delivery {
            from,
            to,
            bytes: env.encode(),
        });
    }

    /// Injection of arbitrary bytes, decodable or not.
    pub fn inject_raw(&mut self, from: Addr, to: Addr, bytes: Vec<u8>) {
        self.transcript.record_bytes(
            ChannelClass::Insecure,
            from.clone(),
            to.clone(),
            bytes.clone(),
            Some("injected"),
        );
        self.queue.push_back(Delivery { from, to, bytes });
    }

    fn next(&mut self) -> Option<Delivery> {
        let now = self.delivered;
        let mut i = 0;
        while i < self.delayed.len() {
            if self.delayed[i].0 <= now || self.queue.is_empty() {
                let (_, d) = self.delayed.remove(i);
                self.queue.push_back(d);
            } else {
                i += 1;
            }
        }
        let d = self.queue.pop_front()?;
        self.delivered += 1;
        Some(d)
    }

    pub fn is_quiet(&self) -> bool {
        self.queue.is_empty() && self.delayed.is_empty()
    }

    /// What a Dolev-Yao adversary can see: insecure traffic only.
    pub fn observe(&mut self) -> Vec<TranscriptEntry> {
        self.observe_from(0)
    }

    /// Insecure traffic recorded at or after transcript position `start`.
    pub fn observe_from(&mut self, start: usize) -> Vec<TranscriptEntry> {
        let seen: Vec<_> = self.transcript.entries[start.min(self.transcript.len())..]
            .iter()
            .filter(|e| e.class == ChannelClass::Insecure)
            .cloned()
            .collect();
        *self
            .adversary_reads
            .entry(ChannelClass::Insecure)
            .or_insert(0) += seen.len() as u64;
        seen
    }

    /// Reads the adversary performed on secure or out-of-band channels.
    pub fn forbidden_reads(&self) -> u64 {
        self.adversary_reads
            .iter()
            .filter(|(c, _)| **c != ChannelClass::Insecure)
            .map(|(_, n)| n)
            .sum()
    }

    pub fn take_inbox(&mut self) -> Vec<(Addr, Envelope)> {
        self.inbox.drain(..).collect()
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSpec {
    pub name: String,
    pub password: String,
    pub r_cont: String,
    /// Server the user registers with; defaults to the provisioned one.
    #[serde(default)]
    pub server: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvisionSpec {
    pub server: String,
    pub users: Vec<UserSpec>,
    #[serde(default = "default_template_bits")]
    pub template_bits: usize,
}

fn default_template_bits() -> usize {
    crate::biometric::DEFAULT_TEMPLATE_BITS
}

impl ProvisionSpec {
    pub fn single(user: &str, password: &str) -> Self {
        ProvisionSpec {
            server: "server-1".into(),
            users: vec![UserSpec {
                name: user.into(),
                password: password.into(),
                r_cont: format!("mailto:{user}@recovery.example"),
                server: None,
            }],
            template_bits: default_template_bits(),
        }
    }
}

/// Outcome of one honest login run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoginOutcome {
    pub user_authenticated_server: bool,
    pub server_authenticated_user: bool,
    pub user_key: Option<Block32>,
    pub server_key: Option<Block32>,
    pub retries: u32,
}

impl LoginOutcome {
    pub fn mutual(&self) -> bool {
        self.user_authenticated_server
            && self.server_authenticated_user
            && self.user_key.is_some()
            && self.user_key == self.server_key
    }
}

/// RC, one server and its users, connected by a [`Network`].
#[derive(Clone, Debug)]
pub struct System {
    pub rc: RcActor,
    pub server: ServerActor,
    pub users: BTreeMap<Block32, UserActor>,
    pub net: Network,
    pub rng: Rng,
    pub audit: Audit,
    pub faults: Faults,
    pub events: Vec<Event>,
    pub budget: usize,
    pub server_name: String,
    /// Who each provisioned user is, for writing user files.
    pub records: BTreeMap<Block32, UserRecord>,
}

impl System {
    /// Empty RC and server with fresh at-rest keys.
    pub fn new(server_name: &str, seed: u64) -> Result<Self, SimError> {
        let mut rng = Rng::new(seed);
        let rk = SymKey::generate(&mut rng);
        let sk = SymKey::generate(&mut rng);
        let mut audit = Audit::default();
        audit.note("rk", rk.expose());
        audit.note("sk", sk.expose());
        let sid = canonical_id(server_name)?;
        Ok(System {
            rc: RcActor::new(RcStore::new(rk)),
            server: ServerActor::new(ServerStore::new(sid, sk)),
            users: BTreeMap::new(),
            net: Network::default(),
            rng,
            audit,
            faults: Faults::none(),
            events: Vec::new(),
            budget: DEFAULT_BUDGET,
            server_name: server_name.to_owned(),
            records: BTreeMap::new(),
        })
    }

    /// Server registration, then user registration for every user.
    pub fn provision(spec: &ProvisionSpec, seed: u64) -> Result<Self, SimError> {
        let mut sys = System::new(&spec.server, seed)?;
        sys.register_server()?;
        let fx = FuzzyExtractor::new(spec.template_bits).map_err(|e| SimError::PhaseFailed {
            phase: Phase::UserRegistration,
            reason: e.to_string(),
        })?;
        for u in &spec.users {
            let id = canonical_id(&u.name)?;
            let sid = match &u.server {
                Some(s) => canonical_id(s)?,
                None => sys.server.sid(),
            };
            let template = Template::random(spec.template_bits, &mut sys.rng);
            sys.records.insert(
                id,
                UserRecord {
                    name: u.name.clone(),
                    server: u.server.clone().unwrap_or_else(|| spec.server.clone()),
                    r_cont: u.r_cont.clone(),
                    template: template.clone(),
                },
            );
            sys.add_user(UserActor::new(id, sid, u.r_cont.clone(), template, fx));
            sys.expect_phase(
                id,
                UserTask::Register {
                    pw: u.password.clone(),
                },
            )?;
        }
        Ok(sys)
    }

    /// Rebuilds a system from persisted stores, user files and cards.
    pub fn from_stores(
        rc: RcStore,
        server: ServerStore,
        server_name: &str,
        users: Vec<(UserRecord, ProposedCard)>,
        seed: u64,
    ) -> Result<Self, SimError> {
        let mut sys = System::new(server_name, seed)?;
        if server.sid != sys.sid() {
            return Err(SimError::PhaseFailed {
                phase: Phase::ServerRegistration,
                reason: format!("server store does not belong to {server_name}"),
            });
        }
        sys.rc = RcActor::new(rc);
        sys.server = ServerActor::new(server);
        for (rec, card) in users {
            let fx =
                FuzzyExtractor::new(rec.template.len()).map_err(|e| SimError::PhaseFailed {
                    phase: Phase::UserRegistration,
                    reason: e.to_string(),
                })?;
            let id = canonical_id(&rec.name)?;
            let mut user =
                UserActor::new(id, card.sid, rec.r_cont.clone(), rec.template.clone(), fx);
            user.card = Some(card);
            sys.records.insert(id, rec);
            sys.add_user(user);
        }
        Ok(sys)
    }

    pub fn add_user(&mut self, user: UserActor) {
        self.users.insert(user.id, user);
    }

    pub fn sid(&self) -> Block32 {
        self.server.sid()
    }

    pub fn register_server(&mut self) -> Result<(), SimError> {
        let mark = self.events.len();
        let s = self.server.begin_registration();
        let from = self.server.addr();
        self.absorb(from, s);
        self.run()?;
        self.require_rc_complete(mark, Phase::ServerRegistration)
    }

    fn require_rc_complete(&self, mark: usize, phase: Phase) -> Result<(), SimError> {
        let done = self.events[mark..]
            .iter()
            .any(|e| matches!(e, Event::PhaseComplete { by: Addr::Rc, phase: p } if *p == phase));
        if done {
            Ok(())
        } else {
            Err(SimError::PhaseFailed {
                phase,
                reason: self.failure_reason(mark),
            })
        }
    }

    fn failure_reason(&self, mark: usize) -> String {
        self.events[mark..]
            .iter()
            .find_map(|e| match e {
                Event::Discarded { by, error, .. } => Some(format!("{by}: {error}")),
                _ => None,
            })
            .unwrap_or_else(|| "aborted".into())
    }

    /// Starts `task` for `id` and runs to quiescence.
    pub fn start(&mut self, id: Block32, task: UserTask) -> Result<usize, SimError> {
        let mark = self.events.len();
        let user = self.users.get_mut(&id).ok_or(SimError::UnknownUser(id))?;
        let mut cx = Cx {
            rng: &mut self.rng,
            audit: &mut self.audit,
            faults: &mut self.faults,
        };
        let s = user.begin(task, &mut cx);
        self.absorb(Addr::User(id), s);
        self.run()?;
        Ok(mark)
    }

    /// Starts `task` for `id` and delivers what follows, without nudging
    /// idle users: the caller plays the adversary in between.
    pub fn begin(&mut self, id: Block32, task: UserTask) -> Result<usize, SimError> {
        let mark = self.events.len();
        let user = self.users.get_mut(&id).ok_or(SimError::UnknownUser(id))?;
        let mut cx = Cx {
            rng: &mut self.rng,
            audit: &mut self.audit,
            faults: &mut self.faults,
        };
        let s = user.begin(task, &mut cx);
        self.absorb(Addr::User(id), s);
        self.pump()?;
        Ok(mark)
    }

    /// Adversary injection followed by delivery to quiescence.
    pub fn inject(&mut self, from: Addr, to: Addr, env: &Envelope) -> Result<(), SimError> {
        self.net.inject(from, to, env);
        self.pump()
    }

    /// Runs `task` and requires the RC (or, for login, the server) to report
    /// completion.
    pub fn expect_phase(&mut self, id: Block32, task: UserTask) -> Result<(), SimError> {
        let phase = task.phase();
        let mark = self.start(id, task)?;
        if phase == Phase::Login {
            let ok = self.events[mark..].iter().any(|e| {
                matches!(
                    e,
                    Event::PhaseComplete {
                        by: Addr::Server(_),
                        phase: Phase::Login
                    }
                )
            });
            return if ok {
                Ok(())
            } else {
                Err(SimError::PhaseFailed {
                    phase,
                    reason: self.failure_reason(mark),
                })
            };
        }
        self.require_rc_complete(mark, phase)
    }

    /// Did the most recent run of `phase` (events after `mark`) complete?
    pub fn completed_since(&self, mark: usize, phase: Phase) -> bool {
        self.events[mark..].iter().any(|e| match e {
            Event::PhaseComplete { by, phase: p } if *p == phase => match phase {
                Phase::Login => matches!(by, Addr::Server(_)),
                _ => *by == Addr::Rc,
            },
            _ => false,
        })
    }

    pub fn login(&mut self, id: Block32, pw: &str) -> Result<LoginOutcome, SimError> {
        let mark = self.start(id, UserTask::Login { pw: pw.into() })?;
        Ok(self.login_outcome(mark))
    }

    pub fn login_outcome(&self, mark: usize) -> LoginOutcome {
        let mut out = LoginOutcome {
            user_authenticated_server: false,
            server_authenticated_user: false,
            user_key: None,
            server_key: None,
            retries: 0,
        };
        for e in &self.events[mark..] {
            match e {
                Event::PeerAuthenticated { by: Addr::User(_) } => {
                    out.user_authenticated_server = true
                }
                Event::PeerAuthenticated {
                    by: Addr::Server(_),
                } => out.server_authenticated_user = true,
                Event::SessionKey {
                    by: Addr::User(_),
                    key,
                } => out.user_key = Some(*key),
                Event::SessionKey {
                    by: Addr::Server(_),
                    key,
                } => out.server_key = Some(*key),
                Event::Retry {
                    by: Addr::User(_),
                    phase: Phase::Login,
                    ..
                } => out.retries += 1,
                _ => {}
            }
        }
        out
    }

    fn absorb(&mut self, from: Addr, step: Step) {
        for o in step.out {
            self.net.send(from.clone(), o.to, o.class, &o.env);
        }
        self.events.extend(step.events);
    }

    /// Delivers until the network is quiet and no user has a pending task.
    pub fn run(&mut self) -> Result<(), SimError> {
        let mut steps = 0usize;
        loop {
            while let Some(d) = self.net.next() {
                steps += 1;
                if steps > self.budget {
                    return Err(SimError::NonTermination(steps));
                }
                self.deliver(d);
            }
            let busy: Vec<Block32> = self
                .users
                .iter()
                .filter(|(_, u)| u.busy())
                .map(|(id, _)| *id)
                .collect();
            if busy.is_empty() {
                return Ok(());
            }
            for id in busy {
                let user = self.users.get_mut(&id).expect("busy user");
                let mut cx = Cx {
                    rng: &mut self.rng,
                    audit: &mut self.audit,
                    faults: &mut self.faults,
                };
                let s = user.on_quiet(&mut cx);
                self.absorb(Addr::User(id), s);
            }
        }
    }

    /// Delivers queued messages only; users are not nudged on quiescence.
    pub fn pump(&mut self) -> Result<(), SimError> {
        let mut steps = 0usize;
        while let Some(d) = self.net.next() {
            steps += 1;
            if steps > self.budget {
                return Err(SimError::NonTermination(steps));
            }
            self.deliver(d);
        }
        Ok(())
    }

    fn deliver(&mut self, d: Delivery) {
        let env = match Envelope::decode(&d.bytes) {
            Ok(env) => env,
            Err(e) => {
                self.events.push(Event::Discarded {
                    by: d.to.clone(),
                    phase: Phase::Login,
                    error: crate::proposed::StepError::Malformed(e.to_string()),
                });
                return;
            }
        };
        let mut cx = Cx {
            rng: &mut self.rng,
            audit: &mut self.audit,
            faults: &mut self.faults,
        };
        let (me, step) = match &d.to {
            Addr::Rc => (Addr::Rc, self.rc.step(&d.from, &env, &mut cx)),
            Addr::Server(sid) if *sid == self.server.sid() => {
                (d.to.clone(), self.server.step(&d.from, &env, &mut cx))
            }
            Addr::User(id) => match self.users.get_mut(id) {
                Some(u) => (d.to.clone(), u.step(&d.from, &env, &mut cx)),
                None => return,
            },
            Addr::Contact(c) => {
                match self.users.values_mut().find(|u| u.r_cont == *c) {
                    // Out-of-band mail reaches the user through their contact.
                    Some(u) => (u.addr(), u.step(&d.to, &env, &mut cx)),
                    None => return,
                }
            }
            Addr::Adversary => {
                self.net.inbox.push_back((d.from, env));
                return;
            }
            Addr::Server(_) => return,
        };
        self.absorb(me, step);
    }

    pub fn user(&self, id: &Block32) -> Option<&UserActor> {
        self.users.get(id)
    }

    /// Biometric key of `id`, reproduced from the card.
    pub fn user_biometric_key(&mut self, id: &Block32) -> Option<Block32> {
        let u = self.users.get(id)?;
        u.biometric_key(&mut self.rng)
    }

    /// Audited secret blocks appearing verbatim in insecure traffic.
    pub fn insecure_secret_hits(&self) -> usize {
        let secrets = self.audit.secret_blocks();
        self.net
            .transcript
            .insecure()
            .map(|e| e.bytes.windows(32).filter(|w| secrets.contains(*w)).count())
            .sum()
    }

    /// All store invariants, including the card identity for every user.
    pub fn check_invariants(&mut self) -> Result<(), crate::proposed::store::InvariantViolation> {
        crate::proposed::store::check_cross_store(&self.rc.store, &self.server.store)?;
        let ids: Vec<Block32> = self.users.keys().copied().collect();
        for id in ids {
            let Some(card) = self.users[&id].card.clone() else {
                continue;
            };
            let b = self
                .user_biometric_key(&id)
                .ok_or(crate::proposed::store::InvariantViolation::CardMismatch(id))?;
            crate::proposed::store::check_card(&self.rc.store, &card, &b)?;
        }
        Ok(())
    }
}

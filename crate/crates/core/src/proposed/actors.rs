//! Message-driven state machines for the user (with card), the RC and the
//! server.
//!
//! Every step takes the sender address and one [`Envelope`] and returns the
//! envelopes to send plus a list of [`Event`]s. Nothing here touches a
//! channel; routing, queuing and adversaries live in `channel`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::biometric::{perturb_per_group, FuzzyExtractor, HelperData, Template};
use crate::crypto::{
    kdf_biokey, open, open_block32, open_block64, seal, Block32, Block64, Rng, SealedBox,
};
use crate::envelope::{Envelope, EnvelopeError, FieldId, Phase, Stat};

use super::store::{RcStore, RcUser, ServerStore};
use super::{
    derive_bp, derive_ks, derive_session_key, derive_xs, derive_xs_from_card, make_challenge,
    make_confirmation, make_login_pair, make_tcx, recover_rn2, recover_rn3, recover_xs_from_tcx,
    seal_tc, ProposedCard,
};

/// Automatic "send again" attempts after the first one.
pub const RETRY_CAP: u32 = 3;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Addr {
    Rc,
    Server(Block32),
    User(Block32),
    /// Out-of-band recovery contact of a user.
    Contact(String),
    Adversary,
}

impl std::fmt::Display for Addr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Addr::Rc => f.write_str("rc"),
            Addr::Server(sid) => write!(f, "server:{}", &sid.to_hex()[..8]),
            Addr::User(id) => write!(f, "user:{}", &id.to_hex()[..8]),
            Addr::Contact(c) => write!(f, "contact:{c}"),
            Addr::Adversary => f.write_str("adversary"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelClass {
    Secure,
    Insecure,
    OutOfBand,
}

impl ChannelClass {
    pub fn tag(self) -> &'static str {
        match self {
            ChannelClass::Secure => "SEC",
            ChannelClass::Insecure => "INS",
            ChannelClass::OutOfBand => "OOB",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outgoing {
    pub to: Addr,
    pub class: ChannelClass,
    pub env: Envelope,
}

/// The equality test (or registration rule) that rejected a message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    AlreadyRegistered,
    NotRegistered,
    Biometric,
    CardDecrypt,
    CardBp,
    LoginRequest,
    ServerChallenge,
    Confirmation,
    NoSession,
    RcSecret,
    ServerSecret,
    ServerReply,
    CardSecret,
    RecoveryNonce,
    Finalization,
    NoPendingPhase,
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepError {
    #[error("stat {stat:?} is not legal for phase {phase:?} here")]
    IllegalStat { phase: Phase, stat: Stat },
    #[error("unknown principal")]
    UnknownPrincipal,
    #[error("verification failed at {0:?}")]
    VerificationFailure(Check),
    #[error("malformed message: {0}")]
    Malformed(String),
}

impl From<EnvelopeError> for StepError {
    fn from(e: EnvelopeError) -> Self {
        StepError::Malformed(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    Discarded {
        by: Addr,
        phase: Phase,
        error: StepError,
    },
    FaultInjected {
        by: Addr,
        point: FaultPoint,
    },
    Retry {
        by: Addr,
        phase: Phase,
        attempt: u32,
    },
    Reverted {
        by: Addr,
        phase: Phase,
    },
    Aborted {
        by: Addr,
        phase: Phase,
    },
    PhaseComplete {
        by: Addr,
        phase: Phase,
    },
    PeerAuthenticated {
        by: Addr,
    },
    SessionKey {
        by: Addr,
        key: Block32,
    },
}

/// A place where a check can be forced to fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultPoint {
    PcRcCheck,
    PcServerCheck,
    PcRcServerReply,
    PcUserCheck,
    PcRcFinal,
    PrRcRequest,
    PrUserVerify,
    PrRcNonce,
    PrServerCheck,
    PrRcServerReply,
    PrUserCheck,
    PrRcFinal,
    CrRcRequest,
    CrUserVerify,
    CrRcNonce,
    CrServerCheck,
    CrRcServerReply,
    CrUserCheck,
    CrRcFinal,
}

impl FaultPoint {
    pub const ALL: [FaultPoint; 19] = [
        FaultPoint::PcRcCheck,
        FaultPoint::PcServerCheck,
        FaultPoint::PcRcServerReply,
        FaultPoint::PcUserCheck,
        FaultPoint::PcRcFinal,
        FaultPoint::PrRcRequest,
        FaultPoint::PrUserVerify,
        FaultPoint::PrRcNonce,
        FaultPoint::PrServerCheck,
        FaultPoint::PrRcServerReply,
        FaultPoint::PrUserCheck,
        FaultPoint::PrRcFinal,
        FaultPoint::CrRcRequest,
        FaultPoint::CrUserVerify,
        FaultPoint::CrRcNonce,
        FaultPoint::CrServerCheck,
        FaultPoint::CrRcServerReply,
        FaultPoint::CrUserCheck,
        FaultPoint::CrRcFinal,
    ];

    pub fn phase(self) -> Phase {
        use FaultPoint::*;
        match self {
            PcRcCheck | PcServerCheck | PcRcServerReply | PcUserCheck | PcRcFinal => {
                Phase::PasswordChange
            }
            PrRcRequest | PrUserVerify | PrRcNonce | PrServerCheck | PrRcServerReply
            | PrUserCheck | PrRcFinal => Phase::PasswordRecovery,
            _ => Phase::CardRecovery,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultMode {
    Once,
    Always,
}

#[derive(Clone, Debug, Default)]
pub struct Faults {
    armed: BTreeMap<FaultPoint, FaultMode>,
    fired: BTreeMap<FaultPoint, u32>,
}

impl Faults {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn arm(&mut self, point: FaultPoint, mode: FaultMode) {
        self.armed.insert(point, mode);
    }

    pub fn fired(&self, point: FaultPoint) -> u32 {
        self.fired.get(&point).copied().unwrap_or(0)
    }

    fn trip(&mut self, point: FaultPoint) -> bool {
        let hit = match self.armed.get(&point) {
            Some(FaultMode::Always) => true,
            Some(FaultMode::Once) => self.fired(point) == 0,
            None => false,
        };
        if hit {
            *self.fired.entry(point).or_insert(0) += 1;
        }
        hit
    }
}

/// Secrets generated or computed by actors, by label, for the secrecy scan
/// and for evaluating symbolic models against real bytes.
#[derive(Clone, Debug, Default)]
pub struct Audit {
    entries: Vec<(&'static str, Vec<u8>)>,
}

impl Audit {
    pub fn note(&mut self, label: &'static str, bytes: &[u8]) {
        self.entries.push((label, bytes.to_vec()));
    }

    pub fn latest(&self, label: &str) -> Option<&[u8]> {
        self.entries
            .iter()
            .rev()
            .find(|(l, _)| *l == label)
            .map(|(_, b)| b.as_slice())
    }

    pub fn entries(&self) -> &[(&'static str, Vec<u8>)] {
        &self.entries
    }

    /// Every 32-byte secret block noted so far (64-byte values contribute
    /// both halves).
    pub fn secret_blocks(&self) -> std::collections::BTreeSet<[u8; 32]> {
        let mut out = std::collections::BTreeSet::new();
        for (_, bytes) in &self.entries {
            for chunk in bytes.chunks_exact(32) {
                out.insert(chunk.try_into().expect("32-byte chunk"));
            }
        }
        out
    }
}

pub struct Cx<'a> {
    pub rng: &'a mut Rng,
    pub audit: &'a mut Audit,
    pub faults: &'a mut Faults,
}

impl Cx<'_> {
    fn fresh(&mut self, label: &'static str) -> Block32 {
        let b = self.rng.random_block();
        self.audit.note(label, &b.0);
        b
    }
}

#[derive(Debug, Default)]
pub struct Step {
    pub out: Vec<Outgoing>,
    pub events: Vec<Event>,
}

impl Step {
    fn send(&mut self, to: Addr, class: ChannelClass, env: Envelope) {
        self.out.push(Outgoing { to, class, env });
    }

    fn event(&mut self, e: Event) {
        self.events.push(e);
    }

    fn discard(by: Addr, phase: Phase, error: StepError) -> Step {
        Step {
            out: Vec::new(),
            events: vec![Event::Discarded { by, phase, error }],
        }
    }
}

fn ids(env: &Envelope) -> Result<(Block32, Block32), StepError> {
    Ok((env.block32(FieldId::Id)?, env.block32(FieldId::Sid)?))
}

fn msg(phase: Phase, stat: Stat, id: &Block32, sid: &Block32) -> Envelope {
    Envelope::new(phase, stat)
        .with(FieldId::Id, id.0)
        .with(FieldId::Sid, sid.0)
}

/// Stat tags and fault points of one credential-update phase.
#[derive(Clone, Copy)]
struct UpdateTags {
    phase: Phase,
    request: Stat,
    verify: Option<Stat>,
    to_server: Stat,
    server_done: Stat,
    to_user: Stat,
    user_ok: Stat,
    rc_request: Option<FaultPoint>,
    user_verify: Option<FaultPoint>,
    rc_nonce: Option<FaultPoint>,
    server_check: FaultPoint,
    rc_server_reply: FaultPoint,
    user_check: FaultPoint,
    rc_final: FaultPoint,
}

const PASSWORD_CHANGE: UpdateTags = UpdateTags {
    phase: Phase::PasswordChange,
    request: Stat::Passchange,
    verify: None,
    to_server: Stat::Passchange,
    server_done: Stat::Complete,
    to_user: Stat::Complete,
    user_ok: Stat::Complete,
    rc_request: None,
    user_verify: None,
    rc_nonce: None,
    server_check: FaultPoint::PcServerCheck,
    rc_server_reply: FaultPoint::PcRcServerReply,
    user_check: FaultPoint::PcUserCheck,
    rc_final: FaultPoint::PcRcFinal,
};

const PASSWORD_RECOVERY: UpdateTags = UpdateTags {
    phase: Phase::PasswordRecovery,
    request: Stat::Recovery,
    verify: Some(Stat::Verify),
    to_server: Stat::Recovery,
    server_done: Stat::Done,
    to_user: Stat::Done,
    user_ok: Stat::Complete,
    rc_request: Some(FaultPoint::PrRcRequest),
    user_verify: Some(FaultPoint::PrUserVerify),
    rc_nonce: Some(FaultPoint::PrRcNonce),
    server_check: FaultPoint::PrServerCheck,
    rc_server_reply: FaultPoint::PrRcServerReply,
    user_check: FaultPoint::PrUserCheck,
    rc_final: FaultPoint::PrRcFinal,
};

const CARD_RECOVERY: UpdateTags = UpdateTags {
    phase: Phase::CardRecovery,
    request: Stat::RecoveryS,
    verify: Some(Stat::VerifyS),
    to_server: Stat::RecoveryS,
    server_done: Stat::DoneS,
    to_user: Stat::DoneS,
    user_ok: Stat::AcceptS,
    rc_request: Some(FaultPoint::CrRcRequest),
    user_verify: Some(FaultPoint::CrUserVerify),
    rc_nonce: Some(FaultPoint::CrRcNonce),
    server_check: FaultPoint::CrServerCheck,
    rc_server_reply: FaultPoint::CrRcServerReply,
    user_check: FaultPoint::CrUserCheck,
    rc_final: FaultPoint::CrRcFinal,
};

fn update_tags(phase: Phase) -> Option<UpdateTags> {
    match phase {
        Phase::PasswordChange => Some(PASSWORD_CHANGE),
        Phase::PasswordRecovery => Some(PASSWORD_RECOVERY),
        Phase::CardRecovery => Some(CARD_RECOVERY),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// User

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum UserTask {
    Register { pw: String },
    Login { pw: String },
    PasswordChange { old: String, new: String },
    PasswordRecovery { new: String },
    CardRecovery { new: String },
}

impl UserTask {
    pub fn phase(&self) -> Phase {
        match self {
            UserTask::Register { .. } => Phase::UserRegistration,
            UserTask::Login { .. } => Phase::Login,
            UserTask::PasswordChange { .. } => Phase::PasswordChange,
            UserTask::PasswordRecovery { .. } => Phase::PasswordRecovery,
            UserTask::CardRecovery { .. } => Phase::CardRecovery,
        }
    }
}

#[derive(Clone, Debug)]
enum UState {
    AwaitCard { helper: HelperData },
    AwaitChallenge { xs: Block32, rn2: Block32 },
    AwaitNonce,
    AwaitUpdate { b: Block32 },
    AwaitNewCard { helper: HelperData },
    Committed { snapshot: Option<ProposedCard> },
    Done,
}

#[derive(Clone, Debug)]
struct Running {
    task: UserTask,
    attempts: u32,
    state: UState,
}

/// A person with a card and a biometric reader.
#[derive(Clone, Debug)]
pub struct UserActor {
    pub id: Block32,
    pub sid: Block32,
    pub r_cont: String,
    template: Template,
    /// Flip one random bit in every repetition group on each reading.
    pub noisy_readings: bool,
    extractor: FuzzyExtractor,
    pub card: Option<ProposedCard>,
    pub session_key: Option<Block32>,
    running: Option<Running>,
}

impl UserActor {
    pub fn new(
        id: Block32,
        sid: Block32,
        r_cont: impl Into<String>,
        template: Template,
        extractor: FuzzyExtractor,
    ) -> Self {
        UserActor {
            id,
            sid,
            r_cont: r_cont.into(),
            template,
            noisy_readings: false,
            extractor,
            card: None,
            session_key: None,
            running: None,
        }
    }

    pub fn addr(&self) -> Addr {
        Addr::User(self.id)
    }

    /// Replaces the person's biometric (an injury, a different finger).
    pub fn set_template(&mut self, template: Template) {
        self.template = template;
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn extractor(&self) -> &FuzzyExtractor {
        &self.extractor
    }

    pub fn busy(&self) -> bool {
        self.running.is_some()
    }

    /// Walks away from the running task without further messages.
    pub fn abandon(&mut self) {
        self.running = None;
    }

    pub fn current_phase(&self) -> Option<Phase> {
        self.running.as_ref().map(|r| r.task.phase())
    }

    fn reading(&self, rng: &mut Rng) -> Template {
        if self.noisy_readings {
            perturb_per_group(&self.template, self.extractor.repetition(), rng)
        } else {
            self.template.clone()
        }
    }

    /// Biometric key reproduced from a fresh reading and the card's helper.
    pub fn biometric_key(&self, rng: &mut Rng) -> Option<Block32> {
        let card = self.card.as_ref()?;
        self.extractor.rep(&self.reading(rng), &card.helper).ok()
    }

    pub fn begin(&mut self, task: UserTask, cx: &mut Cx) -> Step {
        self.running = Some(Running {
            task,
            attempts: 0,
            state: UState::Done,
        });
        self.initiate(cx)
    }

    fn fail_local(&mut self, phase: Phase, check: Check) -> Step {
        self.running = None;
        let mut s = Step::discard(self.addr(), phase, StepError::VerificationFailure(check));
        s.event(Event::Aborted {
            by: self.addr(),
            phase,
        });
        s
    }

    /// Reads the card: `B`, `TC_s`, `BP` and `X_s` for password `pw`.
    fn open_card(
        &self,
        pw: &str,
        cx: &mut Cx,
    ) -> Result<(Block32, Block64, Block32, Block32), Check> {
        let card = self.card.as_ref().ok_or(Check::NotRegistered)?;
        if card.id != self.id || card.sid != self.sid {
            return Err(Check::NotRegistered);
        }
        let qx = card.qx.as_ref().ok_or(Check::CardDecrypt)?;
        let b = self
            .extractor
            .rep(&self.reading(cx.rng), &card.helper)
            .map_err(|_| Check::Biometric)?;
        let tc = open_block64(qx, &kdf_biokey(&b)).map_err(|_| Check::CardDecrypt)?;
        let bp = derive_bp(pw, &b).map_err(|_| Check::CardBp)?;
        let xs = derive_xs_from_card(&tc, &bp);
        Ok((b, tc, bp, xs))
    }

    fn initiate(&mut self, cx: &mut Cx) -> Step {
        let Some(run) = self.running.clone() else {
            return Step::default();
        };
        let phase = run.task.phase();
        let (id, sid) = (self.id, self.sid);
        let mut s = Step::default();
        let state = match &run.task {
            UserTask::Register { pw } => {
                let (b, helper) = match self.extractor.gen(&self.template, cx.rng) {
                    Ok(v) => v,
                    Err(_) => return self.fail_local(phase, Check::Biometric),
                };
                cx.audit.note("b", &b.0);
                let Ok(bp) = derive_bp(pw, &b) else {
                    return self.fail_local(phase, Check::CardBp);
                };
                cx.audit.note("bp", &bp.0);
                let env = Envelope::new(phase, Stat::Register)
                    .with(FieldId::Id, id.0)
                    .with(FieldId::Bp, bp.0)
                    .with(FieldId::Sid, sid.0)
                    .with(FieldId::Rcont, self.r_cont.as_bytes());
                s.send(Addr::Rc, ChannelClass::Secure, env);
                UState::AwaitCard { helper }
            }
            UserTask::Login { pw } => {
                let (b, tc, bp, xs) = match self.open_card(pw, cx) {
                    Ok(v) => v,
                    Err(c) => return self.fail_local(phase, c),
                };
                for (label, bytes) in [("b", &b.0[..]), ("tc", &tc.0[..]), ("bp", &bp.0[..])] {
                    cx.audit.note(label, bytes);
                }
                cx.audit.note("xs", &xs.0);
                let rn2 = cx.fresh("rn2");
                let (m1, m2) = make_login_pair(&id, &xs, &rn2);
                let env = msg(phase, Stat::Login, &id, &sid)
                    .with(FieldId::M1, m1.0)
                    .with(FieldId::M2, m2.0);
                s.send(Addr::Server(sid), ChannelClass::Insecure, env);
                UState::AwaitChallenge { xs, rn2 }
            }
            UserTask::PasswordChange { old, new } => {
                let (b, tc, _, xs) = match self.open_card(old, cx) {
                    Ok(v) => v,
                    Err(c) => return self.fail_local(phase, c),
                };
                let Ok(bp_new) = derive_bp(new, &b) else {
                    return self.fail_local(phase, Check::CardBp);
                };
                cx.audit.note("bp_new", &bp_new.0);
                let tcx = make_tcx(&tc, &xs);
                let env = Envelope::new(phase, Stat::Passchange)
                    .with(FieldId::Id, id.0)
                    .with(FieldId::Tcx, tcx.0)
                    .with(FieldId::BpNew, bp_new.0)
                    .with(FieldId::Sid, sid.0);
                s.send(Addr::Rc, ChannelClass::Secure, env);
                UState::AwaitUpdate { b }
            }
            UserTask::PasswordRecovery { .. } => {
                s.send(
                    Addr::Rc,
                    ChannelClass::Secure,
                    msg(phase, Stat::Recovery, &id, &sid),
                );
                UState::AwaitNonce
            }
            UserTask::CardRecovery { .. } => {
                s.send(
                    Addr::Rc,
                    ChannelClass::Secure,
                    msg(phase, Stat::RecoveryS, &id, &sid),
                );
                UState::AwaitNonce
            }
        };
        if let Some(r) = self.running.as_mut() {
            r.state = state;
        }
        s
    }

    /// "Send the request again", bounded by [`RETRY_CAP`].
    pub fn retry(&mut self, cx: &mut Cx) -> Step {
        let Some(run) = self.running.as_mut() else {
            return Step::default();
        };
        let phase = run.task.phase();
        if run.attempts >= RETRY_CAP {
            self.running = None;
            let mut s = Step::default();
            s.event(Event::Aborted {
                by: self.addr(),
                phase,
            });
            return s;
        }
        run.attempts += 1;
        let attempt = run.attempts;
        let mut s = self.initiate(cx);
        s.events.insert(
            0,
            Event::Retry {
                by: Addr::User(self.id),
                phase,
                attempt,
            },
        );
        s
    }

    /// Called when the network has nothing left to deliver.
    pub fn on_quiet(&mut self, cx: &mut Cx) -> Step {
        let Some(run) = &self.running else {
            return Step::default();
        };
        match run.state {
            UState::Done | UState::Committed { .. } => {
                let phase = run.task.phase();
                self.running = None;
                let mut s = Step::default();
                s.event(Event::PhaseComplete {
                    by: self.addr(),
                    phase,
                });
                s
            }
            _ => self.retry(cx),
        }
    }

    pub fn step(&mut self, from: &Addr, env: &Envelope, cx: &mut Cx) -> Step {
        let me = self.addr();
        let phase = env.phase;
        let Some(run) = self.running.clone() else {
            return Step::discard(
                me,
                phase,
                StepError::VerificationFailure(Check::NoPendingPhase),
            );
        };
        if run.task.phase() != phase {
            return Step::discard(
                me,
                phase,
                StepError::IllegalStat {
                    phase,
                    stat: env.stat,
                },
            );
        }
        match self.dispatch(from, env, run, cx) {
            Ok(s) => s,
            Err(e) => Step::discard(me, phase, e),
        }
    }

    fn check_ids(&self, env: &Envelope) -> Result<(), StepError> {
        let id = env.block32(FieldId::Id)?;
        let sid_ok = match env.get(FieldId::Sid) {
            Some(_) => env.block32(FieldId::Sid)? == self.sid,
            None => env.stat == Stat::Fail,
        };
        if id != self.id || !sid_ok {
            return Err(StepError::UnknownPrincipal);
        }
        Ok(())
    }

    fn dispatch(
        &mut self,
        from: &Addr,
        env: &Envelope,
        run: Running,
        cx: &mut Cx,
    ) -> Result<Step, StepError> {
        let me = self.addr();
        let phase = env.phase;
        let illegal = StepError::IllegalStat {
            phase,
            stat: env.stat,
        };
        self.check_ids(env)?;
        let (id, sid) = (self.id, self.sid);
        let mut s = Step::default();
        match (&run.state, env.stat) {
            (UState::AwaitCard { helper }, Stat::Complete)
                if phase == Phase::UserRegistration && *from == Addr::Rc =>
            {
                let UserTask::Register { pw } = &run.task else {
                    return Err(illegal);
                };
                let bp = env.block32(FieldId::Bp)?;
                let tc = env.block64(FieldId::Tc)?;
                let accepted = self
                    .extractor
                    .rep(&self.reading(cx.rng), helper)
                    .ok()
                    .and_then(|b| (derive_bp(pw, &b).ok() == Some(bp)).then_some(b));
                match accepted {
                    Some(b) => {
                        let mut card = ProposedCard {
                            id,
                            sid,
                            qx: None,
                            helper: helper.clone(),
                            transit_bp: Some(bp),
                            transit_tc: Some(tc),
                        };
                        card.finalize(&tc, &b, cx.rng);
                        self.card = Some(card);
                        s.send(
                            Addr::Rc,
                            ChannelClass::Secure,
                            msg(phase, Stat::Accept, &id, &sid),
                        );
                        self.set_state(UState::Done);
                    }
                    None => {
                        s.send(
                            Addr::Rc,
                            ChannelClass::Secure,
                            msg(phase, Stat::Reject, &id, &sid),
                        );
                        s.event(Event::Discarded {
                            by: me.clone(),
                            phase,
                            error: StepError::VerificationFailure(Check::CardBp),
                        });
                        s.event(Event::Aborted { by: me, phase });
                        self.running = None;
                    }
                }
            }
            (UState::AwaitChallenge { xs, rn2 }, Stat::Auth) if phase == Phase::Login => {
                let m4 = env.block32(FieldId::M4)?;
                let m5 = env.block32(FieldId::M5)?;
                let rn3 = recover_rn3(&id, xs, rn2, &m5);
                let m6 = make_login_pair(&id, xs, &rn3).0;
                if m4 != m6 {
                    s.event(Event::Discarded {
                        by: me,
                        phase,
                        error: StepError::VerificationFailure(Check::ServerChallenge),
                    });
                    let again = self.retry(cx);
                    s.out.extend(again.out);
                    s.events.extend(again.events);
                    return Ok(s);
                }
                cx.audit.note("rn3", &rn3.0);
                let m7 = make_confirmation(xs, rn2, &rn3);
                s.send(
                    from.clone(),
                    ChannelClass::Insecure,
                    msg(phase, Stat::Auth, &id, &sid).with(FieldId::M7, m7.0),
                );
                let key = derive_session_key(rn2, &rn3);
                cx.audit.note("kses", &key.0);
                self.session_key = Some(key);
                s.event(Event::PeerAuthenticated { by: me.clone() });
                s.event(Event::SessionKey { by: me, key });
                self.set_state(UState::Done);
            }
            (UState::AwaitNonce, stat)
                if Some(stat) == update_tags(phase).and_then(|t| t.verify)
                    && matches!(from, Addr::Contact(c) if *c == self.r_cont) =>
            {
                let tags = update_tags(phase).expect("recovery phase");
                let nonce = env.block32(FieldId::Nonce)?;
                if cx.faults.trip(tags.user_verify.expect("recovery fault")) {
                    s.event(Event::FaultInjected {
                        by: me.clone(),
                        point: tags.user_verify.expect("recovery fault"),
                    });
                    s.event(Event::Discarded {
                        by: me,
                        phase,
                        error: StepError::VerificationFailure(Check::RecoveryNonce),
                    });
                    let again = self.retry(cx);
                    s.out.extend(again.out);
                    s.events.extend(again.events);
                    return Ok(s);
                }
                let (b, new_state, new) = match &run.task {
                    UserTask::PasswordRecovery { new } => {
                        let Some(b) = self.biometric_key(cx.rng) else {
                            return Ok(self.fail_local(phase, Check::Biometric));
                        };
                        (b, UState::AwaitUpdate { b }, new)
                    }
                    UserTask::CardRecovery { new } => {
                        let (b, helper) = self
                            .extractor
                            .gen(&self.reading(cx.rng), cx.rng)
                            .map_err(|_| StepError::VerificationFailure(Check::Biometric))?;
                        (b, UState::AwaitNewCard { helper }, new)
                    }
                    _ => return Err(illegal),
                };
                cx.audit.note("b", &b.0);
                let bp_new = derive_bp(new, &b)
                    .map_err(|_| StepError::VerificationFailure(Check::CardBp))?;
                cx.audit.note("bp_new", &bp_new.0);
                s.send(
                    Addr::Rc,
                    ChannelClass::Secure,
                    msg(phase, stat, &id, &sid)
                        .with(FieldId::Nonce, nonce.0)
                        .with(FieldId::BpNew, bp_new.0),
                );
                self.set_state(new_state);
            }
            (UState::AwaitUpdate { b }, stat)
                if *from == Addr::Rc
                    && phase != Phase::CardRecovery
                    && Some(stat) == update_tags(phase).map(|t| t.to_user) =>
            {
                let tags = update_tags(phase).expect("update phase");
                let tc_new = env.block64(FieldId::TcNew)?;
                let tc = env.block64(FieldId::Tc)?;
                let card = self.card.as_ref().ok_or(StepError::UnknownPrincipal)?;
                let tc_cs = card
                    .qx
                    .as_ref()
                    .and_then(|qx| open_block64(qx, &kdf_biokey(b)).ok());
                let injected = cx.faults.trip(tags.user_check);
                if injected || tc_cs != Some(tc) {
                    if injected {
                        s.event(Event::FaultInjected {
                            by: me.clone(),
                            point: tags.user_check,
                        });
                    }
                    return Ok(self.reject_update(s, phase, Check::CardSecret, cx));
                }
                s.send(
                    Addr::Rc,
                    ChannelClass::Secure,
                    msg(phase, tags.user_ok, &id, &sid),
                );
                let snapshot = self.card.clone();
                let b = *b;
                if let Some(card) = self.card.as_mut() {
                    card.qx = Some(seal_tc(&tc_new, &b, cx.rng));
                }
                self.set_state(UState::Committed { snapshot });
            }
            (UState::AwaitNewCard { helper }, Stat::DoneS)
                if *from == Addr::Rc && phase == Phase::CardRecovery =>
            {
                let UserTask::CardRecovery { new } = &run.task else {
                    return Err(illegal);
                };
                let bp = env.block32(FieldId::Bp)?;
                let tc = env.block64(FieldId::Tc)?;
                let accepted = self
                    .extractor
                    .rep(&self.reading(cx.rng), helper)
                    .ok()
                    .and_then(|b| (derive_bp(new, &b).ok() == Some(bp)).then_some(b));
                let injected = cx.faults.trip(FaultPoint::CrUserCheck);
                match accepted {
                    Some(b) if !injected => {
                        let mut card = ProposedCard {
                            id,
                            sid,
                            qx: None,
                            helper: helper.clone(),
                            transit_bp: Some(bp),
                            transit_tc: Some(tc),
                        };
                        card.finalize(&tc, &b, cx.rng);
                        let snapshot = self.card.replace(card);
                        s.send(
                            Addr::Rc,
                            ChannelClass::Secure,
                            msg(phase, Stat::AcceptS, &id, &sid),
                        );
                        self.set_state(UState::Committed { snapshot });
                    }
                    _ => {
                        if injected {
                            s.event(Event::FaultInjected {
                                by: me,
                                point: FaultPoint::CrUserCheck,
                            });
                        }
                        return Ok(self.reject_update(s, phase, Check::CardBp, cx));
                    }
                }
            }
            (state, Stat::Fail) if *from == Addr::Rc => {
                if let UState::Committed { snapshot } = state {
                    self.card = snapshot.clone();
                    s.event(Event::Reverted {
                        by: me.clone(),
                        phase,
                    });
                }
                let again = self.retry(cx);
                s.out.extend(again.out);
                s.events.extend(again.events);
            }
            _ => return Err(illegal),
        }
        Ok(s)
    }

    fn reject_update(&mut self, mut s: Step, phase: Phase, check: Check, cx: &mut Cx) -> Step {
        let me = self.addr();
        s.event(Event::Discarded {
            by: me,
            phase,
            error: StepError::VerificationFailure(check),
        });
        s.send(
            Addr::Rc,
            ChannelClass::Secure,
            msg(phase, Stat::Fail, &self.id, &self.sid),
        );
        let again = self.retry(cx);
        s.out.extend(again.out);
        s.events.extend(again.events);
        s
    }

    fn set_state(&mut self, state: UState) {
        if let Some(r) = self.running.as_mut() {
            r.state = state;
        }
    }
}

// ---------------------------------------------------------------------------
// Registration center

#[derive(Clone, Debug)]
struct PendingUser {
    sid: Block32,
    w: Block32,
    bp: Block32,
    r_cont: String,
    tc: Option<Block64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TicketStage {
    AwaitVerify,
    AwaitServer,
    AwaitUser,
}

#[derive(Clone, Debug)]
struct Ticket {
    phase: Phase,
    stage: TicketStage,
    nonce: Option<Block32>,
    tx_s: Option<Block64>,
    tx_ns: Option<Block64>,
    tc_ns: Option<Block64>,
    bp_new: Option<Block32>,
    resends: u32,
}

#[derive(Clone, Debug)]
pub struct RcActor {
    pub store: RcStore,
    pending_servers: BTreeMap<Block32, Block32>,
    pending_users: BTreeMap<Block32, PendingUser>,
    tickets: BTreeMap<Block32, Ticket>,
}

impl RcActor {
    pub fn new(store: RcStore) -> Self {
        RcActor {
            store,
            pending_servers: BTreeMap::new(),
            pending_users: BTreeMap::new(),
            tickets: BTreeMap::new(),
        }
    }

    pub fn open_tickets(&self) -> usize {
        self.tickets.len() + self.pending_users.len() + self.pending_servers.len()
    }

    pub fn step(&mut self, from: &Addr, env: &Envelope, cx: &mut Cx) -> Step {
        let phase = env.phase;
        match self.dispatch(from, env, cx) {
            Ok(s) => s,
            Err(e) => Step::discard(Addr::Rc, phase, e),
        }
    }

    fn user_record(&self, id: &Block32, sid: &Block32) -> Result<RcUser, StepError> {
        match self.store.users.get(id) {
            Some(u) if u.sid == *sid => Ok(u.clone()),
            _ => Err(StepError::UnknownPrincipal),
        }
    }

    fn k_s(&self, sid: &Block32) -> Result<Block32, StepError> {
        let hk = self
            .store
            .servers
            .get(sid)
            .ok_or(StepError::UnknownPrincipal)?;
        open_block32(hk, &self.store.rk).map_err(|e| StepError::Malformed(e.to_string()))
    }

    fn open64(&self, b: &SealedBox) -> Result<Block64, StepError> {
        open_block64(b, &self.store.rk).map_err(|e| StepError::Malformed(e.to_string()))
    }

    fn dispatch(&mut self, from: &Addr, env: &Envelope, cx: &mut Cx) -> Result<Step, StepError> {
        let phase = env.phase;
        let illegal = StepError::IllegalStat {
            phase,
            stat: env.stat,
        };
        let mut s = Step::default();
        match (phase, env.stat) {
            (Phase::ServerRegistration, Stat::Register) => {
                let sid = env.block32(FieldId::Sid)?;
                if *from != Addr::Server(sid) {
                    return Err(StepError::UnknownPrincipal);
                }
                if self.store.servers.contains_key(&sid) || self.pending_servers.contains_key(&sid)
                {
                    return Err(StepError::VerificationFailure(Check::AlreadyRegistered));
                }
                let rn1 = cx.fresh("rn1");
                let ks = derive_ks(&sid, &rn1);
                cx.audit.note("ks", &ks.0);
                self.pending_servers.insert(sid, ks);
                s.send(
                    Addr::Server(sid),
                    ChannelClass::Secure,
                    Envelope::new(phase, Stat::Accept)
                        .with(FieldId::Sid, sid.0)
                        .with(FieldId::Ks, ks.0),
                );
            }
            (Phase::ServerRegistration, Stat::Ack) => {
                let sid = env.block32(FieldId::Sid)?;
                if *from != Addr::Server(sid) {
                    return Err(StepError::UnknownPrincipal);
                }
                let ks = self
                    .pending_servers
                    .remove(&sid)
                    .ok_or(StepError::VerificationFailure(Check::NoPendingPhase))?;
                let hk = seal(&ks.0, &self.store.rk, cx.rng);
                self.store.servers.insert(sid, hk);
                s.event(Event::PhaseComplete {
                    by: Addr::Rc,
                    phase,
                });
            }
            (Phase::UserRegistration, Stat::Register) => {
                let (id, sid) = ids(env)?;
                let bp = env.block32(FieldId::Bp)?;
                let r_cont = String::from_utf8(env.require(FieldId::Rcont)?.to_vec())
                    .map_err(|e| StepError::Malformed(e.to_string()))?;
                if !self.store.servers.contains_key(&sid) || *from != Addr::User(id) {
                    return Err(StepError::UnknownPrincipal);
                }
                if self.store.users.contains_key(&id) || self.pending_users.contains_key(&id) {
                    return Err(StepError::VerificationFailure(Check::AlreadyRegistered));
                }
                let w = cx.fresh("w");
                let tx = Block64::concat(&w, &bp);
                self.pending_users.insert(
                    id,
                    PendingUser {
                        sid,
                        w,
                        bp,
                        r_cont,
                        tc: None,
                    },
                );
                s.send(
                    Addr::Server(sid),
                    ChannelClass::Secure,
                    msg(phase, Stat::Register, &id, &sid).with(FieldId::Tx, tx.0),
                );
            }
            (Phase::UserRegistration, Stat::Complete) => {
                let (id, sid) = ids(env)?;
                let ks = self.k_s(&sid)?;
                let p = match self.pending_users.get_mut(&id) {
                    Some(p) if p.sid == sid && *from == Addr::Server(sid) && p.tc.is_none() => p,
                    _ => return Err(StepError::UnknownPrincipal),
                };
                let tc = Block64::concat(&ks, &p.w);
                p.tc = Some(tc);
                let card = msg(phase, Stat::Complete, &id, &sid)
                    .with(FieldId::Bp, p.bp.0)
                    .with(FieldId::Tc, tc.0);
                s.send(Addr::User(id), ChannelClass::Secure, card);
            }
            (Phase::UserRegistration, Stat::Accept | Stat::Reject) => {
                let (id, sid) = ids(env)?;
                let p = match self.pending_users.get(&id) {
                    Some(p) if p.sid == sid && *from == Addr::User(id) && p.tc.is_some() => {
                        p.clone()
                    }
                    _ => return Err(StepError::UnknownPrincipal),
                };
                self.pending_users.remove(&id);
                if env.stat == Stat::Accept {
                    let rk = &self.store.rk;
                    let tx = Block64::concat(&p.w, &p.bp);
                    let user = RcUser {
                        sid,
                        r_cov: seal(p.r_cont.as_bytes(), rk, cx.rng),
                        ex: seal(&tx.0, rk, cx.rng),
                        ux: seal(&p.tc.expect("card issued").0, rk, cx.rng),
                    };
                    self.store.users.insert(id, user);
                    s.event(Event::PhaseComplete {
                        by: Addr::Rc,
                        phase,
                    });
                } else {
                    s.send(
                        Addr::Server(sid),
                        ChannelClass::Secure,
                        msg(phase, Stat::Deregister, &id, &sid),
                    );
                    s.event(Event::Aborted {
                        by: Addr::Rc,
                        phase,
                    });
                }
            }
            (phase, stat) => {
                let tags = update_tags(phase).ok_or(illegal.clone())?;
                return self.update_step(tags, from, env, stat, cx);
            }
        }
        Ok(s)
    }

    fn update_step(
        &mut self,
        tags: UpdateTags,
        from: &Addr,
        env: &Envelope,
        stat: Stat,
        cx: &mut Cx,
    ) -> Result<Step, StepError> {
        let phase = tags.phase;
        let illegal = StepError::IllegalStat { phase, stat };
        let id = env.block32(FieldId::Id)?;
        let sid = env.block32(FieldId::Sid)?;
        let user = self.user_record(&id, &sid)?;
        let from_user = *from == Addr::User(id);
        let from_server = *from == Addr::Server(sid);
        let mut s = Step::default();
        let stage = self.tickets.get(&id).map(|t| (t.phase, t.stage));

        if from_user && stat == tags.request {
            if let Some(point) = tags.rc_request {
                if cx.faults.trip(point) {
                    s.event(Event::FaultInjected {
                        by: Addr::Rc,
                        point,
                    });
                    s.event(Event::Discarded {
                        by: Addr::Rc,
                        phase,
                        error: StepError::VerificationFailure(Check::NotRegistered),
                    });
                    return Ok(s);
                }
            }
            if phase == Phase::PasswordChange {
                let tcx = env.block64(FieldId::Tcx)?;
                let bp_new = env.block32(FieldId::BpNew)?;
                let tc = self.open64(&user.ux)?;
                let ks = self.k_s(&sid)?;
                let tx = self.open64(&user.ex)?;
                let x_cs = derive_xs(&ks, &tx);
                let injected = cx.faults.trip(FaultPoint::PcRcCheck);
                if injected || recover_xs_from_tcx(&tcx, &tc) != Some(x_cs) {
                    if injected {
                        s.event(Event::FaultInjected {
                            by: Addr::Rc,
                            point: FaultPoint::PcRcCheck,
                        });
                    }
                    s.event(Event::Discarded {
                        by: Addr::Rc,
                        phase,
                        error: StepError::VerificationFailure(Check::RcSecret),
                    });
                    self.tickets.remove(&id);
                    s.send(
                        Addr::User(id),
                        ChannelClass::Secure,
                        Envelope::new(phase, Stat::Fail).with(FieldId::Id, id.0),
                    );
                    return Ok(s);
                }
                let ticket = self.new_update(phase, ks, tx, bp_new, cx);
                self.send_to_server(&mut s, tags, &id, &sid, &ticket);
                self.tickets.insert(id, ticket);
            } else {
                let nonce = cx.fresh(if phase == Phase::PasswordRecovery {
                    "rn5"
                } else {
                    "rn7"
                });
                let r_cont = open(&user.r_cov, &self.store.rk)
                    .ok()
                    .and_then(|b| String::from_utf8(b).ok())
                    .ok_or_else(|| StepError::Malformed("R_cov".into()))?;
                self.tickets.insert(
                    id,
                    Ticket {
                        phase,
                        stage: TicketStage::AwaitVerify,
                        nonce: Some(nonce),
                        tx_s: None,
                        tx_ns: None,
                        tc_ns: None,
                        bp_new: None,
                        resends: 0,
                    },
                );
                s.send(
                    Addr::Contact(r_cont),
                    ChannelClass::OutOfBand,
                    msg(phase, tags.verify.expect("recovery"), &id, &sid)
                        .with(FieldId::Nonce, nonce.0),
                );
            }
            return Ok(s);
        }

        if from_user && Some(stat) == tags.verify {
            if stage != Some((phase, TicketStage::AwaitVerify)) {
                return Err(StepError::VerificationFailure(Check::NoPendingPhase));
            }
            let nonce = env.block32(FieldId::Nonce)?;
            let bp_new = env.block32(FieldId::BpNew)?;
            let point = tags.rc_nonce.expect("recovery");
            let injected = cx.faults.trip(point);
            if injected || self.tickets[&id].nonce != Some(nonce) {
                if injected {
                    s.event(Event::FaultInjected {
                        by: Addr::Rc,
                        point,
                    });
                }
                s.event(Event::Discarded {
                    by: Addr::Rc,
                    phase,
                    error: StepError::VerificationFailure(Check::RecoveryNonce),
                });
                return Ok(s);
            }
            let ks = self.k_s(&sid)?;
            let tx = self.open64(&user.ex)?;
            let ticket = self.new_update(phase, ks, tx, bp_new, cx);
            self.send_to_server(&mut s, tags, &id, &sid, &ticket);
            self.tickets.insert(id, ticket);
            return Ok(s);
        }

        if from_server && (stat == tags.server_done || stat == Stat::Fail) {
            if stage != Some((phase, TicketStage::AwaitServer)) {
                return Err(StepError::VerificationFailure(Check::NoPendingPhase));
            }
            let failed = stat == Stat::Fail;
            let injected = !failed && cx.faults.trip(tags.rc_server_reply);
            if failed || injected {
                if injected {
                    s.event(Event::FaultInjected {
                        by: Addr::Rc,
                        point: tags.rc_server_reply,
                    });
                    s.event(Event::Discarded {
                        by: Addr::Rc,
                        phase,
                        error: StepError::VerificationFailure(Check::ServerReply),
                    });
                    // Undo the server's update before asking again.
                    s.send(
                        Addr::Server(sid),
                        ChannelClass::Secure,
                        msg(phase, Stat::Fail, &id, &sid),
                    );
                }
                let ticket = self.tickets.get_mut(&id).expect("ticket");
                if ticket.resends < RETRY_CAP {
                    ticket.resends += 1;
                    let ticket = ticket.clone();
                    s.event(Event::Retry {
                        by: Addr::Rc,
                        phase,
                        attempt: ticket.resends,
                    });
                    self.send_to_server(&mut s, tags, &id, &sid, &ticket);
                } else {
                    self.tickets.remove(&id);
                    s.send(
                        Addr::User(id),
                        ChannelClass::Secure,
                        msg(phase, Stat::Fail, &id, &sid),
                    );
                    s.event(Event::Aborted {
                        by: Addr::Rc,
                        phase,
                    });
                }
                return Ok(s);
            }
            let ticket = self.tickets.get_mut(&id).expect("ticket");
            ticket.stage = TicketStage::AwaitUser;
            let tc_ns = ticket.tc_ns.expect("tc_ns");
            let reply = if phase == Phase::CardRecovery {
                msg(phase, Stat::DoneS, &id, &sid)
                    .with(FieldId::Bp, ticket.bp_new.expect("bp_new").0)
                    .with(FieldId::Tc, tc_ns.0)
            } else {
                let tc = self.open64(&user.ux)?;
                msg(phase, tags.to_user, &id, &sid)
                    .with(FieldId::TcNew, tc_ns.0)
                    .with(FieldId::Tc, tc.0)
            };
            s.send(Addr::User(id), ChannelClass::Secure, reply);
            return Ok(s);
        }

        if from_user && (stat == tags.user_ok || stat == Stat::Fail) {
            let Some(ticket) = self.tickets.get(&id).cloned() else {
                return Err(StepError::VerificationFailure(Check::NoPendingPhase));
            };
            if ticket.phase != phase {
                return Err(illegal);
            }
            if stat == Stat::Fail {
                self.tickets.remove(&id);
                if ticket.stage == TicketStage::AwaitUser {
                    s.send(
                        Addr::Server(sid),
                        ChannelClass::Secure,
                        msg(phase, Stat::Fail, &id, &sid),
                    );
                }
                return Ok(s);
            }
            if ticket.stage != TicketStage::AwaitUser {
                return Err(StepError::VerificationFailure(Check::NoPendingPhase));
            }
            self.tickets.remove(&id);
            if cx.faults.trip(tags.rc_final) {
                s.event(Event::FaultInjected {
                    by: Addr::Rc,
                    point: tags.rc_final,
                });
                s.event(Event::Discarded {
                    by: Addr::Rc,
                    phase,
                    error: StepError::VerificationFailure(Check::Finalization),
                });
                s.send(
                    Addr::Server(sid),
                    ChannelClass::Secure,
                    msg(phase, Stat::Fail, &id, &sid),
                );
                s.send(
                    Addr::User(id),
                    ChannelClass::Secure,
                    msg(phase, Stat::Fail, &id, &sid),
                );
                return Ok(s);
            }
            let rk = &self.store.rk;
            let ux = seal(&ticket.tc_ns.expect("tc_ns").0, rk, cx.rng);
            let ex = seal(&ticket.tx_ns.expect("tx_ns").0, rk, cx.rng);
            if let Some(u) = self.store.users.get_mut(&id) {
                u.ux = ux;
                u.ex = ex;
            }
            s.event(Event::PhaseComplete {
                by: Addr::Rc,
                phase,
            });
            return Ok(s);
        }

        Err(illegal)
    }

    fn new_update(
        &self,
        phase: Phase,
        ks: Block32,
        tx: Block64,
        bp_new: Block32,
        cx: &mut Cx,
    ) -> Ticket {
        let label = match phase {
            Phase::PasswordChange => "rn4",
            Phase::PasswordRecovery => "rn6",
            _ => "rn8",
        };
        let r_new = cx.fresh(label);
        let tx_ns = Block64::concat(&r_new, &bp_new);
        let tc_ns = Block64::concat(&ks, &r_new);
        Ticket {
            phase,
            stage: TicketStage::AwaitServer,
            nonce: None,
            tx_s: Some(tx),
            tx_ns: Some(tx_ns),
            tc_ns: Some(tc_ns),
            bp_new: Some(bp_new),
            resends: 0,
        }
    }

    fn send_to_server(
        &self,
        s: &mut Step,
        tags: UpdateTags,
        id: &Block32,
        sid: &Block32,
        t: &Ticket,
    ) {
        s.send(
            Addr::Server(*sid),
            ChannelClass::Secure,
            msg(tags.phase, tags.to_server, id, sid)
                .with(FieldId::Tx, t.tx_s.expect("tx_s").0)
                .with(FieldId::TxNew, t.tx_ns.expect("tx_ns").0),
        );
    }
}

// ---------------------------------------------------------------------------
// Server

#[derive(Clone, Debug)]
struct LoginSession {
    xs: Block32,
    rn2: Block32,
    rn3: Block32,
}

#[derive(Clone, Debug)]
pub struct ServerActor {
    pub store: ServerStore,
    sessions: BTreeMap<Block32, LoginSession>,
    snapshots: BTreeMap<Block32, SealedBox>,
}

impl ServerActor {
    pub fn new(store: ServerStore) -> Self {
        ServerActor {
            store,
            sessions: BTreeMap::new(),
            snapshots: BTreeMap::new(),
        }
    }

    pub fn sid(&self) -> Block32 {
        self.store.sid
    }

    pub fn addr(&self) -> Addr {
        Addr::Server(self.store.sid)
    }

    pub fn open_sessions(&self) -> usize {
        self.sessions.len()
    }

    /// Sends the server-registration request.
    pub fn begin_registration(&self) -> Step {
        let mut s = Step::default();
        s.send(
            Addr::Rc,
            ChannelClass::Secure,
            Envelope::new(Phase::ServerRegistration, Stat::Register)
                .with(FieldId::Sid, self.store.sid.0),
        );
        s
    }

    pub fn step(&mut self, from: &Addr, env: &Envelope, cx: &mut Cx) -> Step {
        let phase = env.phase;
        match self.dispatch(from, env, cx) {
            Ok(s) => s,
            Err(e) => Step::discard(self.addr(), phase, e),
        }
    }

    fn k_s(&self) -> Result<Block32, StepError> {
        let ek = self
            .store
            .ek
            .as_ref()
            .ok_or(StepError::VerificationFailure(Check::NotRegistered))?;
        open_block32(ek, &self.store.sk).map_err(|e| StepError::Malformed(e.to_string()))
    }

    fn x_s(&self, id: &Block32) -> Result<Block32, StepError> {
        let sx = self
            .store
            .users
            .get(id)
            .ok_or(StepError::UnknownPrincipal)?;
        open_block32(sx, &self.store.sk).map_err(|e| StepError::Malformed(e.to_string()))
    }

    fn dispatch(&mut self, from: &Addr, env: &Envelope, cx: &mut Cx) -> Result<Step, StepError> {
        let phase = env.phase;
        let me = self.addr();
        let own = self.store.sid;
        let illegal = StepError::IllegalStat {
            phase,
            stat: env.stat,
        };
        let mut s = Step::default();
        if phase == Phase::ServerRegistration {
            if env.stat != Stat::Accept || *from != Addr::Rc {
                return Err(illegal);
            }
            if env.block32(FieldId::Sid)? != own {
                return Err(StepError::UnknownPrincipal);
            }
            let ks = env.block32(FieldId::Ks)?;
            self.store.ek = Some(seal(&ks.0, &self.store.sk, cx.rng));
            s.send(
                Addr::Rc,
                ChannelClass::Secure,
                Envelope::new(phase, Stat::Ack).with(FieldId::Sid, own.0),
            );
            return Ok(s);
        }
        let (id, sid) = ids(env)?;
        if sid != own {
            return Err(StepError::UnknownPrincipal);
        }
        match (phase, env.stat) {
            (Phase::UserRegistration, Stat::Register) if *from == Addr::Rc => {
                let tx = env.block64(FieldId::Tx)?;
                let ks = self.k_s()?;
                let xs = derive_xs(&ks, &tx);
                cx.audit.note("xs", &xs.0);
                self.store
                    .users
                    .insert(id, seal(&xs.0, &self.store.sk, cx.rng));
                s.send(
                    Addr::Rc,
                    ChannelClass::Secure,
                    msg(phase, Stat::Complete, &id, &sid),
                );
            }
            (Phase::UserRegistration, Stat::Deregister) if *from == Addr::Rc => {
                if self.store.users.remove(&id).is_some() {
                    s.event(Event::Reverted { by: me, phase });
                }
            }
            (Phase::Login, Stat::Login) => {
                let m1 = env.block32(FieldId::M1)?;
                let m2 = env.block32(FieldId::M2)?;
                let xs = self.x_s(&id)?;
                let rn2 = recover_rn2(&id, &xs, &m2);
                if make_login_pair(&id, &xs, &rn2).0 != m1 {
                    self.sessions.remove(&id);
                    return Err(StepError::VerificationFailure(Check::LoginRequest));
                }
                let rn3 = cx.fresh("rn3");
                let (m4, m5) = make_challenge(&id, &xs, &rn2, &rn3);
                self.sessions.insert(id, LoginSession { xs, rn2, rn3 });
                s.send(
                    from.clone(),
                    ChannelClass::Insecure,
                    msg(phase, Stat::Auth, &id, &sid)
                        .with(FieldId::M4, m4.0)
                        .with(FieldId::M5, m5.0),
                );
            }
            (Phase::Login, Stat::Auth) => {
                let m7 = env.block32(FieldId::M7)?;
                let session = self
                    .sessions
                    .remove(&id)
                    .ok_or(StepError::VerificationFailure(Check::NoSession))?;
                if make_confirmation(&session.xs, &session.rn2, &session.rn3) != m7 {
                    return Err(StepError::VerificationFailure(Check::Confirmation));
                }
                let key = derive_session_key(&session.rn2, &session.rn3);
                s.event(Event::PeerAuthenticated { by: me.clone() });
                s.event(Event::SessionKey {
                    by: me.clone(),
                    key,
                });
                s.event(Event::PhaseComplete { by: me, phase });
            }
            (phase, stat) if *from == Addr::Rc => {
                let tags = update_tags(phase).ok_or(illegal.clone())?;
                if stat == Stat::Fail {
                    if let Some(old) = self.snapshots.remove(&id) {
                        self.store.users.insert(id, old);
                        s.event(Event::Reverted { by: me, phase });
                    }
                    return Ok(s);
                }
                if stat != tags.to_server {
                    return Err(illegal);
                }
                let tx = env.block64(FieldId::Tx)?;
                let tx_new = env.block64(FieldId::TxNew)?;
                let ks = self.k_s()?;
                let xs = self.x_s(&id)?;
                let injected = cx.faults.trip(tags.server_check);
                if injected || derive_xs(&ks, &tx) != xs {
                    if injected {
                        s.event(Event::FaultInjected {
                            by: me.clone(),
                            point: tags.server_check,
                        });
                    }
                    s.event(Event::Discarded {
                        by: me,
                        phase,
                        error: StepError::VerificationFailure(Check::ServerSecret),
                    });
                    s.send(
                        Addr::Rc,
                        ChannelClass::Secure,
                        msg(phase, Stat::Fail, &id, &sid),
                    );
                    return Ok(s);
                }
                let x_new = derive_xs(&ks, &tx_new);
                cx.audit.note("xs", &x_new.0);
                let old = self
                    .store
                    .users
                    .insert(id, seal(&x_new.0, &self.store.sk, cx.rng))
                    .expect("user present");
                self.snapshots.insert(id, old);
                s.send(
                    Addr::Rc,
                    ChannelClass::Secure,
                    msg(phase, tags.server_done, &id, &sid),
                );
            }
            _ => return Err(illegal),
        }
        Ok(s)
    }
}

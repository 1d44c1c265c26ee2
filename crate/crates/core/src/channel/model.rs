//! Symbolic models of what an adversary holds: a stolen card plus the
//! insecure-channel transcript, written as [`Term`]s over named secrets.
//!
//! Every modelled wire value can be evaluated with the audit's concrete
//! secrets and compared with the bytes that actually crossed the channel,
//! so the model is tied to the implementation rather than to a reading of
//! it.

use std::collections::BTreeMap;

use super::TranscriptEntry;
use crate::crypto::Block32;
use crate::envelope::{Envelope, FieldId, Phase, Stat};
use crate::proposed::actors::Audit;
use crate::proposed::{Addr, ProposedCard};
use crate::symbolic::{atom, enc, hash, kdf, pair, xor, Knowledge, Term};

pub const PW: &str = "PW";

/// Named secrets of one proposed-scheme user.
pub struct ProposedTerms {
    pub id: Term,
    pub sid: Term,
    pub pw: Term,
    pub b: Term,
    pub bp: Term,
    pub ks: Term,
    pub w: Term,
    pub tc: Term,
    pub xs: Term,
}

impl Default for ProposedTerms {
    fn default() -> Self {
        let (pw, b, ks, w) = (atom(PW), atom("B"), atom("Ks"), atom("W"));
        let bp = hash([pw.clone(), b.clone()]);
        let tc = pair(ks.clone(), w.clone());
        let xs = hash([tc.clone(), bp.clone()]);
        ProposedTerms {
            id: atom("ID"),
            sid: atom("SID"),
            pw,
            b,
            bp,
            ks,
            w,
            tc,
            xs,
        }
    }
}

impl ProposedTerms {
    pub fn rn2(i: usize) -> Term {
        atom(format!("Rn2#{i}"))
    }

    pub fn rn3(i: usize) -> Term {
        atom(format!("Rn3#{i}"))
    }

    pub fn m1(&self, i: usize) -> Term {
        hash([self.xs.clone(), Self::rn2(i)])
    }

    pub fn m2(&self, i: usize) -> Term {
        xor(hash([self.id.clone(), self.xs.clone()]), Self::rn2(i))
    }

    pub fn m4(&self, i: usize) -> Term {
        hash([self.xs.clone(), Self::rn3(i)])
    }

    pub fn m5(&self, i: usize) -> Term {
        xor(
            hash([self.id.clone(), self.xs.clone(), Self::rn2(i)]),
            Self::rn3(i),
        )
    }

    pub fn m7(&self, i: usize) -> Term {
        hash([self.xs.clone(), Self::rn2(i), Self::rn3(i)])
    }

    pub fn kses(i: usize) -> Term {
        hash([Self::rn2(i), Self::rn3(i)])
    }

    /// `QX = E(TC_s, kdf(B))`.
    pub fn qx(&self) -> Term {
        enc(kdf(self.b.clone()), self.tc.clone())
    }
}

/// One observed login attempt of the target user.
#[derive(Clone, Debug)]
pub struct ObservedSession {
    pub login: Envelope,
    pub m1: Block32,
    pub m2: Block32,
    pub challenge: Option<Envelope>,
    pub confirmation: Option<Envelope>,
}

impl ObservedSession {
    pub fn m4(&self) -> Option<Block32> {
        self.challenge.as_ref()?.block32(FieldId::M4).ok()
    }

    pub fn m5(&self) -> Option<Block32> {
        self.challenge.as_ref()?.block32(FieldId::M5).ok()
    }

    pub fn m7(&self) -> Option<Block32> {
        self.confirmation.as_ref()?.block32(FieldId::M7).ok()
    }
}

/// Honest login traffic of `id`, grouped by attempt. Injected copies and
/// duplicates are ignored.
pub fn observed_sessions(entries: &[TranscriptEntry], id: &Block32) -> Vec<ObservedSession> {
    let mut out: Vec<ObservedSession> = Vec::new();
    for e in entries {
        if matches!(e.note, Some("injected") | Some("duplicate")) || e.from == Addr::Adversary {
            continue;
        }
        let Some(env) = e.envelope() else { continue };
        if env.phase != Phase::Login || env.block32(FieldId::Id).ok() != Some(*id) {
            continue;
        }
        match (env.stat, &e.from) {
            (Stat::Login, Addr::User(_)) => {
                let (Ok(m1), Ok(m2)) = (env.block32(FieldId::M1), env.block32(FieldId::M2)) else {
                    continue;
                };
                out.push(ObservedSession {
                    login: env,
                    m1,
                    m2,
                    challenge: None,
                    confirmation: None,
                });
            }
            (Stat::Auth, Addr::Server(_)) => {
                if let Some(s) = out.last_mut() {
                    s.challenge.get_or_insert(env);
                }
            }
            (Stat::Auth, Addr::User(_)) => {
                if let Some(s) = out.last_mut() {
                    s.confirmation.get_or_insert(env);
                }
            }
            _ => {}
        }
    }
    out
}

/// A modelled term next to the bytes it stands for.
#[derive(Clone, Debug)]
pub struct Binding {
    pub term: Term,
    pub bytes: Vec<u8>,
}

/// The adversary's view of a stolen proposed card plus observed logins.
pub struct ProposedView {
    pub terms: ProposedTerms,
    pub initial: Vec<Term>,
    pub bindings: Vec<Binding>,
    pub sessions: usize,
}

pub fn proposed_view(card: &ProposedCard, sessions: &[ObservedSession]) -> ProposedView {
    let t = ProposedTerms::default();
    let mut initial = vec![t.id.clone(), t.sid.clone(), atom("helper")];
    let mut bindings = vec![
        Binding {
            term: t.id.clone(),
            bytes: card.id.0.to_vec(),
        },
        Binding {
            term: t.sid.clone(),
            bytes: card.sid.0.to_vec(),
        },
    ];
    if card.qx.is_some() {
        initial.push(t.qx());
    }
    for (i, s) in sessions.iter().enumerate() {
        let mut bind = |term: Term, bytes: Option<Block32>| {
            if let Some(b) = bytes {
                initial.push(term.clone());
                bindings.push(Binding {
                    term,
                    bytes: b.0.to_vec(),
                });
            }
        };
        bind(t.m1(i), Some(s.m1));
        bind(t.m2(i), Some(s.m2));
        bind(t.m4(i), s.m4());
        bind(t.m5(i), s.m5());
        bind(t.m7(i), s.m7());
    }
    ProposedView {
        terms: t,
        initial,
        bindings,
        sessions: sessions.len(),
    }
}

impl ProposedView {
    pub fn knowledge(&self) -> Knowledge {
        Knowledge::new(self.initial.iter().cloned())
    }

    /// Secrets that must stay underivable: the long-term values and every
    /// session's nonces and key.
    pub fn secrets(&self) -> Vec<Term> {
        let t = &self.terms;
        let mut out = vec![
            t.pw.clone(),
            t.b.clone(),
            t.bp.clone(),
            t.ks.clone(),
            t.w.clone(),
            t.tc.clone(),
            t.xs.clone(),
        ];
        for i in 0..self.sessions {
            out.push(ProposedTerms::rn2(i));
            out.push(ProposedTerms::rn3(i));
            out.push(ProposedTerms::kses(i));
        }
        out
    }

    /// Evaluates every binding with concrete secrets from the audit and
    /// the victim's password; returns how many matched.
    ///
    /// Nonces are looked up among all audited values of their label, since
    /// a session's position in the audit is not its position on the wire.
    pub fn check_against(&self, audit: &Audit, pw: &str) -> Result<usize, String> {
        let mut atoms = BTreeMap::new();
        let pw = crate::crypto::canonical_id(pw).map_err(|e| e.to_string())?;
        atoms.insert(PW.to_owned(), pw.0.to_vec());
        for (name, label) in [("B", "b"), ("Ks", "ks"), ("W", "w")] {
            let v = audit.latest(label).ok_or(format!("audit has no {label}"))?;
            atoms.insert(name.to_owned(), v.to_vec());
        }
        let first = self.bindings.iter().take(2);
        for b in first {
            atoms.insert(
                match &b.term {
                    Term::Atom(n) => n.clone(),
                    _ => continue,
                },
                b.bytes.clone(),
            );
        }
        let candidates = |label: &str| -> Vec<Vec<u8>> {
            audit
                .entries()
                .iter()
                .filter(|(l, _)| *l == label)
                .map(|(_, v)| v.clone())
                .collect()
        };
        let (rn2s, rn3s) = (candidates("rn2"), candidates("rn3"));
        for i in 0..self.sessions {
            let of_session: Vec<&Binding> = self
                .bindings
                .iter()
                .filter(|b| mentions(&b.term, &ProposedTerms::rn2(i)))
                .collect();
            let m1 = of_session.first().ok_or("session without M1")?;
            let rn2 = rn2s
                .iter()
                .find(|v| {
                    let mut a = atoms.clone();
                    a.insert(format!("Rn2#{i}"), v.to_vec());
                    m1.term.eval(&a).as_ref() == Some(&m1.bytes)
                })
                .ok_or(format!("no audited Rn2 explains session {i}"))?;
            atoms.insert(format!("Rn2#{i}"), rn2.clone());
            if let Some(m4) = self
                .bindings
                .iter()
                .find(|b| mentions(&b.term, &ProposedTerms::rn3(i)))
            {
                let rn3 = rn3s
                    .iter()
                    .find(|v| {
                        let mut a = atoms.clone();
                        a.insert(format!("Rn3#{i}"), v.to_vec());
                        m4.term.eval(&a).as_ref() == Some(&m4.bytes)
                    })
                    .ok_or(format!("no audited Rn3 explains session {i}"))?;
                atoms.insert(format!("Rn3#{i}"), rn3.clone());
            }
        }
        for b in &self.bindings {
            match b.term.eval(&atoms) {
                Some(v) if v == b.bytes => {}
                _ => return Err(format!("model disagrees with the wire for {:?}", b.term)),
            }
        }
        Ok(self.bindings.len())
    }
}

fn mentions(t: &Term, needle: &Term) -> bool {
    if t == needle {
        return true;
    }
    match t {
        Term::Hash(args) | Term::Xor(args) => args.iter().any(|a| mentions(a, needle)),
        Term::Kdf(inner) => mentions(inner, needle),
        Term::Pair(a, b) => mentions(a, needle) || mentions(b, needle),
        Term::Enc { key, msg } => mentions(key, needle) || mentions(msg, needle),
        _ => false,
    }
}

/// The legacy card and `sessions` observed logins, symbolically.
///
/// Card: `e = h(ID ∥ X_s) ⊕ h(f ∥ RPW)`, `f = h(ID ∥ R)`, `r = h(ID ∥ RPW)`,
/// `K`, helper data; with `RPW = h(PW ∥ K)`. Each login shows the points
/// `aP`, `bP` (as opaque atoms) and `M3`, `M6`.
pub fn legacy_view(sessions: usize) -> Vec<Term> {
    let (id, xs, pw, k) = (atom("ID"), atom("Xs"), atom(PW), atom("K"));
    let rpw = hash([pw, k.clone()]);
    let f = hash([id.clone(), atom("R")]);
    let m1 = hash([id.clone(), xs]);
    let mut out = vec![
        id.clone(),
        k,
        atom("helper"),
        f.clone(),
        xor(m1.clone(), hash([f, rpw.clone()])),
        hash([id, rpw]),
    ];
    for i in 0..sessions {
        let (ap, bp) = (atom(format!("aP#{i}")), atom(format!("bP#{i}")));
        out.push(ap.clone());
        out.push(bp.clone());
        out.push(hash([m1.clone(), ap.clone()]));
        out.push(hash([m1.clone(), ap, bp]));
    }
    out
}

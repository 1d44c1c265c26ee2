//! Adversary strategies against the legacy scheme.
//!
//! The card leaks `K` and `r = h(ID ∥ h(PW ∥ K))`, which is a perfect offline
//! verifier for password guesses. A recovered password then lets the attacker
//! rebuild `M1 = h(ID ∥ X_s)` and log in; a stolen `X_s` lets an attacker
//! answer honest users as the server.

use std::path::Path;

use rand::RngCore;
use thiserror::Error;

use super::{
    compute_m6, hidden_m1, li_server_verify, li_user_finish, login_with_m1, rpw, verifier_r,
    AuthReply, LiCard, LiError, LiServer, LoginRequest,
};
use crate::biometric::HelperData;
use crate::crypto::{hash, Block32, Rng};
use crate::ec::{point_digest, random_scalar, scalar_mul, CurveParams, Point};
use crate::envelope::Envelope;

/// Every card field, as read out by power analysis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractedCard {
    pub e: Block32,
    pub f: Block32,
    pub r: Block32,
    pub helper: HelperData,
    pub k: Block32,
}

pub fn extract_card(card: &LiCard) -> ExtractedCard {
    ExtractedCard {
        e: card.e,
        f: card.f,
        r: card.r,
        helper: card.helper.clone(),
        k: card.k,
    }
}

impl ExtractedCard {
    fn as_card(&self) -> LiCard {
        LiCard {
            e: self.e,
            f: self.f,
            r: self.r,
            helper: self.helper.clone(),
            k: self.k,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dictionary {
    words: Vec<String>,
}

#[derive(Debug, Error)]
pub enum DictionaryError {
    #[error("cannot read dictionary {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Dictionary {
    pub fn new(words: Vec<String>) -> Self {
        Dictionary { words }
    }

    /// One candidate per line; blank lines are skipped.
    pub fn parse(text: &str) -> Self {
        Dictionary {
            words: text
                .lines()
                .map(|l| l.trim_end_matches('\r'))
                .filter(|l| !l.is_empty())
                .map(str::to_owned)
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, DictionaryError> {
        std::fs::read_to_string(path)
            .map(|t| Self::parse(&t))
            .map_err(|source| DictionaryError::Io {
                path: path.display().to_string(),
                source,
            })
    }

    /// `size` distinct lowercase candidates derived from `rng`.
    pub fn synthetic(size: usize, rng: &mut Rng) -> Self {
        const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
        let mut seen = std::collections::BTreeSet::new();
        let mut words = Vec::with_capacity(size);
        while words.len() < size {
            let len = 6 + (rng.next_u32() % 5) as usize;
            let word: String = (0..len)
                .map(|_| ALPHABET[(rng.next_u32() % 26) as usize] as char)
                .collect();
            if seen.insert(word.clone()) {
                words.push(word);
            }
        }
        Dictionary { words }
    }

    /// Puts `word` at `index`, replacing whatever was there.
    pub fn plant(&mut self, word: &str, index: usize) {
        self.words.retain(|w| w != word);
        let index = index.min(self.words.len());
        self.words.insert(index, word.to_owned());
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn position(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuessHit {
    pub password: String,
    pub evaluations: usize,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("password not in dictionary after {evaluations} evaluations")]
pub struct NotFound {
    pub evaluations: usize,
}

/// Sequential dictionary attack against the card's `r` verifier.
pub fn guess_password(
    x: &ExtractedCard,
    id: &Block32,
    dict: &Dictionary,
) -> Result<GuessHit, NotFound> {
    let mut evaluations = 0;
    for candidate in dict.words() {
        evaluations += 1;
        let Ok(rpw_a) = rpw(candidate, &x.k) else {
            continue;
        };
        if verifier_r(id, &rpw_a) == x.r {
            return Ok(GuessHit {
                password: candidate.clone(),
                evaluations,
            });
        }
    }
    Err(NotFound { evaluations })
}

#[derive(Clone, Debug)]
pub struct ImpersonationOutcome {
    pub server_accepted: bool,
    pub mutual_auth: bool,
    pub attacker_sk: Option<Block32>,
    pub server_sk: Option<Block32>,
    pub rejection: Option<LiError>,
    pub transcript: Vec<Envelope>,
}

impl ImpersonationOutcome {
    pub fn succeeded(&self) -> bool {
        self.server_accepted
            && self.mutual_auth
            && self.attacker_sk.is_some()
            && self.attacker_sk == self.server_sk
    }
}

/// Logs in as the victim with extracted card data and a guessed password.
pub fn impersonate_user(
    x: &ExtractedCard,
    id: &Block32,
    pw_guessed: &str,
    server: &LiServer,
    rng: &mut Rng,
) -> ImpersonationOutcome {
    let curve = &server.curve;
    let mut transcript = Vec::new();
    let outcome = |rejection: Option<LiError>, transcript: Vec<Envelope>| ImpersonationOutcome {
        server_accepted: false,
        mutual_auth: false,
        attacker_sk: None,
        server_sk: None,
        rejection,
        transcript,
    };
    let rpw_a = match rpw(pw_guessed, &x.k) {
        Ok(v) => v,
        Err(e) => return outcome(Some(e), transcript),
    };
    let m1 = hidden_m1(&x.as_card(), &rpw_a);
    let (req, session) = login_with_m1(*id, m1, curve, rng);
    transcript.push(req.to_envelope(curve));
    let (reply, server_session) = match li_server_verify(&req, server, rng) {
        Ok(r) => r,
        Err(e) => return outcome(Some(e), transcript),
    };
    transcript.push(reply.to_envelope(curve));
    let (attacker_sk, rejection) = match li_user_finish(&reply, &session, curve) {
        Ok(sk) => (Some(sk), None),
        Err(e) => (None, Some(e)),
    };
    ImpersonationOutcome {
        server_accepted: true,
        mutual_auth: attacker_sk.is_some(),
        attacker_sk,
        server_sk: Some(server_session.sk),
        rejection,
        transcript,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MasqueradeMode {
    /// Draw a fresh `b` and answer with `bP`.
    FreshEphemeral,
    /// Re-send an `M5` seen in an earlier session (no `b` known).
    ReplayM5(Point),
}

/// A drop-in replacement for the server, run by whoever holds `X_s`.
#[derive(Clone, Debug)]
pub struct MasqueradingServer {
    pub x_s: Block32,
    pub curve: CurveParams,
    pub mode: MasqueradeMode,
}

pub fn masquerade_server(x_s_stolen: Block32, curve: CurveParams) -> MasqueradingServer {
    MasqueradingServer {
        x_s: x_s_stolen,
        curve,
        mode: MasqueradeMode::FreshEphemeral,
    }
}

impl MasqueradingServer {
    pub fn with_mode(mut self, mode: MasqueradeMode) -> Self {
        self.mode = mode;
        self
    }

    /// Answers an honest login. Returns the reply and, when the attacker
    /// knows its own ephemeral, the session key it derives.
    pub fn respond(
        &self,
        req: &LoginRequest,
        rng: &mut Rng,
    ) -> Result<(AuthReply, Option<Block32>), LiError> {
        let curve = &self.curve;
        let m4 = hash([(&req.id).into(), (&self.x_s).into()]);
        if super::compute_m3(&m4, &req.m2, curve) != req.m3 {
            return Err(LiError::AuthFailed(super::LiCheck::LoginRequest));
        }
        let (m5, sk) = match &self.mode {
            MasqueradeMode::FreshEphemeral => {
                let b = random_scalar(curve, rng);
                let m5 = scalar_mul(&b, &curve.g, curve)?;
                let sk = point_digest(&scalar_mul(&b, &req.m2, curve)?, curve);
                (m5, Some(sk))
            }
            MasqueradeMode::ReplayM5(old) => (old.clone(), None),
        };
        let m6 = compute_m6(&m4, &req.m2, &m5, curve);
        Ok((AuthReply { m5, m6 }, sk))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biometric::{FuzzyExtractor, Template};
    use crate::crypto::canonical_id;
    use crate::li::li_login;

    fn victim(seed: u64) -> (LiServer, LiCard, Block32, Template, Rng) {
        let mut rng = Rng::new(seed);
        let mut server = LiServer::generate(CurveParams::tiny(), &mut rng);
        let id = canonical_id("victim").unwrap();
        let t = Template::random(1024, &mut rng);
        let card = server
            .enroll(id, "sunshine", &t, &FuzzyExtractor::default(), &mut rng)
            .unwrap();
        (server, card, id, t, rng)
    }

    #[test]
    fn extraction_is_faithful_and_idempotent() {
        let (_, card, _, _, _) = victim(1);
        let x = extract_card(&card);
        assert_eq!(x.r, card.r);
        assert_eq!(extract_card(&card), x);
        assert_eq!(x.as_card(), card);
        let rpw_known = rpw("sunshine", &x.k).unwrap();
        assert_eq!(
            verifier_r(&canonical_id("victim").unwrap(), &rpw_known),
            card.r
        );
    }

    #[test]
    fn guess_reports_index_plus_one() {
        let (_, card, id, _, mut rng) = victim(2);
        let x = extract_card(&card);
        let mut dict = Dictionary::synthetic(200, &mut rng);
        dict.plant("sunshine", 137);
        let hit = guess_password(&x, &id, &dict).unwrap();
        assert_eq!(hit.password, "sunshine");
        assert_eq!(hit.evaluations, 138);

        let miss = Dictionary::synthetic(50, &mut rng);
        assert_eq!(
            guess_password(&x, &id, &miss),
            Err(NotFound { evaluations: 50 })
        );
        assert_eq!(
            guess_password(&x, &id, &Dictionary::default()),
            Err(NotFound { evaluations: 0 })
        );
    }

    #[test]
    fn impersonation_follows_guess() {
        let (server, card, id, _, mut rng) = victim(3);
        let x = extract_card(&card);
        let ok = impersonate_user(&x, &id, "sunshine", &server, &mut rng);
        assert!(ok.succeeded());
        let bad = impersonate_user(&x, &id, "moonshine", &server, &mut rng);
        assert!(!bad.server_accepted);
        assert!(matches!(
            bad.rejection,
            Some(LiError::AuthFailed(super::super::LiCheck::LoginRequest))
        ));
        let a = impersonate_user(&x, &id, "sunshine", &server, &mut Rng::new(77));
        let b = impersonate_user(&x, &id, "sunshine", &server, &mut Rng::new(77));
        let enc = |o: &ImpersonationOutcome| {
            o.transcript
                .iter()
                .map(Envelope::encode)
                .collect::<Vec<_>>()
        };
        assert_eq!(enc(&a), enc(&b));
    }

    #[test]
    fn masquerade_with_and_without_master_secret() {
        let (server, card, id, t, mut rng) = victim(4);
        let curve = server.curve.clone();
        let fx = FuzzyExtractor::default();

        let evil = masquerade_server(server.x_s, curve.clone());
        let (req, us) = li_login(&card, &id, "sunshine", &t, &fx, &curve, &mut rng).unwrap();
        let (reply, attacker_sk) = evil.respond(&req, &mut rng).unwrap();
        assert_eq!(
            li_user_finish(&reply, &us, &curve).unwrap(),
            attacker_sk.unwrap()
        );

        let replay = evil
            .clone()
            .with_mode(MasqueradeMode::ReplayM5(reply.m5.clone()));
        let (req, us) = li_login(&card, &id, "sunshine", &t, &fx, &curve, &mut rng).unwrap();
        let (reply, none) = replay.respond(&req, &mut rng).unwrap();
        assert!(none.is_none());
        assert!(li_user_finish(&reply, &us, &curve).is_ok());

        let blind = masquerade_server(rng.random_block(), curve.clone());
        let (req, _) = li_login(&card, &id, "sunshine", &t, &fx, &curve, &mut rng).unwrap();
        assert!(blind.respond(&req, &mut rng).is_err());
        // Even answering without checking M3, a wrong X_s fails M6 at the user.
        let m4 = hash([(&id).into(), (&blind.x_s).into()]);
        let m5 = scalar_mul(&random_scalar(&curve, &mut rng), &curve.g, &curve).unwrap();
        let reply = AuthReply {
            m6: compute_m6(&m4, &req.m2, &m5, &curve),
            m5,
        };
        let (_, us) = li_login(&card, &id, "sunshine", &t, &fx, &curve, &mut rng).unwrap();
        assert!(li_user_finish(&reply, &us, &curve).is_err());
    }

    #[test]
    fn dictionary_parsing() {
        let d = Dictionary::parse("alpha\r\n\nbeta\ngamma\n");
        assert_eq!(d.words(), &["alpha", "beta", "gamma"]);
        assert_eq!(d.position("beta"), Some(1));
    }
}

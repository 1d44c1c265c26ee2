//! The legacy ECC three-factor scheme, implemented faithfully, flaws included.
//!
//! Registration center and server are one trusted party holding a single
//! master secret `X_s`. The card keeps `(e, f, r, helper, K)`:
//!
//! ```text
//! RPW = h(PW ∥ K)          f = h(ID ∥ R)          r = h(ID ∥ RPW)
//! e   = h(ID ∥ X_s) ⊕ h(f ∥ RPW)
//! ```
//!
//! Login sends `{ID, M2 = aP, M3 = h(M1 ∥ M2)}` with `M1 = e ⊕ h(f ∥ RPW)`;
//! the server answers `{M5 = bP, M6 = h(M4 ∥ M2 ∥ M5)}` and both sides derive
//! `SK = h(abP)`. Points enter digests through [`point_digest`].

pub mod attacks;

use std::collections::BTreeSet;

use num_bigint::BigUint;
use thiserror::Error;

use crate::biometric::{BiometricError, FuzzyExtractor, HelperData, Template};
use crate::crypto::{canonical_id, hash, Block32, CryptoError, Rng, BLOCK_LEN};
use crate::ec::{
    decode_point, encode_point, point_digest, random_scalar, scalar_mul, CurveParams, EcError,
    Point,
};
use crate::envelope::{Envelope, EnvelopeError, FieldId, Phase, Stat};
use crate::wire::{self, Reader, WireError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LiError {
    #[error("biometric verification failed")]
    BiometricMismatch,
    #[error("password verification failed")]
    PasswordMismatch,
    #[error("unknown identity")]
    UnknownIdentity,
    #[error("authentication failed at the {0} check")]
    AuthFailed(LiCheck),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Ec(#[from] EcError),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("biometric input: {0}")]
    Biometric(BiometricError),
}

impl From<BiometricError> for LiError {
    fn from(e: BiometricError) -> Self {
        match e {
            BiometricError::Mismatch => LiError::BiometricMismatch,
            other => LiError::Biometric(other),
        }
    }
}

/// Which equality test rejected a message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum LiCheck {
    /// Server: `M3 = h(M4 ∥ M2)`.
    LoginRequest,
    /// User: `M6 = h(M1 ∥ M2 ∥ M5)`.
    MutualAuth,
}

impl std::fmt::Display for LiCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LiCheck::LoginRequest => "login-request",
            LiCheck::MutualAuth => "mutual-auth",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LiCard {
    pub e: Block32,
    pub f: Block32,
    pub r: Block32,
    pub helper: HelperData,
    pub k: Block32,
}

impl LiCard {
    /// Ordered length-prefixed fields: e, f, r, helper, K.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        wire::put_lp(&mut out, &self.e.0);
        wire::put_lp(&mut out, &self.f.0);
        wire::put_lp(&mut out, &self.r.0);
        self.helper.write(&mut out);
        wire::put_lp(&mut out, &self.k.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LiError> {
        let mut r = Reader::new(bytes);
        let card = LiCard {
            e: Block32(r.lp_fixed::<BLOCK_LEN>()?),
            f: Block32(r.lp_fixed::<BLOCK_LEN>()?),
            r: Block32(r.lp_fixed::<BLOCK_LEN>()?),
            helper: HelperData::read(&mut r)?,
            k: Block32(r.lp_fixed::<BLOCK_LEN>()?),
        };
        r.finish()?;
        Ok(card)
    }
}

/// The combined registration center and server.
#[derive(Clone, Debug)]
pub struct LiServer {
    pub x_s: Block32,
    pub curve: CurveParams,
    registered: BTreeSet<Block32>,
}

impl LiServer {
    pub fn new(x_s: Block32, curve: CurveParams) -> Self {
        LiServer {
            x_s,
            curve,
            registered: BTreeSet::new(),
        }
    }

    pub fn generate(curve: CurveParams, rng: &mut Rng) -> Self {
        Self::new(rng.random_block(), curve)
    }

    /// Registers `id` and issues its card.
    pub fn enroll(
        &mut self,
        id: Block32,
        pw: &str,
        template: &Template,
        extractor: &FuzzyExtractor,
        rng: &mut Rng,
    ) -> Result<LiCard, LiError> {
        let card = li_register(id, pw, template, &self.x_s, extractor, rng)?;
        self.registered.insert(id);
        Ok(card)
    }

    pub fn is_registered(&self, id: &Block32) -> bool {
        self.registered.contains(id)
    }

    /// The server database as it would sit on disk: `X_s` in the clear,
    /// then every registered identity.
    pub fn database_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        wire::put_lp(&mut out, &self.x_s.0);
        for id in &self.registered {
            wire::put_lp(&mut out, &id.0);
        }
        out
    }
}

pub fn rpw(pw: &str, k: &Block32) -> Result<Block32, LiError> {
    let pw = canonical_id(pw)?;
    Ok(hash([(&pw).into(), k.into()]))
}

fn verifier_r(id: &Block32, rpw: &Block32) -> Block32 {
    hash([id.into(), rpw.into()])
}

fn hidden_m1(card: &LiCard, rpw: &Block32) -> Block32 {
    card.e ^ hash([(&card.f).into(), rpw.into()])
}

pub fn li_register(
    id: Block32,
    pw: &str,
    template: &Template,
    x_s: &Block32,
    extractor: &FuzzyExtractor,
    rng: &mut Rng,
) -> Result<LiCard, LiError> {
    let k = rng.random_block();
    let rpw = rpw(pw, &k)?;
    let (bio_key, helper) = extractor.gen(template, rng)?;
    let f = hash([(&id).into(), (&bio_key).into()]);
    let e = hash([(&id).into(), x_s.into()]) ^ hash([(&f).into(), (&rpw).into()]);
    let r = verifier_r(&id, &rpw);
    Ok(LiCard { e, f, r, helper, k })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoginRequest {
    pub id: Block32,
    pub m2: Point,
    pub m3: Block32,
}

#[derive(Clone, Debug)]
pub struct UserSession {
    a: BigUint,
    pub m1: Block32,
    pub m2: Point,
}

impl UserSession {
    /// Builds a session from externally chosen values (attack strategies).
    pub fn from_parts(a: BigUint, m1: Block32, m2: Point) -> Self {
        UserSession { a, m1, m2 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthReply {
    pub m5: Point,
    pub m6: Block32,
}

#[derive(Clone, Debug)]
pub struct ServerSession {
    pub id: Block32,
    pub sk: Block32,
    pub m5: Point,
}

pub fn compute_m3(m1: &Block32, m2: &Point, curve: &CurveParams) -> Block32 {
    hash([m1.into(), (&point_digest(m2, curve)).into()])
}

pub fn compute_m6(m1: &Block32, m2: &Point, m5: &Point, curve: &CurveParams) -> Block32 {
    hash([
        m1.into(),
        (&point_digest(m2, curve)).into(),
        (&point_digest(m5, curve)).into(),
    ])
}

/// Card-side biometric and password checks, then the login request.
pub fn li_login(
    card: &LiCard,
    id: &Block32,
    pw: &str,
    b2: &Template,
    extractor: &FuzzyExtractor,
    curve: &CurveParams,
    rng: &mut Rng,
) -> Result<(LoginRequest, UserSession), LiError> {
    let rpw = verify_factors(card, id, pw, b2, extractor)?;
    let m1 = hidden_m1(card, &rpw);
    Ok(login_with_m1(*id, m1, curve, rng))
}

fn verify_factors(
    card: &LiCard,
    id: &Block32,
    pw: &str,
    b2: &Template,
    extractor: &FuzzyExtractor,
) -> Result<Block32, LiError> {
    let bio_key = extractor.rep(b2, &card.helper)?;
    if hash([id.into(), (&bio_key).into()]) != card.f {
        return Err(LiError::BiometricMismatch);
    }
    let rpw = rpw(pw, &card.k)?;
    if verifier_r(id, &rpw) != card.r {
        return Err(LiError::PasswordMismatch);
    }
    Ok(rpw)
}

/// Login request from an already-derived `M1`.
pub fn login_with_m1(
    id: Block32,
    m1: Block32,
    curve: &CurveParams,
    rng: &mut Rng,
) -> (LoginRequest, UserSession) {
    let a = random_scalar(curve, rng);
    let m2 = scalar_mul(&a, &curve.g, curve).expect("base point is on curve");
    let m3 = compute_m3(&m1, &m2, curve);
    (
        LoginRequest {
            id,
            m2: m2.clone(),
            m3,
        },
        UserSession { a, m1, m2 },
    )
}

pub fn li_server_verify(
    req: &LoginRequest,
    server: &LiServer,
    rng: &mut Rng,
) -> Result<(AuthReply, ServerSession), LiError> {
    if !server.is_registered(&req.id) {
        return Err(LiError::UnknownIdentity);
    }
    let curve = &server.curve;
    if !curve.is_on_curve(&req.m2) {
        return Err(EcError::OffCurve(curve.name.into()).into());
    }
    let m4 = hash([(&req.id).into(), (&server.x_s).into()]);
    if compute_m3(&m4, &req.m2, curve) != req.m3 {
        return Err(LiError::AuthFailed(LiCheck::LoginRequest));
    }
    let b = random_scalar(curve, rng);
    let m5 = scalar_mul(&b, &curve.g, curve)?;
    let m6 = compute_m6(&m4, &req.m2, &m5, curve);
    let sk = point_digest(&scalar_mul(&b, &req.m2, curve)?, curve);
    Ok((
        AuthReply { m5: m5.clone(), m6 },
        ServerSession { id: req.id, sk, m5 },
    ))
}

pub fn li_user_finish(
    reply: &AuthReply,
    session: &UserSession,
    curve: &CurveParams,
) -> Result<Block32, LiError> {
    if !curve.is_on_curve(&reply.m5) {
        return Err(EcError::OffCurve(curve.name.into()).into());
    }
    if compute_m6(&session.m1, &session.m2, &reply.m5, curve) != reply.m6 {
        return Err(LiError::AuthFailed(LiCheck::MutualAuth));
    }
    Ok(point_digest(
        &scalar_mul(&session.a, &reply.m5, curve)?,
        curve,
    ))
}

pub fn li_change_password(
    card: &LiCard,
    id: &Block32,
    pw_old: &str,
    pw_new: &str,
    b2: &Template,
    extractor: &FuzzyExtractor,
) -> Result<LiCard, LiError> {
    let rpw_old = verify_factors(card, id, pw_old, b2, extractor)?;
    let rpw_new = rpw(pw_new, &card.k)?;
    let e = card.e
        ^ hash([(&card.f).into(), (&rpw_old).into()])
        ^ hash([(&card.f).into(), (&rpw_new).into()]);
    Ok(LiCard {
        e,
        r: verifier_r(id, &rpw_new),
        ..card.clone()
    })
}

impl LoginRequest {
    pub fn to_envelope(&self, curve: &CurveParams) -> Envelope {
        Envelope::new(Phase::LegacyLogin, Stat::Login)
            .with(FieldId::Id, self.id.0)
            .with(FieldId::M2, encode_point(&self.m2, curve))
            .with(FieldId::M3, self.m3.0)
    }

    pub fn from_envelope(env: &Envelope, curve: &CurveParams) -> Result<Self, LiError> {
        Ok(LoginRequest {
            id: env.block32(FieldId::Id)?,
            m2: decode_point(env.require(FieldId::M2)?, curve)?,
            m3: env.block32(FieldId::M3)?,
        })
    }
}

impl AuthReply {
    pub fn to_envelope(&self, curve: &CurveParams) -> Envelope {
        Envelope::new(Phase::LegacyLogin, Stat::Auth)
            .with(FieldId::M5, encode_point(&self.m5, curve))
            .with(FieldId::M6, self.m6.0)
    }

    pub fn from_envelope(env: &Envelope, curve: &CurveParams) -> Result<Self, LiError> {
        Ok(AuthReply {
            m5: decode_point(env.require(FieldId::M5)?, curve)?,
            m6: env.block32(FieldId::M6)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biometric::{perturb_per_group, Template};

    struct Fixture {
        server: LiServer,
        card: LiCard,
        id: Block32,
        template: Template,
        fx: FuzzyExtractor,
        rng: Rng,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = Rng::new(seed);
        let fx = FuzzyExtractor::default();
        let mut server = LiServer::generate(CurveParams::tiny(), &mut rng);
        let id = canonical_id("alice").unwrap();
        let template = Template::random(1024, &mut rng);
        let card = server
            .enroll(id, "hunter2", &template, &fx, &mut rng)
            .unwrap();
        Fixture {
            server,
            card,
            id,
            template,
            fx,
            rng,
        }
    }

    fn run(f: &mut Fixture, pw: &str, b: &Template) -> Result<(Block32, Block32), LiError> {
        let curve = f.server.curve.clone();
        let (req, us) = li_login(&f.card, &f.id, pw, b, &f.fx, &curve, &mut f.rng)?;
        let (reply, ss) = li_server_verify(&req, &f.server, &mut f.rng)?;
        let sk = li_user_finish(&reply, &us, &curve)?;
        Ok((sk, ss.sk))
    }

    #[test]
    fn card_satisfies_registration_identities() {
        let f = fixture(1);
        let rpw = rpw("hunter2", &f.card.k).unwrap();
        assert_eq!(
            f.card.e ^ hash([(&f.card.f).into(), (&rpw).into()]),
            hash([(&f.id).into(), (&f.server.x_s).into()])
        );
        let pw = canonical_id("hunter2").unwrap();
        let expected_r = hash([
            (&f.id).into(),
            (&hash([(&pw).into(), (&f.card.k).into()])).into(),
        ]);
        assert_eq!(f.card.r, expected_r);
        assert_eq!(LiCard::from_bytes(&f.card.to_bytes()).unwrap(), f.card);
    }

    #[test]
    fn honest_run_agrees_on_session_key() {
        let mut f = fixture(2);
        let t = f.template.clone();
        let (user_sk, server_sk) = run(&mut f, "hunter2", &t).unwrap();
        assert_eq!(user_sk, server_sk);
    }

    #[test]
    fn wrong_password_stops_before_any_message() {
        let mut f = fixture(3);
        let t = f.template.clone();
        assert_eq!(run(&mut f, "hunter3", &t), Err(LiError::PasswordMismatch));
    }

    #[test]
    fn close_biometric_is_tolerated_and_unrelated_rejected() {
        let mut f = fixture(4);
        for _ in 0..100 {
            let noisy = perturb_per_group(&f.template, 4, &mut f.rng);
            let (a, b) = run(&mut f, "hunter2", &noisy).unwrap();
            assert_eq!(a, b);
        }
        let stranger = Template::random(1024, &mut f.rng);
        assert_eq!(
            run(&mut f, "hunter2", &stranger),
            Err(LiError::BiometricMismatch)
        );
    }

    #[test]
    fn card_m1_equals_server_m4() {
        let f = fixture(5);
        let rpw = rpw("hunter2", &f.card.k).unwrap();
        assert_eq!(
            hidden_m1(&f.card, &rpw),
            hash([(&f.id).into(), (&f.server.x_s).into()])
        );
    }

    #[test]
    fn tampered_requests_are_rejected() {
        let mut f = fixture(6);
        let curve = f.server.curve.clone();
        let (req, _) = li_login(
            &f.card,
            &f.id,
            "hunter2",
            &f.template,
            &f.fx,
            &curve,
            &mut f.rng,
        )
        .unwrap();
        for bit in 0..256 {
            let mut bad = req.clone();
            bad.m3.0[bit / 8] ^= 1 << (bit % 8);
            assert_eq!(
                li_server_verify(&bad, &f.server, &mut f.rng).unwrap_err(),
                LiError::AuthFailed(LiCheck::LoginRequest)
            );
        }
        // A foreign identity that the server happens to know.
        let mallory = canonical_id("mallory").unwrap();
        let mut server = f.server.clone();
        server.registered.insert(mallory);
        let forged = LoginRequest {
            id: mallory,
            ..req.clone()
        };
        assert_eq!(
            li_server_verify(&forged, &server, &mut f.rng).unwrap_err(),
            LiError::AuthFailed(LiCheck::LoginRequest)
        );
        let unknown = LoginRequest {
            id: f.rng.random_block(),
            ..req
        };
        assert_eq!(
            li_server_verify(&unknown, &f.server, &mut f.rng).unwrap_err(),
            LiError::UnknownIdentity
        );
    }

    #[test]
    fn tampered_m5_is_rejected_by_user() {
        let mut f = fixture(7);
        let curve = f.server.curve.clone();
        let (req, us) = li_login(
            &f.card,
            &f.id,
            "hunter2",
            &f.template,
            &f.fx,
            &curve,
            &mut f.rng,
        )
        .unwrap();
        let (mut reply, _) = li_server_verify(&req, &f.server, &mut f.rng).unwrap();
        reply.m5 = crate::ec::add(&reply.m5, &curve.g, &curve).unwrap();
        assert_eq!(
            li_user_finish(&reply, &us, &curve),
            Err(LiError::AuthFailed(LiCheck::MutualAuth))
        );
    }

    #[test]
    fn identity_m5_is_a_degenerate_but_accepted_key() {
        // Only a party that knows M4 can sign an identity M5; both sides then
        // hold h(O).
        let mut f = fixture(8);
        let curve = f.server.curve.clone();
        let (req, us) = li_login(
            &f.card,
            &f.id,
            "hunter2",
            &f.template,
            &f.fx,
            &curve,
            &mut f.rng,
        )
        .unwrap();
        let m4 = hash([(&f.id).into(), (&f.server.x_s).into()]);
        let reply = AuthReply {
            m5: Point::Identity,
            m6: compute_m6(&m4, &req.m2, &Point::Identity, &curve),
        };
        let sk = li_user_finish(&reply, &us, &curve).unwrap();
        assert_eq!(sk, point_digest(&Point::Identity, &curve));
    }

    #[test]
    fn password_change_algebra() {
        let mut f = fixture(9);
        let t = f.template.clone();
        let old_card = f.card.clone();
        let new_card =
            li_change_password(&f.card, &f.id, "hunter2", "correct horse", &t, &f.fx).unwrap();
        let rpw_old = rpw("hunter2", &old_card.k).unwrap();
        let rpw_new = rpw("correct horse", &old_card.k).unwrap();
        assert_eq!(
            new_card.e ^ hash([(&new_card.f).into(), (&rpw_new).into()]),
            old_card.e ^ hash([(&old_card.f).into(), (&rpw_old).into()])
        );
        f.card = new_card.clone();
        assert!(run(&mut f, "correct horse", &t).is_ok());
        assert_eq!(run(&mut f, "hunter2", &t), Err(LiError::PasswordMismatch));

        let back =
            li_change_password(&new_card, &f.id, "correct horse", "hunter2", &t, &f.fx).unwrap();
        assert_eq!(back.r, old_card.r);
        assert_eq!(back.e, old_card.e);
        assert_eq!(
            li_change_password(&old_card, &f.id, "nope", "x", &t, &f.fx),
            Err(LiError::PasswordMismatch)
        );
    }

    #[test]
    fn envelopes_roundtrip() {
        let mut f = fixture(10);
        let curve = f.server.curve.clone();
        let (req, _) = li_login(
            &f.card,
            &f.id,
            "hunter2",
            &f.template,
            &f.fx,
            &curve,
            &mut f.rng,
        )
        .unwrap();
        let env = req.to_envelope(&curve);
        assert_eq!(LoginRequest::from_envelope(&env, &curve).unwrap(), req);
    }
}

//! Persistent state of the RC, the server and the simulated user, plus the
//! on-disk store format.
//!
//! File layout: `magic ∥ version ∥ kind ∥ hash id ∥ cipher id ∥ key record ∥
//! record count ∥ records ∥ SHA-256 over everything before it`. Records are
//! emitted in key order so equal states give equal bytes.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::biometric::Template;
use crate::crypto::{
    hash, open_block32, open_block64, Block32, CryptoError, SealedBox, SymKey, BLOCK_LEN,
    CIPHER_ALGORITHM, HASH_ALGORITHM,
};
use crate::wire::{self, Reader, WireError};

use super::ProposedCard;

pub const MAGIC: &[u8; 8] = b"TFASTORE";
pub const VERSION: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("not a store file")]
    BadMagic,
    #[error("unsupported store version {0}")]
    Version(u8),
    #[error("expected a {expected:?} store, found {found:?}")]
    Kind { expected: StoreKind, found: u8 },
    #[error("store written with {0}, this build uses {HASH_ALGORITHM}/{CIPHER_ALGORITHM}")]
    Algorithm(String),
    #[error("integrity check failed (digest mismatch)")]
    Integrity,
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("invalid record: {0}")]
    Record(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum StoreKind {
    Rc = 1,
    Server = 2,
    User = 3,
    Card = 4,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RcUser {
    pub sid: Block32,
    pub ux: SealedBox,
    pub ex: SealedBox,
    pub r_cov: SealedBox,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RcStore {
    pub rk: SymKey,
    pub servers: BTreeMap<Block32, SealedBox>,
    pub users: BTreeMap<Block32, RcUser>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServerStore {
    pub sid: Block32,
    pub sk: SymKey,
    pub ek: Option<SealedBox>,
    pub users: BTreeMap<Block32, SealedBox>,
}

/// The simulated person: identity, recovery contact and enrolled template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserRecord {
    pub name: String,
    pub server: String,
    pub r_cont: String,
    pub template: Template,
}

impl RcStore {
    pub fn new(rk: SymKey) -> Self {
        RcStore {
            rk,
            servers: BTreeMap::new(),
            users: BTreeMap::new(),
        }
    }

    /// Records without the key: what a database thief walks away with.
    pub fn database_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (sid, hk) in &self.servers {
            wire::put_lp(&mut out, &sid.0);
            wire::put_lp(&mut out, &hk.to_bytes());
        }
        for (id, u) in &self.users {
            wire::put_lp(&mut out, &id.0);
            wire::put_lp(&mut out, &u.sid.0);
            for b in [&u.ux, &u.ex, &u.r_cov] {
                wire::put_lp(&mut out, &b.to_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        wire::put_lp(&mut body, self.rk.expose());
        body.extend_from_slice(&(self.servers.len() as u32).to_be_bytes());
        for (sid, hk) in &self.servers {
            wire::put_lp(&mut body, &sid.0);
            wire::put_lp(&mut body, &hk.to_bytes());
        }
        body.extend_from_slice(&(self.users.len() as u32).to_be_bytes());
        for (id, u) in &self.users {
            wire::put_lp(&mut body, &id.0);
            wire::put_lp(&mut body, &u.sid.0);
            for b in [&u.ux, &u.ex, &u.r_cov] {
                wire::put_lp(&mut body, &b.to_bytes());
            }
        }
        frame(StoreKind::Rc, &body)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let body = unframe(StoreKind::Rc, bytes)?;
        let mut r = Reader::new(body);
        let rk = SymKey::from_bytes(r.lp_fixed::<BLOCK_LEN>()?);
        let mut servers = BTreeMap::new();
        for _ in 0..r.u32()? {
            let sid = Block32(r.lp_fixed::<BLOCK_LEN>()?);
            servers.insert(sid, SealedBox::from_bytes(r.lp()?)?);
        }
        let mut users = BTreeMap::new();
        for _ in 0..r.u32()? {
            let id = Block32(r.lp_fixed::<BLOCK_LEN>()?);
            let sid = Block32(r.lp_fixed::<BLOCK_LEN>()?);
            let ux = SealedBox::from_bytes(r.lp()?)?;
            let ex = SealedBox::from_bytes(r.lp()?)?;
            let r_cov = SealedBox::from_bytes(r.lp()?)?;
            users.insert(id, RcUser { sid, ux, ex, r_cov });
        }
        r.finish()?;
        Ok(RcStore { rk, servers, users })
    }
}

impl ServerStore {
    pub fn new(sid: Block32, sk: SymKey) -> Self {
        ServerStore {
            sid,
            sk,
            ek: None,
            users: BTreeMap::new(),
        }
    }

    pub fn database_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        wire::put_lp(&mut out, &self.sid.0);
        if let Some(ek) = &self.ek {
            wire::put_lp(&mut out, &ek.to_bytes());
        }
        for (id, sx) in &self.users {
            wire::put_lp(&mut out, &id.0);
            wire::put_lp(&mut out, &sx.to_bytes());
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        wire::put_lp(&mut body, &self.sid.0);
        wire::put_lp(&mut body, self.sk.expose());
        match &self.ek {
            Some(ek) => {
                body.push(1);
                wire::put_lp(&mut body, &ek.to_bytes());
            }
            None => body.push(0),
        }
        body.extend_from_slice(&(self.users.len() as u32).to_be_bytes());
        for (id, sx) in &self.users {
            wire::put_lp(&mut body, &id.0);
            wire::put_lp(&mut body, &sx.to_bytes());
        }
        frame(StoreKind::Server, &body)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let body = unframe(StoreKind::Server, bytes)?;
        let mut r = Reader::new(body);
        let sid = Block32(r.lp_fixed::<BLOCK_LEN>()?);
        let sk = SymKey::from_bytes(r.lp_fixed::<BLOCK_LEN>()?);
        let ek = match r.u8()? {
            0 => None,
            1 => Some(SealedBox::from_bytes(r.lp()?)?),
            t => return Err(StoreError::Record(format!("EK tag {t}"))),
        };
        let mut users = BTreeMap::new();
        for _ in 0..r.u32()? {
            let id = Block32(r.lp_fixed::<BLOCK_LEN>()?);
            users.insert(id, SealedBox::from_bytes(r.lp()?)?);
        }
        r.finish()?;
        Ok(ServerStore { sid, sk, ek, users })
    }
}

impl UserRecord {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        wire::put_str(&mut body, &self.name);
        wire::put_str(&mut body, &self.server);
        wire::put_str(&mut body, &self.r_cont);
        wire::put_lp(&mut body, self.template.as_bytes());
        frame(StoreKind::User, &body)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let body = unframe(StoreKind::User, bytes)?;
        let mut r = Reader::new(body);
        let rec = UserRecord {
            name: r.lp_str()?,
            server: r.lp_str()?,
            r_cont: r.lp_str()?,
            template: Template::from_bytes(r.lp()?.to_vec()),
        };
        r.finish()?;
        Ok(rec)
    }
}

pub fn card_file_bytes(card: &ProposedCard) -> Vec<u8> {
    frame(StoreKind::Card, &card.to_bytes())
}

pub fn card_from_file(bytes: &[u8]) -> Result<ProposedCard, StoreError> {
    Ok(ProposedCard::from_bytes(unframe(StoreKind::Card, bytes)?)?)
}

fn frame(kind: StoreKind, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 96);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(kind as u8);
    wire::put_str(&mut out, HASH_ALGORITHM);
    wire::put_str(&mut out, CIPHER_ALGORITHM);
    out.extend_from_slice(body);
    let digest = digest(&out);
    out.extend_from_slice(&digest.0);
    out
}

fn digest(bytes: &[u8]) -> Block32 {
    use sha2::{Digest, Sha256};
    Block32(Sha256::digest(bytes).into())
}

fn unframe(kind: StoreKind, bytes: &[u8]) -> Result<&[u8], StoreError> {
    if bytes.len() < MAGIC.len() + 2 + BLOCK_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let (content, tag) = bytes.split_at(bytes.len() - BLOCK_LEN);
    if digest(content).0 != tag {
        return Err(StoreError::Integrity);
    }
    let mut r = Reader::new(&content[MAGIC.len()..]);
    let version = r.u8()?;
    if version != VERSION {
        return Err(StoreError::Version(version));
    }
    let found = r.u8()?;
    if found != kind as u8 {
        return Err(StoreError::Kind {
            expected: kind,
            found,
        });
    }
    let h = r.lp_str()?;
    let c = r.lp_str()?;
    if h != HASH_ALGORITHM || c != CIPHER_ALGORITHM {
        return Err(StoreError::Algorithm(format!("{h}/{c}")));
    }
    let start = MAGIC.len() + r.position();
    Ok(&content[start..])
}

/// A broken store or cross-store identity.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum InvariantViolation {
    #[error("{store}: record {what} does not open")]
    Unreadable { store: &'static str, what: String },
    #[error("user {0:?} is known to only one of RC and server")]
    Orphan(Block32),
    #[error("server X_s for {0:?} differs from h(K_s ∥ TX_s) at the RC")]
    CrossStore(Block32),
    #[error("card TC_s for {0:?} differs from the RC's UX")]
    CardMismatch(Block32),
    #[error("UX and EX for {0:?} disagree on W")]
    WSharing(Block32),
    #[error("card for {0:?} is not finalized")]
    CardNotFinal(Block32),
}

fn unreadable(store: &'static str, what: impl Into<String>) -> InvariantViolation {
    InvariantViolation::Unreadable {
        store,
        what: what.into(),
    }
}

/// Checks the RC–server identity `open(SX) = h(open(HK) ∥ open(EX))` and the
/// RC's internal `W` sharing for every user on this server.
pub fn check_cross_store(rc: &RcStore, server: &ServerStore) -> Result<(), InvariantViolation> {
    let ek = server
        .ek
        .as_ref()
        .ok_or_else(|| unreadable("server", "EK_s"))?;
    let k_srv = open_block32(ek, &server.sk).map_err(|_| unreadable("server", "EK_s"))?;
    let hk = rc
        .servers
        .get(&server.sid)
        .ok_or_else(|| unreadable("rc", "HK_s"))?;
    let k_s = open_block32(hk, &rc.rk).map_err(|_| unreadable("rc", "HK_s"))?;
    if k_s != k_srv {
        return Err(unreadable("server", "EK_s disagrees with HK_s"));
    }
    let rc_users = rc.users.iter().filter(|(_, u)| u.sid == server.sid);
    for (id, u) in rc_users {
        let sx = server
            .users
            .get(id)
            .ok_or(InvariantViolation::Orphan(*id))?;
        let x_s = open_block32(sx, &server.sk).map_err(|_| unreadable("server", "SX"))?;
        let tx = open_block64(&u.ex, &rc.rk).map_err(|_| unreadable("rc", "EX"))?;
        let tc = open_block64(&u.ux, &rc.rk).map_err(|_| unreadable("rc", "UX"))?;
        if hash([(&k_s).into(), (&tx).into()]) != x_s {
            return Err(InvariantViolation::CrossStore(*id));
        }
        if tc.left() != k_s || tc.right() != tx.left() {
            return Err(InvariantViolation::WSharing(*id));
        }
    }
    for id in server.users.keys() {
        if !rc.users.contains_key(id) {
            return Err(InvariantViolation::Orphan(*id));
        }
    }
    Ok(())
}

/// Card–RC identity: the card opens (with `B`) to the RC's `TC_s`.
pub fn check_card(
    rc: &RcStore,
    card: &ProposedCard,
    b: &Block32,
) -> Result<(), InvariantViolation> {
    if !card.is_finalized() {
        return Err(InvariantViolation::CardNotFinal(card.id));
    }
    let u = rc
        .users
        .get(&card.id)
        .ok_or(InvariantViolation::Orphan(card.id))?;
    let tc = open_block64(&u.ux, &rc.rk).map_err(|_| unreadable("rc", "UX"))?;
    let qx = card.qx.as_ref().expect("finalized");
    let on_card =
        open_block64(qx, &crate::crypto::kdf_biokey(b)).map_err(|_| unreadable("card", "QX"))?;
    if on_card != tc {
        return Err(InvariantViolation::CardMismatch(card.id));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{seal, Block64, Rng};

    fn sample(rng: &mut Rng) -> (RcStore, ServerStore) {
        let rk = SymKey::generate(rng);
        let sk = SymKey::generate(rng);
        let sid = rng.random_block();
        let ks = rng.random_block();
        let w = rng.random_block();
        let bp = rng.random_block();
        let tx = Block64::concat(&w, &bp);
        let tc = Block64::concat(&ks, &w);
        let id = rng.random_block();
        let mut rc = RcStore::new(rk.clone());
        rc.servers.insert(sid, seal(&ks.0, &rk, rng));
        rc.users.insert(
            id,
            RcUser {
                sid,
                ux: seal(&tc.0, &rk, rng),
                ex: seal(&tx.0, &rk, rng),
                r_cov: seal(b"mailto:a@example.org", &rk, rng),
            },
        );
        let mut server = ServerStore::new(sid, sk.clone());
        server.ek = Some(seal(&ks.0, &sk, rng));
        let xs = hash([(&ks).into(), (&tx).into()]);
        server.users.insert(id, seal(&xs.0, &sk, rng));
        (rc, server)
    }

    #[test]
    fn files_roundtrip_and_are_checked() {
        let mut rng = Rng::new(1);
        let (rc, server) = sample(&mut rng);
        check_cross_store(&rc, &server).unwrap();
        let bytes = rc.to_bytes();
        assert_eq!(RcStore::from_bytes(&bytes).unwrap(), rc);
        assert_eq!(ServerStore::from_bytes(&server.to_bytes()).unwrap(), server);
        assert!(matches!(
            ServerStore::from_bytes(&bytes),
            Err(StoreError::Kind { .. })
        ));
        for i in [0, 9, 40, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x20;
            assert!(RcStore::from_bytes(&bad).is_err(), "byte {i}");
        }
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 1;
        assert_eq!(RcStore::from_bytes(&bad), Err(StoreError::Integrity));
    }

    #[test]
    fn cross_store_detects_drift() {
        let mut rng = Rng::new(2);
        let (rc, mut server) = sample(&mut rng);
        let id = *server.users.keys().next().unwrap();
        let sk = server.sk.clone();
        server
            .users
            .insert(id, seal(&rng.random_block().0, &sk, &mut rng));
        assert_eq!(
            check_cross_store(&rc, &server),
            Err(InvariantViolation::CrossStore(id))
        );
    }

    #[test]
    fn database_bytes_hold_no_key() {
        let mut rng = Rng::new(3);
        let (rc, server) = sample(&mut rng);
        let db = rc.database_bytes();
        assert!(!db.windows(32).any(|w| w == rc.rk.expose()));
        let db = server.database_bytes();
        assert!(!db.windows(32).any(|w| w == server.sk.expose()));
    }
}

//! Fixed-width primitives shared by both schemes.
//!
//! Every atomic value that enters a digest is exactly 32 bytes ([`Block32`]).
//! Two-block values ([`Block64`]) contribute to a digest as their two halves,
//! so `hash([k, w ∥ bp]) == hash([k ∥ w, bp]) == hash([k, w, bp])`.
//!
//! Symmetric sealing is AES-256-CTR followed by an HMAC-SHA256 tag over
//! `nonce ∥ ciphertext`. Opening with any other key fails the tag check.

use std::fmt;
use std::ops::BitXor;

use aes::cipher::{KeyIvInit, StreamCipher};
use hmac::{Hmac, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::wire::{self, Reader, WireError};

type Aes256Ctr = ctr::Ctr128BE<aes::Aes256>;
type HmacSha256 = Hmac<Sha256>;

pub const BLOCK_LEN: usize = 32;
pub const NONCE_LEN: usize = 16;
pub const TAG_LEN: usize = 32;

/// Identifier written into store-file headers.
pub const HASH_ALGORITHM: &str = "sha-256";
pub const CIPHER_ALGORITHM: &str = "aes-256-ctr+hmac-sha256";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("expected {expected} bytes, got {got}")]
    Length { expected: usize, got: usize },
    #[error("xor operands differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("identity string must not be empty")]
    EmptyIdentity,
    #[error("decryption failed: integrity tag mismatch")]
    Decrypt,
    #[error("malformed sealed box: {0}")]
    Malformed(#[from] WireError),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Block32(pub [u8; BLOCK_LEN]);

impl Block32 {
    pub const ZERO: Block32 = Block32([0; BLOCK_LEN]);

    pub fn as_bytes(&self) -> &[u8; BLOCK_LEN] {
        &self.0
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; BLOCK_LEN] = bytes.try_into().map_err(|_| CryptoError::Length {
            expected: BLOCK_LEN,
            got: bytes.len(),
        })?;
        Ok(Block32(arr))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let bytes = hex::decode(s.trim()).map_err(|_| CryptoError::Length {
            expected: BLOCK_LEN,
            got: s.len() / 2,
        })?;
        Self::from_slice(&bytes)
    }
}

impl serde::Serialize for Block32 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> serde::Deserialize<'de> for Block32 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <String as serde::Deserialize>::deserialize(d)?;
        Block32::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

impl fmt::Debug for Block32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Block32({}…)", &self.to_hex()[..12])
    }
}

impl AsRef<[u8]> for Block32 {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

impl BitXor for Block32 {
    type Output = Block32;

    fn bitxor(self, rhs: Block32) -> Block32 {
        let mut out = self.0;
        out.iter_mut().zip(rhs.0.iter()).for_each(|(a, b)| *a ^= b);
        Block32(out)
    }
}

/// Two blocks side by side: `left ∥ right`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Block64(pub [u8; 2 * BLOCK_LEN]);

impl Block64 {
    pub fn concat(left: &Block32, right: &Block32) -> Self {
        let mut out = [0u8; 2 * BLOCK_LEN];
        out[..BLOCK_LEN].copy_from_slice(&left.0);
        out[BLOCK_LEN..].copy_from_slice(&right.0);
        Block64(out)
    }

    pub fn left(&self) -> Block32 {
        Block32(self.0[..BLOCK_LEN].try_into().expect("half of 64 bytes"))
    }

    pub fn right(&self) -> Block32 {
        Block32(self.0[BLOCK_LEN..].try_into().expect("half of 64 bytes"))
    }

    pub fn split(&self) -> (Block32, Block32) {
        (self.left(), self.right())
    }

    pub fn as_bytes(&self) -> &[u8; 2 * BLOCK_LEN] {
        &self.0
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 2 * BLOCK_LEN] = bytes.try_into().map_err(|_| CryptoError::Length {
            expected: 2 * BLOCK_LEN,
            got: bytes.len(),
        })?;
        Ok(Block64(arr))
    }
}

impl fmt::Debug for Block64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (l, r) = self.split();
        write!(f, "Block64({l:?} ∥ {r:?})")
    }
}

impl AsRef<[u8]> for Block64 {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

impl BitXor for Block64 {
    type Output = Block64;

    fn bitxor(self, rhs: Block64) -> Block64 {
        let mut out = self.0;
        out.iter_mut().zip(rhs.0.iter()).for_each(|(a, b)| *a ^= b);
        Block64(out)
    }
}

/// One input to [`hash`]. A `Wide` field is flattened into its two halves.
#[derive(Clone, Copy, Debug)]
pub enum Field<'a> {
    Block(&'a Block32),
    Wide(&'a Block64),
}

impl<'a> From<&'a Block32> for Field<'a> {
    fn from(b: &'a Block32) -> Self {
        Field::Block(b)
    }
}

impl<'a> From<&'a Block64> for Field<'a> {
    fn from(b: &'a Block64) -> Self {
        Field::Wide(b)
    }
}

/// Digest of the raw concatenation of the flattened 32-byte units.
pub fn hash<'a>(fields: impl IntoIterator<Item = Field<'a>>) -> Block32 {
    let mut hasher = Sha256::new();
    for field in fields {
        match field {
            Field::Block(b) => hasher.update(b.0),
            Field::Wide(b) => hasher.update(b.0),
        }
    }
    Block32(hasher.finalize().into())
}

/// Byte-level entry point to [`hash`]: every field must be 32 or 64 bytes.
pub fn hash_fields(fields: &[&[u8]]) -> Result<Block32, CryptoError> {
    let mut hasher = Sha256::new();
    for field in fields {
        if field.len() != BLOCK_LEN && field.len() != 2 * BLOCK_LEN {
            return Err(CryptoError::Length {
                expected: BLOCK_LEN,
                got: field.len(),
            });
        }
        hasher.update(field);
    }
    Ok(Block32(hasher.finalize().into()))
}

pub fn xor(a: &[u8], b: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if a.len() != b.len() {
        return Err(CryptoError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x ^ y).collect())
}

/// `x ∥ x`; lets a one-block secret mask a two-block value.
pub fn expand(x: &Block32) -> Block64 {
    Block64::concat(x, x)
}

/// Digest of the length-prefixed UTF-8 bytes of `identity`.
pub fn canonical_id(identity: &str) -> Result<Block32, CryptoError> {
    if identity.is_empty() {
        return Err(CryptoError::EmptyIdentity);
    }
    let mut hasher = Sha256::new();
    hasher.update((identity.len() as u32).to_be_bytes());
    hasher.update(identity.as_bytes());
    Ok(Block32(hasher.finalize().into()))
}

/// Symmetric key held only inside actor stores.
#[derive(Clone, PartialEq, Eq)]
pub struct SymKey([u8; BLOCK_LEN]);

impl SymKey {
    pub fn from_bytes(bytes: [u8; BLOCK_LEN]) -> Self {
        SymKey(bytes)
    }

    pub fn generate(rng: &mut Rng) -> Self {
        SymKey(rng.random_block().0)
    }

    pub fn expose(&self) -> &[u8; BLOCK_LEN] {
        &self.0
    }

    fn subkey(&self, label: &[u8]) -> [u8; BLOCK_LEN] {
        let mut hasher = Sha256::new();
        hasher.update(label);
        hasher.update(self.0);
        hasher.finalize().into()
    }
}

impl fmt::Debug for SymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymKey(..)")
    }
}

/// Key derived from a biometric key so it can seal the card secret.
pub fn kdf_biokey(b: &Block32) -> SymKey {
    let mut hasher = Sha256::new();
    hasher.update(b"tfa/biokey/v1");
    hasher.update(b.0);
    SymKey(hasher.finalize().into())
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SealedBox {
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl fmt::Debug for SealedBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "SealedBox({} bytes, tag {}…)",
            self.ciphertext.len(),
            &hex::encode(self.tag)[..8]
        )
    }
}

impl SealedBox {
    /// `nonce ∥ ciphertext ∥ tag`, each with a 4-byte big-endian length.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + NONCE_LEN + self.ciphertext.len() + TAG_LEN);
        wire::put_lp(&mut out, &self.nonce);
        wire::put_lp(&mut out, &self.ciphertext);
        wire::put_lp(&mut out, &self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader::new(bytes);
        let sealed = Self::read(&mut r)?;
        r.finish()?;
        Ok(sealed)
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, CryptoError> {
        let nonce = r.lp_fixed::<NONCE_LEN>()?;
        let ciphertext = r.lp()?.to_vec();
        let tag = r.lp_fixed::<TAG_LEN>()?;
        Ok(SealedBox {
            nonce,
            ciphertext,
            tag,
        })
    }

    /// Length of the serialized form for a plaintext of `len` bytes.
    pub fn serialized_len(len: usize) -> usize {
        12 + NONCE_LEN + len + TAG_LEN
    }
}

fn mac_for(key: &SymKey, nonce: &[u8], ciphertext: &[u8]) -> HmacSha256 {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(&key.subkey(b"tfa/seal/mac"))
        .expect("hmac accepts any key length");
    mac.update(nonce);
    mac.update(ciphertext);
    mac
}

pub fn seal(plaintext: &[u8], key: &SymKey, rng: &mut Rng) -> SealedBox {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let mut ciphertext = plaintext.to_vec();
    let mut cipher = Aes256Ctr::new(&key.subkey(b"tfa/seal/enc").into(), &nonce.into());
    cipher.apply_keystream(&mut ciphertext);
    let tag = mac_for(key, &nonce, &ciphertext)
        .finalize()
        .into_bytes()
        .into();
    SealedBox {
        nonce,
        ciphertext,
        tag,
    }
}

pub fn open(sealed: &SealedBox, key: &SymKey) -> Result<Vec<u8>, CryptoError> {
    mac_for(key, &sealed.nonce, &sealed.ciphertext)
        .verify_slice(&sealed.tag)
        .map_err(|_| CryptoError::Decrypt)?;
    let mut plaintext = sealed.ciphertext.clone();
    let mut cipher = Aes256Ctr::new(&key.subkey(b"tfa/seal/enc").into(), &sealed.nonce.into());
    cipher.apply_keystream(&mut plaintext);
    Ok(plaintext)
}

pub fn open_block32(sealed: &SealedBox, key: &SymKey) -> Result<Block32, CryptoError> {
    Block32::from_slice(&open(sealed, key)?)
}

pub fn open_block64(sealed: &SealedBox, key: &SymKey) -> Result<Block64, CryptoError> {
    Block64::from_slice(&open(sealed, key)?)
}

/// Seeded deterministic byte source (ChaCha20 keystream over the seed).
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn random_block(&mut self) -> Block32 {
        let mut out = [0u8; BLOCK_LEN];
        self.inner.fill_bytes(&mut out);
        Block32(out)
    }

    /// Independent child stream; advances this stream by one word.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.next_u64())
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

pub fn random_block(rng: &mut Rng) -> Block32 {
    rng.random_block()
}

#[cfg(test)]
mod tests {
    use super::*;

    // SHA-256 reference vectors produced by Python's hashlib.
    const SHA256_ZERO32: &str = "66687aadf862bd776c8fc18b8e9f8e20089714856ee233b3902a591d0d5f2925";
    const SHA256_ZERO64: &str = "f5a5fd42d16a20302798ef6ed309979b43003d2320d9f0e8ea9831a92759fb4b";

    fn blocks(rng: &mut Rng) -> (Block32, Block32, Block32) {
        (rng.random_block(), rng.random_block(), rng.random_block())
    }

    #[test]
    fn hash_matches_reference_vectors() {
        assert_eq!(hash([Field::from(&Block32::ZERO)]).to_hex(), SHA256_ZERO32);
        let zero64 = Block64([0; 64]);
        assert_eq!(hash([Field::from(&zero64)]).to_hex(), SHA256_ZERO64);
    }

    #[test]
    fn hash_is_deterministic_and_flattens() {
        let mut rng = Rng::new(3);
        let (k, w, bp) = blocks(&mut rng);
        let a = hash([(&k).into(), (&w).into(), (&bp).into()]);
        assert_eq!(a, hash([(&k).into(), (&w).into(), (&bp).into()]));
        let kw = Block64::concat(&k, &w);
        let wbp = Block64::concat(&w, &bp);
        assert_eq!(a, hash([(&kw).into(), (&bp).into()]));
        assert_eq!(a, hash([(&k).into(), (&wbp).into()]));
    }

    #[test]
    fn hash_fields_rejects_illegal_length() {
        assert!(matches!(
            hash_fields(&[&[0u8; 31]]),
            Err(CryptoError::Length { got: 31, .. })
        ));
        assert_eq!(hash_fields(&[&[0u8; 32]]).unwrap().to_hex(), SHA256_ZERO32);
    }

    #[test]
    fn xor_laws() {
        let mut rng = Rng::new(9);
        let (a, b, _) = blocks(&mut rng);
        assert_eq!(a ^ a, Block32::ZERO);
        assert_eq!(a ^ Block32::ZERO, a);
        assert_eq!((a ^ b) ^ b, a);
        assert_eq!(xor(&[1, 2], &[1]), Err(CryptoError::LengthMismatch(2, 1)));
    }

    #[test]
    fn expand_repeats_and_roundtrips_through_xor() {
        assert_eq!(expand(&Block32::ZERO), Block64([0; 64]));
        let mut rng = Rng::new(5);
        let (x, k, w) = blocks(&mut rng);
        let e = expand(&x);
        assert_eq!(e.left(), x);
        assert_eq!(e.right(), x);
        let tc = Block64::concat(&k, &w);
        let recovered = (tc ^ e) ^ tc;
        assert_eq!(recovered, e);
        assert_eq!(recovered.left(), recovered.right());
    }

    #[test]
    fn seal_open_roundtrip_and_length_contract() {
        let mut rng = Rng::new(11);
        let key = SymKey::generate(&mut rng);
        for len in [32usize, 64] {
            let mut p = vec![0u8; len];
            rng.fill_bytes(&mut p);
            let sealed = seal(&p, &key, &mut rng);
            assert_eq!(sealed.ciphertext.len(), len);
            assert_eq!(sealed.to_bytes().len(), SealedBox::serialized_len(len));
            assert_eq!(open(&sealed, &key).unwrap(), p);
            assert_eq!(SealedBox::from_bytes(&sealed.to_bytes()).unwrap(), sealed);
        }
    }

    #[test]
    fn wrong_key_always_detected() {
        let mut rng = Rng::new(12);
        let mut detected = 0;
        for _ in 0..1000 {
            let k1 = SymKey::generate(&mut rng);
            let k2 = SymKey::generate(&mut rng);
            let p = rng.random_block();
            let sealed = seal(&p.0, &k1, &mut rng);
            if open(&sealed, &k2) == Err(CryptoError::Decrypt) {
                detected += 1;
            }
        }
        assert_eq!(detected, 1000);
    }

    #[test]
    fn every_single_bit_flip_is_detected() {
        let mut rng = Rng::new(13);
        let key = SymKey::generate(&mut rng);
        let p = Block64::concat(&rng.random_block(), &rng.random_block());
        let sealed = seal(&p.0, &key, &mut rng);
        let bytes = sealed.to_bytes();
        for bit in 0..bytes.len() * 8 {
            let mut tampered = bytes.clone();
            tampered[bit / 8] ^= 1 << (bit % 8);
            // Flips in a length prefix make the box unparsable; anything that
            // parses must fail the tag.
            if let Ok(b) = SealedBox::from_bytes(&tampered) {
                assert_eq!(open(&b, &key), Err(CryptoError::Decrypt), "bit {bit}");
            }
        }
    }

    #[test]
    fn canonical_id_properties() {
        let a = canonical_id("alice").unwrap();
        assert_eq!(a, canonical_id("alice").unwrap());
        assert_ne!(a, canonical_id("alicf").unwrap());
        assert_eq!(a.0.len(), 32);
        assert_eq!(canonical_id(""), Err(CryptoError::EmptyIdentity));
    }

    #[test]
    fn random_block_determinism_and_freshness() {
        assert_eq!(Rng::new(7).random_block(), Rng::new(7).random_block());
        for seed in 0..1000 {
            let mut rng = Rng::new(seed);
            assert_ne!(rng.random_block(), rng.random_block(), "seed {seed}");
        }
    }

    #[test]
    fn kdf_biokey_properties() {
        let mut rng = Rng::new(21);
        for _ in 0..1000 {
            let b = rng.random_block();
            let b2 = rng.random_block();
            assert_eq!(kdf_biokey(&b), kdf_biokey(&b));
            assert_ne!(kdf_biokey(&b), kdf_biokey(&b2));
        }
        let b = rng.random_block();
        let p = rng.random_block();
        let sealed = seal(&p.0, &kdf_biokey(&b), &mut rng);
        assert_eq!(open(&sealed, &kdf_biokey(&b)).unwrap(), p.0);
    }
}

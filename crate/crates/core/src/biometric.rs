//! Simulated biometric templates and a code-offset fuzzy extractor.
//!
//! A 256-bit key is encoded with a repetition code (each key bit repeated
//! `n_t / 256` times), and the helper data stores `code(key) ⊕ template`
//! together with `hash([key])`. Reproduction XORs a fresh template onto the
//! offset, majority-decodes every group and accepts the result only if its
//! digest matches the stored check. With repetition 4 one flipped bit per
//! group is always corrected; two flips tie and decode to 0.

use rand::seq::index;
use thiserror::Error;

use crate::crypto::{hash, Block32, Rng, BLOCK_LEN};
use crate::wire::{self, Reader, WireError};

pub const KEY_BITS: usize = 8 * BLOCK_LEN;
pub const DEFAULT_TEMPLATE_BITS: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BiometricError {
    #[error("template length {0} is not a positive multiple of {KEY_BITS}")]
    BadLength(usize),
    #[error("template has {got} bits, extractor expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("biometric does not reproduce the enrolled key")]
    Mismatch,
    #[error("cannot flip {flips} of {len} bits")]
    TooManyFlips { flips: usize, len: usize },
    #[error("bad template encoding: {0}")]
    Encoding(String),
}

/// Fixed-length bit vector, most significant bit first within each byte.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Template {
    bytes: Vec<u8>,
}

impl std::fmt::Debug for Template {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Template({} bits)", self.len())
    }
}

impl Template {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Template { bytes }
    }

    pub fn random(bits: usize, rng: &mut Rng) -> Self {
        let mut bytes = vec![0u8; bits.div_ceil(8)];
        rand::RngCore::fill_bytes(rng, &mut bytes);
        Template { bytes }
    }

    pub fn len(&self) -> usize {
        self.bytes.len() * 8
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bytes[i / 8] >> (7 - i % 8) & 1 == 1
    }

    pub fn flip(&mut self, i: usize) {
        self.bytes[i / 8] ^= 1 << (7 - i % 8);
    }

    pub fn hamming(&self, other: &Template) -> usize {
        self.bytes
            .iter()
            .zip(&other.bytes)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    fn xor(&self, other: &Template) -> Template {
        Template {
            bytes: self
                .bytes
                .iter()
                .zip(&other.bytes)
                .map(|(a, b)| a ^ b)
                .collect(),
        }
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, BiometricError> {
        hex::decode(s.trim())
            .map(Template::from_bytes)
            .map_err(|e| BiometricError::Encoding(e.to_string()))
    }
}

/// Returns `b` with exactly `flips` distinct bit positions inverted.
pub fn perturb(b: &Template, flips: usize, rng: &mut Rng) -> Result<Template, BiometricError> {
    if flips > b.len() {
        return Err(BiometricError::TooManyFlips {
            flips,
            len: b.len(),
        });
    }
    let mut out = b.clone();
    for i in index::sample(rng, b.len(), flips) {
        out.flip(i);
    }
    Ok(out)
}

/// Flips exactly one random bit inside every `group`-bit block.
pub fn perturb_per_group(b: &Template, group: usize, rng: &mut Rng) -> Template {
    let mut out = b.clone();
    for start in (0..b.len()).step_by(group) {
        let offset = (rand::RngCore::next_u32(rng) as usize) % group;
        out.flip(start + offset);
    }
    out
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct HelperData {
    pub offset: Template,
    pub check: Block32,
}

impl HelperData {
    pub fn write(&self, out: &mut Vec<u8>) {
        wire::put_lp(out, self.offset.as_bytes());
        wire::put_lp(out, &self.check.0);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let offset = Template::from_bytes(r.lp()?.to_vec());
        let check = Block32(r.lp_fixed::<BLOCK_LEN>()?);
        Ok(HelperData { offset, check })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FuzzyExtractor {
    template_bits: usize,
}

impl Default for FuzzyExtractor {
    fn default() -> Self {
        FuzzyExtractor {
            template_bits: DEFAULT_TEMPLATE_BITS,
        }
    }
}

impl FuzzyExtractor {
    pub fn new(template_bits: usize) -> Result<Self, BiometricError> {
        if template_bits == 0 || !template_bits.is_multiple_of(KEY_BITS) {
            return Err(BiometricError::BadLength(template_bits));
        }
        Ok(FuzzyExtractor { template_bits })
    }

    pub fn template_bits(&self) -> usize {
        self.template_bits
    }

    pub fn repetition(&self) -> usize {
        self.template_bits / KEY_BITS
    }

    /// Worst-case number of flips per group that still decode.
    pub fn tolerance_per_group(&self) -> usize {
        (self.repetition() - 1) / 2
    }

    fn check_len(&self, b: &Template) -> Result<(), BiometricError> {
        if b.len() != self.template_bits {
            return Err(BiometricError::LengthMismatch {
                expected: self.template_bits,
                got: b.len(),
            });
        }
        Ok(())
    }

    fn encode(&self, key: &Block32) -> Template {
        let r = self.repetition();
        let mut code = Template::from_bytes(vec![0u8; self.template_bits / 8]);
        for j in 0..KEY_BITS {
            if key.0[j / 8] >> (7 - j % 8) & 1 == 1 {
                for k in 0..r {
                    code.flip(j * r + k);
                }
            }
        }
        code
    }

    fn decode(&self, word: &Template) -> Block32 {
        let r = self.repetition();
        let mut key = [0u8; BLOCK_LEN];
        for j in 0..KEY_BITS {
            let ones = (0..r).filter(|k| word.bit(j * r + k)).count();
            if 2 * ones > r {
                key[j / 8] |= 1 << (7 - j % 8);
            }
        }
        Block32(key)
    }

    pub fn gen(
        &self,
        b: &Template,
        rng: &mut Rng,
    ) -> Result<(Block32, HelperData), BiometricError> {
        self.check_len(b)?;
        let key = rng.random_block();
        let offset = self.encode(&key).xor(b);
        let check = hash([(&key).into()]);
        Ok((key, HelperData { offset, check }))
    }

    pub fn rep(&self, b2: &Template, helper: &HelperData) -> Result<Block32, BiometricError> {
        self.check_len(b2)?;
        self.check_len(&helper.offset)?;
        let key = self.decode(&helper.offset.xor(b2));
        if hash([(&key).into()]) != helper.check {
            return Err(BiometricError::Mismatch);
        }
        Ok(key)
    }
}

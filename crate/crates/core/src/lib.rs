//! Deterministic laboratory for three-factor (password, biometric, smart card)
//! remote user authentication.
//!
//! Two schemes run side by side: a legacy ECC-based scheme whose stolen-card
//! weaknesses are mechanized in [`li::attacks`], and a hardened scheme with
//! AES-sealed stores and password/card recovery in [`proposed`]. Both run over
//! the simulated channels of [`channel`], where a symbolic adversary
//! ([`symbolic`]) and scripted attacks produce per-scenario verdicts that the
//! [`harness`] turns into reports and a feature matrix.

pub mod biometric;
pub mod channel;
pub mod crypto;
pub mod ec;
pub mod envelope;
pub mod harness;
pub mod li;
pub mod proposed;
pub mod symbolic;
pub mod wire;

//! The hardened three-factor scheme: a registration center (RC), a server
//! and a user holding a smart card, with AES-sealed stores on both
//! infrastructure sides and password and card recovery.
//!
//! The pure equation kernels live here; [`store`] holds the persistent
//! state and [`actors`] the three message-driven state machines.

pub mod actors;
pub mod store;

use crate::biometric::HelperData;
use crate::crypto::{
    canonical_id, expand, hash, seal, Block32, Block64, CryptoError, Rng, SealedBox, SymKey,
    BLOCK_LEN,
};
use crate::wire::{self, Reader, WireError};

pub use actors::{
    Addr, ChannelClass, Cx, Event, FaultMode, FaultPoint, Faults, Outgoing, RcActor, ServerActor,
    StepError, UserActor, UserTask,
};
pub use store::{RcStore, ServerStore, StoreError, StoreKind};

/// `BP = h(PW ∥ B)`.
pub fn derive_bp(pw: &str, b: &Block32) -> Result<Block32, CryptoError> {
    let pw = canonical_id(pw)?;
    Ok(hash([(&pw).into(), b.into()]))
}

/// `X_s = h(K_s ∥ TX_s)`; with `TX_s = W ∥ BP` this is also `h(TC_s ∥ BP)`.
pub fn derive_xs(k_s: &Block32, tx_s: &Block64) -> Block32 {
    hash([k_s.into(), tx_s.into()])
}

/// User-side form of the same value: `h(TC_s ∥ BP)`.
pub fn derive_xs_from_card(tc_s: &Block64, bp: &Block32) -> Block32 {
    hash([tc_s.into(), bp.into()])
}

/// `K_s = h(SID ∥ R_n1)`.
pub fn derive_ks(sid: &Block32, r_n1: &Block32) -> Block32 {
    hash([sid.into(), r_n1.into()])
}

/// `(M_1, M_2) = (h(X_s ∥ R_n2), h(ID ∥ X_s) ⊕ R_n2)`.
pub fn make_login_pair(id: &Block32, x_s: &Block32, r_n2: &Block32) -> (Block32, Block32) {
    let m1 = hash([x_s.into(), r_n2.into()]);
    let m2 = hash([id.into(), x_s.into()]) ^ *r_n2;
    (m1, m2)
}

pub fn recover_rn2(id: &Block32, x_s: &Block32, m2: &Block32) -> Block32 {
    *m2 ^ hash([id.into(), x_s.into()])
}

/// `(M_4, M_5) = (h(X_s ∥ R_n3), h(ID ∥ X_s ∥ R_n2) ⊕ R_n3)`.
pub fn make_challenge(
    id: &Block32,
    x_s: &Block32,
    r_n2: &Block32,
    r_n3: &Block32,
) -> (Block32, Block32) {
    let m4 = hash([x_s.into(), r_n3.into()]);
    let m5 = hash([id.into(), x_s.into(), r_n2.into()]) ^ *r_n3;
    (m4, m5)
}

pub fn recover_rn3(id: &Block32, x_s: &Block32, r_n2: &Block32, m5: &Block32) -> Block32 {
    *m5 ^ hash([id.into(), x_s.into(), r_n2.into()])
}

/// `M_7 = h(X_s ∥ R_n2 ∥ R_n3)`.
pub fn make_confirmation(x_s: &Block32, r_n2: &Block32, r_n3: &Block32) -> Block32 {
    hash([x_s.into(), r_n2.into(), r_n3.into()])
}

/// `K_ses = h(R_n2 ∥ R_n3)`.
pub fn derive_session_key(r_n2: &Block32, r_n3: &Block32) -> Block32 {
    hash([r_n2.into(), r_n3.into()])
}

/// `TCX_s = TC_s ⊕ (X_s ∥ X_s)`.
pub fn make_tcx(tc_s: &Block64, x_s: &Block32) -> Block64 {
    *tc_s ^ expand(x_s)
}

/// RC side of the password-change check: `TCX_s ⊕ TC_s` must be an
/// expanded block; returns its half.
pub fn recover_xs_from_tcx(tcx: &Block64, tc_s: &Block64) -> Option<Block32> {
    let (l, r) = (*tcx ^ *tc_s).split();
    (l == r).then_some(l)
}

/// The smart card of the proposed scheme.
///
/// Between delivery and acceptance it carries `BP` and `TC_s` in transit;
/// a finalized card holds only `QX = E(TC_s, kdf(B))` and the helper data.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ProposedCard {
    pub id: Block32,
    pub sid: Block32,
    pub qx: Option<SealedBox>,
    pub helper: HelperData,
    pub transit_bp: Option<Block32>,
    pub transit_tc: Option<Block64>,
}

impl ProposedCard {
    pub fn is_finalized(&self) -> bool {
        self.qx.is_some() && self.transit_bp.is_none() && self.transit_tc.is_none()
    }

    /// Writes `QX` and wipes the transit fields.
    pub fn finalize(&mut self, tc_s: &Block64, b: &Block32, rng: &mut Rng) {
        self.qx = Some(seal_tc(tc_s, b, rng));
        self.transit_bp = None;
        self.transit_tc = None;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        wire::put_lp(&mut out, &self.id.0);
        wire::put_lp(&mut out, &self.sid.0);
        put_opt(&mut out, self.qx.as_ref().map(SealedBox::to_bytes));
        self.helper.write(&mut out);
        put_opt(&mut out, self.transit_bp.map(|b| b.0.to_vec()));
        put_opt(&mut out, self.transit_tc.map(|b| b.0.to_vec()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut r = Reader::new(bytes);
        let id = Block32(r.lp_fixed::<BLOCK_LEN>()?);
        let sid = Block32(r.lp_fixed::<BLOCK_LEN>()?);
        let qx = get_opt(&mut r)?
            .map(|b| SealedBox::from_bytes(&b))
            .transpose()?;
        let helper = HelperData::read(&mut r)?;
        let transit_bp = get_opt(&mut r)?
            .map(|b| Block32::from_slice(&b))
            .transpose()?;
        let transit_tc = get_opt(&mut r)?
            .map(|b| Block64::from_slice(&b))
            .transpose()?;
        r.finish()?;
        Ok(ProposedCard {
            id,
            sid,
            qx,
            helper,
            transit_bp,
            transit_tc,
        })
    }
}

pub fn seal_tc(tc_s: &Block64, b: &Block32, rng: &mut Rng) -> SealedBox {
    seal(&tc_s.0, &crate::crypto::kdf_biokey(b), rng)
}

fn put_opt(out: &mut Vec<u8>, v: Option<Vec<u8>>) {
    match v {
        Some(bytes) => {
            out.push(1);
            wire::put_lp(out, &bytes);
        }
        None => out.push(0),
    }
}

fn get_opt(r: &mut Reader<'_>) -> Result<Option<Vec<u8>>, WireError> {
    match r.u8()? {
        0 => Ok(None),
        1 => Ok(Some(r.lp()?.to_vec())),
        t => Err(WireError::Invalid(format!("option tag {t}"))),
    }
}

/// Key handle used by the RC and server for at-rest sealing.
pub fn generate_store_key(rng: &mut Rng) -> SymKey {
    SymKey::generate(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biometric::{FuzzyExtractor, Template};
    use crate::crypto::Rng;
    use proptest::prelude::*;

    fn arb_block() -> impl Strategy<Value = Block32> {
        any::<[u8; 32]>().prop_map(Block32)
    }

    #[test]
    fn xs_all_zero_reference() {
        // SHA-256 of 96 zero bytes, computed with Python's hashlib.
        assert_eq!(
            derive_xs(&Block32::ZERO, &Block64([0; 64])).to_hex(),
            "2ea9ab9198d1638007400cd2c3bef1cc745b864b76011a0e1bc52180ac6452d4"
        );
    }

    #[test]
    fn zero_nonce_degenerate_values() {
        let mut rng = Rng::new(1);
        let (id, xs, rn2) = (rng.random_block(), rng.random_block(), rng.random_block());
        assert_eq!(
            make_login_pair(&id, &xs, &Block32::ZERO).1,
            hash([(&id).into(), (&xs).into()])
        );
        assert_eq!(
            make_challenge(&id, &xs, &rn2, &Block32::ZERO).1,
            hash([(&id).into(), (&xs).into(), (&rn2).into()])
        );
        assert_eq!(
            derive_session_key(&Block32::ZERO, &Block32::ZERO),
            hash([(&Block64([0; 64])).into()])
        );
        let tc = Block64::concat(&rng.random_block(), &rng.random_block());
        assert_eq!(make_tcx(&tc, &Block32::ZERO), tc);
    }

    #[test]
    fn bp_avalanche() {
        let mut rng = Rng::new(2);
        let b = rng.random_block();
        let base = derive_bp("pw", &b).unwrap();
        assert_eq!(base, derive_bp("pw", &b).unwrap());
        let mut b2 = b;
        b2.0[31] ^= 1;
        for other in [derive_bp("pX", &b).unwrap(), derive_bp("pw", &b2).unwrap()] {
            let diff: u32 = base
                .0
                .iter()
                .zip(&other.0)
                .map(|(x, y)| (x ^ y).count_ones())
                .sum();
            assert!((64..=192).contains(&diff), "{diff}");
        }
    }

    #[test]
    fn tcx_bit_flip_sweep() {
        let mut rng = Rng::new(3);
        let tc = Block64::concat(&rng.random_block(), &rng.random_block());
        let xs = rng.random_block();
        let tcx = make_tcx(&tc, &xs);
        assert_eq!(recover_xs_from_tcx(&tcx, &tc), Some(xs));
        for bit in 0..512 {
            let mut bad = tcx;
            bad.0[bit / 8] ^= 1 << (bit % 8);
            assert_eq!(recover_xs_from_tcx(&bad, &tc), None, "bit {bit}");
        }
    }

    #[test]
    fn card_roundtrip_and_finalization() {
        let mut rng = Rng::new(4);
        let fx = FuzzyExtractor::default();
        let t = Template::random(1024, &mut rng);
        let (b, helper) = fx.gen(&t, &mut rng).unwrap();
        let tc = Block64::concat(&rng.random_block(), &rng.random_block());
        let mut card = ProposedCard {
            id: rng.random_block(),
            sid: rng.random_block(),
            qx: None,
            helper,
            transit_bp: Some(rng.random_block()),
            transit_tc: Some(tc),
        };
        assert!(!card.is_finalized());
        assert_eq!(ProposedCard::from_bytes(&card.to_bytes()).unwrap(), card);
        card.finalize(&tc, &b, &mut rng);
        assert!(card.is_finalized());
        assert_eq!(ProposedCard::from_bytes(&card.to_bytes()).unwrap(), card);
        let opened =
            crate::crypto::open_block64(card.qx.as_ref().unwrap(), &crate::crypto::kdf_biokey(&b))
                .unwrap();
        assert_eq!(opened, tc);
    }

    proptest! {
        #[test]
        fn xs_forms_agree(ks in arb_block(), w in arb_block(), bp in arb_block()) {
            let tc = Block64::concat(&ks, &w);
            let tx = Block64::concat(&w, &bp);
            prop_assert_eq!(derive_xs(&ks, &tx), derive_xs_from_card(&tc, &bp));
        }

        #[test]
        fn xs_depends_on_w(ks in arb_block(), w in arb_block(), w2 in arb_block(), bp in arb_block()) {
            prop_assume!(w != w2);
            prop_assert_ne!(
                derive_xs(&ks, &Block64::concat(&w, &bp)),
                derive_xs(&ks, &Block64::concat(&w2, &bp))
            );
        }

        #[test]
        fn masks_invert(id in arb_block(), xs in arb_block(), rn2 in arb_block(), rn3 in arb_block()) {
            let (m1, m2) = make_login_pair(&id, &xs, &rn2);
            prop_assert_eq!(recover_rn2(&id, &xs, &m2), rn2);
            prop_assert_eq!(m1, hash([(&xs).into(), (&rn2).into()]));
            let (m4, m5) = make_challenge(&id, &xs, &rn2, &rn3);
            prop_assert_eq!(recover_rn3(&id, &xs, &rn2, &m5), rn3);
            prop_assert_eq!(m4, make_login_pair(&id, &xs, &rn3).0);
        }

        #[test]
        fn confirmation_is_order_sensitive(xs in arb_block(), a in arb_block(), b in arb_block()) {
            prop_assume!(a != b);
            prop_assert_ne!(make_confirmation(&xs, &a, &b), make_confirmation(&xs, &b, &a));
        }

        #[test]
        fn tcx_recovers(tc in any::<[u8; 64]>(), xs in arb_block()) {
            let tc = Block64(tc);
            prop_assert_eq!(recover_xs_from_tcx(&make_tcx(&tc, &xs), &tc), Some(xs));
        }
    }

    #[test]
    fn session_keys_differ_across_fresh_nonces() {
        let mut rng = Rng::new(5);
        let keys: std::collections::BTreeSet<_> = (0..100)
            .map(|_| derive_session_key(&rng.random_block(), &rng.random_block()))
            .collect();
        assert_eq!(keys.len(), 100);
    }
}

//! Short-Weierstrass curve arithmetic over a prime field.
//!
//! Two profiles ship: `tiny`, a 281-element group small enough to check
//! exhaustively, and `std256` (secp256k1) for realistic runs. Scalar
//! multiplication runs in Jacobian coordinates; [`add`] stays affine.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crypto::{Block32, Rng};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EcError {
    #[error("point is not on curve {0}")]
    OffCurve(String),
    #[error("unknown curve profile {0:?} (expected tiny or std256)")]
    UnknownProfile(String),
    #[error("invalid curve parameters: {0}")]
    InvalidParams(&'static str),
    #[error("cannot decode point: {0}")]
    Decode(&'static str),
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub enum Point {
    Identity,
    Affine { x: BigUint, y: BigUint },
}

impl Point {
    pub fn affine(x: impl Into<BigUint>, y: impl Into<BigUint>) -> Self {
        Point::Affine {
            x: x.into(),
            y: y.into(),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Point::Identity)
    }
}

impl fmt::Debug for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Point::Identity => f.write_str("O"),
            Point::Affine { x, y } => {
                let (xs, ys) = (x.to_str_radix(16), y.to_str_radix(16));
                if xs.len() > 12 {
                    write!(f, "({}…, {}…)", &xs[..12], &ys[..12.min(ys.len())])
                } else {
                    write!(f, "({x}, {y})")
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CurveProfile {
    #[default]
    Tiny,
    Std256,
}

impl CurveProfile {
    pub fn params(self) -> CurveParams {
        match self {
            CurveProfile::Tiny => CurveParams::tiny(),
            CurveProfile::Std256 => CurveParams::std256(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CurveProfile::Tiny => "tiny",
            CurveProfile::Std256 => "std256",
        }
    }
}

impl FromStr for CurveProfile {
    type Err = EcError;

    fn from_str(s: &str) -> Result<Self, EcError> {
        match s {
            "tiny" => Ok(CurveProfile::Tiny),
            "std256" => Ok(CurveProfile::Std256),
            other => Err(EcError::UnknownProfile(other.to_string())),
        }
    }
}

impl fmt::Display for CurveProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CurveParams {
    pub name: &'static str,
    pub p: BigUint,
    pub a: BigUint,
    pub b: BigUint,
    pub g: Point,
    pub n: BigUint,
}

fn hex_uint(s: &str) -> BigUint {
    BigUint::parse_bytes(s.as_bytes(), 16).expect("valid hex constant")
}

impl CurveParams {
    /// y² = x³ + 3x + 7 over F_263; 281 points, prime order.
    pub fn tiny() -> Self {
        CurveParams {
            name: "tiny",
            p: 263u32.into(),
            a: 3u32.into(),
            b: 7u32.into(),
            g: Point::affine(1u32, 96u32),
            n: 281u32.into(),
        }
    }

    /// secp256k1.
    pub fn std256() -> Self {
        CurveParams {
            name: "std256",
            p: hex_uint("FFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEFFFFFC2F"),
            a: BigUint::zero(),
            b: 7u32.into(),
            g: Point::affine(
                hex_uint("79BE667EF9DCBBAC55A06295CE870B07029BFCDB2DCE28D959F2815B16F81798"),
                hex_uint("483ADA7726A3C4655DA4FBFC0E1108A8FD17B448A68554199C47D08FFB10D4B8"),
            ),
            n: hex_uint("FFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141"),
        }
    }

    pub fn coord_len(&self) -> usize {
        (self.p.bits() as usize).div_ceil(8)
    }

    pub fn is_on_curve(&self, q: &Point) -> bool {
        match q {
            Point::Identity => true,
            Point::Affine { x, y } => {
                if x >= &self.p || y >= &self.p {
                    return false;
                }
                let lhs = y * y % &self.p;
                let rhs = (x * x * x + &self.a * x + &self.b) % &self.p;
                lhs == rhs
            }
        }
    }

    /// Checks the non-singularity, base-point and order invariants.
    pub fn validate(&self) -> Result<(), EcError> {
        let f = Fp(&self.p);
        let a3 = f.mul(&f.mul(&self.a, &self.a), &self.a);
        let disc = f.add(
            &f.mul(&4u32.into(), &a3),
            &f.mul(&27u32.into(), &f.mul(&self.b, &self.b)),
        );
        if disc.is_zero() {
            return Err(EcError::InvalidParams("singular curve"));
        }
        if !self.is_on_curve(&self.g) || self.g.is_identity() {
            return Err(EcError::InvalidParams("base point not on curve"));
        }
        if !scalar_mul(&self.n, &self.g, self)?.is_identity() {
            return Err(EcError::InvalidParams("n·G is not the identity"));
        }
        Ok(())
    }

    fn require(&self, q: &Point) -> Result<(), EcError> {
        if self.is_on_curve(q) {
            Ok(())
        } else {
            Err(EcError::OffCurve(self.name.to_string()))
        }
    }
}

/// Arithmetic modulo p on already-reduced operands.
#[derive(Clone, Copy)]
struct Fp<'a>(&'a BigUint);

impl Fp<'_> {
    fn add(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a + b) % self.0
    }

    fn sub(&self, a: &BigUint, b: &BigUint) -> BigUint {
        if a >= b {
            a - b
        } else {
            self.0 - (b - a)
        }
    }

    fn mul(&self, a: &BigUint, b: &BigUint) -> BigUint {
        a * b % self.0
    }

    fn small(&self, k: u32, a: &BigUint) -> BigUint {
        a * k % self.0
    }

    fn inv(&self, a: &BigUint) -> BigUint {
        // p is prime.
        a.modpow(&(self.0 - 2u32), self.0)
    }
}

pub fn negate(q: &Point, params: &CurveParams) -> Point {
    match q {
        Point::Identity => Point::Identity,
        Point::Affine { x, y } => Point::Affine {
            x: x.clone(),
            y: Fp(&params.p).sub(&BigUint::zero(), y),
        },
    }
}

/// Affine group law.
pub fn add(p1: &Point, p2: &Point, params: &CurveParams) -> Result<Point, EcError> {
    params.require(p1)?;
    params.require(p2)?;
    Ok(add_unchecked(p1, p2, params))
}

fn add_unchecked(p1: &Point, p2: &Point, params: &CurveParams) -> Point {
    let f = Fp(&params.p);
    let (x1, y1, x2, y2) = match (p1, p2) {
        (Point::Identity, q) | (q, Point::Identity) => return q.clone(),
        (Point::Affine { x: x1, y: y1 }, Point::Affine { x: x2, y: y2 }) => (x1, y1, x2, y2),
    };
    let lambda = if x1 == x2 {
        if f.add(y1, y2).is_zero() {
            return Point::Identity;
        }
        let num = f.add(&f.small(3, &f.mul(x1, x1)), &params.a);
        f.mul(&num, &f.inv(&f.small(2, y1)))
    } else {
        f.mul(&f.sub(y2, y1), &f.inv(&f.sub(x2, x1)))
    };
    let x3 = f.sub(&f.sub(&f.mul(&lambda, &lambda), x1), x2);
    let y3 = f.sub(&f.mul(&lambda, &f.sub(x1, &x3)), y1);
    Point::Affine { x: x3, y: y3 }
}

/// Jacobian (X, Y, Z) ↦ (X/Z², Y/Z³); Z = 0 is the identity.
struct Jacobian {
    x: BigUint,
    y: BigUint,
    z: BigUint,
}

impl Jacobian {
    fn identity() -> Self {
        Jacobian {
            x: BigUint::one(),
            y: BigUint::one(),
            z: BigUint::zero(),
        }
    }

    fn double(&self, f: Fp<'_>, a: &BigUint) -> Self {
        if self.z.is_zero() || self.y.is_zero() {
            return Jacobian::identity();
        }
        let yy = f.mul(&self.y, &self.y);
        let s = f.small(4, &f.mul(&self.x, &yy));
        let zz = f.mul(&self.z, &self.z);
        let m = f.add(
            &f.small(3, &f.mul(&self.x, &self.x)),
            &f.mul(a, &f.mul(&zz, &zz)),
        );
        let x3 = f.sub(&f.mul(&m, &m), &f.small(2, &s));
        let y3 = f.sub(&f.mul(&m, &f.sub(&s, &x3)), &f.small(8, &f.mul(&yy, &yy)));
        let z3 = f.small(2, &f.mul(&self.y, &self.z));
        Jacobian {
            x: x3,
            y: y3,
            z: z3,
        }
    }

    fn add_affine(&self, x2: &BigUint, y2: &BigUint, f: Fp<'_>, a: &BigUint) -> Self {
        if self.z.is_zero() {
            return Jacobian {
                x: x2.clone(),
                y: y2.clone(),
                z: BigUint::one(),
            };
        }
        let zz = f.mul(&self.z, &self.z);
        let u2 = f.mul(x2, &zz);
        let s2 = f.mul(y2, &f.mul(&zz, &self.z));
        let h = f.sub(&u2, &self.x);
        let r = f.sub(&s2, &self.y);
        if h.is_zero() {
            return if r.is_zero() {
                self.double(f, a)
            } else {
                Jacobian::identity()
            };
        }
        let hh = f.mul(&h, &h);
        let hhh = f.mul(&hh, &h);
        let v = f.mul(&self.x, &hh);
        let x3 = f.sub(&f.sub(&f.mul(&r, &r), &hhh), &f.small(2, &v));
        let y3 = f.sub(&f.mul(&r, &f.sub(&v, &x3)), &f.mul(&self.y, &hhh));
        let z3 = f.mul(&self.z, &h);
        Jacobian {
            x: x3,
            y: y3,
            z: z3,
        }
    }

    fn to_affine(&self, f: Fp<'_>) -> Point {
        if self.z.is_zero() {
            return Point::Identity;
        }
        let zi = f.inv(&self.z);
        let zi2 = f.mul(&zi, &zi);
        Point::Affine {
            x: f.mul(&self.x, &zi2),
            y: f.mul(&self.y, &f.mul(&zi2, &zi)),
        }
    }
}

/// Left-to-right double-and-add.
pub fn scalar_mul(k: &BigUint, q: &Point, params: &CurveParams) -> Result<Point, EcError> {
    params.require(q)?;
    let (qx, qy) = match q {
        Point::Identity => return Ok(Point::Identity),
        Point::Affine { x, y } => (x, y),
    };
    let f = Fp(&params.p);
    let mut acc = Jacobian::identity();
    for i in (0..k.bits()).rev() {
        acc = acc.double(f, &params.a);
        if k.bit(i) {
            acc = acc.add_affine(qx, qy, f, &params.a);
        }
    }
    Ok(acc.to_affine(f))
}

pub const IDENTITY_TAG: u8 = 0x00;
pub const UNCOMPRESSED_TAG: u8 = 0x04;

/// `0x04 ∥ x ∥ y` with fixed-width big-endian coordinates; the identity is `0x00`.
pub fn encode_point(q: &Point, params: &CurveParams) -> Vec<u8> {
    match q {
        Point::Identity => vec![IDENTITY_TAG],
        Point::Affine { x, y } => {
            let w = params.coord_len();
            let mut out = vec![0u8; 1 + 2 * w];
            out[0] = UNCOMPRESSED_TAG;
            let xb = x.to_bytes_be();
            let yb = y.to_bytes_be();
            out[1 + w - xb.len()..1 + w].copy_from_slice(&xb);
            out[1 + 2 * w - yb.len()..].copy_from_slice(&yb);
            out
        }
    }
}

pub fn decode_point(bytes: &[u8], params: &CurveParams) -> Result<Point, EcError> {
    let w = params.coord_len();
    let q = match bytes {
        [IDENTITY_TAG] => Point::Identity,
        [UNCOMPRESSED_TAG, rest @ ..] if rest.len() == 2 * w => Point::Affine {
            x: BigUint::from_bytes_be(&rest[..w]),
            y: BigUint::from_bytes_be(&rest[w..]),
        },
        _ => return Err(EcError::Decode("bad tag or length")),
    };
    params.require(&q)?;
    Ok(q)
}

/// Length-prefixed pre-hash that turns a point into a single block.
pub fn point_digest(q: &Point, params: &CurveParams) -> Block32 {
    let enc = encode_point(q, params);
    let mut hasher = Sha256::new();
    hasher.update((enc.len() as u32).to_be_bytes());
    hasher.update(&enc);
    Block32(hasher.finalize().into())
}

/// Uniform draw from Z_n* by rejection sampling on random blocks.
pub fn random_scalar(params: &CurveParams, rng: &mut Rng) -> BigUint {
    let bits = params.n.bits();
    loop {
        let block = rng.random_block();
        let k = BigUint::from_bytes_be(&block.0) >> (256 - bits);
        if !k.is_zero() && k < params.n {
            return k;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        CurveParams::tiny().validate().unwrap();
        CurveParams::std256().validate().unwrap();
    }

    #[test]
    fn identity_and_inverse_laws() {
        let c = CurveParams::tiny();
        let g = c.g.clone();
        assert_eq!(add(&g, &Point::Identity, &c).unwrap(), g);
        assert_eq!(add(&g, &negate(&g, &c), &c).unwrap(), Point::Identity);
        assert_eq!(scalar_mul(&1u32.into(), &g, &c).unwrap(), g);
        assert_eq!(scalar_mul(&0u32.into(), &g, &c).unwrap(), Point::Identity);
    }

    #[test]
    fn off_curve_inputs_are_rejected() {
        let c = CurveParams::tiny();
        let bad = Point::affine(1u32, 95u32);
        assert!(matches!(add(&bad, &c.g, &c), Err(EcError::OffCurve(_))));
        assert!(scalar_mul(&3u32.into(), &bad, &c).is_err());
    }

    #[test]
    fn ecdh_commutes_on_std256() {
        let c = CurveParams::std256();
        let mut rng = Rng::new(4);
        let a = random_scalar(&c, &mut rng);
        let b = random_scalar(&c, &mut rng);
        let ab = scalar_mul(&a, &scalar_mul(&b, &c.g, &c).unwrap(), &c).unwrap();
        let ba = scalar_mul(&b, &scalar_mul(&a, &c.g, &c).unwrap(), &c).unwrap();
        assert_eq!(ab, ba);
        assert!(c.is_on_curve(&ab));
    }

    #[test]
    fn encoding_roundtrip_and_identity_tag() {
        for c in [CurveParams::tiny(), CurveParams::std256()] {
            let q = scalar_mul(&12345u32.into(), &c.g, &c).unwrap();
            assert_eq!(decode_point(&encode_point(&q, &c), &c).unwrap(), q);
            assert_eq!(encode_point(&Point::Identity, &c), vec![0]);
            assert_eq!(encode_point(&q, &c).len(), 1 + 2 * c.coord_len());
        }
        let c = CurveParams::tiny();
        assert!(decode_point(&[4, 0, 1, 0, 95], &c).is_err());
    }

    #[test]
    fn random_scalar_in_range() {
        let c = CurveParams::tiny();
        let mut rng = Rng::new(5);
        for _ in 0..500 {
            let k = random_scalar(&c, &mut rng);
            assert!(!k.is_zero() && k < c.n);
        }
    }

    #[test]
    fn profile_names_parse() {
        assert_eq!("tiny".parse::<CurveProfile>().unwrap(), CurveProfile::Tiny);
        assert_eq!(
            "std256".parse::<CurveProfile>().unwrap(),
            CurveProfile::Std256
        );
        assert!("p521".parse::<CurveProfile>().is_err());
    }
}

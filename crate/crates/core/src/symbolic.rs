//! A small Dolev-Yao derivation engine.
//!
//! Terms are built from named atoms with hash, xor, pairing, key
//! derivation and authenticated encryption. Hash arguments are flattened
//! through pairs (hashing a 64-byte block is hashing its two halves), xor
//! is kept as a normalized set and distributes over pairs. The adversary's
//! knowledge is closed under decomposition (projection, decryption with a
//! derivable key, xor elimination) and queried for composition.
//!
//! [`guessing_verifiers`] looks for offline password tests: a known term
//! that becomes derivable once a guess is added, or a ciphertext whose key
//! does.

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::{hash_fields, BLOCK_LEN};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    /// The all-zero block, the xor identity.
    Zero,
    Atom(String),
    Hash(Vec<Term>),
    Kdf(Box<Term>),
    /// Sorted, at least two members, none of them `Zero`, `Xor` or `Pair`.
    Xor(Vec<Term>),
    Pair(Box<Term>, Box<Term>),
    Enc {
        key: Box<Term>,
        msg: Box<Term>,
    },
}

pub fn atom(name: impl Into<String>) -> Term {
    Term::Atom(name.into())
}

pub fn hash(args: impl IntoIterator<Item = Term>) -> Term {
    let mut flat = Vec::new();
    for a in args {
        flatten_into(a, &mut flat);
    }
    Term::Hash(flat)
}

fn flatten_into(t: Term, out: &mut Vec<Term>) {
    match t {
        Term::Pair(a, b) => {
            flatten_into(*a, out);
            flatten_into(*b, out);
        }
        other => out.push(other),
    }
}

pub fn kdf(t: Term) -> Term {
    Term::Kdf(Box::new(t))
}

pub fn pair(a: Term, b: Term) -> Term {
    Term::Pair(Box::new(a), Box::new(b))
}

/// `x ∥ x`.
pub fn expand(t: Term) -> Term {
    pair(t.clone(), t)
}

pub fn enc(key: Term, msg: Term) -> Term {
    Term::Enc {
        key: Box::new(key),
        msg: Box::new(msg),
    }
}

pub fn xor(a: Term, b: Term) -> Term {
    match (a, b) {
        (Term::Pair(a1, a2), Term::Pair(b1, b2)) => pair(xor(*a1, *b1), xor(*a2, *b2)),
        (a, b) => from_members(members(&a).symmetric_difference(&members(&b)).cloned()),
    }
}

pub fn xor_all(terms: impl IntoIterator<Item = Term>) -> Term {
    terms.into_iter().fold(Term::Zero, xor)
}

fn members(t: &Term) -> BTreeSet<Term> {
    match t {
        Term::Zero => BTreeSet::new(),
        Term::Xor(ms) => ms.iter().cloned().collect(),
        other => BTreeSet::from([other.clone()]),
    }
}

fn from_members(ms: impl IntoIterator<Item = Term>) -> Term {
    let mut v: Vec<Term> = ms.into_iter().collect();
    match v.len() {
        0 => Term::Zero,
        1 => v.pop().expect("one member"),
        _ => {
            v.sort();
            Term::Xor(v)
        }
    }
}

impl Term {
    /// Evaluates the term with concrete atom values. Encryption is
    /// randomized and has no value here.
    pub fn eval(&self, atoms: &BTreeMap<String, Vec<u8>>) -> Option<Vec<u8>> {
        match self {
            Term::Zero => Some(vec![0; BLOCK_LEN]),
            Term::Atom(name) => atoms.get(name).cloned(),
            Term::Hash(args) => {
                let parts: Option<Vec<Vec<u8>>> = args.iter().map(|a| a.eval(atoms)).collect();
                let parts = parts?;
                let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
                hash_fields(&refs).ok().map(|b| b.0.to_vec())
            }
            Term::Kdf(inner) => {
                let b = crate::crypto::Block32::from_slice(&inner.eval(atoms)?).ok()?;
                Some(crate::crypto::kdf_biokey(&b).expose().to_vec())
            }
            Term::Xor(ms) => {
                let mut acc = vec![0u8; BLOCK_LEN];
                for m in ms {
                    let v = m.eval(atoms)?;
                    if v.len() != acc.len() {
                        return None;
                    }
                    acc.iter_mut().zip(&v).for_each(|(a, b)| *a ^= b);
                }
                Some(acc)
            }
            Term::Pair(a, b) => {
                let mut out = a.eval(atoms)?;
                out.extend(b.eval(atoms)?);
                Some(out)
            }
            Term::Enc { .. } => None,
        }
    }

    pub fn is_atom(&self, name: &str) -> bool {
        matches!(self, Term::Atom(n) if n == name)
    }
}

/// What the adversary knows, closed under analysis.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Knowledge {
    terms: BTreeSet<Term>,
    /// Rounds the last [`Knowledge::close`] needed to reach a fixpoint.
    pub rounds: usize,
}

impl Knowledge {
    pub fn new(terms: impl IntoIterator<Item = Term>) -> Self {
        let mut k = Knowledge {
            terms: terms.into_iter().collect(),
            rounds: 0,
        };
        k.close();
        k
    }

    pub fn terms(&self) -> &BTreeSet<Term> {
        &self.terms
    }

    pub fn contains(&self, t: &Term) -> bool {
        self.terms.contains(t)
    }

    /// Adds `t` and recloses.
    pub fn learn(&mut self, t: Term) {
        self.terms.insert(t);
        self.close();
    }

    /// Decomposition to a fixpoint.
    pub fn close(&mut self) {
        self.rounds = 0;
        loop {
            self.rounds += 1;
            let mut new = Vec::new();
            for t in &self.terms {
                match t {
                    Term::Pair(a, b) => {
                        new.push((**a).clone());
                        new.push((**b).clone());
                    }
                    Term::Enc { key, msg } if self.derivable(key) => new.push((**msg).clone()),
                    _ => {}
                }
            }
            new.extend(self.xor_consequences());
            let before = self.terms.len();
            self.terms
                .extend(new.into_iter().filter(|t| *t != Term::Zero));
            if self.terms.len() == before {
                return;
            }
        }
    }

    /// Xor members that the span of known xor-sums isolates.
    fn xor_consequences(&self) -> Vec<Term> {
        let universe: BTreeSet<Term> = self
            .terms
            .iter()
            .filter(|t| matches!(t, Term::Xor(_)))
            .flat_map(members)
            .collect();
        if universe.is_empty() {
            return Vec::new();
        }
        let mut basis = self.xor_basis();
        for u in &universe {
            if !self.terms.contains(u) && self.derivable(u) {
                insert_reduced(&mut basis, BTreeSet::from([u.clone()]));
            }
        }
        universe
            .into_iter()
            .filter(|u| !self.terms.contains(u))
            .filter(|u| reduce(&basis, BTreeSet::from([u.clone()])).is_empty())
            .collect()
    }

    fn xor_basis(&self) -> BTreeMap<Term, BTreeSet<Term>> {
        let mut basis = BTreeMap::new();
        for t in &self.terms {
            if !matches!(t, Term::Pair(..)) {
                insert_reduced(&mut basis, members(t));
            }
        }
        basis
    }

    /// Can the adversary build `t`?
    pub fn derivable(&self, t: &Term) -> bool {
        if self.terms.contains(t) {
            return true;
        }
        match t {
            Term::Zero => true,
            Term::Atom(_) => false,
            Term::Hash(args) => args.iter().all(|a| self.derivable(a)),
            Term::Kdf(inner) => self.derivable(inner),
            Term::Pair(a, b) => self.derivable(a) && self.derivable(b),
            Term::Enc { key, msg } => self.derivable(key) && self.derivable(msg),
            Term::Xor(ms) => {
                let mut basis = self.xor_basis();
                for m in ms {
                    if self.derivable(m) {
                        insert_reduced(&mut basis, BTreeSet::from([m.clone()]));
                    }
                }
                reduce(&basis, ms.iter().cloned().collect()).is_empty()
            }
        }
    }
}

/// Gaussian elimination over GF(2), keyed by each vector's largest member.
fn reduce(basis: &BTreeMap<Term, BTreeSet<Term>>, mut v: BTreeSet<Term>) -> BTreeSet<Term> {
    while let Some(pivot) = v.iter().next_back().cloned() {
        match basis.get(&pivot) {
            Some(row) => v = v.symmetric_difference(row).cloned().collect(),
            None => break,
        }
    }
    v
}

fn insert_reduced(basis: &mut BTreeMap<Term, BTreeSet<Term>>, v: BTreeSet<Term>) {
    let mut v = v;
    loop {
        let Some(pivot) = v.iter().next_back().cloned() else {
            return;
        };
        match basis.get(&pivot) {
            Some(row) => v = v.symmetric_difference(row).cloned().collect(),
            None => {
                basis.insert(pivot, v);
                return;
            }
        }
    }
}

/// A way to test a password guess offline.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verifier {
    /// A known value the adversary can recompute from the guess.
    Recompute(Term),
    /// A ciphertext whose key the guess yields; decryption checks the tag.
    Decrypt(Term),
}

/// Every offline verifier for `guess` available to the holder of `k`.
pub fn guessing_verifiers(k: &Knowledge, guess: &Term) -> Vec<Verifier> {
    let mut with_guess = k.clone();
    with_guess.learn(guess.clone());
    let mut out = Vec::new();
    for t in k.terms() {
        if t == guess {
            continue;
        }
        if let Term::Enc { key, .. } = t {
            if !k.derivable(key) && with_guess.derivable(key) {
                out.push(Verifier::Decrypt(t.clone()));
                continue;
            }
        }
        let rest = k.terms().iter().filter(|u| *u != t).cloned();
        let without = Knowledge::new(rest.clone());
        if without.derivable(t) {
            continue;
        }
        let with = Knowledge::new(rest.chain([guess.clone()]));
        if with.derivable(t) {
            out.push(Verifier::Recompute(t.clone()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(n: &str) -> Term {
        atom(n)
    }

    #[test]
    fn hash_flattens_pairs() {
        assert_eq!(
            hash([pair(a("k"), a("w")), a("bp")]),
            hash([a("k"), pair(a("w"), a("bp"))])
        );
        assert_ne!(hash([a("x"), a("y")]), hash([a("y"), a("x")]));
    }

    #[test]
    fn xor_normalizes() {
        assert_eq!(xor(a("x"), a("x")), Term::Zero);
        assert_eq!(xor(a("x"), a("y")), xor(a("y"), a("x")));
        assert_eq!(xor(xor(a("x"), a("y")), a("x")), a("y"));
        assert_eq!(xor(Term::Zero, a("z")), a("z"));
        assert_eq!(
            xor(pair(a("k"), a("w")), expand(a("x"))),
            pair(xor(a("k"), a("x")), xor(a("w"), a("x")))
        );
    }

    #[test]
    fn xor_elimination_isolates_members() {
        let h = hash([a("id"), a("xs")]);
        let m2 = xor(h.clone(), a("rn"));
        let k = Knowledge::new([m2.clone(), a("id")]);
        assert!(!k.derivable(&a("rn")));
        let k = Knowledge::new([m2, a("id"), a("xs")]);
        assert!(k.contains(&a("rn")));
        let k = Knowledge::new([xor(a("p"), a("q")), xor(a("q"), a("r")), a("r")]);
        assert!(k.contains(&a("p")) && k.contains(&a("q")));
    }

    #[test]
    fn decryption_needs_the_key() {
        let c = enc(kdf(a("b")), pair(a("k"), a("w")));
        let k = Knowledge::new([c.clone()]);
        assert!(!k.derivable(&a("k")));
        let k = Knowledge::new([c, a("b")]);
        assert!(k.contains(&a("k")) && k.contains(&a("w")));
    }

    #[test]
    fn classic_verifier_is_found() {
        let pw = a("pw");
        let r = hash([a("id"), hash([pw.clone(), a("salt")])]);
        let k = Knowledge::new([r.clone(), a("id"), a("salt")]);
        assert_eq!(guessing_verifiers(&k, &pw), vec![Verifier::Recompute(r)]);
        let k = Knowledge::new([hash([a("id"), hash([pw.clone(), a("secret")])]), a("id")]);
        assert!(guessing_verifiers(&k, &pw).is_empty());
        let k = Knowledge::new([enc(kdf(hash([pw.clone(), a("id")])), a("m")), a("id")]);
        assert!(matches!(
            guessing_verifiers(&k, &pw)[..],
            [Verifier::Decrypt(_)]
        ));
    }

    #[test]
    fn eval_matches_concrete_hash() {
        use crate::crypto::{self, Block32, Block64};
        let x = Block32([7; 32]);
        let y = Block32([9; 32]);
        let atoms = BTreeMap::from([
            ("x".to_owned(), x.0.to_vec()),
            ("y".to_owned(), y.0.to_vec()),
        ]);
        let t = hash([pair(a("x"), a("y")), xor(a("x"), a("y"))]);
        let expect = crypto::hash([(&Block64::concat(&x, &y)).into(), (&(x ^ y)).into()]);
        assert_eq!(t.eval(&atoms), Some(expect.0.to_vec()));
        assert_eq!(a("missing").eval(&atoms), None);
    }
}

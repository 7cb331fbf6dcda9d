use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Digest, KeyId, Miniscript};

/// Bound carried by a time-lock constraint. `Below` only arises from
/// dissatisfying an `older`/`after` leaf and can never be produced by a
/// spender.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LockBound {
    AtLeast(u32),
    Below(u32),
}

/// Whether a hash constraint asks for a matching preimage or for any
/// 32-byte value that does not hash to the digest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HashCheck {
    Match,
    Mismatch,
}

/// One constraint on a spending witness.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConstraintTerm {
    Sig {
        slot: usize,
        key: KeyId,
    },
    HashEq {
        slot: usize,
        digest: Digest,
        check: HashCheck,
    },
    SizeEq {
        slot: usize,
        size: u32,
    },
    /// Stack element equals a constant; the empty vector is the number 0.
    ConstEq {
        slot: usize,
        value: Vec<u8>,
    },
    After(LockBound),
    Older(LockBound),
}

impl ConstraintTerm {
    pub fn slot(&self) -> Option<usize> {
        match self {
            ConstraintTerm::Sig { slot, .. }
            | ConstraintTerm::HashEq { slot, .. }
            | ConstraintTerm::SizeEq { slot, .. }
            | ConstraintTerm::ConstEq { slot, .. } => Some(*slot),
            ConstraintTerm::After(_) | ConstraintTerm::Older(_) => None,
        }
    }

    fn shifted(&self, by: usize) -> ConstraintTerm {
        let mut t = self.clone();
        match &mut t {
            ConstraintTerm::Sig { slot, .. }
            | ConstraintTerm::HashEq { slot, .. }
            | ConstraintTerm::SizeEq { slot, .. }
            | ConstraintTerm::ConstEq { slot, .. } => *slot += by,
            _ => {}
        }
        t
    }

    fn order_key(&self) -> (u8, usize) {
        match self {
            ConstraintTerm::After(_) => (1, 0),
            ConstraintTerm::Older(_) => (2, 0),
            t => (0, t.slot().unwrap_or(0)),
        }
    }
}

impl fmt::Display for ConstraintTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lock = |f: &mut fmt::Formatter<'_>, name: &str, b: &LockBound| match b {
            LockBound::AtLeast(i) => write!(f, "{name} >= {i}"),
            LockBound::Below(i) => write!(f, "{name} < {i}"),
        };
        match self {
            ConstraintTerm::Sig { slot, key } => write!(f, "sig w{slot} {key}"),
            ConstraintTerm::HashEq {
                slot,
                digest,
                check: HashCheck::Match,
            } => write!(f, "sha256 w{slot} = {digest}"),
            ConstraintTerm::HashEq { slot, digest, .. } => write!(f, "sha256 w{slot} != {digest}"),
            ConstraintTerm::SizeEq { slot, size } => write!(f, "size w{slot} = {size}"),
            ConstraintTerm::ConstEq { slot, value } if value.is_empty() => write!(f, "w{slot} = 0"),
            ConstraintTerm::ConstEq { slot, value } => {
                write!(f, "w{slot} = 0x{}", hex::encode(value))
            }
            ConstraintTerm::After(b) => lock(f, "after", b),
            ConstraintTerm::Older(b) => lock(f, "older", b),
        }
    }
}

/// A conjunction of constraints describing one execution path through a
/// script. Slotted terms come first ordered by slot, then the `After` and
/// `Older` terms (at most one of each).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SymbolicWitness {
    pub terms: Vec<ConstraintTerm>,
    pub slots: usize,
}

impl SymbolicWitness {
    pub fn new(terms: Vec<ConstraintTerm>) -> Self {
        let slots = terms
            .iter()
            .filter_map(|t| t.slot())
            .map(|s| s + 1)
            .max()
            .unwrap_or(0);
        let mut w = SymbolicWitness {
            terms: Vec::new(),
            slots,
        };
        for t in terms {
            w.push(t);
        }
        w.sort();
        w
    }

    fn push(&mut self, t: ConstraintTerm) {
        let merge = |old: &mut LockBound, new: LockBound| {
            *old = match (*old, new) {
                (LockBound::AtLeast(a), LockBound::AtLeast(b)) => LockBound::AtLeast(a.max(b)),
                (LockBound::Below(a), LockBound::Below(b)) => LockBound::Below(a.min(b)),
                // a witness that must leave a lock unmet is unproducible either way
                (b @ LockBound::Below(_), _) | (_, b @ LockBound::Below(_)) => b,
            }
        };
        for existing in &mut self.terms {
            match (existing, &t) {
                (ConstraintTerm::Older(a), ConstraintTerm::Older(b))
                | (ConstraintTerm::After(a), ConstraintTerm::After(b)) => {
                    merge(a, *b);
                    return;
                }
                _ => {}
            }
        }
        self.terms.push(t);
    }

    fn sort(&mut self) {
        self.terms.sort_by_key(|t| t.order_key());
    }

    /// Witness concatenation `self + other`: `other`'s slots are renumbered
    /// to follow `self`'s, and time locks merge by maximum.
    pub fn concat(&self, other: &SymbolicWitness) -> SymbolicWitness {
        let mut w = self.clone();
        for t in &other.terms {
            w.push(t.shifted(self.slots));
        }
        w.slots += other.slots;
        w.sort();
        w
    }

    /// False if the witness demands an unmet lock or a hash mismatch, which
    /// no honest deduction produces.
    pub fn is_producible(&self) -> bool {
        self.terms.iter().all(|t| {
            !matches!(
                t,
                ConstraintTerm::Older(LockBound::Below(_))
                    | ConstraintTerm::After(LockBound::Below(_))
                    | ConstraintTerm::HashEq {
                        check: HashCheck::Mismatch,
                        ..
                    }
            )
        })
    }

    pub fn older(&self) -> u32 {
        self.lock(|t| match t {
            ConstraintTerm::Older(b) => Some(*b),
            _ => None,
        })
    }

    pub fn after(&self) -> u32 {
        self.lock(|t| match t {
            ConstraintTerm::After(b) => Some(*b),
            _ => None,
        })
    }

    fn lock(&self, pick: impl Fn(&ConstraintTerm) -> Option<LockBound>) -> u32 {
        match self.terms.iter().find_map(pick) {
            Some(LockBound::AtLeast(i)) => i,
            _ => 0,
        }
    }

    pub fn sig_keys(&self) -> impl Iterator<Item = &KeyId> {
        self.terms.iter().filter_map(|t| match t {
            ConstraintTerm::Sig { key, .. } => Some(key),
            _ => None,
        })
    }

    /// Digests whose preimage this witness must reveal.
    pub fn preimages(&self) -> impl Iterator<Item = &Digest> {
        self.terms.iter().filter_map(|t| match t {
            ConstraintTerm::HashEq {
                digest,
                check: HashCheck::Match,
                ..
            } => Some(digest),
            _ => None,
        })
    }

    pub fn has_hash_constraint(&self) -> bool {
        self.terms
            .iter()
            .any(|t| matches!(t, ConstraintTerm::HashEq { .. }))
    }
}

impl fmt::Display for SymbolicWitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{t}")?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SatError {
    #[error("`{0}` has no dissatisfaction")]
    DsatUndefined(String),
}

fn product(a: &[SymbolicWitness], b: &[SymbolicWitness]) -> Vec<SymbolicWitness> {
    a.iter()
        .flat_map(|x| b.iter().map(move |y| x.concat(y)))
        .collect()
}

fn dedup(ws: Vec<SymbolicWitness>) -> Vec<SymbolicWitness> {
    let mut out: Vec<SymbolicWitness> = Vec::with_capacity(ws.len());
    for w in ws {
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

fn leaf(t: ConstraintTerm) -> Vec<SymbolicWitness> {
    vec![SymbolicWitness::new(vec![t])]
}

/// All satisfying witnesses of `node`, in composition order.
pub fn sat(node: &Miniscript) -> Result<Vec<SymbolicWitness>, SatError> {
    Ok(match node {
        Miniscript::AndOr(x, y, z) => {
            let mut out = product(&sat(y)?, &sat(x)?);
            out.extend(product(&sat(z)?, &dsat(x)?));
            dedup(out)
        }
        Miniscript::AndV(x, y) => dedup(product(&sat(y)?, &sat(x)?)),
        Miniscript::Verify(x) => sat(x)?,
        Miniscript::Pk(k) => leaf(ConstraintTerm::Sig {
            slot: 0,
            key: k.clone(),
        }),
        Miniscript::Sha256(d) => leaf(ConstraintTerm::HashEq {
            slot: 0,
            digest: d.clone(),
            check: HashCheck::Match,
        }),
        Miniscript::Older(i) => leaf(ConstraintTerm::Older(LockBound::AtLeast(*i))),
        Miniscript::After(i) => leaf(ConstraintTerm::After(LockBound::AtLeast(*i))),
    })
}

/// All dissatisfying witnesses of `node`. `v` wrappers have none.
pub fn dsat(node: &Miniscript) -> Result<Vec<SymbolicWitness>, SatError> {
    Ok(match node {
        Miniscript::AndOr(x, y, z) => {
            let sx = sat(x)?;
            let mut out = product(&dsat(z)?, &sx);
            out.extend(product(&dsat(y)?, &sx));
            dedup(out)
        }
        Miniscript::AndV(x, y) => dedup(product(&dsat(y)?, &sat(x)?)),
        Miniscript::Verify(_) => return Err(SatError::DsatUndefined(node.to_string())),
        Miniscript::Pk(_) => leaf(ConstraintTerm::ConstEq {
            slot: 0,
            value: Vec::new(),
        }),
        Miniscript::Sha256(d) => vec![SymbolicWitness::new(vec![
            ConstraintTerm::SizeEq { slot: 0, size: 32 },
            ConstraintTerm::HashEq {
                slot: 0,
                digest: d.clone(),
                check: HashCheck::Mismatch,
            },
        ])],
        Miniscript::Older(i) => leaf(ConstraintTerm::Older(LockBound::Below(*i))),
        Miniscript::After(i) => leaf(ConstraintTerm::After(LockBound::Below(*i))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::miniscript::parse_miniscript;

    fn ms(s: &str) -> Miniscript {
        parse_miniscript(s).unwrap()
    }

    fn sig(slot: usize, k: &str) -> ConstraintTerm {
        ConstraintTerm::Sig {
            slot,
            key: KeyId::new(k),
        }
    }

    fn hash(slot: usize, d: &str) -> ConstraintTerm {
        ConstraintTerm::HashEq {
            slot,
            digest: Digest::parse(d).unwrap(),
            check: HashCheck::Match,
        }
    }

    fn zero(slot: usize) -> ConstraintTerm {
        ConstraintTerm::ConstEq {
            slot,
            value: vec![],
        }
    }

    #[test]
    fn htlc_witnesses() {
        let ws = sat(&ms(
            "andor(pk(pk_A),sha256(b32),and_v(v(pk(pk_B)),older(10)))",
        ))
        .unwrap();
        assert_eq!(
            ws,
            vec![
                SymbolicWitness::new(vec![hash(0, "b32"), sig(1, "pk_A")]),
                SymbolicWitness::new(vec![
                    sig(0, "pk_B"),
                    zero(1),
                    ConstraintTerm::Older(LockBound::AtLeast(10))
                ]),
            ]
        );
        assert_eq!(ws[0].slots, 2);
        assert_eq!(ws[1].slots, 2);
        assert_eq!(ws[1].to_string(), "[sig w0 pk_B, w1 = 0, older >= 10]");
    }

    #[test]
    fn leaf_rows() {
        assert_eq!(
            sat(&ms("pk(pk_A)")).unwrap(),
            vec![SymbolicWitness::new(vec![sig(0, "pk_A")])]
        );
        assert_eq!(
            dsat(&ms("pk(A)")).unwrap(),
            vec![SymbolicWitness::new(vec![zero(0)])]
        );
        let d = dsat(&ms("sha256(b32)")).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].to_string(), "[size w0 = 32, sha256 w0 != b32]");
        assert!(!d[0].is_producible());
        let o = dsat(&ms("older(10)")).unwrap();
        assert_eq!(
            o[0].terms,
            vec![ConstraintTerm::Older(LockBound::Below(10))]
        );
        assert!(!o[0].is_producible());
        assert_eq!(o[0].slots, 0);
        assert_eq!(
            sat(&ms("after(7)")).unwrap()[0].terms,
            vec![ConstraintTerm::After(LockBound::AtLeast(7))]
        );
    }

    #[test]
    fn and_v_row() {
        assert_eq!(
            sat(&ms("and_v(v(pk(pk_B)),older(10))")).unwrap(),
            vec![SymbolicWitness::new(vec![
                sig(0, "pk_B"),
                ConstraintTerm::Older(LockBound::AtLeast(10))
            ])]
        );
        // dsat(and_v(x, y)) = dsat(y) + sat(x)
        assert_eq!(
            dsat(&ms("and_v(v(pk(A)),pk(B))")).unwrap(),
            vec![SymbolicWitness::new(vec![zero(0), sig(1, "A")])]
        );
    }

    #[test]
    fn verify_row() {
        assert_eq!(sat(&ms("v(pk(A))")).unwrap(), sat(&ms("pk(A)")).unwrap());
        assert_eq!(
            dsat(&ms("v(pk(A))")),
            Err(SatError::DsatUndefined("v(pk(A))".into()))
        );
    }

    #[test]
    fn andor_dsat_row() {
        // dsat(z)+sat(x) then dsat(y)+sat(x)
        let d = dsat(&ms("andor(pk(X),pk(Y),pk(Z))")).unwrap();
        assert_eq!(d, vec![SymbolicWitness::new(vec![zero(0), sig(1, "X")])]);
        let d = dsat(&ms("andor(pk(X),sha256(h),pk(Z))")).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[1].to_string(), "[size w0 = 32, sha256 w0 != h, sig w1 X]");
    }

    #[test]
    fn locks_merge_by_max() {
        let w = sat(&ms("and_v(v(older(5)),and_v(v(pk(A)),older(9)))")).unwrap();
        assert_eq!(
            w[0].terms,
            vec![sig(0, "A"), ConstraintTerm::Older(LockBound::AtLeast(9))]
        );
        assert_eq!(w[0].older(), 9);
    }

    #[test]
    fn count_law() {
        let n = ms("andor(andor(pk(A),pk(B),pk(C)),sha256(h),and_v(v(pk(D)),older(3)))");
        let Miniscript::AndOr(x, y, z) = &n else {
            unreachable!()
        };
        let expected = sat(x).unwrap().len() * sat(y).unwrap().len()
            + dsat(x).unwrap().len() * sat(z).unwrap().len();
        assert_eq!(sat(&n).unwrap().len(), expected);
    }
}

//! The Miniscript fragment used for output scripts: `andor`, `and_v`, `v`,
//! `pk`, `sha256`, `older` and `after`.
//!
//! Expressions are written in function-call syntax, e.g.
//! `andor(pk(A),sha256(H),and_v(v(pk(B)),older(10)))`. Each node compiles to
//! a fixed opcode template ([`compile_to_script`]) and yields satisfying and
//! dissatisfying symbolic witnesses ([`sat`], [`dsat`]).

mod parse;
mod satisfy;
mod script;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::{parse_miniscript, ParseError};
pub use satisfy::{dsat, sat, ConstraintTerm, HashCheck, LockBound, SatError, SymbolicWitness};
pub use script::{
    compile_to_script, lift_script, parse_asm, render_script, AsmError, LiftError, Opcode, Push,
};

/// Identifier of a public key as it appears in scripts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyId(pub String);

impl KeyId {
    pub fn new(s: impl Into<String>) -> Self {
        KeyId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A 32-byte hash digest constant. Either a literal (64 lowercase hex
/// characters) or a symbolic name standing for a declared digest.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Digest(String);

impl Digest {
    /// Validates a digest payload. Literals must be exactly 32 bytes of hex;
    /// symbolic names must be identifiers.
    pub fn parse(s: &str) -> Result<Self, PayloadError> {
        if s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Ok(Digest(s.to_ascii_lowercase()));
        }
        if is_identifier(s) {
            return Ok(Digest(s.to_string()));
        }
        if !s.is_empty() && s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(PayloadError::DigestLength(s.len() / 2));
        }
        Err(PayloadError::BadDigest(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_literal(&self) -> bool {
        self.0.len() == 64 && self.0.bytes().all(|b| b.is_ascii_hexdigit())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("digest must be 32 bytes, got {0}")]
    DigestLength(usize),
    #[error("invalid digest `{0}`")]
    BadDigest(String),
    #[error("time lock must be a positive block count")]
    NonPositiveLock,
    #[error("invalid key identifier `{0}`")]
    BadKey(String),
}

/// Node kinds of the fragment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    AndOr,
    AndV,
    Verify,
    Pk,
    Sha256,
    Older,
    After,
}

impl Kind {
    pub fn arity(self) -> usize {
        match self {
            Kind::AndOr => 3,
            Kind::AndV => 2,
            Kind::Verify => 1,
            Kind::Pk | Kind::Sha256 | Kind::Older | Kind::After => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::AndOr => "andor",
            Kind::AndV => "and_v",
            Kind::Verify => "v",
            Kind::Pk => "pk",
            Kind::Sha256 => "sha256",
            Kind::Older => "older",
            Kind::After => "after",
        }
    }
}

/// Miniscript AST. Arity and payload invariants are enforced by the
/// constructors and the parser.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Miniscript {
    AndOr(Box<Miniscript>, Box<Miniscript>, Box<Miniscript>),
    AndV(Box<Miniscript>, Box<Miniscript>),
    Verify(Box<Miniscript>),
    Pk(KeyId),
    Sha256(Digest),
    Older(u32),
    After(u32),
}

impl Miniscript {
    pub fn andor(x: Miniscript, y: Miniscript, z: Miniscript) -> Self {
        Miniscript::AndOr(Box::new(x), Box::new(y), Box::new(z))
    }

    pub fn and_v(x: Miniscript, y: Miniscript) -> Self {
        Miniscript::AndV(Box::new(x), Box::new(y))
    }

    pub fn verify(x: Miniscript) -> Self {
        Miniscript::Verify(Box::new(x))
    }

    pub fn pk(key: impl Into<String>) -> Self {
        Miniscript::Pk(KeyId(key.into()))
    }

    pub fn older(blocks: u32) -> Result<Self, PayloadError> {
        if blocks == 0 {
            return Err(PayloadError::NonPositiveLock);
        }
        Ok(Miniscript::Older(blocks))
    }

    pub fn after(height: u32) -> Result<Self, PayloadError> {
        if height == 0 {
            return Err(PayloadError::NonPositiveLock);
        }
        Ok(Miniscript::After(height))
    }

    pub fn kind(&self) -> Kind {
        match self {
            Miniscript::AndOr(..) => Kind::AndOr,
            Miniscript::AndV(..) => Kind::AndV,
            Miniscript::Verify(..) => Kind::Verify,
            Miniscript::Pk(_) => Kind::Pk,
            Miniscript::Sha256(_) => Kind::Sha256,
            Miniscript::Older(_) => Kind::Older,
            Miniscript::After(_) => Kind::After,
        }
    }

    pub fn children(&self) -> Vec<&Miniscript> {
        match self {
            Miniscript::AndOr(x, y, z) => vec![x, y, z],
            Miniscript::AndV(x, y) => vec![x, y],
            Miniscript::Verify(x) => vec![x],
            _ => Vec::new(),
        }
    }

    /// Every key referenced by a `pk` leaf, in left-to-right order.
    pub fn keys(&self) -> Vec<&KeyId> {
        let mut out = Vec::new();
        self.visit(&mut |n| {
            if let Miniscript::Pk(k) = n {
                out.push(k);
            }
        });
        out
    }

    /// Every digest referenced by a `sha256` leaf.
    pub fn digests(&self) -> Vec<&Digest> {
        let mut out = Vec::new();
        self.visit(&mut |n| {
            if let Miniscript::Sha256(d) = n {
                out.push(d);
            }
        });
        out
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Miniscript)) {
        f(self);
        for c in self.children() {
            c.visit(f);
        }
    }

    /// Rewrites the node into the form produced by [`lift_script`]:
    /// `and_v` chains nest to the right, and neither a `v` wrapper nor the
    /// condition of an `andor` is itself an `and_v`. Each rewrite preserves
    /// the compiled script.
    pub fn normalize(&self) -> Miniscript {
        match self {
            Miniscript::AndV(x, y) => {
                let x = x.normalize();
                let y = y.normalize();
                match x {
                    Miniscript::AndV(a, b) => {
                        Miniscript::and_v(*a, Miniscript::and_v(*b, y).normalize())
                    }
                    x => Miniscript::and_v(x, y),
                }
            }
            Miniscript::Verify(x) => match x.normalize() {
                Miniscript::AndV(a, b) => Miniscript::and_v(*a, Miniscript::verify(*b).normalize()),
                x => Miniscript::verify(x),
            },
            Miniscript::AndOr(x, y, z) => {
                let (y, z) = (y.normalize(), z.normalize());
                match x.normalize() {
                    Miniscript::AndV(a, b) => {
                        Miniscript::and_v(*a, Miniscript::andor(*b, y, z).normalize())
                    }
                    x => Miniscript::andor(x, y, z),
                }
            }
            leaf => leaf.clone(),
        }
    }
}

impl fmt::Display for Miniscript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Miniscript::AndOr(x, y, z) => write!(f, "andor({x},{y},{z})"),
            Miniscript::AndV(x, y) => write!(f, "and_v({x},{y})"),
            Miniscript::Verify(x) => write!(f, "v({x})"),
            Miniscript::Pk(k) => write!(f, "pk({k})"),
            Miniscript::Sha256(d) => write!(f, "sha256({d})"),
            Miniscript::Older(i) => write!(f, "older({i})"),
            Miniscript::After(i) => write!(f, "after({i})"),
        }
    }
}

/// Basic Miniscript types. `B` pushes a non-zero element on satisfaction,
/// `V` pushes nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsType {
    B,
    V,
}

impl fmt::Display for MsType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MsType::B => "B",
            MsType::V => "V",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("type error in `{subterm}`: expected {expected}, found {found}")]
pub struct TypeError {
    pub subterm: String,
    pub expected: MsType,
    pub found: MsType,
}

pub fn type_check(node: &Miniscript) -> Result<MsType, TypeError> {
    let expect = |n: &Miniscript, want: MsType| -> Result<MsType, TypeError> {
        let got = type_check(n)?;
        if got != want {
            return Err(TypeError {
                subterm: n.to_string(),
                expected: want,
                found: got,
            });
        }
        Ok(got)
    };
    match node {
        Miniscript::Pk(_) | Miniscript::Sha256(_) | Miniscript::Older(_) | Miniscript::After(_) => {
            Ok(MsType::B)
        }
        Miniscript::Verify(x) => {
            expect(x, MsType::B)?;
            Ok(MsType::V)
        }
        Miniscript::AndV(x, y) => {
            expect(x, MsType::V)?;
            type_check(y)
        }
        Miniscript::AndOr(x, y, z) => {
            expect(x, MsType::B)?;
            let ty = type_check(y)?;
            expect(z, ty)?;
            Ok(ty)
        }
    }
}

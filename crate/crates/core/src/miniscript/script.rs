use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{is_identifier, Digest, KeyId, Miniscript};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Push {
    Num(u32),
    /// A key or digest constant, by name.
    Data(String),
}

/// The opcodes the fragment compiles to, plus constant pushes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Opcode {
    Push(Push),
    CheckSig,
    CheckSigVerify,
    NotIf,
    Else,
    EndIf,
    Verify,
    Size,
    EqualVerify,
    Sha256,
    Equal,
    CheckSequenceVerify,
    CheckLockTimeVerify,
}

impl Opcode {
    fn mnemonic(&self) -> &'static str {
        match self {
            Opcode::Push(_) => "",
            Opcode::CheckSig => "OP_CHECKSIG",
            Opcode::CheckSigVerify => "OP_CHECKSIGVERIFY",
            Opcode::NotIf => "OP_NOTIF",
            Opcode::Else => "OP_ELSE",
            Opcode::EndIf => "OP_ENDIF",
            Opcode::Verify => "OP_VERIFY",
            Opcode::Size => "OP_SIZE",
            Opcode::EqualVerify => "OP_EQUALVERIFY",
            Opcode::Sha256 => "OP_SHA256",
            Opcode::Equal => "OP_EQUAL",
            Opcode::CheckSequenceVerify => "OP_CHECKSEQUENCEVERIFY",
            Opcode::CheckLockTimeVerify => "OP_CHECKLOCKTIMEVERIFY",
        }
    }

    const ALL: [Opcode; 12] = [
        Opcode::CheckSig,
        Opcode::CheckSigVerify,
        Opcode::NotIf,
        Opcode::Else,
        Opcode::EndIf,
        Opcode::Verify,
        Opcode::Size,
        Opcode::EqualVerify,
        Opcode::Sha256,
        Opcode::Equal,
        Opcode::CheckSequenceVerify,
        Opcode::CheckLockTimeVerify,
    ];

    /// Whether the renderer ends a line after this opcode.
    fn ends_line(&self) -> bool {
        !matches!(self, Opcode::Push(_) | Opcode::Size | Opcode::Sha256)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Opcode::Push(Push::Num(n)) => write!(f, "<{n}>"),
            Opcode::Push(Push::Data(s)) => write!(f, "<{s}>"),
            op => f.write_str(op.mnemonic()),
        }
    }
}

/// Compiles a node to its opcode template. A `v` wrapper around `pk` uses
/// `CHECKSIGVERIFY`; every other `v` appends `VERIFY`.
pub fn compile_to_script(node: &Miniscript) -> Vec<Opcode> {
    let mut out = Vec::new();
    emit(node, &mut out);
    out
}

fn emit(node: &Miniscript, out: &mut Vec<Opcode>) {
    match node {
        Miniscript::AndOr(x, y, z) => {
            emit(x, out);
            out.push(Opcode::NotIf);
            emit(z, out);
            out.push(Opcode::Else);
            emit(y, out);
            out.push(Opcode::EndIf);
        }
        Miniscript::AndV(x, y) => {
            emit(x, out);
            emit(y, out);
        }
        Miniscript::Verify(x) => {
            emit(x, out);
            if let Some(last @ Opcode::CheckSig) = out.last_mut() {
                *last = Opcode::CheckSigVerify;
            } else {
                out.push(Opcode::Verify);
            }
        }
        Miniscript::Pk(k) => {
            out.push(Opcode::Push(Push::Data(k.0.clone())));
            out.push(Opcode::CheckSig);
        }
        Miniscript::Sha256(d) => out.extend([
            Opcode::Size,
            Opcode::Push(Push::Num(32)),
            Opcode::EqualVerify,
            Opcode::Sha256,
            Opcode::Push(Push::Data(d.as_str().to_string())),
            Opcode::Equal,
        ]),
        Miniscript::Older(i) => {
            out.push(Opcode::Push(Push::Num(*i)));
            out.push(Opcode::CheckSequenceVerify);
        }
        Miniscript::After(i) => {
            out.push(Opcode::Push(Push::Num(*i)));
            out.push(Opcode::CheckLockTimeVerify);
        }
    }
}

/// Renders opcodes one statement per line, indenting conditional branches
/// by two spaces.
pub fn render_script(ops: &[Opcode]) -> String {
    let mut lines = Vec::new();
    let mut line: Vec<String> = Vec::new();
    let mut depth = 0usize;
    for op in ops {
        if matches!(op, Opcode::Else | Opcode::EndIf) {
            depth = depth.saturating_sub(1);
        }
        if line.is_empty() {
            line.push("  ".repeat(depth));
        }
        line.push(op.to_string());
        if op.ends_line() {
            let indent = line.remove(0);
            lines.push(format!("{indent}{}", line.join(" ")));
            line.clear();
        }
        if matches!(op, Opcode::NotIf | Opcode::Else) {
            depth += 1;
        }
    }
    if !line.is_empty() {
        let indent = line.remove(0);
        lines.push(format!("{indent}{}", line.join(" ")));
    }
    lines.join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmError {
    #[error("unknown opcode `{token}` at token {pos}")]
    UnknownOpcode { pos: usize, token: String },
    #[error("invalid push `{token}` at token {pos}")]
    BadPush { pos: usize, token: String },
}

/// Parses the textual form produced by [`render_script`]. The `OP_` prefix
/// is optional and layout is ignored.
pub fn parse_asm(text: &str) -> Result<Vec<Opcode>, AsmError> {
    text.split_whitespace()
        .enumerate()
        .map(|(pos, tok)| {
            if let Some(inner) = tok.strip_prefix('<').and_then(|t| t.strip_suffix('>')) {
                if !inner.is_empty() && inner.bytes().all(|b| b.is_ascii_digit()) {
                    return inner
                        .parse()
                        .map(|n| Opcode::Push(Push::Num(n)))
                        .map_err(|_| AsmError::BadPush {
                            pos,
                            token: tok.to_string(),
                        });
                }
                if Digest::parse(inner).is_ok() {
                    return Ok(Opcode::Push(Push::Data(inner.to_string())));
                }
                return Err(AsmError::BadPush {
                    pos,
                    token: tok.to_string(),
                });
            }
            let upper = tok.to_ascii_uppercase();
            let name = upper.strip_prefix("OP_").unwrap_or(&upper);
            Opcode::ALL
                .iter()
                .find(|op| &op.mnemonic()[3..] == name)
                .cloned()
                .ok_or_else(|| AsmError::UnknownOpcode {
                    pos,
                    token: tok.to_string(),
                })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot lift script: no template matches at opcode {pos}")]
pub struct LiftError {
    pub pos: usize,
}

/// Inverse of [`compile_to_script`] on normalized nodes: for every
/// well-typed `n`, `lift_script(&compile_to_script(&n)) == Ok(n.normalize())`.
pub fn lift_script(ops: &[Opcode]) -> Result<Miniscript, LiftError> {
    let mut l = Lifter { ops, pos: 0 };
    let (node, _) = l.sequence()?;
    if l.pos != ops.len() {
        return Err(LiftError { pos: l.pos });
    }
    Ok(node)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Ty {
    B,
    V,
}

struct Lifter<'a> {
    ops: &'a [Opcode],
    pos: usize,
}

impl Lifter<'_> {
    fn at(&self, i: usize) -> Option<&Opcode> {
        self.ops.get(self.pos + i)
    }

    fn fail<T>(&self) -> Result<T, LiftError> {
        Err(LiftError { pos: self.pos })
    }

    /// A run of units up to `ELSE`, `ENDIF` or the end; every unit but the
    /// last must be of type V and the run folds into right-nested `and_v`.
    fn sequence(&mut self) -> Result<(Miniscript, Ty), LiftError> {
        let mut units = Vec::new();
        while !matches!(self.at(0), None | Some(Opcode::Else) | Some(Opcode::EndIf)) {
            if let Some((_, Ty::B)) = units.last() {
                return self.fail();
            }
            units.push(self.unit()?);
        }
        let Some((mut acc, ty)) = units.pop() else {
            return self.fail();
        };
        while let Some((u, _)) = units.pop() {
            acc = Miniscript::and_v(u, acc);
        }
        Ok((acc, ty))
    }

    fn unit(&mut self) -> Result<(Miniscript, Ty), LiftError> {
        let (mut node, mut ty) = self.leaf()?;
        loop {
            match (self.at(0), ty) {
                (Some(Opcode::NotIf), Ty::B) => {
                    self.pos += 1;
                    let (z, tz) = self.sequence()?;
                    if self.at(0) != Some(&Opcode::Else) {
                        return self.fail();
                    }
                    self.pos += 1;
                    let start_y = self.pos;
                    let (y, ty_y) = self.sequence()?;
                    if self.at(0) != Some(&Opcode::EndIf) {
                        return self.fail();
                    }
                    if ty_y != tz {
                        return Err(LiftError { pos: start_y });
                    }
                    self.pos += 1;
                    node = Miniscript::andor(node, y, z);
                    ty = ty_y;
                }
                (Some(Opcode::Verify), Ty::B) => {
                    self.pos += 1;
                    return Ok((Miniscript::verify(node), Ty::V));
                }
                _ => return Ok((node, ty)),
            }
        }
    }

    fn leaf(&mut self) -> Result<(Miniscript, Ty), LiftError> {
        use Opcode as O;
        match (self.at(0), self.at(1)) {
            (Some(O::Push(Push::Data(k))), Some(op @ (O::CheckSig | O::CheckSigVerify)))
                if is_identifier(k) =>
            {
                let pk = Miniscript::Pk(KeyId(k.clone()));
                let verify = *op == O::CheckSigVerify;
                self.pos += 2;
                Ok(if verify {
                    (Miniscript::verify(pk), Ty::V)
                } else {
                    (pk, Ty::B)
                })
            }
            (
                Some(O::Push(Push::Num(n))),
                Some(op @ (O::CheckSequenceVerify | O::CheckLockTimeVerify)),
            ) if *n >= 1 => {
                let node = if *op == O::CheckSequenceVerify {
                    Miniscript::Older(*n)
                } else {
                    Miniscript::After(*n)
                };
                self.pos += 2;
                Ok((node, Ty::B))
            }
            (Some(O::Size), _) => {
                let rest = &self.ops[self.pos..];
                match rest {
                    [O::Size, O::Push(Push::Num(32)), O::EqualVerify, O::Sha256, O::Push(Push::Data(d)), O::Equal, ..] =>
                    {
                        let digest =
                            Digest::parse(d).map_err(|_| LiftError { pos: self.pos + 4 })?;
                        self.pos += 6;
                        Ok((Miniscript::Sha256(digest), Ty::B))
                    }
                    _ => {
                        let matched = rest
                            .iter()
                            .zip([O::Size, O::Push(Push::Num(32)), O::EqualVerify, O::Sha256])
                            .take_while(|(a, b)| *a == b)
                            .count();
                        let matched = if matched == 4
                            && matches!(rest.get(4), Some(O::Push(Push::Data(_))))
                        {
                            5
                        } else {
                            matched
                        };
                        Err(LiftError {
                            pos: self.pos + matched,
                        })
                    }
                }
            }
            (Some(O::Push(_)), _) => Err(LiftError { pos: self.pos + 1 }),
            _ => self.fail(),
        }
    }
}

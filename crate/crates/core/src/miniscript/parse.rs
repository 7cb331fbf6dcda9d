use thiserror::Error;

use super::{is_identifier, Digest, KeyId, Kind, Miniscript, PayloadError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at position {pos}: expected {expected}")]
    Syntax { pos: usize, expected: String },
    #[error("`{kind}` takes {expected} argument(s), found {found}")]
    Arity {
        kind: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("bad payload at position {pos}: {err}")]
    Payload { pos: usize, err: PayloadError },
}

/// Parses an expression such as `andor(pk(A),sha256(H1),and_v(v(pk(B)),older(10)))`.
/// Whitespace between tokens is ignored.
pub fn parse_miniscript(text: &str) -> Result<Miniscript, ParseError> {
    let mut p = Parser { src: text, pos: 0 };
    let node = p.expr()?;
    p.skip_ws();
    if p.pos != text.len() {
        return Err(p.syntax("end of input"));
    }
    Ok(node)
}

enum Arg {
    Node(Miniscript),
    Atom(usize, String),
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn syntax(&self, expected: &str) -> ParseError {
        ParseError::Syntax {
            pos: self.pos,
            expected: expected.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> Result<(), ParseError> {
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            Ok(())
        } else {
            Err(self.syntax(&format!("`{c}`")))
        }
    }

    fn word(&mut self) -> Option<(usize, String)> {
        self.skip_ws();
        let start = self.pos;
        let len = self.src[start..]
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '-'))
            .unwrap_or(self.src.len() - start);
        if len == 0 {
            return None;
        }
        self.pos += len;
        Some((start, self.src[start..start + len].to_string()))
    }

    fn expr(&mut self) -> Result<Miniscript, ParseError> {
        let (start, name) = self.word().ok_or_else(|| self.syntax("expression"))?;
        let kind = match name.as_str() {
            "andor" => Kind::AndOr,
            "and_v" => Kind::AndV,
            "v" => Kind::Verify,
            "pk" => Kind::Pk,
            "sha256" => Kind::Sha256,
            "older" => Kind::Older,
            "after" => Kind::After,
            _ => {
                return Err(ParseError::Syntax {
                    pos: start,
                    expected: "one of andor, and_v, v, pk, sha256, older, after".into(),
                })
            }
        };
        self.eat('(')?;
        let mut args = Vec::new();
        if self.peek() != Some(')') {
            loop {
                args.push(self.arg()?);
                if self.peek() == Some(',') {
                    self.pos += 1;
                } else {
                    break;
                }
            }
        }
        self.eat(')')?;
        build(kind, args)
    }

    fn arg(&mut self) -> Result<Arg, ParseError> {
        let save = self.pos;
        let (start, w) = self.word().ok_or_else(|| self.syntax("argument"))?;
        if self.peek() == Some('(') {
            self.pos = save;
            return self.expr().map(Arg::Node);
        }
        Ok(Arg::Atom(start, w))
    }
}

fn build(kind: Kind, args: Vec<Arg>) -> Result<Miniscript, ParseError> {
    let arity_err = |found| ParseError::Arity {
        kind: kind.name(),
        expected: kind.arity().max(1),
        found,
    };
    if kind.arity() == 0 {
        let [Arg::Atom(pos, atom)] = <[Arg; 1]>::try_from(args).map_err(|a| arity_err(a.len()))?
        else {
            return Err(arity_err(0));
        };
        let payload = |err| ParseError::Payload { pos, err };
        return match kind {
            Kind::Pk => {
                if !is_identifier(&atom) {
                    return Err(payload(PayloadError::BadKey(atom)));
                }
                Ok(Miniscript::Pk(KeyId(atom)))
            }
            Kind::Sha256 => Ok(Miniscript::Sha256(Digest::parse(&atom).map_err(payload)?)),
            Kind::Older | Kind::After => {
                let n: i64 = atom.parse().map_err(|_| ParseError::Syntax {
                    pos,
                    expected: "block count".into(),
                })?;
                let n = u32::try_from(n)
                    .ok()
                    .filter(|&n| n >= 1)
                    .ok_or(payload(PayloadError::NonPositiveLock))?;
                Ok(if kind == Kind::Older {
                    Miniscript::Older(n)
                } else {
                    Miniscript::After(n)
                })
            }
            _ => unreachable!(),
        };
    }
    if args.len() != kind.arity() {
        return Err(arity_err(args.len()));
    }
    let mut nodes = Vec::with_capacity(args.len());
    for a in args {
        match a {
            Arg::Node(n) => nodes.push(n),
            Arg::Atom(pos, _) => {
                return Err(ParseError::Syntax {
                    pos,
                    expected: "sub-expression".into(),
                })
            }
        }
    }
    let mut it = nodes.into_iter();
    let mut next = || it.next().unwrap();
    Ok(match kind {
        Kind::AndOr => Miniscript::andor(next(), next(), next()),
        Kind::AndV => Miniscript::and_v(next(), next()),
        Kind::Verify => Miniscript::verify(next()),
        _ => unreachable!(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const HTLC: &str = "andor(pk(A),sha256(H1),and_v(v(pk(B)),older(10)))";

    #[test]
    fn parses_htlc() {
        let n = parse_miniscript(HTLC).unwrap();
        assert_eq!(n.kind(), Kind::AndOr);
        let c = n.children();
        assert_eq!(c.len(), 3);
        assert_eq!(*c[0], Miniscript::pk("A"));
        assert_eq!(c[1].kind(), Kind::Sha256);
        assert_eq!(c[2].to_string(), "and_v(v(pk(B)),older(10))");
        assert_eq!(n.to_string(), HTLC);
    }

    #[test]
    fn whitespace_insensitive() {
        let spaced = " andor( pk(A) ,\n sha256( H1 ), and_v(v( pk(B)), older(10) ) ) ";
        assert_eq!(parse_miniscript(spaced).unwrap().to_string(), HTLC);
    }

    #[test]
    fn single_leaf() {
        assert_eq!(
            parse_miniscript("pk(A)").unwrap(),
            Miniscript::Pk(KeyId::new("A"))
        );
    }

    #[test]
    fn rejects_zero_lock() {
        assert!(matches!(
            parse_miniscript("older(0)"),
            Err(ParseError::Payload {
                err: PayloadError::NonPositiveLock,
                ..
            })
        ));
        assert!(matches!(
            parse_miniscript("after(-3)"),
            Err(ParseError::Payload { .. })
        ));
    }

    #[test]
    fn arity_and_syntax_errors() {
        assert_eq!(
            parse_miniscript("and_v(v(pk(A)))"),
            Err(ParseError::Arity {
                kind: "and_v",
                expected: 2,
                found: 1
            })
        );
        assert!(matches!(
            parse_miniscript("pk(A,B)"),
            Err(ParseError::Arity { .. })
        ));
        assert!(matches!(
            parse_miniscript("pk(A"),
            Err(ParseError::Syntax { pos: 4, .. })
        ));
        assert!(matches!(
            parse_miniscript(""),
            Err(ParseError::Syntax { pos: 0, .. })
        ));
        assert!(matches!(
            parse_miniscript("or_b(pk(A),pk(B))"),
            Err(ParseError::Syntax { pos: 0, .. })
        ));
        assert!(matches!(
            parse_miniscript("pk(A) pk(B)"),
            Err(ParseError::Syntax { pos: 6, .. })
        ));
    }

    #[test]
    fn digest_length_checked() {
        // identifiers are symbolic digest names
        assert!(!parse_miniscript("sha256(abcd)").unwrap().digests()[0].is_literal());
        assert!(matches!(
            parse_miniscript("sha256(0011)"),
            Err(ParseError::Payload {
                err: PayloadError::DigestLength(2),
                ..
            })
        ));
        let lit = format!("sha256({})", "0f".repeat(32));
        assert!(parse_miniscript(&lit).unwrap().digests()[0].is_literal());
    }
}

use thiserror::Error;

use super::Formula;

const MAX_NESTING: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at offset {offset}: {message}")]
pub struct ParseError {
    /// Byte offset into the input where the problem was detected.
    pub offset: usize,
    pub message: String,
}

impl ParseError {
    fn new(offset: usize, message: impl Into<String>) -> Self {
        ParseError {
            offset,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Always,
    Eventually,
    Next,
    Until,
    Not,
    And,
    Or,
    Xor,
    Implies,
}

impl Op {
    fn from_keyword(word: &str) -> Option<Op> {
        Some(match word {
            "ALWAYS" => Op::Always,
            "EVENTUALLY" => Op::Eventually,
            "NEXT" => Op::Next,
            "UNTIL" => Op::Until,
            "NOT" => Op::Not,
            "AND" => Op::And,
            "OR" => Op::Or,
            "XOR" => Op::Xor,
            "IMPLIES" => Op::Implies,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    LParen,
    RParen,
    Ident(String),
    Op(Op),
}

fn describe(tok: Option<&(Tok, usize)>) -> String {
    match tok {
        None => "end of input".to_string(),
        Some((Tok::LParen, _)) => "'('".to_string(),
        Some((Tok::RParen, _)) => "')'".to_string(),
        Some((Tok::Ident(name), _)) => format!("identifier '{name}'"),
        Some((Tok::Op(op), _)) => format!("operator {}", format!("{op:?}").to_uppercase()),
    }
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c == b'(' {
            out.push((Tok::LParen, i));
            i += 1;
        } else if c == b')' {
            out.push((Tok::RParen, i));
            i += 1;
        } else if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            let word = &text[start..i];
            match Op::from_keyword(word) {
                Some(op) => out.push((Tok::Op(op), start)),
                None => out.push((Tok::Ident(word.to_string()), start)),
            }
        } else {
            let ch = text[i..].chars().next().unwrap_or('?');
            return Err(ParseError::new(i, format!("unknown token '{ch}'")));
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> Option<&(Tok, usize)> {
        self.toks.get(self.pos)
    }

    fn offset(&self) -> usize {
        self.peek().map(|(_, o)| *o).unwrap_or(self.end)
    }

    fn peek_op(&self) -> Option<Op> {
        match self.peek() {
            Some((Tok::Op(op), _)) => Some(*op),
            _ => None,
        }
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.depth += 1;
        if self.depth > MAX_NESTING {
            return Err(ParseError::new(self.offset(), "formula nested too deeply"));
        }
        Ok(())
    }

    fn implies(&mut self) -> Result<Formula, ParseError> {
        self.enter()?;
        let lhs = self.or_xor()?;
        let out = if self.peek_op() == Some(Op::Implies) {
            self.pos += 1;
            let rhs = self.implies()?;
            Formula::implies(lhs, rhs)
        } else {
            lhs
        };
        self.depth -= 1;
        Ok(out)
    }

    fn or_xor(&mut self) -> Result<Formula, ParseError> {
        let mut lhs = self.and()?;
        loop {
            match self.peek_op() {
                Some(Op::Or) => {
                    self.pos += 1;
                    lhs = Formula::or(lhs, self.and()?);
                }
                Some(Op::Xor) => {
                    self.pos += 1;
                    lhs = Formula::xor(lhs, self.and()?);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn and(&mut self) -> Result<Formula, ParseError> {
        let mut lhs = self.until()?;
        while self.peek_op() == Some(Op::And) {
            self.pos += 1;
            lhs = Formula::and(lhs, self.until()?);
        }
        Ok(lhs)
    }

    fn until(&mut self) -> Result<Formula, ParseError> {
        self.enter()?;
        let lhs = self.unary()?;
        let out = if self.peek_op() == Some(Op::Until) {
            self.pos += 1;
            let rhs = self.until()?;
            Formula::until(lhs, rhs)
        } else {
            lhs
        };
        self.depth -= 1;
        Ok(out)
    }

    fn unary(&mut self) -> Result<Formula, ParseError> {
        let wrap: fn(Formula) -> Formula = match self.peek_op() {
            Some(Op::Not) => Formula::not,
            Some(Op::Next) => Formula::next,
            Some(Op::Always) => Formula::always,
            Some(Op::Eventually) => Formula::eventually,
            _ => return self.primary(),
        };
        self.pos += 1;
        self.enter()?;
        let inner = self.unary()?;
        self.depth -= 1;
        Ok(wrap(inner))
    }

    fn primary(&mut self) -> Result<Formula, ParseError> {
        let offset = self.offset();
        match self.peek().cloned() {
            Some((Tok::Ident(name), _)) => {
                self.pos += 1;
                Ok(Formula::Atom(name))
            }
            Some((Tok::LParen, open)) => {
                self.pos += 1;
                let inner = self.implies()?;
                match self.peek() {
                    Some((Tok::RParen, _)) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    other => Err(ParseError::new(
                        self.offset(),
                        format!("expected ')' to close '(' at offset {open}, found {}", describe(other)),
                    )),
                }
            }
            other => Err(ParseError::new(
                offset,
                format!("expected operand, found {}", describe(other.as_ref())),
            )),
        }
    }
}

/// Parses keyword-operator LTL_f text into a [`Formula`].
pub fn parse_formula(text: &str) -> Result<Formula, ParseError> {
    let toks = tokenize(text)?;
    if toks.is_empty() {
        return Err(ParseError::new(0, "empty formula"));
    }
    let mut parser = Parser {
        toks,
        pos: 0,
        end: text.len(),
        depth: 0,
    };
    let formula = parser.implies()?;
    if let Some(tok) = parser.peek() {
        let msg = match tok.0 {
            Tok::RParen => "unbalanced ')'".to_string(),
            _ => format!("unexpected {}", describe(Some(tok))),
        };
        return Err(ParseError::new(tok.1, msg));
    }
    Ok(formula)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(n: &str) -> Formula {
        Formula::atom(n)
    }

    #[test]
    fn parses_authorization_rule() {
        let f = parse_formula("ALWAYS (NOT is_user_authorized IMPLIES NOT delete_data)").unwrap();
        assert_eq!(
            f,
            Formula::always(Formula::implies(
                Formula::not(a("is_user_authorized")),
                Formula::not(a("delete_data"))
            ))
        );
    }

    #[test]
    fn parses_physical_rule() {
        let f = parse_formula("is_private IMPLIES is_red_data").unwrap();
        assert_eq!(f, Formula::implies(a("is_private"), a("is_red_data")));
    }

    #[test]
    fn dangling_operator_reports_end_offset() {
        let err = parse_formula("p AND").unwrap_err();
        assert_eq!(err.offset, 5);
    }

    #[test]
    fn precedence_levels() {
        // UNTIL binds tighter than AND, AND tighter than OR, OR tighter than IMPLIES.
        let f = parse_formula("a OR b AND c UNTIL d IMPLIES e").unwrap();
        let expected = Formula::implies(
            Formula::or(a("a"), Formula::and(a("b"), Formula::until(a("c"), a("d")))),
            a("e"),
        );
        assert_eq!(f, expected);
        // Unary operators bind tightest.
        let g = parse_formula("NOT a UNTIL NEXT b").unwrap();
        assert_eq!(g, Formula::until(Formula::not(a("a")), Formula::next(a("b"))));
    }

    #[test]
    fn implies_and_until_are_right_associative() {
        assert_eq!(
            parse_formula("a IMPLIES b IMPLIES c").unwrap(),
            Formula::implies(a("a"), Formula::implies(a("b"), a("c")))
        );
        assert_eq!(
            parse_formula("a UNTIL b UNTIL c").unwrap(),
            Formula::until(a("a"), Formula::until(a("b"), a("c")))
        );
        assert_eq!(
            parse_formula("a AND b AND c").unwrap(),
            Formula::and(Formula::and(a("a"), a("b")), a("c"))
        );
        assert_eq!(
            parse_formula("a OR b XOR c").unwrap(),
            Formula::xor(Formula::or(a("a"), a("b")), a("c"))
        );
    }

    #[test]
    fn parentheses_override() {
        assert_eq!(
            parse_formula("(a IMPLIES b) IMPLIES c").unwrap(),
            Formula::implies(Formula::implies(a("a"), a("b")), a("c"))
        );
    }

    #[test]
    fn error_offsets() {
        assert_eq!(parse_formula("(p AND q").unwrap_err().offset, 8);
        assert_eq!(parse_formula("p)").unwrap_err().offset, 1);
        assert_eq!(parse_formula("AND p").unwrap_err().offset, 0);
        let e = parse_formula("p & q").unwrap_err();
        assert_eq!(e.offset, 2);
        assert!(e.message.contains("unknown token"));
        assert_eq!(parse_formula("").unwrap_err().offset, 0);
        assert_eq!(parse_formula("p q").unwrap_err().offset, 2);
        assert_eq!(parse_formula("()").unwrap_err().offset, 1);
    }

    #[test]
    fn lowercase_keywords_are_identifiers() {
        assert_eq!(parse_formula("and").unwrap(), a("and"));
    }

    #[test]
    fn deep_nesting_is_rejected_not_overflowed() {
        let text = format!("{}p{}", "(".repeat(5000), ")".repeat(5000));
        assert!(parse_formula(&text).is_err());
        let nots = format!("{}p", "NOT ".repeat(5000));
        assert!(parse_formula(&nots).is_err());
    }
}

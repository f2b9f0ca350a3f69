//! Infix expression parser.
//!
//! Grammar (conventional precedence, `^` binds tightest and is
//! right-associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := '-' factor | power
//! power  := atom ('^' factor)?
//! atom   := number | name | name '(' expr ')' | '(' expr ')'
//! ```
//!
//! Names resolve against the caller-supplied variable table (e.g. `x1..xn`,
//! or `u` for rate functions), the constant `pi`, or one of the functions
//! `sin`, `cos`, `exp`, `sqrt`, `ln`. Errors carry the byte offset of the
//! offending token.

use super::ScalarExpr;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("parse error at byte {offset}: {message}")]
pub struct ParseError {
    pub message: String,
    pub offset: usize,
}

impl ParseError {
    fn new(message: impl Into<String>, offset: usize) -> Self {
        ParseError {
            message: message.into(),
            offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Name(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn next(&mut self) -> Result<Option<(Tok, usize)>, ParseError> {
        self.skip_ws();
        if self.pos >= self.src.len() {
            return Ok(None);
        }
        let start = self.pos;
        let c = self.src[self.pos];
        let tok = match c {
            b'+' => {
                self.pos += 1;
                Tok::Plus
            }
            b'-' => {
                self.pos += 1;
                Tok::Minus
            }
            b'*' => {
                self.pos += 1;
                Tok::Star
            }
            b'/' => {
                self.pos += 1;
                Tok::Slash
            }
            b'^' => {
                self.pos += 1;
                Tok::Caret
            }
            b'(' => {
                self.pos += 1;
                Tok::LParen
            }
            b')' => {
                self.pos += 1;
                Tok::RParen
            }
            b'0'..=b'9' | b'.' => {
                let mut end = self.pos;
                let mut seen_e = false;
                while end < self.src.len() {
                    let b = self.src[end];
                    let is_num = b.is_ascii_digit() || b == b'.';
                    let is_exp = (b == b'e' || b == b'E') && !seen_e;
                    let is_exp_sign = (b == b'+' || b == b'-')
                        && end > self.pos
                        && (self.src[end - 1] == b'e' || self.src[end - 1] == b'E');
                    if is_num || is_exp || is_exp_sign {
                        if is_exp {
                            seen_e = true;
                        }
                        end += 1;
                    } else {
                        break;
                    }
                }
                let text = std::str::from_utf8(&self.src[self.pos..end]).unwrap();
                let value: f64 = text
                    .parse()
                    .map_err(|_| ParseError::new(format!("invalid number '{text}'"), start))?;
                self.pos = end;
                Tok::Num(value)
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_alphanumeric() || self.src[end] == b'_')
                {
                    end += 1;
                }
                let text = std::str::from_utf8(&self.src[self.pos..end])
                    .unwrap()
                    .to_string();
                self.pos = end;
                Tok::Name(text)
            }
            other => {
                return Err(ParseError::new(
                    format!("unexpected character '{}'", other as char),
                    start,
                ))
            }
        };
        Ok(Some((tok, start)))
    }
}

struct Parser<'a> {
    tokens: Vec<(Tok, usize)>,
    idx: usize,
    vars: &'a [&'a str],
    end: usize,
}

const FUNCTIONS: &[&str] = &["sin", "cos", "exp", "sqrt", "ln"];

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&(Tok, usize)> {
        self.tokens.get(self.idx)
    }

    fn bump(&mut self) -> Option<(Tok, usize)> {
        let t = self.tokens.get(self.idx).cloned();
        if t.is_some() {
            self.idx += 1;
        }
        t
    }

    fn expect_rparen(&mut self) -> Result<(), ParseError> {
        match self.bump() {
            Some((Tok::RParen, _)) => Ok(()),
            Some((_, o)) => Err(ParseError::new("expected ')'", o)),
            None => Err(ParseError::new("expected ')'", self.end)),
        }
    }

    fn expr(&mut self) -> Result<ScalarExpr, ParseError> {
        let mut lhs = self.term()?;
        while let Some((tok, _)) = self.peek() {
            match tok {
                Tok::Plus => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = ScalarExpr::add(lhs, rhs);
                }
                Tok::Minus => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = ScalarExpr::sub(lhs, rhs);
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<ScalarExpr, ParseError> {
        let mut lhs = self.factor()?;
        while let Some((tok, _)) = self.peek() {
            match tok {
                Tok::Star => {
                    self.bump();
                    let rhs = self.factor()?;
                    lhs = ScalarExpr::mul(lhs, rhs);
                }
                Tok::Slash => {
                    self.bump();
                    let rhs = self.factor()?;
                    lhs = ScalarExpr::div(lhs, rhs);
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<ScalarExpr, ParseError> {
        if let Some((Tok::Minus, _)) = self.peek() {
            self.bump();
            let inner = self.factor()?;
            return Ok(ScalarExpr::neg(inner));
        }
        self.power()
    }

    fn power(&mut self) -> Result<ScalarExpr, ParseError> {
        let base = self.atom()?;
        if let Some((Tok::Caret, _)) = self.peek() {
            self.bump();
            let expo = self.factor()?;
            return Ok(ScalarExpr::pow(base, expo));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<ScalarExpr, ParseError> {
        match self.bump() {
            Some((Tok::Num(v), _)) => Ok(ScalarExpr::constant(v)),
            Some((Tok::LParen, _)) => {
                let inner = self.expr()?;
                self.expect_rparen()?;
                Ok(inner)
            }
            Some((Tok::Name(name), offset)) => {
                if FUNCTIONS.contains(&name.as_str()) {
                    match self.bump() {
                        Some((Tok::LParen, _)) => {}
                        _ => {
                            return Err(ParseError::new(
                                format!("function '{name}' needs parentheses"),
                                offset,
                            ))
                        }
                    }
                    let arg = self.expr()?;
                    self.expect_rparen()?;
                    let out = match name.as_str() {
                        "sin" => ScalarExpr::sin(arg),
                        "cos" => ScalarExpr::cos(arg),
                        "exp" => ScalarExpr::exp(arg),
                        "sqrt" => ScalarExpr::sqrt(arg),
                        "ln" => ScalarExpr::ln(arg),
                        _ => unreachable!(),
                    };
                    Ok(out)
                } else if name == "pi" {
                    Ok(ScalarExpr::constant(std::f64::consts::PI))
                } else if let Some(i) = self.vars.iter().position(|v| *v == name) {
                    Ok(ScalarExpr::coord(i))
                } else {
                    Err(ParseError::new(
                        format!(
                            "unknown name '{name}' (variables here: {})",
                            self.vars.join(", ")
                        ),
                        offset,
                    ))
                }
            }
            Some((tok, offset)) => {
                Err(ParseError::new(format!("unexpected token {tok:?}"), offset))
            }
            None => Err(ParseError::new("unexpected end of expression", self.end)),
        }
    }
}

/// Parse an expression over the named variables; `vars[i]` maps to coordinate `i`.
pub fn parse_scalar(src: &str, vars: &[&str]) -> Result<ScalarExpr, ParseError> {
    let mut lexer = Lexer::new(src);
    let mut tokens = Vec::new();
    while let Some(t) = lexer.next()? {
        tokens.push(t);
    }
    let mut parser = Parser {
        tokens,
        idx: 0,
        vars,
        end: src.len(),
    };
    let expr = parser.expr()?;
    if let Some((tok, offset)) = parser.peek() {
        return Err(ParseError::new(format!("trailing input {tok:?}"), *offset));
    }
    Ok(expr)
}

/// Variable table `x1..xn` for an `n`-dimensional state.
pub fn state_vars(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("x{i}")).collect()
}

/// Parse with the standard `x1..xn` table.
pub fn parse_state_scalar(src: &str, n: usize) -> Result<ScalarExpr, ParseError> {
    let names = state_vars(n);
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    parse_scalar(src, &refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_documented_example() {
        let e = parse_state_scalar("x1*x2 - sin(x3)", 3).unwrap();
        let v = e.eval(&[2.0, 3.0, 0.0]).unwrap();
        assert!((v - 6.0).abs() < 1e-15);
    }

    #[test]
    fn precedence_and_associativity() {
        let e = parse_state_scalar("2 + 3 * 4 ^ 2", 1).unwrap();
        assert_eq!(e.eval(&[0.0]).unwrap(), 50.0);
        // right-assoc: 2^3^2 = 2^9
        let e = parse_state_scalar("2 ^ 3 ^ 2", 1).unwrap();
        assert_eq!(e.eval(&[0.0]).unwrap(), 512.0);
        let e = parse_state_scalar("-x1^2", 1).unwrap();
        assert_eq!(e.eval(&[3.0]).unwrap(), -9.0);
        let e = parse_state_scalar("(1 - 2) - 3", 1).unwrap();
        assert_eq!(e.eval(&[0.0]).unwrap(), -4.0);
    }

    #[test]
    fn errors_carry_byte_offsets() {
        let err = parse_state_scalar("x1 + $", 1).unwrap_err();
        assert_eq!(err.offset, 5);
        let err = parse_state_scalar("x1 * y2", 1).unwrap_err();
        assert_eq!(err.offset, 5);
        let err = parse_state_scalar("sin x1", 1).unwrap_err();
        assert_eq!(err.offset, 0);
        let err = parse_state_scalar("x1 +", 1).unwrap_err();
        assert_eq!(err.offset, 4);
    }

    #[test]
    fn custom_variable_table() {
        let e = parse_scalar("0.5 + u^2", &["u"]).unwrap();
        assert_eq!(e.eval(&[3.0]).unwrap(), 9.5);
    }

    #[test]
    fn scientific_notation_and_pi() {
        let e = parse_scalar("1e-3 + pi", &[]).unwrap();
        assert!((e.eval(&[]).unwrap() - (0.001 + std::f64::consts::PI)).abs() < 1e-15);
    }

    #[test]
    fn display_roundtrips_through_parser() {
        let src = "x1*x2 - sin(x3) + x1^2/(1 + x2)";
        let e = parse_state_scalar(src, 3).unwrap();
        let printed = e.to_string();
        let reparsed = parse_state_scalar(&printed, 3).unwrap();
        let x = [0.3, 1.2, -0.8];
        assert!((e.eval(&x).unwrap() - reparsed.eval(&x).unwrap()).abs() < 1e-15);
    }
}

//! Recursive-descent parser for the ASCII formula grammar.
//!
//! ```text
//! formula  = "T" | pred | "!" formula | formula "&&" formula | formula "||" formula
//!          | formula "->" formula | ("G"|"F") [interval] formula
//!          | formula "U" [interval] formula | "(" formula ")" ;
//! interval = "[" uint "," uint "]" ;
//! pred     = ["@" label ":"] expr ("<"|">") number ;
//! expr     = term {("+"|"-") term} ; term = factor {"*" factor} ;
//! factor   = channel_ident | number | "-" factor | "abs" "(" expr ")" | "(" expr ")" ;
//! ```
//!
//! Precedence is unary/temporal > `U` > `&&` > `||` > `->`; `&&`, `||`, and
//! `U` associate left, `->` associates right. Whitespace is insignificant.
//! `T`, `G`, `F`, `U`, and `abs` are reserved and cannot name channels.

use thiserror::Error;

use super::{Cmp, Expr, Formula, Interval, Predicate};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseError {
    #[error("{line}:{col}: expected {}, found {found}", expected.join(" | "))]
    Syntax {
        line: u32,
        col: u32,
        expected: Vec<String>,
        found: String,
    },
    #[error("interval [{lo},{hi}]: lower bound exceeds upper bound")]
    Interval { lo: u32, hi: u32 },
}

impl ParseError {
    pub(super) fn interval(lo: u32, hi: u32) -> Self {
        ParseError::Interval { lo, hi }
    }

    fn position(&self) -> (u32, u32) {
        match self {
            ParseError::Syntax { line, col, .. } => (*line, *col),
            ParseError::Interval { .. } => (u32::MAX, u32::MAX),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number { value: f64, raw: String },
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Lt,
    Gt,
    AndAnd,
    OrOr,
    Arrow,
    Bang,
    Plus,
    Minus,
    Star,
    At,
    Colon,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Number { raw, .. } => format!("`{raw}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Lt => "`<`".into(),
            Tok::Gt => "`>`".into(),
            Tok::AndAnd => "`&&`".into(),
            Tok::OrOr => "`||`".into(),
            Tok::Arrow => "`->`".into(),
            Tok::Bang => "`!`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::At => "`@`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

struct Lexed {
    tok: Tok,
    line: u32,
    col: u32,
}

fn lex(text: &str) -> Result<Vec<Lexed>, ParseError> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    let mut line = 1u32;
    let mut col = 1u32;
    while let Some(&c) = chars.peek() {
        let (tline, tcol) = (line, col);
        let mut bump = |chars: &mut std::iter::Peekable<std::str::Chars>| {
            let c = chars.next().unwrap();
            if c == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            c
        };
        if c.is_whitespace() {
            bump(&mut chars);
            continue;
        }
        let tok = match c {
            '(' => {
                bump(&mut chars);
                Tok::LParen
            }
            ')' => {
                bump(&mut chars);
                Tok::RParen
            }
            '[' => {
                bump(&mut chars);
                Tok::LBracket
            }
            ']' => {
                bump(&mut chars);
                Tok::RBracket
            }
            ',' => {
                bump(&mut chars);
                Tok::Comma
            }
            '<' => {
                bump(&mut chars);
                Tok::Lt
            }
            '>' => {
                bump(&mut chars);
                Tok::Gt
            }
            '!' => {
                bump(&mut chars);
                Tok::Bang
            }
            '+' => {
                bump(&mut chars);
                Tok::Plus
            }
            '*' => {
                bump(&mut chars);
                Tok::Star
            }
            '@' => {
                bump(&mut chars);
                Tok::At
            }
            ':' => {
                bump(&mut chars);
                Tok::Colon
            }
            '-' => {
                bump(&mut chars);
                if chars.peek() == Some(&'>') {
                    bump(&mut chars);
                    Tok::Arrow
                } else {
                    Tok::Minus
                }
            }
            '&' => {
                bump(&mut chars);
                if chars.peek() == Some(&'&') {
                    bump(&mut chars);
                    Tok::AndAnd
                } else {
                    return Err(ParseError::Syntax {
                        line: tline,
                        col: tcol,
                        expected: vec!["`&&`".into()],
                        found: "`&`".into(),
                    });
                }
            }
            '|' => {
                bump(&mut chars);
                if chars.peek() == Some(&'|') {
                    bump(&mut chars);
                    Tok::OrOr
                } else {
                    return Err(ParseError::Syntax {
                        line: tline,
                        col: tcol,
                        expected: vec!["`||`".into()],
                        found: "`|`".into(),
                    });
                }
            }
            c if c.is_ascii_digit() => {
                let mut raw = String::new();
                while chars.peek().is_some_and(|c| c.is_ascii_digit()) {
                    raw.push(bump(&mut chars));
                }
                if chars.peek() == Some(&'.') {
                    raw.push(bump(&mut chars));
                    while chars.peek().is_some_and(|c| c.is_ascii_digit()) {
                        raw.push(bump(&mut chars));
                    }
                }
                if chars.peek().is_some_and(|&c| c == 'e' || c == 'E') {
                    raw.push(bump(&mut chars));
                    if chars.peek().is_some_and(|&c| c == '+' || c == '-') {
                        raw.push(bump(&mut chars));
                    }
                    while chars.peek().is_some_and(|c| c.is_ascii_digit()) {
                        raw.push(bump(&mut chars));
                    }
                }
                let value: f64 = raw.parse().map_err(|_| ParseError::Syntax {
                    line: tline,
                    col: tcol,
                    expected: vec!["number".into()],
                    found: format!("`{raw}`"),
                })?;
                Tok::Number { value, raw }
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut raw = String::new();
                while chars
                    .peek()
                    .is_some_and(|c| c.is_alphanumeric() || *c == '_')
                {
                    raw.push(bump(&mut chars));
                }
                Tok::Ident(raw)
            }
            other => {
                return Err(ParseError::Syntax {
                    line: tline,
                    col: tcol,
                    expected: vec!["token".into()],
                    found: format!("`{other}`"),
                })
            }
        };
        out.push(Lexed {
            tok,
            line: tline,
            col: tcol,
        });
    }
    out.push(Lexed {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

/// Parses a formula; parse–print–parse is a fixed point.
pub fn parse_formula(text: &str) -> Result<Formula, ParseError> {
    let toks = lex(text)?;
    let mut parser = Parser {
        toks,
        pos: 0,
        furthest: None,
    };
    match parser
        .parse_implies()
        .and_then(|f| parser.expect_eof().map(|_| f))
    {
        Ok(f) => Ok(f),
        Err(err) => Err(parser.take_furthest(err)),
    }
}

struct Parser {
    toks: Vec<Lexed>,
    pos: usize,
    furthest: Option<(usize, ParseError)>,
}

impl Parser {
    fn cur(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn advance(&mut self) -> Tok {
        let tok = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        tok
    }

    fn error(&mut self, expected: &[&str]) -> ParseError {
        let at = &self.toks[self.pos];
        let err = ParseError::Syntax {
            line: at.line,
            col: at.col,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: at.tok.describe(),
        };
        if self.furthest.as_ref().is_none_or(|(p, _)| self.pos > *p) {
            self.furthest = Some((self.pos, err.clone()));
        }
        err
    }

    /// Returns whichever syntax error made it deepest into the input.
    fn take_furthest(&mut self, fallback: ParseError) -> ParseError {
        match self.furthest.take() {
            Some((_, err)) if fallback.position() <= err.position() => err,
            _ => fallback,
        }
    }

    fn expect_eof(&mut self) -> Result<(), ParseError> {
        if matches!(self.cur(), Tok::Eof) {
            Ok(())
        } else {
            Err(self.error(&["end of input"]))
        }
    }

    fn parse_implies(&mut self) -> Result<Formula, ParseError> {
        let lhs = self.parse_or()?;
        if matches!(self.cur(), Tok::Arrow) {
            self.advance();
            let rhs = self.parse_implies()?;
            return Ok(Formula::Implies(Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn parse_or(&mut self) -> Result<Formula, ParseError> {
        let mut lhs = self.parse_and()?;
        while matches!(self.cur(), Tok::OrOr) {
            self.advance();
            let rhs = self.parse_and()?;
            lhs = Formula::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_and(&mut self) -> Result<Formula, ParseError> {
        let mut lhs = self.parse_until()?;
        while matches!(self.cur(), Tok::AndAnd) {
            self.advance();
            let rhs = self.parse_until()?;
            lhs = Formula::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_until(&mut self) -> Result<Formula, ParseError> {
        let mut lhs = self.parse_unary()?;
        while matches!(self.cur(), Tok::Ident(s) if s == "U") {
            self.advance();
            let interval = self.parse_optional_interval()?;
            let rhs = self.parse_unary()?;
            lhs = Formula::Until(interval, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_optional_interval(&mut self) -> Result<Option<Interval>, ParseError> {
        if !matches!(self.cur(), Tok::LBracket) {
            return Ok(None);
        }
        self.advance();
        let lo = self.parse_uint()?;
        if !matches!(self.cur(), Tok::Comma) {
            return Err(self.error(&["`,`"]));
        }
        self.advance();
        let hi = self.parse_uint()?;
        if !matches!(self.cur(), Tok::RBracket) {
            return Err(self.error(&["`]`"]));
        }
        self.advance();
        Ok(Some(Interval::new(lo, hi)?))
    }

    fn parse_uint(&mut self) -> Result<u32, ParseError> {
        if let Tok::Number { raw, .. } = self.cur() {
            if raw.chars().all(|c| c.is_ascii_digit()) {
                if let Ok(v) = raw.parse::<u32>() {
                    self.advance();
                    return Ok(v);
                }
            }
        }
        Err(self.error(&["nonnegative integer"]))
    }

    fn parse_unary(&mut self) -> Result<Formula, ParseError> {
        match self.cur().clone() {
            Tok::Bang => {
                self.advance();
                let inner = self.parse_unary()?;
                Ok(Formula::Not(Box::new(inner)))
            }
            Tok::Ident(s) if s == "G" || s == "F" => {
                self.advance();
                let interval = self.parse_optional_interval()?;
                let child = Box::new(self.parse_unary()?);
                Ok(if s == "G" {
                    Formula::Globally(interval, child)
                } else {
                    Formula::Finally(interval, child)
                })
            }
            Tok::Ident(s) if s == "T" => {
                self.advance();
                Ok(Formula::True)
            }
            Tok::At | Tok::Ident(_) | Tok::Number { .. } | Tok::Minus => self.parse_predicate(),
            Tok::LParen => {
                // `(` opens either a predicate expression or a sub-formula;
                // try the predicate reading first and backtrack on failure.
                let checkpoint = self.pos;
                match self.parse_predicate() {
                    Ok(pred) => Ok(pred),
                    Err(_) => {
                        self.pos = checkpoint;
                        self.advance();
                        let inner = self.parse_implies()?;
                        if !matches!(self.cur(), Tok::RParen) {
                            return Err(self.error(&["`)`"]));
                        }
                        self.advance();
                        Ok(inner)
                    }
                }
            }
            _ => Err(self.error(&["`T`", "`!`", "`G`", "`F`", "`(`", "predicate"])),
        }
    }

    fn parse_predicate(&mut self) -> Result<Formula, ParseError> {
        let label = if matches!(self.cur(), Tok::At) {
            self.advance();
            let name = match self.cur().clone() {
                Tok::Ident(s) => {
                    self.advance();
                    s
                }
                _ => return Err(self.error(&["label identifier"])),
            };
            if !matches!(self.cur(), Tok::Colon) {
                return Err(self.error(&["`:`"]));
            }
            self.advance();
            Some(name)
        } else {
            None
        };
        let expr = self.parse_expr()?;
        let cmp = match self.cur() {
            Tok::Lt => Cmp::Lt,
            Tok::Gt => Cmp::Gt,
            _ => return Err(self.error(&["`<`", "`>`"])),
        };
        self.advance();
        let neg = if matches!(self.cur(), Tok::Minus) {
            self.advance();
            true
        } else {
            false
        };
        let bound = match self.cur() {
            Tok::Number { value, .. } => *value,
            _ => return Err(self.error(&["number"])),
        };
        self.advance();
        Ok(Formula::Pred(Predicate {
            label,
            expr,
            cmp,
            bound: if neg { -bound } else { bound },
        }))
    }

    fn parse_expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_term()?;
        loop {
            match self.cur() {
                Tok::Plus => {
                    self.advance();
                    let rhs = self.parse_term()?;
                    lhs = Expr::Add(Box::new(lhs), Box::new(rhs));
                }
                Tok::Minus => {
                    self.advance();
                    let rhs = self.parse_term()?;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn parse_term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_factor()?;
        while matches!(self.cur(), Tok::Star) {
            self.advance();
            let rhs = self.parse_factor()?;
            lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_factor(&mut self) -> Result<Expr, ParseError> {
        match self.cur().clone() {
            Tok::Minus => {
                self.advance();
                let inner = self.parse_factor()?;
                Ok(Expr::Neg(Box::new(inner)))
            }
            Tok::Number { value, .. } => {
                self.advance();
                Ok(Expr::Const(value))
            }
            Tok::Ident(s) if s == "abs" => {
                self.advance();
                if !matches!(self.cur(), Tok::LParen) {
                    return Err(self.error(&["`(`"]));
                }
                self.advance();
                let inner = self.parse_expr()?;
                if !matches!(self.cur(), Tok::RParen) {
                    return Err(self.error(&["`)`"]));
                }
                self.advance();
                Ok(Expr::Abs(Box::new(inner)))
            }
            Tok::Ident(s) if !matches!(s.as_str(), "T" | "G" | "F" | "U") => {
                self.advance();
                Ok(Expr::Channel(s))
            }
            Tok::LParen => {
                self.advance();
                let inner = self.parse_expr()?;
                if !matches!(self.cur(), Tok::RParen) {
                    return Err(self.error(&["`)`"]));
                }
                self.advance();
                Ok(inner)
            }
            _ => Err(self.error(&["channel", "number", "`-`", "`abs`", "`(`"])),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_globally_example() {
        let phi = parse_formula("G[1,5] (vel < 1.0)").unwrap();
        match phi {
            Formula::Globally(Some(Interval { lo: 1, hi: 5 }), child) => match *child {
                Formula::Pred(p) => {
                    assert_eq!(p.expr, Expr::Channel("vel".into()));
                    assert_eq!(p.cmp, Cmp::Lt);
                    assert_eq!(p.bound, 1.0);
                }
                other => panic!("unexpected child {other:?}"),
            },
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn implication_shape() {
        let phi = parse_formula("!(x < 2) -> F[1,5] (x < 2)").unwrap();
        match phi {
            Formula::Implies(lhs, rhs) => {
                assert!(matches!(*lhs, Formula::Not(_)));
                assert!(matches!(*rhs, Formula::Finally(Some(_), _)));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn interval_order_rejected() {
        assert_eq!(
            parse_formula("G[5,1] (x < 0)"),
            Err(ParseError::Interval { lo: 5, hi: 1 })
        );
    }

    #[test]
    fn precedence_and_associativity() {
        // && binds tighter than ||, which binds tighter than ->
        let phi = parse_formula("x < 1 || y < 2 && z < 3 -> T").unwrap();
        match phi {
            Formula::Implies(lhs, rhs) => {
                assert!(matches!(*rhs, Formula::True));
                match *lhs {
                    Formula::Or(_, and) => assert!(matches!(*and, Formula::And(_, _))),
                    other => panic!("unexpected {other:?}"),
                }
            }
            other => panic!("unexpected {other:?}"),
        }
        // -> is right-associative
        let phi = parse_formula("x < 1 -> y < 2 -> z < 3").unwrap();
        match phi {
            Formula::Implies(_, rhs) => assert!(matches!(*rhs, Formula::Implies(_, _))),
            other => panic!("unexpected {other:?}"),
        }
        // && is left-associative
        let phi = parse_formula("x < 1 && y < 2 && z < 3").unwrap();
        match phi {
            Formula::And(lhs, _) => assert!(matches!(*lhs, Formula::And(_, _))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn until_binds_tighter_than_and() {
        let phi = parse_formula("x < 1 U y < 2 && z < 3").unwrap();
        match phi {
            Formula::And(lhs, _) => assert!(matches!(*lhs, Formula::Until(None, _, _))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn labeled_predicates_and_negative_bounds() {
        let phi = parse_formula("@goalA: -x < -0.3").unwrap();
        match phi {
            Formula::Pred(p) => {
                assert_eq!(p.label.as_deref(), Some("goalA"));
                assert_eq!(p.bound, -0.3);
                assert!(matches!(p.expr, Expr::Neg(_)));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn expression_grammar() {
        let phi = parse_formula("abs(2 * x - y) + 1 < 4").unwrap();
        let sig = crate::stl::Signal::new(
            vec!["x".into(), "y".into()],
            vec![vec![1.0, 5.0]],
        )
        .unwrap();
        // abs(2 - 5) + 1 = 4, boundary: robustness 0
        assert_eq!(crate::stl::robustness(&sig, 1, &phi).unwrap(), 0.0);
    }

    #[test]
    fn paren_disambiguation() {
        // parenthesized predicate expression
        assert!(parse_formula("(x + 1) * 2 < 3").is_ok());
        // parenthesized sub-formula
        assert!(parse_formula("(x < 1) U[0,2] (x > 2)").is_ok());
        // doubly nested
        assert!(parse_formula("((x < 1))").is_ok());
    }

    #[test]
    fn errors_carry_position_and_expectations() {
        match parse_formula("G[1,5] (vel < )") {
            Err(ParseError::Syntax { line, col, expected, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(col, 15);
                assert!(expected.iter().any(|e| e.contains("number")));
            }
            other => panic!("unexpected {other:?}"),
        }
        match parse_formula("x <\n2 &&") {
            Err(ParseError::Syntax { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_input_rejected() {
        assert!(matches!(
            parse_formula("x < 1 x"),
            Err(ParseError::Syntax { .. })
        ));
    }

    #[test]
    fn print_parse_round_trip() {
        for text in [
            "G[1,5] (vel < 1.0)",
            "!(x < 2) -> F[1,5] (x < 2)",
            "G ( @bndry: abs(y) < 1 && ( !(@vel: speed < 1.5) -> F[1,5] (@vel: speed < 1.5) ) )",
            "(x < 1) U[0,2] (x > 0.65)",
            "x < 1 && y < 2 || z > 3 -> T",
            "abs(-x * 3 + 2) - 1 < 0.5",
            "F (x < 1 U y > 2)",
        ] {
            let once = parse_formula(text).unwrap();
            let printed = once.to_string();
            let twice = parse_formula(&printed).unwrap();
            assert_eq!(once, twice, "round trip changed {text} -> {printed}");
            assert_eq!(printed, twice.to_string());
        }
    }
}

//! Signal temporal logic over named channels of discrete-time signals.
//!
//! Formulas are built from predicates `expr < c` / `expr > c` over channel
//! expressions, Boolean connectives, and the temporal operators `G`
//! (globally), `F` (finally), and `U` (until), each with an optional
//! step-interval `[t1,t2]`. Quantitative semantics assign every formula a
//! signed robustness value; the sign tells satisfaction, the magnitude the
//! margin. See [`parse_formula`] for the concrete grammar and [`eval`] for
//! the semantics.

mod eval;
mod parser;
mod signal;
mod specs;
mod window;

pub mod gen;

pub use eval::{
    boolean_satisfaction, prefix_robustness, prefix_trace, robustness, robustness_bruteforce,
    robustness_trace, suffix_robustness, suffix_trace, EvalError, EvalOptions, DEFAULT_RHO_MAX,
};
pub use parser::{parse_formula, ParseError};
pub use signal::Signal;
pub use specs::{
    builtin_specs, circle_spec, reach_spec, run_spec, scale_predicate, spec_for_env, SpecError,
};

use std::fmt;

/// Inclusive step interval `[lo, hi]` attached to a temporal operator.
///
/// Bounds are offsets in steps relative to the evaluation time. An absent
/// interval on a temporal node means the untimed window `[t, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub lo: u32,
    pub hi: u32,
}

impl Interval {
    pub fn new(lo: u32, hi: u32) -> Result<Self, ParseError> {
        if lo > hi {
            return Err(ParseError::interval(lo, hi));
        }
        Ok(Self { lo, hi })
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.lo, self.hi)
    }
}

/// Comparison direction of a predicate.
///
/// Both directions are primitive so the robustness at the boundary is 0
/// from either side: `expr < c` has robustness `c - expr` and `expr > c`
/// has robustness `expr - c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Lt,
    Gt,
}

/// Arithmetic expression over channel values at a single step.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Channel(String),
    Const(f64),
    Neg(Box<Expr>),
    Abs(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
}

impl Expr {
    /// Evaluates the expression against one step of channel values.
    pub fn eval(&self, channels: &dyn Fn(&str) -> f64) -> f64 {
        match self {
            Expr::Channel(name) => channels(name),
            Expr::Const(c) => *c,
            Expr::Neg(e) => -e.eval(channels),
            Expr::Abs(e) => e.eval(channels).abs(),
            Expr::Add(a, b) => a.eval(channels) + b.eval(channels),
            Expr::Sub(a, b) => a.eval(channels) - b.eval(channels),
            Expr::Mul(a, b) => a.eval(channels) * b.eval(channels),
        }
    }

    fn collect_channels<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Channel(name) => out.push(name),
            Expr::Const(_) => {}
            Expr::Neg(e) | Expr::Abs(e) => e.collect_channels(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                a.collect_channels(out);
                b.collect_channels(out);
            }
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        let prec = match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Channel(..) | Expr::Const(..) | Expr::Abs(..) => 4,
        };
        let paren = prec < min_prec;
        if paren {
            write!(f, "(")?;
        }
        match self {
            Expr::Channel(name) => write!(f, "{name}")?,
            Expr::Const(c) => write!(f, "{c}")?,
            Expr::Neg(e) => {
                write!(f, "-")?;
                e.fmt_prec(f, 3)?;
            }
            Expr::Abs(e) => {
                write!(f, "abs(")?;
                e.fmt_prec(f, 0)?;
                write!(f, ")")?;
            }
            Expr::Add(a, b) => {
                a.fmt_prec(f, 1)?;
                write!(f, " + ")?;
                b.fmt_prec(f, 2)?;
            }
            Expr::Sub(a, b) => {
                a.fmt_prec(f, 1)?;
                write!(f, " - ")?;
                b.fmt_prec(f, 2)?;
            }
            Expr::Mul(a, b) => {
                a.fmt_prec(f, 2)?;
                write!(f, " * ")?;
                b.fmt_prec(f, 3)?;
            }
        }
        if paren {
            write!(f, ")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

/// Atomic predicate `expr < bound` or `expr > bound`, optionally labeled.
///
/// Labels (`@bndry:` in the concrete syntax) name predicate leaves so they
/// can be selected for rescaling; several leaves may share one label.
#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub label: Option<String>,
    pub expr: Expr,
    pub cmp: Cmp,
    pub bound: f64,
}

impl Predicate {
    /// Signed margin of the comparison for one step of channel values.
    pub fn robustness(&self, channels: &dyn Fn(&str) -> f64) -> f64 {
        let mu = self.expr.eval(channels);
        match self.cmp {
            Cmp::Lt => self.bound - mu,
            Cmp::Gt => mu - self.bound,
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(label) = &self.label {
            write!(f, "@{label}: ")?;
        }
        let op = match self.cmp {
            Cmp::Lt => "<",
            Cmp::Gt => ">",
        };
        write!(f, "{} {} {}", self.expr, op, self.bound)
    }
}

/// Parsed STL formula tree. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub enum Formula {
    True,
    Pred(Predicate),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Implies(Box<Formula>, Box<Formula>),
    Globally(Option<Interval>, Box<Formula>),
    Finally(Option<Interval>, Box<Formula>),
    Until(Option<Interval>, Box<Formula>, Box<Formula>),
}

impl Formula {
    /// All channel names referenced by predicates, in syntactic order.
    pub fn channels(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.walk_channels(&mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    fn walk_channels<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Formula::True => {}
            Formula::Pred(p) => p.expr.collect_channels(out),
            Formula::Not(a) => a.walk_channels(out),
            Formula::And(a, b) | Formula::Or(a, b) | Formula::Implies(a, b) => {
                a.walk_channels(out);
                b.walk_channels(out);
            }
            Formula::Globally(_, a) | Formula::Finally(_, a) => a.walk_channels(out),
            Formula::Until(_, a, b) => {
                a.walk_channels(out);
                b.walk_channels(out);
            }
        }
    }

    /// Checks that every referenced channel exists in `schema`.
    pub fn validate(&self, schema: &[String]) -> Result<(), EvalError> {
        for name in self.channels() {
            if !schema.iter().any(|s| s == name) {
                return Err(EvalError::UnknownChannel {
                    channel: name.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Distinct predicate labels appearing in the formula.
    pub fn labels(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.walk_labels(&mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    fn walk_labels<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Formula::True => {}
            Formula::Pred(p) => {
                if let Some(label) = &p.label {
                    out.push(label);
                }
            }
            Formula::Not(a) => a.walk_labels(out),
            Formula::And(a, b) | Formula::Or(a, b) | Formula::Implies(a, b) => {
                a.walk_labels(out);
                b.walk_labels(out);
            }
            Formula::Globally(_, a) | Formula::Finally(_, a) => a.walk_labels(out),
            Formula::Until(_, a, b) => {
                a.walk_labels(out);
                b.walk_labels(out);
            }
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        // Precedence: -> (1, right) < || (2) < && (3) < U (4) < unary (5).
        let prec = match self {
            Formula::Implies(..) => 1,
            Formula::Or(..) => 2,
            Formula::And(..) => 3,
            Formula::Until(..) => 4,
            Formula::Not(..) | Formula::Globally(..) | Formula::Finally(..) => 5,
            Formula::True | Formula::Pred(..) => 6,
        };
        let paren = prec < min_prec;
        if paren {
            write!(f, "(")?;
        }
        match self {
            Formula::True => write!(f, "T")?,
            Formula::Pred(p) => write!(f, "{p}")?,
            Formula::Not(a) => write!(f, "!({a})")?,
            Formula::And(a, b) => {
                a.fmt_prec(f, 3)?;
                write!(f, " && ")?;
                b.fmt_prec(f, 4)?;
            }
            Formula::Or(a, b) => {
                a.fmt_prec(f, 2)?;
                write!(f, " || ")?;
                b.fmt_prec(f, 3)?;
            }
            Formula::Implies(a, b) => {
                a.fmt_prec(f, 2)?;
                write!(f, " -> ")?;
                b.fmt_prec(f, 1)?;
            }
            Formula::Globally(int, a) => {
                write!(f, "G")?;
                if let Some(int) = int {
                    write!(f, "{int}")?;
                }
                write!(f, " ({a})")?;
            }
            Formula::Finally(int, a) => {
                write!(f, "F")?;
                if let Some(int) = int {
                    write!(f, "{int}")?;
                }
                write!(f, " ({a})")?;
            }
            Formula::Until(int, a, b) => {
                write!(f, "({a}) U")?;
                if let Some(int) = int {
                    write!(f, "{int}")?;
                }
                write!(f, " ({b})")?;
            }
        }
        if paren {
            write!(f, ")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

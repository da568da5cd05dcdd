//! Quantitative and Boolean semantics over discrete-time signals.
//!
//! Two independent evaluation routes are provided on purpose:
//! [`robustness_trace`] computes all steps bottom-up with sliding-window
//! extrema, while [`robustness_bruteforce`] is a literal transcription of the
//! recursive semantics with no shared machinery. Both must agree exactly at
//! every step; the brute-force route is the oracle in tests.

use std::collections::HashMap;

use thiserror::Error;

use super::window::{sliding_extreme, suffix_extreme};
use super::{Formula, Interval, Signal};

/// Default robustness assigned to `T` (and to vacuous clamped windows).
pub const DEFAULT_RHO_MAX: f64 = 1e6;

/// Evaluation knobs. `rho_max` must be positive and finite.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub rho_max: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rho_max: DEFAULT_RHO_MAX,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("unknown channel `{channel}`")]
    UnknownChannel { channel: String },
    #[error("step {t} out of range 1..={len}")]
    StepOutOfRange { t: usize, len: usize },
    #[error("signal must have at least one step")]
    EmptySignal,
    #[error("step {step}: expected {expected} channel values, found {found}")]
    RowWidth {
        step: usize,
        expected: usize,
        found: usize,
    },
    #[error("step {step}: non-finite value {value}")]
    NonFinite { step: usize, value: f64 },
}

/// Channel-name resolver bound to one signal.
struct Channels<'a> {
    sig: &'a Signal,
    index: HashMap<&'a str, usize>,
}

impl<'a> Channels<'a> {
    fn new(sig: &'a Signal) -> Self {
        let index = sig
            .schema()
            .iter()
            .enumerate()
            .map(|(i, name)| (name.as_str(), i))
            .collect();
        Self { sig, index }
    }

    /// Closure view of the channels at 1-indexed step `t`.
    fn at(&self, t: usize) -> impl Fn(&str) -> f64 + '_ {
        let row = self.sig.step(t);
        move |name: &str| row[self.index[name]]
    }
}

/// Clamped 1-indexed window `[from, to]` for a temporal operator at step `t`.
/// Returns `None` when the clamped window is empty.
fn clamped_window(t: usize, interval: &Option<Interval>, len: usize) -> Option<(usize, usize)> {
    match interval {
        Some(iv) => {
            let from = t + iv.lo as usize;
            let to = (t + iv.hi as usize).min(len);
            if from > len {
                None
            } else {
                Some((from, to))
            }
        }
        None => Some((t, len)),
    }
}

fn check_step(t: usize, len: usize) -> Result<(), EvalError> {
    if t == 0 || t > len {
        return Err(EvalError::StepOutOfRange { t, len });
    }
    Ok(())
}

/// Robustness `rho(tau, t, phi)` at 1-indexed step `t`, default options.
pub fn robustness(sig: &Signal, t: usize, phi: &Formula) -> Result<f64, EvalError> {
    robustness_with(sig, t, phi, EvalOptions::default())
}

pub fn robustness_with(
    sig: &Signal,
    t: usize,
    phi: &Formula,
    opts: EvalOptions,
) -> Result<f64, EvalError> {
    check_step(t, sig.len())?;
    Ok(robustness_trace_with(sig, phi, opts)?[t - 1])
}

/// Robustness at every step, evaluated bottom-up in one pass per node.
///
/// Bounded `G`/`F` use monotonic-deque sliding extrema (O(T) per node);
/// `U` is O(T·w) in the window width `w`.
pub fn robustness_trace(sig: &Signal, phi: &Formula) -> Result<Vec<f64>, EvalError> {
    robustness_trace_with(sig, phi, EvalOptions::default())
}

pub fn robustness_trace_with(
    sig: &Signal,
    phi: &Formula,
    opts: EvalOptions,
) -> Result<Vec<f64>, EvalError> {
    phi.validate(sig.schema())?;
    let channels = Channels::new(sig);
    Ok(trace_rec(&channels, phi, opts.rho_max))
}

fn trace_rec(ch: &Channels<'_>, phi: &Formula, rho_max: f64) -> Vec<f64> {
    let len = ch.sig.len();
    match phi {
        Formula::True => vec![rho_max; len],
        Formula::Pred(p) => (1..=len).map(|t| p.robustness(&ch.at(t))).collect(),
        Formula::Not(a) => trace_rec(ch, a, rho_max).iter().map(|v| -v).collect(),
        Formula::And(a, b) => {
            let ta = trace_rec(ch, a, rho_max);
            let tb = trace_rec(ch, b, rho_max);
            ta.iter().zip(&tb).map(|(x, y)| x.min(*y)).collect()
        }
        Formula::Or(a, b) => {
            let ta = trace_rec(ch, a, rho_max);
            let tb = trace_rec(ch, b, rho_max);
            ta.iter().zip(&tb).map(|(x, y)| x.max(*y)).collect()
        }
        Formula::Implies(a, b) => {
            let ta = trace_rec(ch, a, rho_max);
            let tb = trace_rec(ch, b, rho_max);
            ta.iter().zip(&tb).map(|(x, y)| (-x).max(*y)).collect()
        }
        Formula::Globally(int, a) => {
            let child = trace_rec(ch, a, rho_max);
            match int {
                Some(iv) => sliding_extreme(&child, iv.lo as usize, iv.hi as usize, true, rho_max),
                None => suffix_extreme(&child, true),
            }
        }
        Formula::Finally(int, a) => {
            let child = trace_rec(ch, a, rho_max);
            match int {
                Some(iv) => {
                    sliding_extreme(&child, iv.lo as usize, iv.hi as usize, false, -rho_max)
                }
                None => suffix_extreme(&child, false),
            }
        }
        Formula::Until(int, a, b) => {
            let ta = trace_rec(ch, a, rho_max);
            let tb = trace_rec(ch, b, rho_max);
            (0..len)
                .map(|i| {
                    let Some((from, to)) = clamped_window(i + 1, int, len) else {
                        return -rho_max;
                    };
                    // Running min of the left operand starts at the evaluation
                    // step itself, not at the window start.
                    let mut left_min = f64::INFINITY;
                    let mut best = f64::NEG_INFINITY;
                    for j in (i + 1)..=to {
                        left_min = left_min.min(ta[j - 1]);
                        if j >= from {
                            best = best.max(tb[j - 1].min(left_min));
                        }
                    }
                    best
                })
                .collect()
        }
    }
}

/// Literal recursive transcription of the quantitative semantics.
///
/// Deliberately naive (no memoization, no windows); kept independent of
/// [`robustness_trace`] so the two routes can cross-check each other.
pub fn robustness_bruteforce(sig: &Signal, t: usize, phi: &Formula) -> Result<f64, EvalError> {
    robustness_bruteforce_with(sig, t, phi, EvalOptions::default())
}

pub fn robustness_bruteforce_with(
    sig: &Signal,
    t: usize,
    phi: &Formula,
    opts: EvalOptions,
) -> Result<f64, EvalError> {
    check_step(t, sig.len())?;
    phi.validate(sig.schema())?;
    let channels = Channels::new(sig);
    Ok(brute_rec(&channels, t, phi, opts.rho_max))
}

fn brute_rec(ch: &Channels<'_>, t: usize, phi: &Formula, rho_max: f64) -> f64 {
    let len = ch.sig.len();
    match phi {
        Formula::True => rho_max,
        Formula::Pred(p) => p.robustness(&ch.at(t)),
        Formula::Not(a) => -brute_rec(ch, t, a, rho_max),
        Formula::And(a, b) => brute_rec(ch, t, a, rho_max).min(brute_rec(ch, t, b, rho_max)),
        Formula::Or(a, b) => brute_rec(ch, t, a, rho_max).max(brute_rec(ch, t, b, rho_max)),
        Formula::Implies(a, b) => (-brute_rec(ch, t, a, rho_max)).max(brute_rec(ch, t, b, rho_max)),
        Formula::Globally(int, a) => match clamped_window(t, int, len) {
            None => rho_max,
            Some((from, to)) => (from..=to)
                .map(|tp| brute_rec(ch, tp, a, rho_max))
                .fold(f64::INFINITY, f64::min),
        },
        Formula::Finally(int, a) => match clamped_window(t, int, len) {
            None => -rho_max,
            Some((from, to)) => (from..=to)
                .map(|tp| brute_rec(ch, tp, a, rho_max))
                .fold(f64::NEG_INFINITY, f64::max),
        },
        Formula::Until(int, a, b) => match clamped_window(t, int, len) {
            None => -rho_max,
            Some((from, to)) => (from..=to)
                .map(|tp| {
                    let right = brute_rec(ch, tp, b, rho_max);
                    let left = (t..=tp)
                        .map(|tpp| brute_rec(ch, tpp, a, rho_max))
                        .fold(f64::INFINITY, f64::min);
                    right.min(left)
                })
                .fold(f64::NEG_INFINITY, f64::max),
        },
    }
}

/// Classic Boolean STL semantics over the same clamped windows.
///
/// Independent of the quantitative route; used as the sign-soundness oracle
/// (`rho > 0` iff satisfied, away from ties at exactly zero).
pub fn boolean_satisfaction(sig: &Signal, t: usize, phi: &Formula) -> Result<bool, EvalError> {
    check_step(t, sig.len())?;
    phi.validate(sig.schema())?;
    let channels = Channels::new(sig);
    Ok(bool_rec(&channels, t, phi))
}

fn bool_rec(ch: &Channels<'_>, t: usize, phi: &Formula) -> bool {
    let len = ch.sig.len();
    match phi {
        Formula::True => true,
        Formula::Pred(p) => {
            let mu = p.expr.eval(&ch.at(t));
            match p.cmp {
                super::Cmp::Lt => mu < p.bound,
                super::Cmp::Gt => mu > p.bound,
            }
        }
        Formula::Not(a) => !bool_rec(ch, t, a),
        Formula::And(a, b) => bool_rec(ch, t, a) && bool_rec(ch, t, b),
        Formula::Or(a, b) => bool_rec(ch, t, a) || bool_rec(ch, t, b),
        Formula::Implies(a, b) => !bool_rec(ch, t, a) || bool_rec(ch, t, b),
        Formula::Globally(int, a) => match clamped_window(t, int, len) {
            None => true,
            Some((from, to)) => (from..=to).all(|tp| bool_rec(ch, tp, a)),
        },
        Formula::Finally(int, a) => match clamped_window(t, int, len) {
            None => false,
            Some((from, to)) => (from..=to).any(|tp| bool_rec(ch, tp, a)),
        },
        Formula::Until(int, a, b) => match clamped_window(t, int, len) {
            None => false,
            Some((from, to)) => (from..=to)
                .any(|tp| bool_rec(ch, tp, b) && (t..=tp).all(|tpp| bool_rec(ch, tpp, a))),
        },
    }
}

/// Prefix robustness `rho(tau[1..=t], 1, phi)`.
pub fn prefix_robustness(sig: &Signal, t: usize, phi: &Formula) -> Result<f64, EvalError> {
    check_step(t, sig.len())?;
    robustness(&sig.slice(1, t), 1, phi)
}

/// Suffix robustness `rho(tau[t..=T], 1, phi)`.
pub fn suffix_robustness(sig: &Signal, t: usize, phi: &Formula) -> Result<f64, EvalError> {
    check_step(t, sig.len())?;
    robustness(&sig.slice(t, sig.len()), 1, phi)
}

/// Prefix robustness at every step `t = 1..=T`.
pub fn prefix_trace(sig: &Signal, phi: &Formula) -> Result<Vec<f64>, EvalError> {
    (1..=sig.len()).map(|t| prefix_robustness(sig, t, phi)).collect()
}

/// Suffix robustness at every step `t = 1..=T`.
pub fn suffix_trace(sig: &Signal, phi: &Formula) -> Result<Vec<f64>, EvalError> {
    (1..=sig.len()).map(|t| suffix_robustness(sig, t, phi)).collect()
}

#[cfg(test)]
mod tests {
    use super::super::parse_formula;
    use super::*;

    fn sig1(xs: &[f64]) -> Signal {
        Signal::new(vec!["x".into()], xs.iter().map(|&v| vec![v]).collect()).unwrap()
    }

    #[test]
    fn predicate_margin() {
        let sig = sig1(&[1.0]);
        let phi = parse_formula("x < 2").unwrap();
        assert_eq!(robustness(&sig, 1, &phi).unwrap(), 1.0);
    }

    #[test]
    fn bounded_globally() {
        let sig = sig1(&[1.0, 3.0, 0.0]);
        let phi = parse_formula("G[0,2](x < 2)").unwrap();
        assert_eq!(robustness(&sig, 1, &phi).unwrap(), -1.0);
    }

    #[test]
    fn until_expansion() {
        let sig = sig1(&[0.6, 0.7, 0.8]);
        let phi = parse_formula("(x < 1) U[0,2] (x > 0.65)").unwrap();
        let got = robustness(&sig, 1, &phi).unwrap();
        assert!((got - 0.15).abs() < 1e-12, "got {got}");
        assert_eq!(got, robustness_bruteforce(&sig, 1, &phi).unwrap());
    }

    #[test]
    fn trace_matches_examples() {
        let sig = sig1(&[1.0, 3.0, 0.0]);
        let phi = parse_formula("x < 2").unwrap();
        assert_eq!(robustness_trace(&sig, &phi).unwrap(), vec![1.0, -1.0, 2.0]);

        let sig = sig1(&[3.0, 1.0, 2.0]);
        let phi = parse_formula("G[0,1](x < 10)").unwrap();
        assert_eq!(robustness_trace(&sig, &phi).unwrap(), vec![7.0, 8.0, 8.0]);
    }

    #[test]
    fn untimed_globally_trace() {
        let sig = sig1(&[1.0, 3.0, 0.0]);
        let phi = parse_formula("G (x < 2)").unwrap();
        assert_eq!(robustness_trace(&sig, &phi).unwrap(), vec![-1.0, -1.0, 2.0]);
    }

    #[test]
    fn true_and_negation() {
        let sig = sig1(&[0.5]);
        let top = parse_formula("T").unwrap();
        assert_eq!(robustness_bruteforce(&sig, 1, &top).unwrap(), DEFAULT_RHO_MAX);
        let neg = parse_formula("!(x < 1)").unwrap();
        assert_eq!(robustness_bruteforce(&sig, 1, &neg).unwrap(), -0.5);
    }

    #[test]
    fn prefix_and_suffix() {
        let sig = sig1(&[1.0, 3.0, 0.0]);
        let phi = parse_formula("G (x < 2)").unwrap();
        assert_eq!(prefix_robustness(&sig, 2, &phi).unwrap(), -1.0);
        assert_eq!(prefix_robustness(&sig, 1, &phi).unwrap(), 1.0);
        assert_eq!(suffix_robustness(&sig, 2, &phi).unwrap(), -1.0);
        assert_eq!(suffix_robustness(&sig, 3, &phi).unwrap(), 2.0);
        // boundary identities
        let full = robustness(&sig, 1, &phi).unwrap();
        assert_eq!(prefix_robustness(&sig, 3, &phi).unwrap(), full);
        assert_eq!(suffix_robustness(&sig, 1, &phi).unwrap(), full);
    }

    #[test]
    fn boolean_examples() {
        let sig = sig1(&[1.0]);
        let phi = parse_formula("x < 2").unwrap();
        assert!(boolean_satisfaction(&sig, 1, &phi).unwrap());
        let sig = sig1(&[1.0, 3.0, 0.0]);
        let phi = parse_formula("G[0,2](x < 2)").unwrap();
        assert!(!boolean_satisfaction(&sig, 1, &phi).unwrap());
    }

    #[test]
    fn empty_window_conventions() {
        let sig = sig1(&[1.0]);
        let g = parse_formula("G[3,5](x < 2)").unwrap();
        let f = parse_formula("F[3,5](x < 2)").unwrap();
        let u = parse_formula("(x < 2) U[3,5] (x < 2)").unwrap();
        assert_eq!(robustness(&sig, 1, &g).unwrap(), DEFAULT_RHO_MAX);
        assert_eq!(robustness(&sig, 1, &f).unwrap(), -DEFAULT_RHO_MAX);
        assert_eq!(robustness(&sig, 1, &u).unwrap(), -DEFAULT_RHO_MAX);
        assert!(boolean_satisfaction(&sig, 1, &g).unwrap());
        assert!(!boolean_satisfaction(&sig, 1, &f).unwrap());
        assert!(!boolean_satisfaction(&sig, 1, &u).unwrap());
    }

    #[test]
    fn errors_are_reported() {
        let sig = sig1(&[1.0]);
        let phi = parse_formula("y < 2").unwrap();
        assert_eq!(
            robustness(&sig, 1, &phi),
            Err(EvalError::UnknownChannel { channel: "y".into() })
        );
        let phi = parse_formula("x < 2").unwrap();
        assert_eq!(robustness(&sig, 2, &phi), Err(EvalError::StepOutOfRange { t: 2, len: 1 }));
        assert_eq!(robustness(&sig, 0, &phi), Err(EvalError::StepOutOfRange { t: 0, len: 1 }));
    }

    #[test]
    fn non_additivity_witness() {
        // rho_suf(tau,t) != rho_suf(tau,t+1) - rho(tau_t, 1, phi)
        let sig = sig1(&[1.0, 3.0, 0.0]);
        let phi = parse_formula("G (x < 2)").unwrap();
        let suf_1 = suffix_robustness(&sig, 1, &phi).unwrap();
        let suf_2 = suffix_robustness(&sig, 2, &phi).unwrap();
        let single = robustness(&sig.slice(1, 1), 1, &phi).unwrap();
        assert_ne!(suf_1, suf_2 - single);
    }

    #[test]
    fn cost_to_go_embedding() {
        // A channel holding cumulative future cost, read through `C < 0`,
        // reproduces negated cost-to-go pointwise.
        let costs = [0.0, 1.0, 0.0, 2.0];
        let mut ctg = vec![0.0; costs.len()];
        let mut acc = 0.0;
        for i in (0..costs.len()).rev() {
            acc += costs[i];
            ctg[i] = acc;
        }
        let sig = Signal::new(vec!["C".into()], ctg.iter().map(|&v| vec![v]).collect()).unwrap();
        let phi = parse_formula("C < 0").unwrap();
        let trace = robustness_trace(&sig, &phi).unwrap();
        for (i, v) in trace.iter().enumerate() {
            assert_eq!(*v, -ctg[i]);
        }
    }
}

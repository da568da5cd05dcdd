//! Built-in safety specifications for the toy environments, plus predicate
//! rescaling.
//!
//! All three formulas are expressed over the environment channel schema
//! `[x, y, vx, vy, speed]`; absolute values go through the grammar's `abs()`.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{Cmp, Expr, Formula, Interval, Predicate};

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("no predicate leaf labeled `{label}`")]
    UnknownLabel { label: String },
    #[error("scale factor must be positive, got {alpha}")]
    NonPositiveAlpha { alpha: f64 },
}

fn pred(label: &str, expr: Expr, cmp: Cmp, bound: f64) -> Formula {
    Formula::Pred(Predicate {
        label: Some(label.to_string()),
        expr,
        cmp,
        bound,
    })
}

fn chan(name: &str) -> Expr {
    Expr::Channel(name.to_string())
}

/// `G ( bndry && ( !vel -> F[1,5] vel ) )` with `bndry: abs(y) < y_lim`
/// and `vel: speed < v_lim`: always stay between the run-lane boundaries,
/// and whenever the speed limit is exceeded, get back under it within the
/// next five steps.
pub fn run_spec(y_lim: f64, v_lim: f64) -> Formula {
    let bndry = pred("bndry", Expr::Abs(Box::new(chan("y"))), Cmp::Lt, y_lim);
    let vel = || pred("vel", chan("speed"), Cmp::Lt, v_lim);
    let recover = Formula::Implies(
        Box::new(Formula::Not(Box::new(vel()))),
        Box::new(Formula::Finally(
            Some(Interval { lo: 1, hi: 5 }),
            Box::new(vel()),
        )),
    );
    Formula::Globally(
        None,
        Box::new(Formula::And(Box::new(bndry), Box::new(recover))),
    )
}

/// `G ( !bndry -> F[1,5] bndry )` with `bndry: abs(x) < x_lim`: whenever the
/// safe corridor is left, re-enter it within the next five steps.
pub fn circle_spec(x_lim: f64) -> Formula {
    let bndry = || pred("bndry", Expr::Abs(Box::new(chan("x"))), Cmp::Lt, x_lim);
    Formula::Globally(
        None,
        Box::new(Formula::Implies(
            Box::new(Formula::Not(Box::new(bndry()))),
            Box::new(Formula::Finally(
                Some(Interval { lo: 1, hi: 5 }),
                Box::new(bndry()),
            )),
        )),
    )
}

/// Four-atom box predicate: position within Chebyshev distance `d` of `goal`.
fn goal_box(label: &str, goal: (f64, f64), d: f64) -> Formula {
    let (gx, gy) = goal;
    let atoms = [
        pred(label, chan("x"), Cmp::Lt, gx + d),
        pred(label, Expr::Neg(Box::new(chan("x"))), Cmp::Lt, d - gx),
        pred(label, chan("y"), Cmp::Lt, gy + d),
        pred(label, Expr::Neg(Box::new(chan("y"))), Cmp::Lt, d - gy),
    ];
    atoms
        .into_iter()
        .reduce(|acc, a| Formula::And(Box::new(acc), Box::new(a)))
        .expect("nonempty")
}

/// `circle && F ( !goalB U goalA )`: keep the circle safety behavior and
/// eventually pass through goal A's box along a stretch that avoids goal B.
pub fn reach_spec(x_lim: f64, goal_a: (f64, f64), goal_b: (f64, f64), d: f64) -> Formula {
    let sequencing = Formula::Finally(
        None,
        Box::new(Formula::Until(
            None,
            Box::new(Formula::Not(Box::new(goal_box("goalB", goal_b, d)))),
            Box::new(goal_box("goalA", goal_a, d)),
        )),
    );
    Formula::And(Box::new(circle_spec(x_lim)), Box::new(sequencing))
}

/// The three built-in specifications at the default environment limits
/// (`y_lim = x_lim = 1.0`, `v_lim = 1.5`, goals at `(±0.5, 0)`, `d = 0.2`).
pub fn builtin_specs() -> BTreeMap<&'static str, Formula> {
    let mut map = BTreeMap::new();
    map.insert("run", run_spec(1.0, 1.5));
    map.insert("circle", circle_spec(1.0));
    map.insert("reach", reach_spec(1.0, (0.5, 0.0), (-0.5, 0.0), 0.2));
    map
}

/// Built-in specification for a named environment kind, if any.
pub fn spec_for_env(name: &str) -> Option<Formula> {
    builtin_specs().remove(name)
}

/// Rescales every predicate leaf labeled `label` by `alpha > 0`:
/// `mu(s) < c` becomes `(alpha * mu(s)) < (alpha * c)`, so the leaf's
/// robustness scales by `alpha` and its sign is unchanged.
pub fn scale_predicate(phi: &Formula, label: &str, alpha: f64) -> Result<Formula, SpecError> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(SpecError::NonPositiveAlpha { alpha });
    }
    let mut hits = 0usize;
    let scaled = scale_rec(phi, label, alpha, &mut hits);
    if hits == 0 {
        return Err(SpecError::UnknownLabel {
            label: label.to_string(),
        });
    }
    Ok(scaled)
}

fn scale_rec(phi: &Formula, label: &str, alpha: f64, hits: &mut usize) -> Formula {
    match phi {
        Formula::True => Formula::True,
        Formula::Pred(p) => {
            if p.label.as_deref() == Some(label) {
                *hits += 1;
                Formula::Pred(Predicate {
                    label: p.label.clone(),
                    expr: Expr::Mul(Box::new(Expr::Const(alpha)), Box::new(p.expr.clone())),
                    cmp: p.cmp,
                    bound: alpha * p.bound,
                })
            } else {
                Formula::Pred(p.clone())
            }
        }
        Formula::Not(a) => Formula::Not(Box::new(scale_rec(a, label, alpha, hits))),
        Formula::And(a, b) => Formula::And(
            Box::new(scale_rec(a, label, alpha, hits)),
            Box::new(scale_rec(b, label, alpha, hits)),
        ),
        Formula::Or(a, b) => Formula::Or(
            Box::new(scale_rec(a, label, alpha, hits)),
            Box::new(scale_rec(b, label, alpha, hits)),
        ),
        Formula::Implies(a, b) => Formula::Implies(
            Box::new(scale_rec(a, label, alpha, hits)),
            Box::new(scale_rec(b, label, alpha, hits)),
        ),
        Formula::Globally(int, a) => {
            Formula::Globally(*int, Box::new(scale_rec(a, label, alpha, hits)))
        }
        Formula::Finally(int, a) => {
            Formula::Finally(*int, Box::new(scale_rec(a, label, alpha, hits)))
        }
        Formula::Until(int, a, b) => Formula::Until(
            *int,
            Box::new(scale_rec(a, label, alpha, hits)),
            Box::new(scale_rec(b, label, alpha, hits)),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{parse_formula, robustness, Signal};
    use super::*;

    fn env_signal(rows: Vec<[f64; 5]>) -> Signal {
        Signal::new(
            vec!["x".into(), "y".into(), "vx".into(), "vy".into(), "speed".into()],
            rows.into_iter().map(|r| r.to_vec()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn run_round_trip_contains_bounded_finally() {
        let phi = builtin_specs()["run"].clone();
        let printed = phi.to_string();
        assert!(printed.contains("F[1,5]"), "printed: {printed}");
        assert_eq!(parse_formula(&printed).unwrap(), phi);
    }

    #[test]
    fn circle_is_globally_rooted() {
        let phi = builtin_specs()["circle"].clone();
        assert!(matches!(phi, Formula::Globally(None, _)));
        assert_eq!(parse_formula(&phi.to_string()).unwrap(), phi);
    }

    #[test]
    fn reach_shape() {
        let phi = builtin_specs()["reach"].clone();
        match &phi {
            Formula::And(circle, seq) => {
                assert!(matches!(**circle, Formula::Globally(None, _)));
                match &**seq {
                    Formula::Finally(None, until) => {
                        assert!(matches!(**until, Formula::Until(None, _, _)))
                    }
                    other => panic!("unexpected {other:?}"),
                }
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(parse_formula(&phi.to_string()).unwrap(), phi);
    }

    #[test]
    fn builtin_labels() {
        let specs = builtin_specs();
        assert_eq!(specs["run"].labels(), vec!["bndry", "vel"]);
        assert_eq!(specs["circle"].labels(), vec!["bndry"]);
        assert_eq!(specs["reach"].labels(), vec!["bndry", "goalA", "goalB"]);
    }

    #[test]
    fn goal_box_robustness_is_chebyshev_margin() {
        let phi = reach_spec(1.0, (0.5, 0.0), (-0.5, 0.0), 0.2);
        // Extract goal A conjunction by evaluating the full reach formula on a
        // point inside A's box at a safe x: margin = d - max(|x-gx|, |y-gy|).
        let sig = env_signal(vec![[0.55, 0.05, 0.0, 0.0, 0.0]]);
        let rho = robustness(&sig, 1, &phi).unwrap();
        // circle part: 1 - |0.55| = 0.45; goal part: 0.2 - 0.05 = 0.15
        assert!((rho - 0.15).abs() < 1e-12, "rho = {rho}");
    }

    #[test]
    fn scale_by_ten() {
        let phi = parse_formula("@p: x < 2").unwrap();
        let scaled = scale_predicate(&phi, "p", 10.0).unwrap();
        let sig = Signal::new(vec!["x".into()], vec![vec![1.0]]).unwrap();
        assert_eq!(robustness(&sig, 1, &scaled).unwrap(), 10.0);
        assert_eq!(parse_formula(&scaled.to_string()).unwrap(), scaled);
    }

    #[test]
    fn scale_by_one_is_pointwise_identity() {
        let phi = builtin_specs()["run"].clone();
        let scaled = scale_predicate(&phi, "vel", 1.0).unwrap();
        let sig = env_signal(vec![
            [0.0, 0.2, 1.0, 0.0, 1.0],
            [0.1, 0.3, 1.6, 0.0, 1.6],
            [0.2, 0.2, 1.2, 0.0, 1.2],
        ]);
        for t in 1..=3 {
            assert_eq!(
                robustness(&sig, t, &phi).unwrap(),
                robustness(&sig, t, &scaled).unwrap()
            );
        }
    }

    #[test]
    fn scale_errors() {
        let phi = parse_formula("@p: x < 2").unwrap();
        assert_eq!(
            scale_predicate(&phi, "q", 2.0),
            Err(SpecError::UnknownLabel { label: "q".into() })
        );
        assert_eq!(
            scale_predicate(&phi, "p", 0.0),
            Err(SpecError::NonPositiveAlpha { alpha: 0.0 })
        );
        assert_eq!(
            scale_predicate(&phi, "p", -3.0),
            Err(SpecError::NonPositiveAlpha { alpha: -3.0 })
        );
    }

    #[test]
    fn scale_hits_every_leaf_with_label() {
        let phi = builtin_specs()["run"].clone();
        let scaled = scale_predicate(&phi, "vel", 100.0).unwrap();
        let printed = scaled.to_string();
        assert_eq!(printed.matches("100 * speed").count(), 2, "printed: {printed}");
    }
}

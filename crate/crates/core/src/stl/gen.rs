//! Seeded random formulas and signals for property tests and cross-checks.

use rand::Rng;

use super::{Cmp, Expr, Formula, Interval, Predicate, Signal};

/// Uniform random signal over `schema` with values in `[-3, 3]`.
pub fn random_signal<R: Rng>(rng: &mut R, schema: &[String], len: usize) -> Signal {
    assert!(len >= 1);
    let rows = (0..len)
        .map(|_| (0..schema.len()).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    Signal::new(schema.to_vec(), rows).expect("generated rows are well formed")
}

fn random_expr<R: Rng>(rng: &mut R, schema: &[String], depth: u32) -> Expr {
    if depth == 0 || rng.random_bool(0.4) {
        if rng.random_bool(0.8) {
            let idx = rng.random_range(0..schema.len());
            return Expr::Channel(schema[idx].clone());
        }
        // Nonnegative so printing stays parser-shaped (`-c` parses as Neg).
        return Expr::Const(rng.random_range(0.0..2.0));
    }
    match rng.random_range(0..5) {
        0 => Expr::Neg(Box::new(random_expr(rng, schema, depth - 1))),
        1 => Expr::Abs(Box::new(random_expr(rng, schema, depth - 1))),
        2 => Expr::Add(
            Box::new(random_expr(rng, schema, depth - 1)),
            Box::new(random_expr(rng, schema, depth - 1)),
        ),
        3 => Expr::Sub(
            Box::new(random_expr(rng, schema, depth - 1)),
            Box::new(random_expr(rng, schema, depth - 1)),
        ),
        _ => Expr::Mul(
            Box::new(random_expr(rng, schema, depth - 1)),
            Box::new(random_expr(rng, schema, depth - 1)),
        ),
    }
}

fn random_predicate<R: Rng>(rng: &mut R, schema: &[String], labeled: bool) -> Formula {
    Formula::Pred(Predicate {
        label: labeled.then(|| format!("p{}", rng.random_range(0..4u8))),
        expr: random_expr(rng, schema, 2),
        cmp: if rng.random_bool(0.5) { Cmp::Lt } else { Cmp::Gt },
        bound: rng.random_range(-3.0..3.0),
    })
}

fn random_interval<R: Rng>(rng: &mut R) -> Option<Interval> {
    if rng.random_bool(0.3) {
        return None;
    }
    let lo = rng.random_range(0..4u32);
    let hi = lo + rng.random_range(0..5u32);
    Some(Interval { lo, hi })
}

/// Random formula over the full operator set with nesting depth `<= depth`.
///
/// `labeled` adds `@p0..@p3` labels to predicate leaves so rescaling can be
/// exercised.
pub fn random_formula<R: Rng>(rng: &mut R, schema: &[String], depth: u32, labeled: bool) -> Formula {
    if depth == 0 {
        if rng.random_bool(0.05) {
            return Formula::True;
        }
        return random_predicate(rng, schema, labeled);
    }
    match rng.random_range(0..8) {
        0 => random_predicate(rng, schema, labeled),
        1 => Formula::Not(Box::new(random_formula(rng, schema, depth - 1, labeled))),
        2 => Formula::And(
            Box::new(random_formula(rng, schema, depth - 1, labeled)),
            Box::new(random_formula(rng, schema, depth - 1, labeled)),
        ),
        3 => Formula::Or(
            Box::new(random_formula(rng, schema, depth - 1, labeled)),
            Box::new(random_formula(rng, schema, depth - 1, labeled)),
        ),
        4 => Formula::Implies(
            Box::new(random_formula(rng, schema, depth - 1, labeled)),
            Box::new(random_formula(rng, schema, depth - 1, labeled)),
        ),
        5 => Formula::Globally(
            random_interval(rng),
            Box::new(random_formula(rng, schema, depth - 1, labeled)),
        ),
        6 => Formula::Finally(
            random_interval(rng),
            Box::new(random_formula(rng, schema, depth - 1, labeled)),
        ),
        _ => Formula::Until(
            random_interval(rng),
            Box::new(random_formula(rng, schema, depth - 1, labeled)),
            Box::new(random_formula(rng, schema, depth - 1, labeled)),
        ),
    }
}

/// Random temporal-operator-free formula (Boolean combinations of predicates).
pub fn random_propositional<R: Rng>(rng: &mut R, schema: &[String], depth: u32) -> Formula {
    if depth == 0 {
        return random_predicate(rng, schema, false);
    }
    match rng.random_range(0..5) {
        0 => random_predicate(rng, schema, false),
        1 => Formula::Not(Box::new(random_propositional(rng, schema, depth - 1))),
        2 => Formula::And(
            Box::new(random_propositional(rng, schema, depth - 1)),
            Box::new(random_propositional(rng, schema, depth - 1)),
        ),
        3 => Formula::Or(
            Box::new(random_propositional(rng, schema, depth - 1)),
            Box::new(random_propositional(rng, schema, depth - 1)),
        ),
        _ => Formula::Implies(
            Box::new(random_propositional(rng, schema, depth - 1)),
            Box::new(random_propositional(rng, schema, depth - 1)),
        ),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::{
        boolean_satisfaction, parse_formula, prefix_robustness, robustness, robustness_bruteforce,
        robustness_trace, suffix_robustness,
    };
    use super::*;

    fn schema() -> Vec<String> {
        vec!["a".into(), "b".into(), "c".into()]
    }

    #[test]
    fn trace_equals_bruteforce_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let schema = schema();
        for _ in 0..120 {
            let phi = random_formula(&mut rng, &schema, 4, false);
            let len = rng.random_range(1..=12);
            let sig = random_signal(&mut rng, &schema, len);
            let trace = robustness_trace(&sig, &phi).unwrap();
            for t in 1..=sig.len() {
                let brute = robustness_bruteforce(&sig, t, &phi).unwrap();
                assert_eq!(trace[t - 1], brute, "t={t} phi={phi}");
            }
        }
    }

    #[test]
    fn sign_soundness_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let schema = schema();
        let mut checked = 0;
        while checked < 200 {
            let phi = random_formula(&mut rng, &schema, 3, false);
            let len = rng.random_range(1..=10);
            let sig = random_signal(&mut rng, &schema, len);
            let t = rng.random_range(1..=sig.len());
            let rho = robustness(&sig, t, &phi).unwrap();
            if rho.abs() <= 1e-9 {
                continue;
            }
            let sat = boolean_satisfaction(&sig, t, &phi).unwrap();
            assert_eq!(sat, rho > 0.0, "phi={phi} t={t} rho={rho}");
            checked += 1;
        }
    }

    #[test]
    fn negation_antisymmetry_and_de_morgan() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let schema = schema();
        for _ in 0..80 {
            let a = random_formula(&mut rng, &schema, 2, false);
            let b = random_formula(&mut rng, &schema, 2, false);
            let len = rng.random_range(1..=8);
            let sig = random_signal(&mut rng, &schema, len);
            let t = rng.random_range(1..=sig.len());
            let neg = Formula::Not(Box::new(a.clone()));
            assert_eq!(
                robustness(&sig, t, &neg).unwrap(),
                -robustness(&sig, t, &a).unwrap()
            );
            let lhs = Formula::Not(Box::new(Formula::And(
                Box::new(a.clone()),
                Box::new(b.clone()),
            )));
            let rhs = Formula::Or(
                Box::new(Formula::Not(Box::new(a.clone()))),
                Box::new(Formula::Not(Box::new(b.clone()))),
            );
            assert_eq!(
                robustness(&sig, t, &lhs).unwrap(),
                robustness(&sig, t, &rhs).unwrap()
            );
        }
    }

    #[test]
    fn prefix_suffix_boundary_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let schema = schema();
        for _ in 0..60 {
            let phi = random_formula(&mut rng, &schema, 3, false);
            let len = rng.random_range(1..=10);
            let sig = random_signal(&mut rng, &schema, len);
            let full = robustness(&sig, 1, &phi).unwrap();
            assert_eq!(prefix_robustness(&sig, sig.len(), &phi).unwrap(), full);
            assert_eq!(suffix_robustness(&sig, 1, &phi).unwrap(), full);
        }
    }

    #[test]
    fn globally_rooted_monotonicity() {
        // For G over temporal-free bodies the prefix is nonincreasing in t
        // and the suffix is nondecreasing in t.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let schema = schema();
        for _ in 0..60 {
            let body = random_propositional(&mut rng, &schema, 2);
            let phi = Formula::Globally(None, Box::new(body));
            let len = rng.random_range(2..=12);
            let sig = random_signal(&mut rng, &schema, len);
            let mut prev_pre = f64::INFINITY;
            let mut prev_suf = f64::NEG_INFINITY;
            for t in 1..=sig.len() {
                let pre = prefix_robustness(&sig, t, &phi).unwrap();
                let suf = suffix_robustness(&sig, t, &phi).unwrap();
                assert!(pre <= prev_pre, "prefix increased at t={t}");
                assert!(suf >= prev_suf, "suffix decreased at t={t}");
                prev_pre = pre;
                prev_suf = suf;
            }
        }
    }

    #[test]
    fn print_parse_round_trip_on_random_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let schema = schema();
        for _ in 0..200 {
            let phi = random_formula(&mut rng, &schema, 4, true);
            let printed = phi.to_string();
            let reparsed = parse_formula(&printed)
                .unwrap_or_else(|e| panic!("failed to reparse `{printed}`: {e}"));
            assert_eq!(reparsed, phi, "printed: {printed}");
        }
    }
}

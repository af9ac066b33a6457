//! The calculator against a small recursive evaluator written here from
//! scratch over exact rationals.

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use proptest::prelude::*;
use true_core::whitebox::{eval_expr, Environment, Expr};
use true_core::Rational;

#[derive(Debug, Clone)]
enum Tree {
    Num(i64, i64),
    Var(usize),
    Neg(Box<Tree>),
    Add(Box<Tree>, Box<Tree>),
    Sub(Box<Tree>, Box<Tree>),
    Mul(Box<Tree>, Box<Tree>),
    Div(Box<Tree>, Box<Tree>),
    Pow(Box<Tree>, i64),
    Abs(Box<Tree>),
    Min(Box<Tree>, Box<Tree>),
    Max(Box<Tree>, Box<Tree>),
}

const VARS: [&str; 3] = ["a", "b", "total_cost"];

fn var_values() -> [Rational; 3] {
    [r(7, 1), r(-3, 4), r(125, 10)]
}

fn r(n: i64, d: i64) -> Rational {
    Rational::new(BigInt::from(n), BigInt::from(d))
}

/// Decimal text for `n / 10^d`, the only non-integer literal form accepted.
fn decimal(n: i64, d: i64) -> String {
    if d == 1 {
        return n.to_string();
    }
    format!("{}.{}", n / 10, n % 10)
}

fn render(t: &Tree) -> String {
    match t {
        Tree::Num(n, d) => decimal(*n, *d),
        Tree::Var(i) => VARS[*i].to_string(),
        Tree::Neg(a) => format!("-({})", render(a)),
        Tree::Add(a, b) => format!("({})+({})", render(a), render(b)),
        Tree::Sub(a, b) => format!("({})-({})", render(a), render(b)),
        Tree::Mul(a, b) => format!("({})*({})", render(a), render(b)),
        Tree::Div(a, b) => format!("({})/({})", render(a), render(b)),
        Tree::Pow(a, e) => format!("({})^({})", render(a), e),
        Tree::Abs(a) => format!("abs({})", render(a)),
        Tree::Min(a, b) => format!("min({}, {})", render(a), render(b)),
        Tree::Max(a, b) => format!("max({}, {})", render(a), render(b)),
    }
}

/// `None` means the expression divides by zero somewhere.
fn oracle(t: &Tree) -> Option<Rational> {
    let v = var_values();
    Some(match t {
        Tree::Num(n, d) => r(*n, *d),
        Tree::Var(i) => v[*i].clone(),
        Tree::Neg(a) => -oracle(a)?,
        Tree::Add(a, b) => oracle(a)? + oracle(b)?,
        Tree::Sub(a, b) => oracle(a)? - oracle(b)?,
        Tree::Mul(a, b) => oracle(a)? * oracle(b)?,
        Tree::Div(a, b) => {
            let (x, y) = (oracle(a)?, oracle(b)?);
            if y.is_zero() {
                return None;
            }
            x / y
        }
        Tree::Pow(a, e) => {
            let base = oracle(a)?;
            let mut acc = Rational::one();
            for _ in 0..e.abs() {
                acc *= base.clone();
            }
            if *e < 0 {
                if acc.is_zero() {
                    return None;
                }
                acc = Rational::one() / acc;
            }
            acc
        }
        Tree::Abs(a) => oracle(a)?.abs(),
        Tree::Min(a, b) => {
            let (x, y) = (oracle(a)?, oracle(b)?);
            if y < x { y } else { x }
        }
        Tree::Max(a, b) => {
            let (x, y) = (oracle(a)?, oracle(b)?);
            if y > x { y } else { x }
        }
    })
}

fn tree() -> impl Strategy<Value = Tree> {
    let leaf = prop_oneof![
        (0i64..50).prop_map(|n| Tree::Num(n, 1)),
        (0i64..100).prop_map(|n| Tree::Num(n, 10)),
        (0usize..3).prop_map(Tree::Var),
    ];
    leaf.prop_recursive(5, 40, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|a| Tree::Neg(Box::new(a))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Tree::Add(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Tree::Sub(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Tree::Mul(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Tree::Div(Box::new(a), Box::new(b))),
            (inner.clone(), -3i64..=3).prop_map(|(a, e)| Tree::Pow(Box::new(a), e)),
            inner.clone().prop_map(|a| Tree::Abs(Box::new(a))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Tree::Min(Box::new(a), Box::new(b))),
            (inner.clone(), inner).prop_map(|(a, b)| Tree::Max(Box::new(a), Box::new(b))),
        ]
    })
}

fn env() -> Environment {
    let mut env = Environment::new();
    for (name, v) in VARS.iter().zip(var_values()) {
        env.bind_number(name, v).unwrap();
    }
    env
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn calculator_matches_oracle(t in tree()) {
        let src = render(&t);
        match (oracle(&t), eval_expr(&src, &env())) {
            (Some(want), Ok(got)) => {
                prop_assert!(got.exact);
                prop_assert_eq!(got.value, want, "{}", src);
            }
            (None, Err(e)) => prop_assert!(e.to_string().contains("division by zero"), "{}: {}", src, e),
            (want, got) => prop_assert!(false, "{}: oracle {:?}, calculator {:?}", src, want, got),
        }
    }

    #[test]
    fn display_round_trips_with_minimal_parentheses(t in tree()) {
        let parsed = Expr::parse(&render(&t)).unwrap();
        let printed = parsed.to_string();
        prop_assert_eq!(Expr::parse(&printed).unwrap(), parsed, "{}", printed);
    }
}

#[test]
fn precedence_and_associativity() {
    let e = Environment::new();
    let cases = [
        ("2+3*4", r(14, 1)),
        ("10-4-3", r(3, 1)),
        ("2^3^2", r(512, 1)),
        ("-2^2", r(4, 1)),
        ("8/4/2", r(1, 1)),
        ("1/3+1/6", r(1, 2)),
        ("0.1+0.2", r(3, 10)),
    ];
    for (src, want) in cases {
        assert_eq!(eval_expr(src, &e).unwrap().value, want, "{src}");
    }
}

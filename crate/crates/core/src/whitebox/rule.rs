//! Rule-based option matcher.
//!
//! A clause is `predicate(subject, object...)`. Operands are variables,
//! numbers, quoted text, or the keyword `option` (alias `option_value`),
//! which stands for the text of the candidate choice being tested.
//!
//! Clauses that mention `option` are tested once per choice. Clauses that
//! do not are guards: when the guard holds, the choice whose text equals
//! the subject's value is selected. Several satisfying choices is an
//! ambiguity, never a guess.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::env::{Bound, Environment};
use crate::model::Choice;
use crate::scalar::{format_rational, parse_rational, Rational};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Equals,
    Contains,
    Greater,
    Less,
    InRange,
    /// Glob-style pattern: `*` any run, `?` one character.
    Pattern,
}

impl Predicate {
    pub fn name(self) -> &'static str {
        match self {
            Predicate::Equals => "equals",
            Predicate::Contains => "contains",
            Predicate::Greater => "greater",
            Predicate::Less => "less",
            Predicate::InRange => "in_range",
            Predicate::Pattern => "pattern",
        }
    }

    fn lookup(name: &str) -> Option<Predicate> {
        Some(match name {
            "equals" => Predicate::Equals,
            "contains" => Predicate::Contains,
            "greater" => Predicate::Greater,
            "less" => Predicate::Less,
            "in_range" => Predicate::InRange,
            "pattern" | "regex_like_pattern" => Predicate::Pattern,
            _ => return None,
        })
    }

    fn object_count(self) -> usize {
        match self {
            Predicate::InRange => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Operand {
    Var(String),
    Option,
    Number(Rational),
    Text(String),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Var(v) => f.write_str(v),
            Operand::Option => f.write_str("option"),
            Operand::Number(n) => f.write_str(&format_rational(n)),
            Operand::Text(t) => write!(f, "\"{}\"", t.replace('\\', "\\\\").replace('"', "\\\"")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RuleClause {
    pub predicate: Predicate,
    pub subject: Operand,
    pub objects: Vec<Operand>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("malformed rule: {0}")]
    Syntax(String),
    #[error("cannot resolve `{0}`")]
    UnresolvableSubject(String),
}

/// Outcome of matching a clause against labeled choices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleMatch {
    pub label: Option<String>,
    pub ambiguous: bool,
    /// Every label that satisfied the clause.
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
enum Resolved {
    Num(Rational),
    Text(String),
}

impl Resolved {
    fn from_text(t: &str) -> Self {
        match parse_rational(t) {
            Some(n) => Resolved::Num(n),
            None => Resolved::Text(t.to_string()),
        }
    }

    fn text(&self) -> String {
        match self {
            Resolved::Num(n) => format_rational(n),
            Resolved::Text(t) => t.clone(),
        }
    }

    fn num(&self) -> Option<&Rational> {
        match self {
            Resolved::Num(n) => Some(n),
            Resolved::Text(_) => None,
        }
    }
}

fn same_value(a: &Resolved, b: &Resolved) -> bool {
    match (a.num(), b.num()) {
        (Some(x), Some(y)) => x == y,
        _ => a.text().trim().to_lowercase() == b.text().trim().to_lowercase(),
    }
}

impl RuleClause {
    pub fn parse(source: &str) -> Result<RuleClause, RuleError> {
        let src = source.trim();
        let open = src.find('(').ok_or_else(|| RuleError::Syntax("expected `predicate(...)`".into()))?;
        if !src.ends_with(')') {
            return Err(RuleError::Syntax("missing closing `)`".into()));
        }
        let name = src[..open].trim();
        let predicate =
            Predicate::lookup(name).ok_or_else(|| RuleError::Syntax(format!("unknown predicate `{name}`")))?;
        let operands = split_operands(&src[open + 1..src.len() - 1])?;
        if operands.len() != 1 + predicate.object_count() {
            return Err(RuleError::Syntax(format!(
                "`{}` takes {} operands, got {}",
                predicate.name(),
                1 + predicate.object_count(),
                operands.len()
            )));
        }
        let mut it = operands.into_iter();
        let subject = it.next().expect("length checked");
        Ok(RuleClause { predicate, subject, objects: it.collect() })
    }

    pub fn operands(&self) -> impl Iterator<Item = &Operand> {
        std::iter::once(&self.subject).chain(self.objects.iter())
    }

    pub fn variables(&self) -> BTreeSet<String> {
        self.operands()
            .filter_map(|o| match o {
                Operand::Var(v) => Some(v.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn references_option(&self) -> bool {
        self.operands().any(|o| *o == Operand::Option)
    }

    fn resolve(&self, op: &Operand, env: &Environment, option: Option<&Choice>) -> Result<Resolved, RuleError> {
        match op {
            Operand::Var(v) => match env.get(v) {
                Some(Bound::Number { value }) => Ok(Resolved::Num(value.clone())),
                Some(Bound::Label { value }) => Ok(Resolved::Text(value.clone())),
                None => Err(RuleError::UnresolvableSubject(v.clone())),
            },
            Operand::Option => option
                .map(|c| Resolved::from_text(&c.text))
                .ok_or_else(|| RuleError::UnresolvableSubject("option".into())),
            Operand::Number(n) => Ok(Resolved::Num(n.clone())),
            Operand::Text(t) => Ok(Resolved::from_text(t)),
        }
    }

    fn holds(&self, env: &Environment, option: Option<&Choice>) -> Result<bool, RuleError> {
        let subject = self.resolve(&self.subject, env, option)?;
        let objects =
            self.objects.iter().map(|o| self.resolve(o, env, option)).collect::<Result<Vec<_>, _>>()?;
        Ok(match self.predicate {
            Predicate::Equals => same_value(&subject, &objects[0]),
            Predicate::Contains => subject.text().to_lowercase().contains(&objects[0].text().to_lowercase()),
            Predicate::Greater => matches!((subject.num(), objects[0].num()), (Some(a), Some(b)) if a > b),
            Predicate::Less => matches!((subject.num(), objects[0].num()), (Some(a), Some(b)) if a < b),
            Predicate::InRange => matches!(
                (subject.num(), objects[0].num(), objects[1].num()),
                (Some(x), Some(lo), Some(hi)) if lo <= x && x <= hi
            ),
            Predicate::Pattern => glob_match(&objects[0].text().to_lowercase(), &subject.text().to_lowercase()),
        })
    }

    /// Evaluates the clause as a boolean condition (no choices involved).
    pub fn evaluate_guard(&self, env: &Environment) -> Result<bool, RuleError> {
        if self.references_option() {
            return Err(RuleError::UnresolvableSubject("option".into()));
        }
        self.holds(env, None)
    }
}

impl fmt::Display for RuleClause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}", self.predicate.name(), self.subject)?;
        for o in &self.objects {
            write!(f, ", {o}")?;
        }
        f.write_str(")")
    }
}

fn split_operands(inner: &str) -> Result<Vec<Operand>, RuleError> {
    let mut out = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let Some(&c) = chars.peek() else {
            return Err(RuleError::Syntax("missing operand".into()));
        };
        if c == '"' {
            chars.next();
            let mut text = String::new();
            loop {
                match chars.next() {
                    Some('\\') => match chars.next() {
                        Some(e) => text.push(e),
                        None => return Err(RuleError::Syntax("unterminated string".into())),
                    },
                    Some('"') => break,
                    Some(ch) => text.push(ch),
                    None => return Err(RuleError::Syntax("unterminated string".into())),
                }
            }
            out.push(Operand::Text(text));
        } else {
            let mut raw = String::new();
            while let Some(&ch) = chars.peek() {
                if ch == ',' {
                    break;
                }
                raw.push(ch);
                chars.next();
            }
            let raw = raw.trim();
            let op = if raw == "option" || raw == "option_value" {
                Operand::Option
            } else if let Some(n) = parse_rational(raw) {
                Operand::Number(n)
            } else if !raw.is_empty()
                && raw.chars().next().is_some_and(|c| c.is_alphabetic() || c == '_')
                && raw.chars().all(|c| c.is_alphanumeric() || c == '_')
            {
                Operand::Var(raw.to_string())
            } else {
                return Err(RuleError::Syntax(format!("bad operand `{raw}`")));
            };
            out.push(op);
        }
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        match chars.next() {
            None => return Ok(out),
            Some(',') => continue,
            Some(other) => return Err(RuleError::Syntax(format!("unexpected `{other}`"))),
        }
    }
}

fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    // dp[j] = pattern[..i] matches text[..j]
    let mut dp = vec![false; t.len() + 1];
    dp[0] = true;
    for &pc in &p {
        let mut next = vec![false; t.len() + 1];
        if pc == '*' {
            let mut any = false;
            for j in 0..=t.len() {
                any |= dp[j];
                next[j] = any;
            }
        } else {
            for j in 1..=t.len() {
                next[j] = dp[j - 1] && (pc == '?' || pc == t[j - 1]);
            }
        }
        dp = next;
    }
    dp[t.len()]
}

/// Matches `clause` against `choices`. Returns a label only when exactly
/// one choice satisfies the clause.
pub fn match_rule(clause: &RuleClause, env: &Environment, choices: &[Choice]) -> Result<RuleMatch, RuleError> {
    for v in clause.variables() {
        if !env.contains(&v) {
            return Err(RuleError::UnresolvableSubject(v));
        }
    }
    let candidates: Vec<String> = if clause.references_option() {
        let mut hits = Vec::new();
        for c in choices {
            if clause.holds(env, Some(c))? {
                hits.push(c.label.clone());
            }
        }
        hits
    } else if clause.holds(env, None)? {
        let subject = clause.resolve(&clause.subject, env, None)?;
        choices
            .iter()
            .filter(|c| same_value(&subject, &Resolved::from_text(&c.text)) || same_value(&subject, &Resolved::Text(c.label.clone())))
            .map(|c| c.label.clone())
            .collect()
    } else {
        Vec::new()
    };
    let label = if candidates.len() == 1 { Some(candidates[0].clone()) } else { None };
    Ok(RuleMatch { ambiguous: candidates.len() > 1, label, candidates })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, i64)]) -> Environment {
        pairs.iter().map(|(k, v)| (k.to_string(), Rational::from_integer((*v).into()))).collect()
    }

    fn choices(pairs: &[(&str, &str)]) -> Vec<Choice> {
        pairs.iter().map(|(l, t)| Choice::new(l, t)).collect()
    }

    #[test]
    fn equals_guard_selects_matching_option() {
        let clause = RuleClause::parse("equals(x, 7)").unwrap();
        let m = match_rule(&clause, &env(&[("x", 7)]), &choices(&[("A", "7"), ("B", "9")])).unwrap();
        assert_eq!(m.label.as_deref(), Some("A"));
        assert!(!m.ambiguous);
    }

    #[test]
    fn failing_guard_matches_nothing() {
        let clause = RuleClause::parse("greater(x, 10)").unwrap();
        let m = match_rule(&clause, &env(&[("x", 3)]), &choices(&[("A", "3"), ("B", "12")])).unwrap();
        assert_eq!(m, RuleMatch { label: None, ambiguous: false, candidates: vec![] });
    }

    #[test]
    fn two_containing_options_are_ambiguous() {
        let clause = RuleClause::parse("contains(option, \"red\")").unwrap();
        let m = match_rule(&clause, &Environment::new(), &choices(&[("A", "red car"), ("B", "dark red"), ("C", "blue")])).unwrap();
        assert_eq!(m.label, None);
        assert!(m.ambiguous);
        assert_eq!(m.candidates, vec!["A", "B"]);
    }

    #[test]
    fn option_comparisons() {
        let c = choices(&[("A", "5"), ("B", "15"), ("C", "25")]);
        let e = env(&[("lo", 10), ("hi", 20)]);
        let m = match_rule(&RuleClause::parse("in_range(option, lo, hi)").unwrap(), &e, &c).unwrap();
        assert_eq!(m.label.as_deref(), Some("B"));
        let m = match_rule(&RuleClause::parse("less(option_value, lo)").unwrap(), &e, &c).unwrap();
        assert_eq!(m.label.as_deref(), Some("A"));
        let words = choices(&[("A", "Monday"), ("B", "Friday")]);
        let m = match_rule(&RuleClause::parse("pattern(option, \"fri*\")").unwrap(), &e, &words).unwrap();
        assert_eq!(m.label.as_deref(), Some("B"));
    }

    #[test]
    fn unresolvable_subject() {
        let clause = RuleClause::parse("equals(y, 1)").unwrap();
        assert_eq!(match_rule(&clause, &Environment::new(), &[]), Err(RuleError::UnresolvableSubject("y".into())));
    }

    #[test]
    fn syntax_errors() {
        for bad in ["equals x", "equals(x)", "between(x, 1)", "in_range(x, 1)", "equals(x, \"a)", "equals(x, 1 2)"] {
            assert!(RuleClause::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn display_round_trips() {
        for src in ["equals(x, 7)", "contains(option, \"a \\\"q\\\"\")", "in_range(option, 1.5, hi)"] {
            let c = RuleClause::parse(src).unwrap();
            assert_eq!(RuleClause::parse(&c.to_string()).unwrap(), c);
        }
    }

    #[test]
    fn glob() {
        assert!(glob_match("a*c", "abbbc"));
        assert!(glob_match("a?c", "abc"));
        assert!(!glob_match("a?c", "abbc"));
        assert!(glob_match("*", ""));
    }

    #[test]
    fn guard_evaluation() {
        let clause = RuleClause::parse("greater(x, 10)").unwrap();
        assert!(clause.evaluate_guard(&env(&[("x", 11)])).unwrap());
        assert!(!clause.evaluate_guard(&env(&[("x", 10)])).unwrap());
    }
}

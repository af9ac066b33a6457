//! Reply formats exchanged with the provider. Parsers are used by the
//! pipeline stages; renderers by the simulated backend and by tests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Answer, Choice, ExplanationSpec, Opcode, TaskKind};
use crate::scalar::{format_rational, parse_rational, Rational};
use crate::whitebox::Expr;

/// `A: text` lines, or the empty string when there are no options.
pub fn render_choices(choices: &[Choice]) -> String {
    choices.iter().map(|c| format!("{}: {}", c.label, c.text)).collect::<Vec<_>>().join("\n")
}

/// Inverse of [`render_choices`]; also accepts `CHOICE A: text`.
pub fn parse_choices(text: &str) -> Vec<Choice> {
    text.lines()
        .filter_map(|l| {
            let l = l.trim();
            let l = l.strip_prefix("CHOICE ").unwrap_or(l);
            let (label, rest) = l.split_once(':')?;
            let label = label.trim();
            (!label.is_empty() && label.len() <= 3 && label.chars().all(|c| c.is_ascii_alphanumeric()))
                .then(|| Choice::new(label, rest.trim()))
        })
        .collect()
}

/// Splits an explanation reply into the spec body and the text after the
/// last `ANSWER:` line.
pub fn split_answer(text: &str) -> (String, Option<String>) {
    let mut body = Vec::new();
    let mut answer = None;
    for line in text.lines() {
        match line.trim().strip_prefix("ANSWER:") {
            Some(a) => answer = Some(a.trim().to_string()),
            None => body.push(line),
        }
    }
    (body.join("\n"), answer)
}

/// Reads an answer as the task's kind. Choice answers accept `B`, `(B)` or
/// `B: text`; numeric answers accept anything [`parse_rational`] does.
pub fn parse_answer(text: &str, kind: TaskKind) -> Option<Answer> {
    let t = text.trim().trim_end_matches('.');
    match kind {
        TaskKind::Numeric => parse_rational(&t.replace(',', "")).map(Answer::numeric),
        TaskKind::MultipleChoice => {
            let head = t.split(':').next().unwrap_or("").trim().trim_matches(|c| c == '(' || c == ')');
            (!head.is_empty() && head.len() <= 3 && head.chars().all(|c| c.is_ascii_alphanumeric()))
                .then(|| Answer::choice(head))
        }
    }
}

pub fn render_answer(answer: &Answer) -> String {
    answer.canonical_text()
}

/// Given quantities of a spec: the bind_given steps with literal payloads.
pub fn givens(spec: &ExplanationSpec) -> Vec<(String, Rational)> {
    spec.steps
        .iter()
        .filter(|s| s.opcode == Opcode::BindGiven)
        .filter_map(|s| {
            let name = s.output.clone()?;
            let expr = Expr::parse(s.expression.as_deref()?).ok()?;
            let env = crate::whitebox::Environment::new();
            Some((name, expr.eval(&env).ok()?.value))
        })
        .collect()
}

pub fn render_givens(givens: &[(String, Rational)]) -> String {
    givens.iter().map(|(k, v)| format!("{k}={}", format_rational(v))).collect::<Vec<_>>().join("; ")
}

pub fn parse_givens(text: &str) -> Vec<(String, Rational)> {
    text.split(';')
        .filter_map(|part| {
            let (k, v) = part.split_once('=')?;
            Some((k.trim().to_string(), parse_rational(v.trim())?))
        })
        .collect()
}

/// A rewritten problem: perturbations and failure-mode interventions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rewrite {
    pub statement: String,
    #[serde(with = "sets_serde")]
    pub sets: BTreeMap<String, Rational>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<Choice>,
}

mod sets_serde {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::scalar::{format_rational, parse_rational, Rational};

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, Rational>, s: S) -> Result<S::Ok, S::Error> {
        m.iter().map(|(k, v)| (k.clone(), format_rational(v))).collect::<BTreeMap<_, _>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, Rational>, D::Error> {
        BTreeMap::<String, String>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                parse_rational(&v).map(|r| (k, r)).ok_or_else(|| serde::de::Error::custom(format!("bad number `{v}`")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RewriteError {
    Declined(String),
    Malformed(String),
}

impl std::fmt::Display for RewriteError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RewriteError::Declined(why) => write!(f, "declined: {why}"),
            RewriteError::Malformed(why) => write!(f, "malformed rewrite: {why}"),
        }
    }
}

pub fn render_rewrite(r: &Rewrite) -> String {
    let mut out = format!("STATEMENT: {}\n", r.statement);
    for (k, v) in &r.sets {
        out.push_str(&format!("SET {k}={}\n", format_rational(v)));
    }
    for c in &r.choices {
        out.push_str(&format!("CHOICE {}: {}\n", c.label, c.text));
    }
    out
}

pub fn parse_rewrite(text: &str) -> Result<Rewrite, RewriteError> {
    let mut statement = None;
    let mut sets = BTreeMap::new();
    let mut choice_lines = Vec::new();
    for line in text.lines().map(str::trim) {
        if let Some(why) = line.strip_prefix("FAIL:") {
            return Err(RewriteError::Declined(why.trim().to_string()));
        } else if let Some(s) = line.strip_prefix("STATEMENT:") {
            statement = Some(s.trim().to_string());
        } else if let Some(s) = line.strip_prefix("SET ") {
            let (k, v) = s.split_once('=').ok_or_else(|| RewriteError::Malformed(format!("`{line}`")))?;
            let v = parse_rational(v.trim()).ok_or_else(|| RewriteError::Malformed(format!("`{line}`")))?;
            sets.insert(k.trim().to_string(), v);
        } else if line.starts_with("CHOICE ") {
            choice_lines.push(line);
        }
    }
    let statement = statement
        .filter(|s| !s.is_empty())
        .ok_or_else(|| RewriteError::Malformed("missing STATEMENT line".into()))?;
    Ok(Rewrite { statement, sets, choices: parse_choices(&choice_lines.join("\n")) })
}

/// Reads a probability from `P: 0.7`, a bare number, or a percentage.
pub fn parse_probability(text: &str) -> Option<f64> {
    let candidates: Vec<&str> = match text.find("P:") {
        Some(i) => vec![&text[i + 2..]],
        None => vec![text],
    };
    for c in candidates {
        for word in c.split_whitespace() {
            let w = word.trim_matches(|ch: char| !(ch.is_ascii_digit() || ch == '.' || ch == '%'));
            let (num, pct) = match w.strip_suffix('%') {
                Some(n) => (n, true),
                None => (w, false),
            };
            if let Ok(v) = num.parse::<f64>() {
                let v = if pct { v / 100.0 } else { v };
                return (0.0..=1.0).contains(&v).then_some(v);
            }
        }
    }
    None
}

/// `1`/`yes`/`true` or `0`/`no`/`false` as the first word.
pub fn parse_verdict(text: &str) -> Option<bool> {
    let first = text.split_whitespace().next()?.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    match first.as_str() {
        "1" | "yes" | "true" => Some(true),
        "0" | "no" | "false" => Some(false),
        _ => None,
    }
}

/// A failure-mode candidate proposed during discovery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub name: String,
    pub error_type: String,
    pub complexity: String,
    pub keywords: Vec<String>,
    pub description: String,
}

pub fn render_candidate(c: &Candidate) -> String {
    format!(
        "CANDIDATE: {} | {} | {} | {} | {}",
        c.name,
        c.error_type,
        c.complexity,
        c.keywords.join(", "),
        c.description
    )
}

pub fn parse_candidates(text: &str) -> Vec<Candidate> {
    text.lines()
        .filter_map(|l| {
            let rest = l.trim().strip_prefix("CANDIDATE:")?;
            let parts: Vec<&str> = rest.split('|').map(str::trim).collect();
            if parts.len() < 5 || parts[0].is_empty() {
                return None;
            }
            Some(Candidate {
                name: parts[0].to_string(),
                error_type: parts[1].to_string(),
                complexity: parts[2].to_string(),
                keywords: parts[3].split(',').map(|k| k.trim().to_lowercase()).filter(|k| !k.is_empty()).collect(),
                description: parts[4..].join(" | "),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_split_and_parse() {
        let (body, ans) = split_answer("STEP 1: narrate\nANSWER: 1,250\n");
        assert_eq!(body, "STEP 1: narrate");
        assert_eq!(parse_answer(&ans.unwrap(), TaskKind::Numeric), Some(Answer::numeric(Rational::from_integer(1250.into()))));
        assert_eq!(parse_answer("(b)", TaskKind::MultipleChoice), Some(Answer::choice("B")));
        assert_eq!(parse_answer("C: Friday", TaskKind::MultipleChoice), Some(Answer::choice("C")));
        assert_eq!(parse_answer("unknown", TaskKind::Numeric), None);
    }

    #[test]
    fn rewrite_round_trip() {
        let mut sets = BTreeMap::new();
        sets.insert("a".to_string(), Rational::new(7.into(), 2.into()));
        let r = Rewrite { statement: "Buy 3.5 kg.".into(), sets, choices: vec![Choice::new("A", "7")] };
        assert_eq!(parse_rewrite(&render_rewrite(&r)).unwrap(), r);
        assert_eq!(parse_rewrite("FAIL: nope"), Err(RewriteError::Declined("nope".into())));
        assert!(matches!(parse_rewrite("SET a=1"), Err(RewriteError::Malformed(_))));
    }

    #[test]
    fn probabilities() {
        assert_eq!(parse_probability("P: 0.73"), Some(0.73));
        assert_eq!(parse_probability("I'd say 40%"), Some(0.4));
        assert_eq!(parse_probability("P: 3"), None);
        assert_eq!(parse_probability("no idea"), None);
    }

    #[test]
    fn verdicts() {
        assert_eq!(parse_verdict("1"), Some(true));
        assert_eq!(parse_verdict("No."), Some(false));
        assert_eq!(parse_verdict("maybe"), None);
    }

    #[test]
    fn candidates_round_trip() {
        let c = Candidate {
            name: "Unit Mixup".into(),
            error_type: "Misinterpretation".into(),
            complexity: "Medium".into(),
            keywords: vec!["converted".into(), "units".into()],
            description: "mixes units".into(),
        };
        assert_eq!(parse_candidates(&format!("noise\n{}", render_candidate(&c))), vec![c]);
    }

    #[test]
    fn givens_round_trip() {
        let g = vec![("a".to_string(), Rational::from_integer(12.into())), ("b".to_string(), Rational::new(1.into(), 4.into()))];
        assert_eq!(parse_givens(&render_givens(&g)), g);
    }
}

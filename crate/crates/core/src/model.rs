//! Canonical data model shared by every pipeline stage.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use num_traits::Signed;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{format_rational, rational_serde, Rational};
use crate::whitebox::{Expr, RuleClause};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("problem id is empty")]
    EmptyId,
    #[error("duplicate problem id `{0}`")]
    DuplicateId(String),
    #[error("problem `{id}`: {reason}")]
    InvalidProblem { id: String, reason: String },
    #[error("unsupported dataset schema version {0}")]
    SchemaVersion(u32),
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("cannot compare a {left} answer with a {right} answer")]
pub struct ComparisonError {
    pub left: &'static str,
    pub right: &'static str,
}

/// A gold or predicted answer. Choice labels are stored upper-cased.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Answer {
    Numeric {
        #[serde(with = "rational_serde")]
        value: Rational,
    },
    Choice {
        #[serde(deserialize_with = "deserialize_label")]
        label: String,
    },
}

fn deserialize_label<'de, D: serde::Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    Ok(canonical_label(&String::deserialize(d)?))
}

/// Upper-cased, whitespace-trimmed choice label.
pub fn canonical_label(label: &str) -> String {
    label.trim().to_uppercase()
}

impl Answer {
    pub fn numeric(value: Rational) -> Self {
        Answer::Numeric { value }
    }

    pub fn choice(label: &str) -> Self {
        Answer::Choice { label: canonical_label(label) }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Answer::Numeric { .. } => "numeric",
            Answer::Choice { .. } => "choice",
        }
    }

    /// The text a leak detector looks for.
    pub fn canonical_text(&self) -> String {
        match self {
            Answer::Numeric { value } => format_rational(value),
            Answer::Choice { label } => label.clone(),
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_text())
    }
}

/// How two numeric answers are compared.
#[derive(Debug, Clone, PartialEq)]
pub enum Tolerance {
    Absolute(Rational),
    /// `|a - b| <= r * max(|a|, |b|)`
    Relative(Rational),
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance::Relative(Rational::new(1.into(), 1_000_000.into()))
    }
}

/// Numeric: `|a - b| <= tol`. Choice: case-insensitive label equality.
pub fn answers_equal(a: &Answer, b: &Answer, tol: &Rational) -> Result<bool, ComparisonError> {
    answers_equal_with(a, b, &Tolerance::Absolute(tol.clone()))
}

pub fn answers_equal_with(a: &Answer, b: &Answer, tol: &Tolerance) -> Result<bool, ComparisonError> {
    match (a, b) {
        (Answer::Numeric { value: x }, Answer::Numeric { value: y }) => {
            let diff = (x - y).abs();
            Ok(match tol {
                Tolerance::Absolute(t) => diff <= *t,
                Tolerance::Relative(r) => {
                    let scale = if x.abs() > y.abs() { x.abs() } else { y.abs() };
                    diff <= r * scale
                }
            })
        }
        (Answer::Choice { label: x }, Answer::Choice { label: y }) => {
            Ok(canonical_label(x) == canonical_label(y))
        }
        _ => Err(ComparisonError { left: a.kind_name(), right: b.kind_name() }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Numeric,
    MultipleChoice,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Choice {
    #[serde(deserialize_with = "deserialize_label")]
    pub label: String,
    pub text: String,
}

impl Choice {
    pub fn new(label: &str, text: &str) -> Self {
        Choice { label: canonical_label(label), text: text.to_string() }
    }
}

fn schema_v1() -> u32 {
    DATASET_SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    #[serde(rename = "v", default = "schema_v1")]
    pub schema_version: u32,
    pub id: String,
    pub statement: String,
    pub answer: Answer,
    /// Reference solution procedure, one executable step record per entry.
    #[serde(default)]
    pub reference_steps: Vec<String>,
    pub task_kind: TaskKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<Choice>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Problem {
    pub fn numeric(id: &str, statement: &str, answer: Rational, reference_steps: Vec<String>) -> Self {
        Problem {
            schema_version: DATASET_SCHEMA_VERSION,
            id: id.to_string(),
            statement: statement.to_string(),
            answer: Answer::numeric(answer),
            reference_steps,
            task_kind: TaskKind::Numeric,
            choices: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn multiple_choice(
        id: &str,
        statement: &str,
        label: &str,
        choices: Vec<Choice>,
        reference_steps: Vec<String>,
    ) -> Self {
        Problem {
            schema_version: DATASET_SCHEMA_VERSION,
            id: id.to_string(),
            statement: statement.to_string(),
            answer: Answer::choice(label),
            reference_steps,
            task_kind: TaskKind::MultipleChoice,
            choices,
            metadata: BTreeMap::new(),
        }
    }

    pub fn choices_opt(&self) -> Option<&[Choice]> {
        match self.task_kind {
            TaskKind::MultipleChoice => Some(&self.choices),
            TaskKind::Numeric => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.schema_version != DATASET_SCHEMA_VERSION {
            return Err(ModelError::SchemaVersion(self.schema_version));
        }
        if self.id.trim().is_empty() {
            return Err(ModelError::EmptyId);
        }
        let invalid = |reason: &str| ModelError::InvalidProblem { id: self.id.clone(), reason: reason.to_string() };
        match (self.task_kind, &self.answer) {
            (TaskKind::Numeric, Answer::Numeric { .. }) => {
                if !self.choices.is_empty() {
                    return Err(invalid("numeric task carries choices"));
                }
            }
            (TaskKind::MultipleChoice, Answer::Choice { label }) => {
                if self.choices.len() < 2 {
                    return Err(invalid("multiple_choice needs at least two choices"));
                }
                let labels: HashSet<_> = self.choices.iter().map(|c| canonical_label(&c.label)).collect();
                if labels.len() != self.choices.len() {
                    return Err(invalid("choice labels are not distinct"));
                }
                if !labels.contains(&canonical_label(label)) {
                    return Err(invalid("answer label is not among the choices"));
                }
            }
            _ => return Err(invalid("answer kind does not match task_kind")),
        }
        Ok(())
    }
}

/// Checks every problem and id uniqueness across the dataset.
/// Reads one problem per non-blank line and validates the whole set.
pub fn parse_dataset(jsonl: &str) -> Result<Vec<Problem>, ModelError> {
    let mut out = Vec::new();
    for (i, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Problem = serde_json::from_str(line).map_err(|e| ModelError::Syntax { line: i + 1, message: e.to_string() })?;
        out.push(p);
    }
    validate_dataset(&out)?;
    Ok(out)
}

pub fn validate_dataset(problems: &[Problem]) -> Result<(), ModelError> {
    let mut seen = HashSet::new();
    for p in problems {
        p.validate()?;
        if !seen.insert(p.id.as_str()) {
            return Err(ModelError::DuplicateId(p.id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Opcode {
    BindGiven,
    Compute,
    LookupRule,
    SelectAnswer,
    Narrate,
}

impl Opcode {
    pub const ALL: [Opcode; 5] =
        [Opcode::BindGiven, Opcode::Compute, Opcode::LookupRule, Opcode::SelectAnswer, Opcode::Narrate];

    pub fn as_str(self) -> &'static str {
        match self {
            Opcode::BindGiven => "bind_given",
            Opcode::Compute => "compute",
            Opcode::LookupRule => "lookup_rule",
            Opcode::SelectAnswer => "select_answer",
            Opcode::Narrate => "narrate",
        }
    }

    pub fn parse(s: &str) -> Option<Opcode> {
        Opcode::ALL.into_iter().find(|op| op.as_str() == s)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub index: usize,
    pub opcode: Opcode,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<String>,
    #[serde(default)]
    pub description: String,
}

impl ReasoningStep {
    pub fn new(index: usize, opcode: Opcode) -> Self {
        ReasoningStep {
            index,
            opcode,
            inputs: Vec::new(),
            output: None,
            expression: None,
            rule: None,
            description: String::new(),
        }
    }

    pub fn with_inputs(mut self, inputs: &[&str]) -> Self {
        self.inputs = inputs.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_output(mut self, output: &str) -> Self {
        self.output = Some(output.to_string());
        self
    }

    pub fn with_expression(mut self, expr: &str) -> Self {
        self.expression = Some(expr.to_string());
        self
    }

    pub fn with_rule(mut self, rule: &str) -> Self {
        self.rule = Some(rule.to_string());
        self
    }

    pub fn with_description(mut self, desc: &str) -> Self {
        self.description = desc.to_string();
        self
    }

    /// Text used when comparing steps semantically: the description, or
    /// the operational payload when no description was given.
    pub fn semantic_text(&self) -> String {
        if !self.description.trim().is_empty() {
            return self.description.clone();
        }
        let mut parts = vec![self.opcode.as_str().to_string()];
        if let Some(e) = &self.expression {
            parts.push(e.clone());
        }
        if let Some(r) = &self.rule {
            parts.push(r.clone());
        }
        parts.join(" ")
    }

    /// Every variable this step reads: declared inputs plus references
    /// inside the expression or rule.
    pub fn consumed_variables(&self) -> Result<BTreeSet<String>, String> {
        let mut vars: BTreeSet<String> = self.inputs.iter().cloned().collect();
        if let Some(src) = &self.expression {
            let expr = Expr::parse(src).map_err(|e| e.to_string())?;
            vars.extend(expr.variables());
        }
        if let Some(src) = &self.rule {
            let clause = RuleClause::parse(src).map_err(|e| e.to_string())?;
            vars.extend(clause.variables());
        }
        Ok(vars)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExplanationSpec {
    pub problem_id: String,
    pub steps: Vec<ReasoningStep>,
    #[serde(default)]
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub problem_id: String,
    pub steps: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_answer: Option<Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

impl Trajectory {
    /// Scores the prediction against `gold`; `correct` stays empty when
    /// there is no prediction.
    pub fn scored(mut self, gold: &Answer, tol: &Tolerance) -> Self {
        self.correct = self
            .predicted_answer
            .as_ref()
            .map(|p| answers_equal_with(p, gold, tol).unwrap_or(false));
        self
    }
}

/// A single invariant violation, rendered `rule@step` (or `rule` when the
/// violation concerns the whole spec).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub step: Option<usize>,
    pub rule: String,
}

impl Violation {
    fn at(step: usize, rule: &str) -> Self {
        Violation { step: Some(step), rule: rule.to_string() }
    }

    fn global(rule: &str) -> Self {
        Violation { step: None, rule: rule.to_string() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Some(s) => write!(f, "{}@{}", self.rule, s),
            None => f.write_str(&self.rule),
        }
    }
}

/// Checks the structural invariants of an explanation spec. The report is
/// sorted, so it does not depend on the order the rules run in.
pub fn validate_spec(spec: &ExplanationSpec) -> Vec<Violation> {
    let mut out = BTreeSet::new();
    if spec.steps.is_empty() {
        out.insert(Violation::global("empty-spec"));
        return out.into_iter().collect();
    }

    let mut bound: HashSet<String> = HashSet::new();
    let mut select_seen = false;
    let last = spec.steps.len();

    for (pos, step) in spec.steps.iter().enumerate() {
        let t = pos + 1;
        if step.index != t {
            out.insert(Violation::at(t, "non-contiguous-index"));
        }
        match step.opcode {
            Opcode::Compute => {
                if step.expression.as_deref().is_none_or(|e| e.trim().is_empty()) {
                    out.insert(Violation::at(t, "compute-missing-expression"));
                }
                if step.output.is_none() {
                    out.insert(Violation::at(t, "compute-missing-output"));
                }
            }
            Opcode::BindGiven => {
                if step.output.is_none() {
                    out.insert(Violation::at(t, "bind-given-missing-output"));
                }
                let literal = step
                    .expression
                    .as_deref()
                    .and_then(|e| Expr::parse(e).ok())
                    .is_some_and(|e| e.variables().is_empty());
                if !literal {
                    out.insert(Violation::at(t, "bind-given-not-literal"));
                }
            }
            Opcode::LookupRule => {
                if step.output.is_none() {
                    out.insert(Violation::at(t, "lookup-rule-missing-output"));
                }
            }
            Opcode::SelectAnswer => {
                if select_seen {
                    out.insert(Violation::at(t, "duplicate-select-answer"));
                }
                select_seen = true;
                if t != last {
                    out.insert(Violation::at(t, "select-answer-not-last"));
                }
                if step.inputs.is_empty() && step.expression.is_none() {
                    out.insert(Violation::at(t, "select-answer-missing-input"));
                }
            }
            Opcode::Narrate => {}
        }

        if let Some(src) = &step.expression {
            if Expr::parse(src).is_err() {
                out.insert(Violation::at(t, "invalid-expression"));
            }
        }
        if let Some(src) = &step.rule {
            if RuleClause::parse(src).is_err() {
                out.insert(Violation::at(t, "invalid-rule"));
            }
        }
        if let Ok(consumed) = step.consumed_variables() {
            if step.opcode != Opcode::Narrate && consumed.iter().any(|v| !bound.contains(v)) {
                out.insert(Violation::at(t, "unbound-variable"));
            }
        }
        if let Some(o) = &step.output {
            if !bound.insert(o.clone()) {
                out.insert(Violation::at(t, "rebound-variable"));
            }
        }
    }

    let produces_answer = select_seen
        || spec
            .steps
            .iter()
            .rev()
            .find(|s| s.opcode != Opcode::Narrate)
            .is_some_and(|s| matches!(s.opcode, Opcode::Compute | Opcode::LookupRule));
    if !produces_answer {
        out.insert(Violation::global("no-final-answer"));
    }
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(n: i64, d: i64) -> Rational {
        Rational::new(n.into(), d.into())
    }

    fn four_step() -> ExplanationSpec {
        ExplanationSpec {
            problem_id: "p1".into(),
            generator: "cot".into(),
            steps: vec![
                ReasoningStep::new(1, Opcode::BindGiven).with_output("price").with_expression("15"),
                ReasoningStep::new(2, Opcode::BindGiven).with_output("qty").with_expression("4"),
                ReasoningStep::new(3, Opcode::Compute)
                    .with_inputs(&["price", "qty"])
                    .with_output("total")
                    .with_expression("price*qty")
                    .with_description("multiply unit price by quantity"),
                ReasoningStep::new(4, Opcode::SelectAnswer).with_inputs(&["total"]),
            ],
        }
    }

    #[test]
    fn well_formed_spec_has_empty_report() {
        assert!(validate_spec(&four_step()).is_empty());
    }

    #[test]
    fn unbound_variable_is_reported_at_its_step() {
        let mut spec = four_step();
        spec.steps[2].expression = Some("price*count".into());
        let report = validate_spec(&spec);
        assert_eq!(report.iter().map(|v| v.to_string()).collect::<Vec<_>>(), vec!["unbound-variable@3"]);
    }

    #[test]
    fn lone_binding_has_no_final_answer() {
        let spec = ExplanationSpec {
            problem_id: "p".into(),
            generator: String::new(),
            steps: vec![ReasoningStep::new(1, Opcode::BindGiven).with_output("a").with_expression("12")],
        };
        let report: Vec<String> = validate_spec(&spec).iter().map(|v| v.to_string()).collect();
        assert_eq!(report, vec!["no-final-answer"]);
    }

    #[test]
    fn structural_rules_fire() {
        let spec = ExplanationSpec {
            problem_id: "p".into(),
            generator: String::new(),
            steps: vec![
                ReasoningStep::new(1, Opcode::BindGiven).with_output("a").with_expression("b+1"),
                ReasoningStep::new(3, Opcode::SelectAnswer).with_inputs(&["a"]),
                ReasoningStep::new(3, Opcode::Compute).with_output("a"),
            ],
        };
        let report: Vec<String> = validate_spec(&spec).iter().map(|v| v.to_string()).collect();
        for expected in [
            "bind-given-not-literal@1",
            "unbound-variable@1",
            "non-contiguous-index@2",
            "select-answer-not-last@2",
            "compute-missing-expression@3",
            "rebound-variable@3",
        ] {
            assert!(report.contains(&expected.to_string()), "missing {expected} in {report:?}");
        }
    }

    #[test]
    fn empty_spec_is_flagged() {
        let spec = ExplanationSpec { problem_id: "p".into(), generator: String::new(), steps: vec![] };
        assert_eq!(validate_spec(&spec)[0].rule, "empty-spec");
    }

    #[test]
    fn answer_comparison_examples() {
        let tol0 = q(0, 1);
        assert!(answers_equal(&Answer::numeric(q(14, 1)), &Answer::numeric(q(14, 1)), &tol0).unwrap());
        assert!(answers_equal(&Answer::numeric(q(333333, 1_000_000)), &Answer::numeric(q(1, 3)), &q(1, 10_000)).unwrap());
        assert!(answers_equal(&Answer::choice("B"), &Answer::Choice { label: "b".into() }, &tol0).unwrap());
        assert!(!answers_equal(&Answer::numeric(q(1, 3)), &Answer::numeric(q(333333, 1_000_000)), &tol0).unwrap());
        assert!(answers_equal(&Answer::numeric(q(1, 1)), &Answer::choice("A"), &tol0).is_err());
    }

    #[test]
    fn relative_tolerance_scales_with_magnitude() {
        let tol = Tolerance::default();
        let a = Answer::numeric(q(1_000_000, 1));
        let b = Answer::numeric(q(10_000_005, 10));
        assert!(answers_equal_with(&a, &b, &tol).unwrap());
        let c = Answer::numeric(q(1_000_100, 1));
        assert!(!answers_equal_with(&a, &c, &tol).unwrap());
    }

    #[test]
    fn problem_validation() {
        let mut p = Problem::multiple_choice("m1", "pick", "b", vec![Choice::new("a", "7"), Choice::new("B", "9")], vec![]);
        assert!(p.validate().is_ok());
        assert_eq!(p.answer, Answer::choice("B"));
        p.choices.pop();
        assert!(p.validate().is_err());
        let n = Problem::numeric("", "x", q(1, 1), vec![]);
        assert_eq!(n.validate(), Err(ModelError::EmptyId));
        let a = Problem::numeric("x", "s", q(1, 1), vec![]);
        assert!(matches!(validate_dataset(&[a.clone(), a]), Err(ModelError::DuplicateId(_))));
    }

    #[test]
    fn problem_json_carries_schema_version() {
        let p = Problem::numeric("g1", "Tom has 12 apples.", q(24, 1), vec![]);
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.starts_with("{\"v\":1,"));
        assert!(json.contains("\"answer\":{\"kind\":\"numeric\",\"value\":\"24\"}"));
        let back: Problem = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }
}

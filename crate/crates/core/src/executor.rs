//! Blind execution of explanation specs and E³ scoring.
//!
//! [`blind_execute`] never sees the problem statement: its inputs are the
//! spec, the labeled options (for multiple-choice tasks) and optionally a
//! provider used to interpret steps the white-box tools cannot run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{answers_equal_with, Answer, Choice, ExplanationSpec, Opcode, ReasoningStep, Tolerance};
use crate::provider::{templates, Provider, ProviderRequest};
use crate::scalar::{parse_rational, Rational, Scalar};
use crate::step_format::serialize_step_body;
use crate::whitebox::{match_rule, Bound, Environment, Expr, RuleClause};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Executed,
    ToolFailed,
    InterpreterFailed,
    SkippedNarrate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolUsed {
    Calculator,
    RuleMatcher,
    ProviderInterpreter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundOutput {
    pub name: String,
    pub value: Bound,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub step_index: usize,
    pub status: StepStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_output: Option<BoundOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_used: Option<ToolUsed>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub problem_id: String,
    pub predicted: Option<Answer>,
    pub records: Vec<ExecutionRecord>,
    /// Every non-narrate step executed and an answer was produced.
    pub executable: bool,
    pub blind: bool,
    /// False when any step was run through the provider interpreter.
    pub tool_verified: bool,
    /// False when an approximated value (irrational root) was involved.
    pub exact: bool,
}

impl VerificationOutcome {
    /// Whether step `index` (1-based) ran to completion.
    pub fn step_executed(&self, index: usize) -> bool {
        self.records.iter().any(|r| r.step_index == index && r.status == StepStatus::Executed)
    }

    pub fn is_correct(&self, gold: &Answer, tol: &Tolerance) -> bool {
        self.predicted.as_ref().is_some_and(|p| answers_equal_with(p, gold, tol).unwrap_or(false))
    }
}

enum StepResult {
    Bound(Bound, ToolUsed),
    Failed(StepStatus, Option<ToolUsed>, String),
}

struct Run<'a> {
    env: Environment,
    choices: &'a [Choice],
    interpreter: Option<&'a Provider>,
    used_interpreter: bool,
    exact: bool,
}

/// Executes `spec` step by step, halting at the first hard failure.
///
/// Dispatch per step is white-box tool first, provider interpreter second
/// (only when the step carries no payload or a rule cannot decide), failure
/// third. The function is total: provider errors become `interpreter_failed`
/// records.
pub fn blind_execute(spec: &ExplanationSpec, choices: Option<&[Choice]>, interpreter: Option<&Provider>) -> VerificationOutcome {
    let mut run = Run { env: Environment::new(), choices: choices.unwrap_or(&[]), interpreter, used_interpreter: false, exact: true };
    let mut records = Vec::with_capacity(spec.steps.len());
    let mut predicted: Option<Answer> = None;
    let mut last_value: Option<Bound> = None;
    let mut halted = false;

    for step in &spec.steps {
        if step.opcode == Opcode::Narrate {
            records.push(ExecutionRecord {
                step_index: step.index,
                status: StepStatus::SkippedNarrate,
                bound_output: None,
                tool_used: None,
                detail: None,
            });
            continue;
        }
        let result = match step.opcode {
            Opcode::BindGiven => run.bind_given(step),
            Opcode::Compute => run.compute(step),
            Opcode::LookupRule => run.lookup(step),
            Opcode::SelectAnswer => run.select(step),
            Opcode::Narrate => unreachable!(),
        };
        match result {
            StepResult::Bound(value, tool) => {
                let bound_output = match (&step.output, step.opcode) {
                    (_, Opcode::SelectAnswer) => {
                        predicted = Some(run.to_answer(&value));
                        None
                    }
                    (Some(name), _) => {
                        if let Err(e) = run.env.bind(name, value.clone()) {
                            records.push(failed(step, StepStatus::ToolFailed, Some(tool), e.to_string()));
                            halted = true;
                            break;
                        }
                        Some(BoundOutput { name: name.clone(), value: value.clone() })
                    }
                    (None, _) => None,
                };
                last_value = Some(value);
                records.push(ExecutionRecord {
                    step_index: step.index,
                    status: StepStatus::Executed,
                    bound_output,
                    tool_used: Some(tool),
                    detail: None,
                });
            }
            StepResult::Failed(status, tool, msg) => {
                records.push(failed(step, status, tool, msg));
                halted = true;
                break;
            }
        }
    }

    if !halted && predicted.is_none() {
        let terminal = spec.steps.iter().rev().find(|s| s.opcode != Opcode::Narrate);
        if terminal.is_some_and(|s| matches!(s.opcode, Opcode::Compute | Opcode::LookupRule)) {
            predicted = last_value.as_ref().map(|v| run.to_answer(v));
        }
    }
    let executable = !halted && predicted.is_some();
    VerificationOutcome {
        problem_id: spec.problem_id.clone(),
        predicted,
        records,
        executable,
        blind: true,
        tool_verified: !run.used_interpreter,
        exact: run.exact,
    }
}

fn failed(step: &ReasoningStep, status: StepStatus, tool: Option<ToolUsed>, detail: String) -> ExecutionRecord {
    ExecutionRecord { step_index: step.index, status, bound_output: None, tool_used: tool, detail: Some(detail) }
}

impl Run<'_> {
    fn eval(&mut self, src: &str, tool: ToolUsed) -> StepResult {
        match Expr::parse(src) {
            Err(e) => StepResult::Failed(StepStatus::ToolFailed, Some(tool), format!("expression: {e}")),
            Ok(expr) => match expr.eval(&self.env) {
                Ok(v) => {
                    self.exact &= v.exact;
                    StepResult::Bound(Bound::number(v.value), tool)
                }
                Err(e) => StepResult::Failed(StepStatus::ToolFailed, Some(tool), e.to_string()),
            },
        }
    }

    fn bind_given(&mut self, step: &ReasoningStep) -> StepResult {
        let Some(src) = step.expression.as_deref().filter(|e| !e.trim().is_empty()) else {
            return self.interpret(step);
        };
        match Expr::parse(src) {
            Ok(e) if e.variables().is_empty() => self.eval(src, ToolUsed::Calculator),
            Ok(_) => StepResult::Failed(
                StepStatus::ToolFailed,
                Some(ToolUsed::Calculator),
                "bind_given payload is not a literal".into(),
            ),
            Err(e) => StepResult::Failed(StepStatus::ToolFailed, Some(ToolUsed::Calculator), e.to_string()),
        }
    }

    fn compute(&mut self, step: &ReasoningStep) -> StepResult {
        match step.expression.as_deref().filter(|e| !e.trim().is_empty()) {
            Some(src) => self.eval(src, ToolUsed::Calculator),
            None => self.interpret(step),
        }
    }

    fn apply_rule(&mut self, src: &str, tool: ToolUsed) -> (StepResult, bool) {
        let clause = match RuleClause::parse(src) {
            Ok(c) => c,
            Err(e) => return (StepResult::Failed(StepStatus::ToolFailed, Some(tool), e.to_string()), false),
        };
        if self.choices.is_empty() {
            // Without options a rule is a boolean test.
            return match clause.evaluate_guard(&self.env) {
                Ok(b) => (StepResult::Bound(Bound::number(Rational::from_integer((b as i64).into())), tool), false),
                Err(e) => (StepResult::Failed(StepStatus::ToolFailed, Some(tool), e.to_string()), false),
            };
        }
        match match_rule(&clause, &self.env, self.choices) {
            Ok(m) => match m.label {
                Some(label) => (StepResult::Bound(Bound::label(&label), tool), false),
                None => {
                    let why = if m.ambiguous {
                        format!("ambiguous match: {}", m.candidates.join(","))
                    } else {
                        "no option satisfies the rule".to_string()
                    };
                    (StepResult::Failed(StepStatus::ToolFailed, Some(tool), why), true)
                }
            },
            Err(e) => (StepResult::Failed(StepStatus::ToolFailed, Some(tool), e.to_string()), false),
        }
    }

    fn lookup(&mut self, step: &ReasoningStep) -> StepResult {
        let Some(src) = step.rule.as_deref().filter(|r| !r.trim().is_empty()) else {
            return self.interpret(step);
        };
        let (result, undecided) = self.apply_rule(src, ToolUsed::RuleMatcher);
        if undecided && self.interpreter.is_some() {
            return self.interpret(step);
        }
        result
    }

    fn select(&mut self, step: &ReasoningStep) -> StepResult {
        if let Some(name) = step.inputs.first() {
            return match self.env.get(name) {
                Some(v) => StepResult::Bound(v.clone(), ToolUsed::Calculator),
                None => StepResult::Failed(
                    StepStatus::ToolFailed,
                    Some(ToolUsed::Calculator),
                    format!("unbound variable `{name}`"),
                ),
            };
        }
        match step.expression.as_deref() {
            Some(src) => self.eval(src, ToolUsed::Calculator),
            None => StepResult::Failed(StepStatus::ToolFailed, None, "select_answer names no input".into()),
        }
    }

    fn interpret(&mut self, step: &ReasoningStep) -> StepResult {
        let Some(provider) = self.interpreter else {
            return StepResult::Failed(StepStatus::InterpreterFailed, None, "no interpreter configured".into());
        };
        self.used_interpreter = true;
        let bound: Vec<String> = self.env.iter().map(|(k, v)| format!("{k}={}", v.render())).collect();
        let choices: Vec<String> = self.choices.iter().map(|c| format!("{}: {}", c.label, c.text)).collect();
        let req = ProviderRequest::new(templates::INTERPRET_STEP)
            .slot("step", serialize_step_body(step))
            .slot("bound", if bound.is_empty() { "none".to_string() } else { bound.join(", ") })
            .slot("choices", if choices.is_empty() { "none".to_string() } else { choices.join(" | ") });
        let tool = ToolUsed::ProviderInterpreter;
        let text = match provider.complete(&req) {
            Ok(r) => r.text,
            Err(e) => return StepResult::Failed(StepStatus::InterpreterFailed, Some(tool), e.to_string()),
        };
        match parse_interpretation(&text) {
            Interpretation::Expr(e) => self.eval(&e, tool),
            Interpretation::Rule(r) => self.apply_rule(&r, tool).0,
            Interpretation::Fail(why) => StepResult::Failed(StepStatus::InterpreterFailed, Some(tool), why),
        }
    }

    /// Numbers become numeric answers unless exactly one option carries that value.
    fn to_answer(&self, value: &Bound) -> Answer {
        match value {
            Bound::Label { value } => Answer::choice(value),
            Bound::Number { value } => {
                let hits: Vec<&Choice> =
                    self.choices.iter().filter(|c| parse_rational(c.text.trim()).as_ref() == Some(value)).collect();
                match hits.as_slice() {
                    [only] => Answer::choice(&only.label),
                    _ => Answer::numeric(value.clone()),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Interpretation {
    Expr(String),
    Rule(String),
    Fail(String),
}

/// Reads the interpreter reply: the first `EXPR:`, `RULE:` or `FAIL:` line.
pub fn parse_interpretation(text: &str) -> Interpretation {
    for line in text.lines().map(str::trim) {
        if let Some(e) = line.strip_prefix("EXPR:") {
            return Interpretation::Expr(e.trim().to_string());
        }
        if let Some(r) = line.strip_prefix("RULE:") {
            return Interpretation::Rule(r.trim().to_string());
        }
        if let Some(f) = line.strip_prefix("FAIL:") {
            return Interpretation::Fail(f.trim().to_string());
        }
    }
    Interpretation::Fail("unrecognized interpreter reply".into())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("inconsistent E3 counts: {0}")]
pub struct CountsError(pub String);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct E3Counts {
    pub n: u64,
    pub n_exec: u64,
    pub n_orig: u64,
    pub n_joint: u64,
    pub n_rec: u64,
}

impl E3Counts {
    /// Builds counts from per-problem `(executed_correct, original_correct)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = E3Counts::default();
        for (exec, orig) in pairs {
            c.n += 1;
            c.n_exec += exec as u64;
            c.n_orig += orig as u64;
            c.n_joint += (exec && orig) as u64;
            c.n_rec += (exec && !orig) as u64;
        }
        c
    }

    pub fn new(n: u64, n_exec: u64, n_orig: u64, n_joint: u64, n_rec: u64) -> Result<Self, CountsError> {
        let c = E3Counts { n, n_exec, n_orig, n_joint, n_rec };
        c.check()?;
        Ok(c)
    }

    pub fn check(&self) -> Result<(), CountsError> {
        let err = |m: &str| Err(CountsError(m.to_string()));
        if self.n_exec > self.n || self.n_orig > self.n {
            return err("counts exceed N");
        }
        if self.n_joint > self.n_exec.min(self.n_orig) {
            return err("N_joint > min(N_exec, N_orig)");
        }
        if self.n_rec > self.n_exec - self.n_joint {
            return err("N_rec > N_exec - N_joint");
        }
        if self.n_rec > self.n - self.n_orig {
            return err("N_rec > N - N_orig");
        }
        Ok(())
    }
}

/// The four E³ proportions; `None` where the denominator is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E3Metrics<T> {
    pub ea: Option<T>,
    pub oa: Option<T>,
    pub ec: Option<T>,
    pub err: Option<T>,
}

fn ratio<T: Scalar>(num: u64, den: u64) -> Option<T> {
    (den > 0).then(|| T::from_ratio(num as i64, den as i64))
}

pub fn score_e3<T: Scalar>(c: &E3Counts) -> E3Metrics<T> {
    E3Metrics {
        ea: ratio(c.n_exec, c.n),
        oa: ratio(c.n_orig, c.n),
        ec: ratio(c.n_joint, c.n_orig),
        err: ratio(c.n_rec, c.n - c.n_orig),
    }
}

/// Percentage with one decimal, or an em dash for undefined metrics.
pub fn format_percent<T: Scalar>(v: &Option<T>) -> String {
    match v {
        Some(x) => format!("{:.1}", x.to_f64() * 100.0),
        None => "\u{2014}".to_string(),
    }
}

impl<T: Scalar> E3Metrics<T> {
    pub fn percents(&self) -> [String; 4] {
        [format_percent(&self.ea), format_percent(&self.oa), format_percent(&self.ec), format_percent(&self.err)]
    }
}

/// Per-problem verification verdicts for one explanation strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E3Item {
    pub problem_id: String,
    pub strategy: String,
    pub executed_correct: bool,
    pub original_correct: bool,
}

/// Counts per strategy, in strategy name order.
pub fn counts_by_strategy(items: &[E3Item]) -> BTreeMap<String, E3Counts> {
    let mut grouped: BTreeMap<String, Vec<(bool, bool)>> = BTreeMap::new();
    for it in items {
        grouped.entry(it.strategy.clone()).or_default().push((it.executed_correct, it.original_correct));
    }
    grouped.into_iter().map(|(k, v)| (k, E3Counts::from_pairs(v))).collect()
}

/// Aggregates `(outcome, original_correct, gold)` triples. A prediction
/// counts toward N_exec only when it matches the gold answer.
pub fn score_outcomes<T: Scalar>(items: &[(VerificationOutcome, bool, Answer)], tol: &Tolerance) -> (E3Counts, E3Metrics<T>) {
    let counts = E3Counts::from_pairs(items.iter().map(|(o, orig, gold)| (o.is_correct(gold, tol), *orig)));
    let metrics = score_e3(&counts);
    (counts, metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::step_format::parse_spec;

    fn q(n: i64) -> Rational {
        Rational::from_integer(n.into())
    }

    fn run(src: &str, choices: Option<&[Choice]>) -> VerificationOutcome {
        blind_execute(&parse_spec(src).unwrap(), choices, None)
    }

    #[test]
    fn arithmetic_spec_produces_answer() {
        let out = run(
            "STEP 1: bind_given; out=a; expr=\"12\"\nSTEP 2: bind_given; out=b; expr=\"3\"\n\
             STEP 3: compute; in=a,b; out=c; expr=\"a*b+1\"\nSTEP 4: select_answer; in=c",
            None,
        );
        assert!(out.executable);
        assert!(out.blind);
        assert_eq!(out.predicted, Some(Answer::numeric(q(37))));
        assert_eq!(out.records[2].bound_output.as_ref().unwrap().value, Bound::number(q(37)));
    }

    #[test]
    fn terminal_compute_is_the_answer() {
        let out = run("STEP 1: bind_given; out=a; expr=\"5\"\nSTEP 2: compute; out=b; expr=\"a-7\"", None);
        assert_eq!(out.predicted, Some(Answer::numeric(q(-2))));
    }

    #[test]
    fn halts_at_first_failure() {
        let out = run(
            "STEP 1: bind_given; out=a; expr=\"5\"\nSTEP 2: compute; out=b; expr=\"a/0\"\nSTEP 3: compute; out=c; expr=\"a+1\"",
            None,
        );
        assert!(!out.executable);
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.records[1].status, StepStatus::ToolFailed);
        assert_eq!(out.predicted, None);
    }

    #[test]
    fn missing_payload_without_interpreter_fails() {
        let out = run("STEP 1: bind_given; out=a; expr=\"5\"\nSTEP 2: compute; out=b; desc=\"double it\"", None);
        assert_eq!(out.records[1].status, StepStatus::InterpreterFailed);
        assert!(!out.executable);
    }

    #[test]
    fn narrate_is_skipped() {
        let out = run("STEP 1: narrate; desc=\"think\"\nSTEP 2: bind_given; out=a; expr=\"2\"; select_answer", None);
        assert_eq!(out.records[0].status, StepStatus::SkippedNarrate);
        assert!(out.executable);
    }

    #[test]
    fn rule_picks_option_label() {
        let choices = vec![Choice::new("A", "6"), Choice::new("B", "8")];
        let out = run(
            "STEP 1: bind_given; out=a; expr=\"4\"\nSTEP 2: compute; out=b; expr=\"a*2\"\n\
             STEP 3: lookup_rule; in=b; out=pick; rule=\"equals(option, b)\"; select_answer",
            Some(&choices),
        );
        assert_eq!(out.predicted, Some(Answer::choice("B")));
    }

    #[test]
    fn numeric_result_maps_to_unique_option() {
        let choices = vec![Choice::new("A", "6"), Choice::new("B", "8")];
        let out = run("STEP 1: bind_given; out=a; expr=\"6\"; select_answer", Some(&choices));
        assert_eq!(out.predicted, Some(Answer::choice("A")));
    }

    #[test]
    fn interpreter_reply_parsing() {
        assert_eq!(parse_interpretation("ok\nEXPR: a + 1\n"), Interpretation::Expr("a + 1".into()));
        assert_eq!(parse_interpretation("RULE: equals(x, 2)"), Interpretation::Rule("equals(x, 2)".into()));
        assert!(matches!(parse_interpretation("no idea"), Interpretation::Fail(_)));
    }

    #[test]
    fn counts_from_pairs_respect_invariants() {
        let c = E3Counts::from_pairs([(true, true), (true, false), (false, true), (false, false)]);
        assert_eq!(c, E3Counts { n: 4, n_exec: 2, n_orig: 2, n_joint: 1, n_rec: 1 });
        assert!(c.check().is_ok());
        assert!(E3Counts::new(10, 5, 5, 6, 0).is_err());
        assert!(E3Counts::new(10, 5, 10, 5, 1).is_err());
    }

    #[test]
    fn undefined_metrics_render_as_dash() {
        let m = score_e3::<f64>(&E3Counts::new(4, 2, 4, 2, 0).unwrap());
        assert_eq!(m.err, None);
        assert_eq!(m.percents()[3], "\u{2014}");
        let m = score_e3::<f64>(&E3Counts::new(4, 0, 0, 0, 0).unwrap());
        assert_eq!(m.ec, None);
    }
}

//! Line-oriented text format for explanation specs, plus the leak linter.
//!
//! ```text
//! document = { line } ;
//! line     = blank | comment | header | step ;
//! comment  = "#" { char } ;
//! header   = "SPEC" ws hfield { ";" hfield } ;
//! hfield   = ( "problem" | "generator" ) "=" value ;
//! step     = "STEP" ws index ":" ws opcode { ";" item } ;
//! opcode   = "bind_given" | "compute" | "lookup_rule" | "select_answer" | "narrate" ;
//! item     = field | "select_answer" ;     (* flag: last line only *)
//! field    = ( "in" | "out" | "expr" | "rule" | "desc" ) "=" value ;
//! value    = quoted | bare ;
//! quoted   = '"' { char - ( '"' | "\" ) | "\" ( '"' | "\" | "n" | "t" | "r" ) } '"' ;
//! bare     = { char - ";" } ;               (* surrounding blanks trimmed *)
//! ```
//!
//! `in` holds a comma-separated identifier list and `out` one identifier.
//! A trailing `select_answer` flag on the final step appends a
//! `select_answer` step that consumes that step's output.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::model::{Answer, ExplanationSpec, Opcode, Problem, ReasoningStep};
use crate::scalar::{parse_rational, Rational};
use crate::whitebox::{Expr, Operand, RuleClause};

pub const GRAMMAR_EBNF: &str = r##"document = { line } ;
line     = blank | comment | header | step ;
comment  = "#" { char } ;
header   = "SPEC" ws hfield { ";" hfield } ;
hfield   = ( "problem" | "generator" ) "=" value ;
step     = "STEP" ws index ":" ws opcode { ";" item } ;
opcode   = "bind_given" | "compute" | "lookup_rule" | "select_answer" | "narrate" ;
item     = field | "select_answer" ;
field    = ( "in" | "out" | "expr" | "rule" | "desc" ) "=" value ;
value    = quoted | bare ;
quoted   = '"' { char - ( '"' | "\" ) | "\" ( '"' | "\" | "n" | "t" | "r" ) } '"' ;
bare     = { char - ";" } ;
"##;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParseDiagnostic {
    pub line: usize,
    pub column: usize,
    pub code: String,
    pub message: String,
    pub severity: Severity,
}

impl fmt::Display for ParseDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{}:{}: {sev}[{}]: {}", self.line, self.column, self.code, self.message)
    }
}

fn diag(line: usize, column: usize, code: &str, message: impl Into<String>) -> ParseDiagnostic {
    ParseDiagnostic { line, column, code: code.into(), message: message.into(), severity: Severity::Error }
}

struct Item {
    column: usize,
    key: Option<String>,
    value: String,
}

/// Splits the part of a line after the opcode/header keyword into
/// `;`-separated items, honoring quotes.
fn split_items(text: &str, base_col: usize, line: usize) -> Result<Vec<Item>, ParseDiagnostic> {
    let chars: Vec<char> = text.chars().collect();
    let mut items = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        while i < chars.len() && chars[i].is_whitespace() {
            i += 1;
        }
        if i >= chars.len() {
            break;
        }
        let start_col = base_col + i;
        let mut key = String::new();
        let mut value = String::new();
        let mut has_key = false;
        let mut quoted = false;
        while i < chars.len() && chars[i] != ';' {
            let c = chars[i];
            if !has_key && c == '=' {
                has_key = true;
                i += 1;
                while i < chars.len() && chars[i] == ' ' {
                    i += 1;
                }
                if i < chars.len() && chars[i] == '"' {
                    quoted = true;
                    let quote_col = base_col + i;
                    i += 1;
                    let mut closed = false;
                    while i < chars.len() {
                        match chars[i] {
                            '\\' => {
                                let esc = chars.get(i + 1).copied();
                                value.push(match esc {
                                    Some('n') => '\n',
                                    Some('t') => '\t',
                                    Some('r') => '\r',
                                    Some(e @ ('"' | '\\')) => e,
                                    Some(other) => {
                                        return Err(diag(line, base_col + i, "bad-escape", format!("unknown escape `\\{other}`")));
                                    }
                                    None => break,
                                });
                                i += 2;
                            }
                            '"' => {
                                closed = true;
                                i += 1;
                                break;
                            }
                            c => {
                                value.push(c);
                                i += 1;
                            }
                        }
                    }
                    if !closed {
                        return Err(diag(line, quote_col, "unterminated-string", "string is not closed"));
                    }
                    while i < chars.len() && chars[i] != ';' {
                        if !chars[i].is_whitespace() {
                            return Err(diag(line, base_col + i, "malformed-field", "text after closing quote"));
                        }
                        i += 1;
                    }
                    break;
                }
                continue;
            }
            if has_key {
                value.push(c);
            } else {
                key.push(c);
            }
            i += 1;
        }
        i += 1;
        if has_key {
            let value = if quoted { value } else { value.trim().to_string() };
            items.push(Item { column: start_col, key: Some(key.trim().to_string()), value });
        } else {
            items.push(Item { column: start_col, key: None, value: key.trim().to_string() });
        }
    }
    Ok(items)
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_alphabetic() || c == '_') && chars.all(|c| c.is_alphanumeric() || c == '_')
}

/// Parses the text format into a spec, or returns every error found.
pub fn parse_spec(source: &str) -> Result<ExplanationSpec, Vec<ParseDiagnostic>> {
    let mut diags = Vec::new();
    let mut steps: Vec<ReasoningStep> = Vec::new();
    let mut seen_indices: HashSet<usize> = HashSet::new();
    let mut problem_id = String::new();
    let mut generator = String::new();
    let mut select_flag: Option<(usize, usize)> = None;
    let mut last_step_line = 0;

    for (lineno, raw) in source.lines().enumerate() {
        let line = lineno + 1;
        let trimmed = raw.trim_start();
        let indent = raw.chars().count() - trimmed.chars().count();
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("SPEC") {
            if !rest.is_empty() && !rest.starts_with(char::is_whitespace) {
                diags.push(diag(line, indent + 1, "malformed-header", "expected `SPEC <fields>`"));
                continue;
            }
            match split_items(rest, indent + 5, line) {
                Ok(items) => {
                    for it in items {
                        match it.key.as_deref() {
                            Some("problem") => problem_id = it.value,
                            Some("generator") => generator = it.value,
                            _ => diags.push(diag(line, it.column, "malformed-header", "header fields are `problem` and `generator`")),
                        }
                    }
                }
                Err(d) => diags.push(d),
            }
            continue;
        }
        let Some(rest) = trimmed.strip_prefix("STEP") else {
            diags.push(diag(line, indent + 1, "malformed-step-header", "line must start with `STEP <n>:`"));
            continue;
        };
        if select_flag.is_some() {
            let (l, c) = select_flag.take().expect("checked");
            diags.push(diag(l, c, "misplaced-select-flag", "`select_answer` flag is only allowed on the final step"));
        }
        let Some(colon) = rest.find(':') else {
            diags.push(diag(line, indent + 1, "malformed-step-header", "missing `:` after step index"));
            continue;
        };
        let index_text = rest[..colon].trim();
        let Ok(index) = index_text.parse::<usize>() else {
            diags.push(diag(line, indent + 5, "malformed-step-header", format!("bad step index `{index_text}`")));
            continue;
        };
        if !rest[..colon].starts_with(char::is_whitespace) {
            diags.push(diag(line, indent + 5, "malformed-step-header", "expected a space after `STEP`"));
            continue;
        }
        let body_col = indent + 4 + rest[..=colon].chars().count() + 1;
        let items = match split_items(&rest[colon + 1..], body_col, line) {
            Ok(items) => items,
            Err(d) => {
                diags.push(d);
                continue;
            }
        };
        let mut items = items.into_iter();
        let Some(op_item) = items.next().filter(|it| it.key.is_none()) else {
            diags.push(diag(line, body_col, "unknown-opcode", "missing opcode"));
            continue;
        };
        let Some(opcode) = Opcode::parse(&op_item.value) else {
            diags.push(diag(line, op_item.column, "unknown-opcode", format!("unknown opcode `{}`", op_item.value)));
            continue;
        };

        if !seen_indices.insert(index) {
            diags.push(diag(line, indent + 6, "duplicate-index", format!("step {index} appears twice")));
            continue;
        }
        let expected = steps.len() + 1;
        if index != expected {
            diags.push(diag(line, indent + 6, "non-contiguous-index", format!("expected step {expected}, found {index}")));
        }

        let mut step = ReasoningStep::new(index, opcode);
        let mut seen_keys = BTreeSet::new();
        for it in items {
            let Some(key) = it.key else {
                if it.value == "select_answer" {
                    select_flag = Some((line, it.column));
                } else {
                    diags.push(diag(line, it.column, "malformed-field", format!("expected `key=value`, found `{}`", it.value)));
                }
                continue;
            };
            if !seen_keys.insert(key.clone()) {
                diags.push(diag(line, it.column, "duplicate-field", format!("`{key}` given twice")));
                continue;
            }
            match key.as_str() {
                "in" => {
                    let names: Vec<String> =
                        it.value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                    if let Some(bad) = names.iter().find(|n| !is_identifier(n)) {
                        diags.push(diag(line, it.column, "bad-identifier", format!("`{bad}` is not an identifier")));
                    }
                    step.inputs = names;
                }
                "out" => {
                    if !is_identifier(&it.value) {
                        diags.push(diag(line, it.column, "bad-identifier", format!("`{}` is not an identifier", it.value)));
                    }
                    step.output = Some(it.value);
                }
                "expr" => step.expression = Some(it.value),
                "rule" => step.rule = Some(it.value),
                "desc" => step.description = it.value,
                other => diags.push(diag(line, it.column, "unknown-field", format!("unknown field `{other}`"))),
            }
        }
        last_step_line = line;
        steps.push(step);
    }

    if let Some((l, c)) = select_flag {
        match steps.last().and_then(|s| s.output.clone()) {
            Some(out) if l == last_step_line && steps.last().is_some_and(|s| s.opcode != Opcode::SelectAnswer) => {
                let index = steps.len() + 1;
                steps.push(ReasoningStep::new(index, Opcode::SelectAnswer).with_inputs(&[out.as_str()]));
            }
            _ => diags.push(diag(l, c, "misplaced-select-flag", "`select_answer` flag needs a final step with an output")),
        }
    }

    if steps.is_empty() && diags.is_empty() {
        diags.push(diag(1, 1, "empty-spec", "no steps found"));
    }
    if diags.is_empty() {
        Ok(ExplanationSpec { problem_id, steps, generator })
    } else {
        diags.sort_by(|a, b| (a.line, a.column, &a.code).cmp(&(b.line, b.column, &b.code)));
        Err(diags)
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Canonical text of one step, without the `STEP n:` prefix.
pub fn serialize_step_body(step: &ReasoningStep) -> String {
    let mut parts = vec![step.opcode.as_str().to_string()];
    if !step.inputs.is_empty() {
        parts.push(format!("in={}", step.inputs.join(",")));
    }
    if let Some(o) = &step.output {
        parts.push(format!("out={o}"));
    }
    if let Some(e) = &step.expression {
        parts.push(format!("expr={}", quote(e)));
    }
    if let Some(r) = &step.rule {
        parts.push(format!("rule={}", quote(r)));
    }
    if !step.description.is_empty() {
        parts.push(format!("desc={}", quote(&step.description)));
    }
    parts.join("; ")
}

pub fn serialize_step(step: &ReasoningStep) -> String {
    format!("STEP {}: {}", step.index, serialize_step_body(step))
}

/// Canonical text form; `parse_spec(serialize_spec(s)) == s` for valid specs.
pub fn serialize_spec(spec: &ExplanationSpec) -> String {
    let mut out = format!("SPEC problem={}; generator={}\n", quote(&spec.problem_id), quote(&spec.generator));
    for step in &spec.steps {
        out.push_str(&serialize_step(step));
        out.push('\n');
    }
    out
}

/// Parses a reference procedure stored one step record per entry.
pub fn parse_reference(problem: &Problem) -> Result<ExplanationSpec, Vec<ParseDiagnostic>> {
    let body = problem.reference_steps.join("\n");
    let mut spec = parse_spec(&body)?;
    spec.problem_id = problem.id.clone();
    spec.generator = "reference".into();
    Ok(spec)
}

/// A linter finding attached to a step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Finding {
    pub step: usize,
    pub code: String,
    pub message: String,
    pub severity: Severity,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "step {}: {sev}[{}]: {}", self.step, self.code, self.message)
    }
}

/// Numerals that stand alone as words ("12", "3.5", "1,000", "2/3");
/// digits glued to letters ("2nd", "x2") are not numerals.
pub fn numerals(text: &str) -> Vec<Rational> {
    numeral_spans(text).into_iter().map(|(_, v)| v).collect()
}

/// Like [`numerals`], with the byte range each numeral occupies.
pub fn numeral_spans(text: &str) -> Vec<(Range<usize>, Rational)> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let byte_at = |i: usize| chars.get(i).map_or(text.len(), |(b, _)| *b);
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i].1;
        let prev_alnum = i > 0 && (chars[i - 1].1.is_alphanumeric() || chars[i - 1].1 == '_');
        if !c.is_ascii_digit() || prev_alnum {
            i += 1;
            continue;
        }
        let start = i;
        let mut token = String::new();
        while i < chars.len() {
            let ch = chars[i].1;
            let next_digit = chars.get(i + 1).is_some_and(|n| n.1.is_ascii_digit());
            if ch.is_ascii_digit() {
                token.push(ch);
                i += 1;
            } else if ch == ',' && next_digit && chars[i + 1..].iter().take_while(|d| d.1.is_ascii_digit()).count() == 3 {
                i += 1;
            } else if (ch == '.' || ch == '/') && next_digit {
                token.push(ch);
                i += 1;
            } else {
                break;
            }
        }
        let glued = chars.get(i).is_some_and(|n| n.1.is_alphabetic() || n.1 == '_');
        if glued {
            while i < chars.len() && chars[i].1.is_alphanumeric() {
                i += 1;
            }
            continue;
        }
        if let Some(v) = parse_rational(&token) {
            out.push((byte_at(start)..byte_at(i), v));
        }
    }
    out
}

fn label_assertions(text: &str, labels: &BTreeSet<String>) -> Vec<String> {
    let words: Vec<String> = text
        .split(|c: char| !(c.is_alphanumeric() || c == '(' || c == ')'))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect();
    let mut hits = Vec::new();
    for (i, w) in words.iter().enumerate() {
        let bare = w.trim_matches(|c| c == '(' || c == ')');
        let parenthesized = w.starts_with('(') && w.ends_with(')') && w.len() > 2;
        let after_cue = i > 0 && {
            let prev = words[i - 1].to_lowercase();
            let prev2 = if i > 1 { words[i - 2].to_lowercase() } else { String::new() };
            ["option", "choice", "answer"].contains(&prev.as_str())
                || (prev == "is" && ["option", "choice", "answer"].contains(&prev2.as_str()))
        };
        if labels.contains(bare) && (parenthesized || after_cue) {
            hits.push(bare.to_string());
        }
    }
    hits
}

/// Flags steps that reveal computed values or the answer.
pub fn lint_leaks(spec: &ExplanationSpec, problem: &Problem) -> Vec<Finding> {
    let statement_values: Vec<Rational> = numerals(&problem.statement);
    let mut given_values: Vec<Rational> = Vec::new();
    for step in spec.steps.iter().filter(|s| s.opcode == Opcode::BindGiven) {
        if let Some(e) = step.expression.as_deref().and_then(|e| Expr::parse(e).ok()) {
            if let Ok(v) = e.eval(&Default::default()) {
                given_values.push(v.value);
            }
        }
    }
    let gold_value = match &problem.answer {
        Answer::Numeric { value } => Some(value.clone()),
        Answer::Choice { .. } => None,
    };
    let labels: BTreeSet<String> = problem.choices.iter().map(|c| c.label.clone()).collect();
    let gold_label = match &problem.answer {
        Answer::Choice { label } => Some(label.clone()),
        Answer::Numeric { .. } => None,
    };

    let mut findings = BTreeSet::new();
    let mut push = |step: usize, code: &str, message: String| {
        findings.insert(Finding { step, code: code.into(), message, severity: Severity::Error });
    };

    for step in &spec.steps {
        let t = step.index;
        let mut literals: Vec<Rational> = Vec::new();
        if let Some(e) = step.expression.as_deref().and_then(|e| Expr::parse(e).ok()) {
            literals.extend(e.literals());
        }
        if let Some(r) = step.rule.as_deref().and_then(|r| RuleClause::parse(r).ok()) {
            for op in r.operands() {
                match op {
                    Operand::Number(n) => literals.push(n.clone()),
                    Operand::Text(txt) => {
                        literals.extend(numerals(txt));
                        if step.opcode != Opcode::SelectAnswer && labels.contains(&txt.trim().to_uppercase()) {
                            let label = txt.trim().to_uppercase();
                            if Some(&label) == gold_label.as_ref() {
                                push(t, "answer-leak", format!("rule asserts the answer label {label}"));
                            } else {
                                push(t, "choice-assertion", format!("rule asserts option {label}"));
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
        let desc_values = numerals(&step.description);

        if let Some(gold) = &gold_value {
            let restated_given =
                step.opcode == Opcode::BindGiven && statement_values.contains(gold);
            if !restated_given && (literals.contains(gold) || desc_values.contains(gold)) {
                push(t, "answer-leak", format!("step reveals the answer {}", problem.answer));
                continue;
            }
        }

        let code = match step.opcode {
            Opcode::Compute => Some("literal-in-compute"),
            Opcode::Narrate => Some("literal-in-narrate"),
            Opcode::SelectAnswer => Some("literal-in-select"),
            _ => None,
        };
        if let Some(code) = code {
            for v in literals.iter().chain(desc_values.iter()) {
                if !given_values.contains(v) && !statement_values.contains(v) {
                    push(t, code, format!("literal {} is neither given nor in the problem", crate::scalar::format_rational(v)));
                }
            }
        }

        if step.opcode != Opcode::SelectAnswer && !labels.is_empty() {
            for label in label_assertions(&step.description, &labels) {
                if Some(&label) == gold_label.as_ref() {
                    push(t, "answer-leak", format!("step asserts the answer label {label}"));
                } else {
                    push(t, "choice-assertion", format!("step asserts option {label} before select_answer"));
                }
            }
        }
    }
    findings.into_iter().collect()
}

/// Warnings that never fail verification: outputs nobody reads.
pub fn lint_warnings(spec: &ExplanationSpec) -> Vec<Finding> {
    let mut readers: BTreeMap<String, usize> = BTreeMap::new();
    for step in &spec.steps {
        if let Ok(vars) = step.consumed_variables() {
            for v in vars {
                *readers.entry(v).or_default() += 1;
            }
        }
    }
    let final_compute = spec
        .steps
        .iter()
        .rev()
        .find(|s| s.opcode != Opcode::Narrate)
        .map(|s| s.index);
    spec.steps
        .iter()
        .filter_map(|s| {
            let out = s.output.as_ref()?;
            if readers.contains_key(out) || Some(s.index) == final_compute {
                return None;
            }
            Some(Finding {
                step: s.index,
                code: "unused-variable".into(),
                message: format!("`{out}` is never used"),
                severity: Severity::Warning,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_spec, Choice};

    fn q(n: i64) -> Rational {
        Rational::from_integer(n.into())
    }

    #[test]
    fn trailing_select_flag_expands_to_three_steps() {
        let src = "STEP 1: bind_given; out=a; expr=\"12\"\nSTEP 2: compute; in=a; out=b; expr=\"a*2\"; select_answer\n";
        let spec = parse_spec(src).unwrap();
        assert_eq!(spec.steps.len(), 3);
        assert_eq!(spec.steps[2].opcode, Opcode::SelectAnswer);
        assert_eq!(spec.steps[2].inputs, vec!["b"]);
        assert_eq!(spec.steps[2].index, 3);
        assert!(validate_spec(&spec).is_empty());
    }

    #[test]
    fn gap_in_indices() {
        let src = "STEP 1: bind_given; out=a; expr=\"1\"\nSTEP 3: compute; in=a; out=b; expr=\"a+1\"\n";
        let err = parse_spec(src).unwrap_err();
        assert_eq!(err.len(), 1);
        assert_eq!(err[0].code, "non-contiguous-index");
        assert_eq!((err[0].line, err[0].column), (2, 6));
    }

    #[test]
    fn empty_source() {
        let err = parse_spec("").unwrap_err();
        assert_eq!(err[0].code, "empty-spec");
        assert_eq!(parse_spec("# only a comment\n\n").unwrap_err()[0].code, "empty-spec");
    }

    #[test]
    fn distinct_error_codes() {
        let cases = [
            ("STEP 1: bind_given; out=a; expr=\"1\"\nSTEP 1: narrate\n", "duplicate-index"),
            ("STEP 1: frobnicate; out=a\n", "unknown-opcode"),
            ("STEP one: narrate\n", "malformed-step-header"),
            ("STPE 1: narrate\n", "malformed-step-header"),
            ("STEP 1 narrate\n", "malformed-step-header"),
            ("STEP 1: narrate; desc=\"open\n", "unterminated-string"),
            ("STEP 1: narrate; colour=red\n", "unknown-field"),
            ("STEP 1: compute; out=a; out=b; expr=\"1\"\n", "duplicate-field"),
            ("STEP 1: compute; out=2a; expr=\"1\"\n", "bad-identifier"),
            ("STEP 1: compute; out=a; expr=\"1\"; select_answer\nSTEP 2: narrate\n", "misplaced-select-flag"),
        ];
        for (src, code) in cases {
            let err = parse_spec(src).unwrap_err();
            assert!(err.iter().any(|d| d.code == code), "{src:?} -> {err:?}");
            assert!(err.iter().all(|d| d.line >= 1 && d.column >= 1));
        }
    }

    #[test]
    fn header_and_quoting() {
        let src = "SPEC problem=\"gsm-7\"; generator=cot\n# comment\nSTEP 1: narrate; desc=\"a; b \\\"c\\\" \\\\ d\"\nSTEP 2: bind_given; out=x; expr=3\n";
        let spec = parse_spec(src).unwrap();
        assert_eq!(spec.problem_id, "gsm-7");
        assert_eq!(spec.generator, "cot");
        assert_eq!(spec.steps[0].description, "a; b \"c\" \\ d");
        assert_eq!(spec.steps[1].expression.as_deref(), Some("3"));
    }

    #[test]
    fn serialization_is_canonical_and_stable() {
        let spec = ExplanationSpec {
            problem_id: "p".into(),
            generator: "g".into(),
            steps: vec![ReasoningStep::new(1, Opcode::Narrate).with_description("ünïcödé · 数学")],
        };
        let text = serialize_spec(&spec);
        assert_eq!(text.lines().filter(|l| l.starts_with("STEP")).count(), 1);
        assert_eq!(text, serialize_spec(&spec));
        assert_eq!(parse_spec(&text).unwrap(), spec);
    }

    #[test]
    fn four_step_round_trip() {
        let spec = ExplanationSpec {
            problem_id: "p4".into(),
            generator: "plan_and_solve".into(),
            steps: vec![
                ReasoningStep::new(1, Opcode::BindGiven).with_output("price").with_expression("15").with_description("unit price"),
                ReasoningStep::new(2, Opcode::BindGiven).with_output("qty").with_expression("4"),
                ReasoningStep::new(3, Opcode::Compute).with_inputs(&["price", "qty"]).with_output("total").with_expression("price * qty"),
                ReasoningStep::new(4, Opcode::SelectAnswer).with_inputs(&["total"]),
            ],
        };
        assert_eq!(parse_spec(&serialize_spec(&spec)).unwrap(), spec);
    }

    fn problem(statement: &str, gold: i64) -> Problem {
        Problem::numeric("p", statement, q(gold), vec![])
    }

    fn spec_of(steps: Vec<ReasoningStep>) -> ExplanationSpec {
        ExplanationSpec { problem_id: "p".into(), generator: String::new(), steps }
    }

    #[test]
    fn literal_in_compute_is_flagged() {
        let spec = spec_of(vec![
            ReasoningStep::new(1, Opcode::BindGiven).with_output("a").with_expression("12"),
            ReasoningStep::new(2, Opcode::Compute).with_inputs(&["a"]).with_output("b").with_expression("a*2+42"),
        ]);
        let p = problem("Tom has 12 apples and buys twice as many, 2 times.", 66);
        let findings = lint_leaks(&spec, &p);
        assert_eq!(findings.len(), 1, "{findings:?}");
        assert_eq!(findings[0].code, "literal-in-compute");
        assert_eq!(findings[0].step, 2);
    }

    #[test]
    fn restated_given_is_permitted() {
        let spec = spec_of(vec![
            ReasoningStep::new(1, Opcode::BindGiven).with_output("price").with_expression("15"),
            ReasoningStep::new(2, Opcode::SelectAnswer).with_inputs(&["price"]),
        ]);
        let p = problem("A pen costs 15 dollars. What does it cost?", 15);
        assert!(lint_leaks(&spec, &p).is_empty());
    }

    #[test]
    fn narrated_answer_leaks() {
        let spec = spec_of(vec![
            ReasoningStep::new(1, Opcode::BindGiven).with_output("a").with_expression("12"),
            ReasoningStep::new(2, Opcode::Compute).with_inputs(&["a"]).with_output("b").with_expression("a*2"),
            ReasoningStep::new(3, Opcode::Narrate).with_description("so we get 24 apples in total"),
            ReasoningStep::new(4, Opcode::SelectAnswer).with_inputs(&["b"]),
        ]);
        let p = problem("Tom has 12 apples and 2 baskets.", 24);
        let findings = lint_leaks(&spec, &p);
        assert_eq!(findings.iter().map(|f| (f.step, f.code.as_str())).collect::<Vec<_>>(), vec![(3, "answer-leak")]);
    }

    #[test]
    fn ordinals_are_not_numerals() {
        assert_eq!(numerals("the 2nd and 3rd items, x2 and 4"), vec![q(4)]);
        assert_eq!(numerals("costs 1,250 dollars or 2.5 or 3/4."), vec![q(1250), Rational::new(5.into(), 2.into()), Rational::new(3.into(), 4.into())]);
    }

    #[test]
    fn choice_assertions_before_select() {
        let mut p = Problem::multiple_choice("m", "Which day?", "B", vec![Choice::new("A", "Monday"), Choice::new("B", "Friday")], vec![]);
        p.statement = "Which day comes after Thursday?".into();
        let spec = spec_of(vec![
            ReasoningStep::new(1, Opcode::Narrate).with_description("Option A does not fit"),
            ReasoningStep::new(2, Opcode::Narrate).with_description("so the answer is (B)"),
        ]);
        let codes: Vec<(usize, String)> = lint_leaks(&spec, &p).into_iter().map(|f| (f.step, f.code)).collect();
        assert_eq!(codes, vec![(1, "choice-assertion".to_string()), (2, "answer-leak".to_string())]);
    }

    #[test]
    fn unused_outputs_warn() {
        let spec = spec_of(vec![
            ReasoningStep::new(1, Opcode::BindGiven).with_output("a").with_expression("12"),
            ReasoningStep::new(2, Opcode::BindGiven).with_output("unused").with_expression("3"),
            ReasoningStep::new(3, Opcode::Compute).with_inputs(&["a"]).with_output("b").with_expression("a*2"),
        ]);
        let w = lint_warnings(&spec);
        assert_eq!(w.len(), 1);
        assert_eq!((w[0].step, w[0].severity), (2, Severity::Warning));
    }
}

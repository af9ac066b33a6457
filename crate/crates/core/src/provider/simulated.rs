//! A deterministic, rule-based stand-in for a language model.
//!
//! It knows the reference procedures of a fixed problem set and answers every
//! built-in template without network access. Behaviour that a real model
//! shows by chance is drawn from a keyed hash instead of a random generator,
//! so replies depend only on the request content and the profile seed:
//!
//! * each failure mode has trigger keywords and a failure rate; a problem
//!   whose text mentions a trigger is solved with a corrupted operation at
//!   that rate,
//! * a small slip rate makes the model misreport an answer its own spec
//!   computes correctly, and a drop rate makes it omit a binding so the
//!   spec no longer executes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{templates, Backend, ProviderError, ProviderRequest};
use crate::executor::{blind_execute, StepStatus};
use crate::model::{Answer, Choice, ExplanationSpec, Opcode, Problem, ReasoningStep};
use crate::protocol::{
    parse_choices, parse_givens, render_candidate, render_rewrite, Candidate, Rewrite,
};
use crate::scalar::{format_rational, Rational};
use crate::step_format::{numeral_spans, parse_reference, parse_spec, serialize_spec};
use crate::text::{mentions, sentences, token_overlap};
use crate::whitebox::{BinOp, Bound, Expr};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMode {
    pub name: String,
    pub error_type: String,
    pub complexity: String,
    pub description: String,
    pub keywords: Vec<String>,
    /// Sentence added to a problem to introduce the condition.
    pub trigger: String,
    pub fail_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimProfile {
    pub seed: u64,
    pub slip_rate: f64,
    pub drop_rate: f64,
    pub narrate_rate: f64,
    pub modes: Vec<SimMode>,
}

fn mode(name: &str, error_type: &str, complexity: &str, description: &str, keyword: &str, trigger: &str, rate: f64) -> SimMode {
    SimMode {
        name: name.into(),
        error_type: error_type.into(),
        complexity: complexity.into(),
        description: description.into(),
        keywords: vec![keyword.into()],
        trigger: trigger.into(),
        fail_rate: rate,
    }
}

impl Default for SimProfile {
    fn default() -> Self {
        SimProfile {
            seed: 17,
            slip_rate: 0.08,
            drop_rate: 0.06,
            narrate_rate: 0.3,
            modes: vec![
                mode(
                    "Distractor Quantity",
                    "Misinterpretation",
                    "Medium",
                    "an irrelevant figure is mentioned and gets folded into the computation",
                    "unrelated",
                    "An unrelated total is printed on the receipt as well.",
                    0.55,
                ),
                mode(
                    "Unit Conversion",
                    "Calculation Error",
                    "High",
                    "quantities are described in mixed units and the conversion is skipped",
                    "converted",
                    "Some amounts were converted from another unit before being written down.",
                    0.4,
                ),
                mode(
                    "Exception Clause",
                    "Logical Error",
                    "Medium",
                    "an exception clause flips which quantities should be combined",
                    "except",
                    "Everything counts except items that were returned, and none were.",
                    0.3,
                ),
                mode(
                    "Revised Schedule",
                    "Misinterpretation",
                    "Low",
                    "a remark about revisions makes the order of operations unclear",
                    "meanwhile",
                    "Meanwhile, the plan was revised twice without changing any numbers.",
                    0.18,
                ),
                mode(
                    "Rounding Remark",
                    "Calculation Error",
                    "Low",
                    "a remark about rounding invites premature rounding",
                    "rounded",
                    "The clerk usually rounded figures on the invoice.",
                    0.1,
                ),
            ],
        }
    }
}

const ROSTER: [&str; 16] = [
    "Ava", "Ben", "Chen", "Dara", "Eli", "Fatima", "Gus", "Hana", "Ivan", "Jo", "Kofi", "Lena", "Mateo", "Nia", "Omar", "Priya",
];

struct Knowledge {
    reference: ExplanationSpec,
    /// For each step position: index of the statement numeral it binds.
    slots: Vec<Option<usize>>,
}

pub struct SimulatedBackend {
    profile: SimProfile,
    knowledge: HashMap<String, Knowledge>,
}

impl SimulatedBackend {
    /// Learns the reference procedures of `problems`. Problems whose
    /// reference does not parse are simply unknown to the model.
    pub fn new(problems: &[Problem], profile: SimProfile) -> Self {
        let mut knowledge = HashMap::new();
        let mut this = SimulatedBackend { profile, knowledge: HashMap::new() };
        for p in problems {
            let Ok(reference) = parse_reference(p) else { continue };
            let core = this.core_text(&p.statement);
            let values: Vec<Rational> = numeral_spans(&core).into_iter().map(|(_, v)| v).collect();
            let mut used = vec![false; values.len()];
            let slots = reference
                .steps
                .iter()
                .map(|s| {
                    let v = literal_of(s)?;
                    let i = (0..values.len()).find(|&i| !used[i] && values[i] == v)?;
                    used[i] = true;
                    Some(i)
                })
                .collect();
            knowledge.insert(this.skeleton(&p.statement), Knowledge { reference, slots });
        }
        this.knowledge = knowledge;
        this
    }

    pub fn profile(&self) -> &SimProfile {
        &self.profile
    }

    fn unit(&self, parts: &[&str]) -> f64 {
        let mut h = Sha256::new();
        h.update(self.profile.seed.to_le_bytes());
        for p in parts {
            h.update(p.as_bytes());
            h.update([0u8]);
        }
        let d = h.finalize();
        let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        (x >> 11) as f64 / (1u64 << 53) as f64
    }

    fn is_trigger_sentence(&self, s: &str) -> bool {
        self.profile.modes.iter().any(|m| m.keywords.iter().any(|k| mentions(s, k)))
    }

    /// The statement without sentences that only carry a failure trigger.
    fn core_text(&self, statement: &str) -> String {
        sentences(statement).into_iter().filter(|s| !self.is_trigger_sentence(s)).collect::<Vec<_>>().join(" ")
    }

    fn skeleton(&self, statement: &str) -> String {
        let core = self.core_text(statement);
        let mut masked = String::new();
        let mut last = 0;
        for (r, _) in numeral_spans(&core) {
            masked.push_str(&core[last..r.start]);
            masked.push('#');
            last = r.end;
        }
        masked.push_str(&core[last..]);
        masked
            .split_whitespace()
            .map(|w| {
                let bare = w.trim_matches(|c: char| !c.is_alphanumeric());
                if ROSTER.contains(&bare) {
                    w.replace(bare, "@")
                } else {
                    w.to_lowercase()
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn triggered(&self, statement: &str) -> Vec<&SimMode> {
        self.profile.modes.iter().filter(|m| m.keywords.iter().any(|k| mentions(statement, k))).collect()
    }

    fn find_mode(&self, name: &str) -> Option<&SimMode> {
        let name = name.trim().to_lowercase();
        self.profile.modes.iter().find(|m| m.name.to_lowercase() == name)
    }

    fn explain(&self, req: &ProviderRequest, strategy: &str) -> String {
        let statement = req.get("problem");
        let choices = parse_choices(req.get("choices"));
        let Some(k) = self.knowledge.get(&self.skeleton(statement)) else {
            return "I could not turn this problem into a procedure.\nANSWER: unknown\n".into();
        };
        let values: Vec<Rational> = numeral_spans(&self.core_text(statement)).into_iter().map(|(_, v)| v).collect();
        let mut spec = k.reference.clone();
        for (step, slot) in spec.steps.iter_mut().zip(&k.slots) {
            if let Some(v) = slot.and_then(|i| values.get(i)) {
                step.expression = Some(format_rational(v));
            }
        }
        let opts = (!choices.is_empty()).then_some(choices.as_slice());
        let truth = blind_execute(&spec, opts, None).predicted;

        let key = format!("{strategy}|{}|{statement}", req.get("sample"));
        let failing = self.triggered(statement).into_iter().any(|m| self.unit(&["fail", &key, &m.name]) < m.fail_rate);
        let answer = if failing && corrupt(&mut spec) {
            blind_execute(&spec, opts, None)
                .predicted
                .filter(|a| Some(a) != truth.as_ref())
                .or_else(|| truth.as_ref().map(|t| shifted(t, &choices)))
        } else if self.unit(&["slip", &key]) < self.profile.slip_rate {
            truth.as_ref().map(|t| shifted(t, &choices))
        } else {
            truth.clone()
        };
        if self.unit(&["drop", &key]) < self.profile.drop_rate {
            if let Some(pos) = spec.steps.iter().position(|s| s.opcode == Opcode::BindGiven) {
                spec.steps.remove(pos);
            }
        }
        if self.unit(&["narrate", &key]) < self.profile.narrate_rate {
            spec.steps.insert(
                0,
                ReasoningStep::new(0, Opcode::Narrate).with_description("restate what the question asks for"),
            );
        }
        for (i, s) in spec.steps.iter_mut().enumerate() {
            s.index = i + 1;
        }
        spec.problem_id.clear();
        spec.generator = strategy.to_string();
        let answer_text = answer.map(|a| a.canonical_text()).unwrap_or_else(|| "unknown".into());
        format!("{}ANSWER: {answer_text}\n", serialize_spec(&spec))
    }

    fn perturb(&self, req: &ProviderRequest) -> String {
        let statement = req.get("problem");
        let givens = parse_givens(req.get("givens"));
        let kind = req.get("kind");
        let mut mag = match req.get("regime") {
            "mild" => 0.2,
            "aggressive" => 1.0,
            _ => 0.5,
        };
        if kind == "condition_adjustment" {
            mag *= 1.5;
        }
        let key = format!("{statement}|{kind}|{}|{}|{}", req.get("regime"), req.get("index"), req.get("attempt"));
        let changing: Vec<&(String, Rational)> =
            if kind == "entity_substitution" { givens.iter().take(1).collect() } else { givens.iter().collect() };

        let spans = numeral_spans(statement);
        let mut used = vec![false; spans.len()];
        let mut edits: Vec<(std::ops::Range<usize>, String)> = Vec::new();
        let mut sets = std::collections::BTreeMap::new();
        for (name, v) in changing {
            let Some(i) = (0..spans.len()).find(|&i| !used[i] && &spans[i].1 == v) else { continue };
            used[i] = true;
            let nv = vary(v, self.unit(&["perturb", &key, name]), mag);
            edits.push((spans[i].0.clone(), format_rational(&nv)));
            sets.insert(name.clone(), nv);
        }
        if sets.is_empty() {
            return "FAIL: no stated quantity to vary\n".into();
        }
        edits.sort_by_key(|(r, _)| std::cmp::Reverse(r.start));
        let mut text = statement.to_string();
        for (r, s) in edits {
            text.replace_range(r, &s);
        }
        if kind == "entity_substitution" {
            let shift = 1 + (self.unit(&["names", &key]) * (ROSTER.len() - 1) as f64) as usize;
            text = rename(&text, shift);
        }

        let choices = parse_choices(req.get("choices"));
        let choices = if choices.is_empty() { choices } else { shift_choices(req.get("reference"), &givens, &sets, &choices) };
        render_rewrite(&Rewrite { statement: text, sets, choices })
    }

    fn mode_keywords(&self, req: &ProviderRequest) -> Vec<String> {
        match self.find_mode(req.get("mode")) {
            Some(m) => m.keywords.clone(),
            None => req.get("keywords").split(',').map(|k| k.trim().to_lowercase()).filter(|k| !k.is_empty()).collect(),
        }
    }

    fn inject(&self, req: &ProviderRequest) -> String {
        let statement = req.get("problem");
        let keywords = self.mode_keywords(req);
        if keywords.iter().any(|k| mentions(statement, k)) {
            return "FAIL: the condition is already present\n".into();
        }
        let trigger = match self.find_mode(req.get("mode")) {
            Some(m) => m.trigger.clone(),
            None => match keywords.first() {
                Some(k) => format!("Note the {k} detail."),
                None => return "FAIL: no trigger known for this condition\n".into(),
            },
        };
        let mut parts: Vec<String> = sentences(statement).into_iter().map(str::to_string).collect();
        let at = parts.len().saturating_sub(1);
        parts.insert(at, trigger);
        format!("STATEMENT: {}\n", parts.join(" "))
    }

    fn remove(&self, req: &ProviderRequest) -> String {
        let statement = req.get("problem");
        let keywords = self.mode_keywords(req);
        let all = sentences(statement);
        let kept: Vec<&str> = all.iter().copied().filter(|s| !keywords.iter().any(|k| mentions(s, k))).collect();
        if kept.len() == all.len() {
            return "FAIL: the condition does not occur\n".into();
        }
        format!("STATEMENT: {}\n", kept.join(" "))
    }

    fn discover(&self, req: &ProviderRequest) -> String {
        let statement = req.get("problem");
        let lines: Vec<String> = self
            .triggered(statement)
            .into_iter()
            .map(|m| {
                let name = if self.unit(&["alias", statement, &m.name]) < 0.3 { format!("{} Error", m.name) } else { m.name.clone() };
                render_candidate(&Candidate {
                    name,
                    error_type: m.error_type.clone(),
                    complexity: m.complexity.clone(),
                    keywords: m.keywords.clone(),
                    description: m.description.clone(),
                })
            })
            .collect();
        if lines.is_empty() {
            "NONE\n".into()
        } else {
            lines.join("\n") + "\n"
        }
    }

    /// Reads the structure like a careful analyst: the answer-producing
    /// final step must sit on a reliable node, and the trace should cover
    /// the longest chain of reliable nodes. Unmatched steps get weight 0.5.
    fn predict(&self, req: &ProviderRequest) -> String {
        let structure: serde_json::Value = serde_json::from_str(req.get("structure")).unwrap_or_default();
        let nodes: Vec<(String, f64)> = structure
            .get("nodes")
            .and_then(|n| n.as_array())
            .into_iter()
            .flatten()
            .filter_map(|n| Some((n.get("text")?.as_str()?.to_string(), n.get("weight")?.as_f64()?)))
            .collect();
        let edges: Vec<(usize, usize)> = structure
            .get("edges")
            .and_then(|e| e.as_array())
            .into_iter()
            .flatten()
            .filter_map(|e| Some((e.get(0)?.as_u64()? as usize, e.get(1)?.as_u64()? as usize)))
            .filter(|(a, b)| *a < nodes.len() && *b < nodes.len())
            .collect();
        let steps: Vec<&str> = req
            .get("trace")
            .lines()
            .map(|l| l.trim())
            .filter(|l| !l.is_empty())
            .map(|l| l.split_once(". ").map_or(l, |(n, rest)| if n.chars().all(|c| c.is_ascii_digit()) { rest } else { l }))
            .collect();
        if steps.is_empty() {
            return "P: 0.050\n".into();
        }
        let best = |s: &str| {
            nodes
                .iter()
                .enumerate()
                .map(|(i, (t, _))| (token_overlap(s, t), i))
                .filter(|(o, _)| *o >= 0.5)
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, i)| i)
        };
        let reliable = |i: usize| nodes[i].1 >= 0.5;
        // Longest chain through reliable nodes; the graph is acyclic.
        let mut longest = vec![0usize; nodes.len()];
        for _ in 0..nodes.len() {
            for &(a, b) in &edges {
                if reliable(a) && reliable(b) {
                    longest[b] = longest[b].max(longest[a] + 1);
                }
            }
        }
        let chain = (0..nodes.len()).filter(|&i| reliable(i)).map(|i| longest[i] + 1).max().unwrap_or(0);
        let matched: std::collections::BTreeSet<usize> = steps.iter().filter_map(|s| best(s)).filter(|&i| reliable(i)).collect();
        let last = best(steps[steps.len() - 1]).map_or(0.5, |i| nodes[i].1);
        let completeness = if chain == 0 { 1.0 } else { (matched.len() as f64 / chain as f64).min(1.0) };
        let p = (last * completeness).clamp(0.02, 0.98);
        format!("P: {p:.3}\n")
    }
}

fn literal_of(step: &ReasoningStep) -> Option<Rational> {
    if step.opcode != Opcode::BindGiven {
        return None;
    }
    let e = Expr::parse(step.expression.as_deref()?).ok()?;
    e.variables().is_empty().then(|| e.eval(&Default::default()).ok().map(|v| v.value)).flatten()
}

/// Swaps the top operator of the last compute step. Returns false when
/// there is nothing to corrupt.
fn corrupt(spec: &mut ExplanationSpec) -> bool {
    let Some(step) = spec.steps.iter_mut().rev().find(|s| s.opcode == Opcode::Compute && s.expression.is_some()) else {
        return false;
    };
    let Ok(expr) = Expr::parse(step.expression.as_deref().unwrap_or_default()) else { return false };
    let broken = match expr {
        Expr::Binary(op, l, r) => {
            let swapped = match op {
                BinOp::Add => BinOp::Sub,
                BinOp::Sub => BinOp::Add,
                BinOp::Mul => BinOp::Div,
                BinOp::Div => BinOp::Mul,
                BinOp::Pow => BinOp::Mul,
            };
            Expr::Binary(swapped, l, r)
        }
        other => Expr::Binary(BinOp::Mul, Box::new(other), Box::new(Expr::Literal(Rational::from_integer(2.into())))),
    };
    step.expression = Some(broken.to_string());
    step.description = "combine the quantities in the order they appear".into();
    true
}

fn shifted(answer: &Answer, choices: &[Choice]) -> Answer {
    match answer {
        Answer::Numeric { value } => Answer::numeric(value + Rational::from_integer(1.into())),
        Answer::Choice { label } => {
            let pos = choices.iter().position(|c| &c.label == label).unwrap_or(0);
            match choices.get((pos + 1) % choices.len().max(1)) {
                Some(c) => Answer::choice(&c.label),
                None => answer.clone(),
            }
        }
    }
}

/// Scales `v` by `1 + mag*(2u-1)`, keeping integers integral and signs intact.
fn vary(v: &Rational, u: f64, mag: f64) -> Rational {
    let factor = 1.0 + mag * (2.0 * u - 1.0);
    let scaled = crate::scalar::rational_to_f64(v) * factor;
    let mut nv = if v.is_integer() {
        Rational::from_integer((scaled.round() as i64).into())
    } else {
        Rational::new(((scaled * 100.0).round() as i64).into(), 100.into())
    };
    let zero = Rational::from_integer(0.into());
    if *v > zero && nv <= zero {
        nv = if v.is_integer() { Rational::from_integer(1.into()) } else { v / Rational::from_integer(2.into()) };
    }
    if &nv == v {
        nv = v + Rational::from_integer(1.into());
    }
    nv
}

fn rename(text: &str, shift: usize) -> String {
    let mut out = String::with_capacity(text.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        match ROSTER.iter().position(|n| *n == word.as_str()) {
            Some(i) => out.push_str(ROSTER[(i + shift) % ROSTER.len()]),
            None => out.push_str(word),
        }
        word.clear();
    };
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            out.push(c);
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Moves every numeric option by the change in the reference's last computed value.
fn shift_choices(
    reference: &str,
    givens: &[(String, Rational)],
    sets: &std::collections::BTreeMap<String, Rational>,
    choices: &[Choice],
) -> Vec<Choice> {
    let Ok(spec) = parse_spec(reference) else { return choices.to_vec() };
    let last_compute = |values: &dyn Fn(&str) -> Option<Rational>| -> Option<Rational> {
        let mut s = spec.clone();
        for step in s.steps.iter_mut().filter(|st| st.opcode == Opcode::BindGiven) {
            if let Some(v) = step.output.as_deref().and_then(values) {
                step.expression = Some(format_rational(&v));
            }
        }
        let out = blind_execute(&s, None, None);
        out.records.iter().rev().find_map(|r| {
            let step = s.steps.iter().find(|st| st.index == r.step_index)?;
            match (&r.status, step.opcode, &r.bound_output) {
                (StepStatus::Executed, Opcode::Compute, Some(b)) => match &b.value {
                    Bound::Number { value } => Some(value.clone()),
                    Bound::Label { .. } => None,
                },
                _ => None,
            }
        })
    };
    let original = |name: &str| givens.iter().find(|(k, _)| k == name).map(|(_, v)| v.clone());
    let updated = |name: &str| sets.get(name).cloned().or_else(|| original(name));
    let (Some(r0), Some(r1)) = (last_compute(&original), last_compute(&updated)) else { return choices.to_vec() };
    let delta = r1 - r0;
    choices
        .iter()
        .map(|c| match crate::scalar::parse_rational(c.text.trim()) {
            Some(t) => Choice::new(&c.label, &format_rational(&(t + &delta))),
            None => c.clone(),
        })
        .collect()
}

impl Backend for SimulatedBackend {
    fn name(&self) -> &str {
        "simulated"
    }

    fn call(&self, req: &ProviderRequest, _fp: &str, _prompt: &str) -> Result<String, ProviderError> {
        let id = req.template_id.as_str();
        Ok(match id {
            _ if id.starts_with("explain.") => self.explain(req, &id["explain.".len()..]),
            templates::INTERPRET_STEP => "FAIL: the step has no executable payload\n".into(),
            templates::JUDGE_EQUIVALENCE => {
                if token_overlap(req.get("a"), req.get("b")) >= 0.5 { "1\n" } else { "0\n" }.into()
            }
            templates::PERTURB => self.perturb(req),
            templates::PREDICT_SUCCESS | templates::PREDICT_BASELINE => self.predict(req),
            templates::FAILURE_DISCOVER => self.discover(req),
            templates::FAILURE_INJECT => self.inject(req),
            templates::FAILURE_REMOVE => self.remove(req),
            templates::FAILURE_DETECT => {
                let kws = self.mode_keywords(req);
                if kws.iter().any(|k| mentions(req.get("problem"), k)) { "1\n" } else { "0\n" }.into()
            }
            other => return Err(ProviderError::TemplateMissing(other.to_string())),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::{explain_request, parse_explanation};
    use crate::model::TaskKind;
    use crate::protocol::parse_rewrite;
    use crate::provider::Provider;

    fn problem() -> Problem {
        Problem::numeric(
            "p",
            "Ava buys 4 boxes with 6 pens each. How many pens does Ava have?",
            Rational::from_integer(24.into()),
            vec![
                "STEP 1: bind_given; out=boxes; expr=\"4\"; desc=\"number of boxes\"".into(),
                "STEP 2: bind_given; out=per; expr=\"6\"; desc=\"pens per box\"".into(),
                "STEP 3: compute; in=boxes,per; out=total; expr=\"boxes*per\"; desc=\"multiply boxes by pens per box\"; select_answer".into(),
            ],
        )
    }

    fn quiet() -> SimProfile {
        SimProfile { slip_rate: 0.0, drop_rate: 0.0, narrate_rate: 0.0, ..SimProfile::default() }
    }

    #[test]
    fn solves_known_problem_with_new_numbers_and_names() {
        let p = Provider::new(SimulatedBackend::new(&[problem()], quiet()));
        let statement = "Omar buys 5 boxes with 7 pens each. How many pens does Omar have?";
        let req = explain_request(statement, &[], "cot", 0.0, None).unwrap();
        let e = parse_explanation("x", "cot", TaskKind::Numeric, &p.complete(&req).unwrap().text);
        assert_eq!(e.answer, Some(Answer::numeric(Rational::from_integer(35.into()))));
        let out = blind_execute(e.spec.as_ref().unwrap(), None, None);
        assert_eq!(out.predicted, e.answer);
    }

    #[test]
    fn unknown_problem_yields_no_spec() {
        let p = Provider::new(SimulatedBackend::new(&[problem()], quiet()));
        let req = explain_request("Something else entirely.", &[], "cot", 0.0, None).unwrap();
        let e = parse_explanation("x", "cot", TaskKind::Numeric, &p.complete(&req).unwrap().text);
        assert!(e.spec.is_none());
        assert_eq!(e.answer, None);
    }

    #[test]
    fn perturbation_changes_stated_givens() {
        let p = Provider::new(SimulatedBackend::new(&[problem()], quiet()));
        let req = ProviderRequest::new(templates::PERTURB)
            .slot("problem", problem().statement)
            .slot("givens", "boxes=4; per=6")
            .slot("kind", "parameter_variation")
            .slot("regime", "moderate")
            .slot("guidance", "")
            .slot("reference", "")
            .slot("choices", "")
            .slot("index", "0");
        let r = parse_rewrite(&p.complete(&req).unwrap().text).unwrap();
        assert_eq!(r.sets.len(), 2);
        let nums = crate::step_format::numerals(&r.statement);
        for v in r.sets.values() {
            assert!(nums.contains(v));
        }
    }

    #[test]
    fn inject_then_remove_restores_core() {
        let b = SimulatedBackend::new(&[problem()], quiet());
        let inj = ProviderRequest::new(templates::FAILURE_INJECT).slot("problem", problem().statement).slot("mode", "Rounding Remark");
        let injected = parse_rewrite(&b.call(&inj, "", "").unwrap()).unwrap().statement;
        assert!(mentions(&injected, "rounded"));
        assert_eq!(b.skeleton(&injected), b.skeleton(&problem().statement));
        let rem = ProviderRequest::new(templates::FAILURE_REMOVE).slot("problem", injected).slot("mode", "Rounding Remark");
        assert_eq!(parse_rewrite(&b.call(&rem, "", "").unwrap()).unwrap().statement, problem().statement);
    }

    #[test]
    fn vary_keeps_integers_positive_and_distinct() {
        let four = Rational::from_integer(4.into());
        for i in 0..50 {
            let nv = vary(&four, i as f64 / 50.0, 1.0);
            assert!(nv.is_integer() && nv > Rational::from_integer(0.into()) && nv != four);
        }
    }
}

//! Asks the generator for an explanation spec plus its own answer.

use serde::{Deserialize, Serialize};

use crate::model::{Answer, Choice, ExplanationSpec, Problem, TaskKind, Tolerance, Trajectory};
use crate::protocol::{parse_answer, render_choices, split_answer};
use crate::provider::{templates, Provider, ProviderError, ProviderRequest};
use crate::step_format::{parse_spec, ParseDiagnostic};

pub const STRATEGIES: [&str; 4] = ["cot", "zero_shot_cot", "self_refine", "plan_and_solve"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub problem_id: String,
    pub strategy: String,
    pub raw: String,
    /// Parsed spec; `None` when the reply did not follow the grammar.
    pub spec: Option<ExplanationSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<ParseDiagnostic>,
    /// The model's own final answer (used for original accuracy).
    pub answer: Option<Answer>,
}

impl Explanation {
    /// Semantic step texts, for DAG construction and prediction prompts.
    pub fn step_texts(&self) -> Vec<String> {
        self.spec.as_ref().map(|s| s.steps.iter().map(|st| st.semantic_text()).collect()).unwrap_or_default()
    }

    pub fn trajectory(&self, gold: &Answer, tol: &Tolerance) -> Trajectory {
        Trajectory {
            problem_id: self.problem_id.clone(),
            steps: self.step_texts(),
            predicted_answer: self.answer.clone(),
            correct: None,
        }
        .scored(gold, tol)
    }
}

/// Builds the request. `sample` distinguishes repeated draws for the same problem.
pub fn explain_request(
    statement: &str,
    choices: &[Choice],
    strategy: &str,
    temperature: f64,
    sample: Option<u32>,
) -> Result<ProviderRequest, ProviderError> {
    let template = templates::explain_template(strategy).ok_or_else(|| ProviderError::TemplateMissing(format!("explain.{strategy}")))?;
    let options = if choices.is_empty() { String::new() } else { format!("Options:\n{}", render_choices(choices)) };
    let mut req = ProviderRequest::new(template).slot("problem", statement).slot("choices", options).temperature(temperature);
    if let Some(s) = sample {
        req = req.slot("sample", s.to_string());
    }
    Ok(req)
}

pub fn parse_explanation(problem_id: &str, strategy: &str, kind: TaskKind, raw: &str) -> Explanation {
    let (body, answer_text) = split_answer(raw);
    let (spec, diagnostics) = match parse_spec(&body) {
        Ok(mut s) => {
            s.problem_id = problem_id.to_string();
            s.generator = strategy.to_string();
            (Some(s), Vec::new())
        }
        Err(d) => (None, d),
    };
    Explanation {
        problem_id: problem_id.to_string(),
        strategy: strategy.to_string(),
        raw: raw.to_string(),
        spec,
        diagnostics,
        answer: answer_text.and_then(|a| parse_answer(&a, kind)),
    }
}

/// Explains a stored problem with one strategy.
pub fn explain(provider: &Provider, problem: &Problem, strategy: &str, temperature: f64) -> Result<Explanation, ProviderError> {
    explain_statement(provider, &problem.id, &problem.statement, &problem.choices, problem.task_kind, strategy, temperature, None)
}

#[allow(clippy::too_many_arguments)]
pub fn explain_statement(
    provider: &Provider,
    problem_id: &str,
    statement: &str,
    choices: &[Choice],
    kind: TaskKind,
    strategy: &str,
    temperature: f64,
    sample: Option<u32>,
) -> Result<Explanation, ProviderError> {
    let req = explain_request(statement, choices, strategy, temperature, sample)?;
    let raw = provider.complete(&req)?.text;
    Ok(parse_explanation(problem_id, strategy, kind, &raw))
}

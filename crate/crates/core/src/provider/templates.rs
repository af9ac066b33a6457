//! Prompt templates. Every model-mediated role in the pipeline is one of
//! these ids; placeholders are written `{slot}`.
//!
//! The texts are reconstructions: the output formats they ask for are the
//! ones the rest of the crate parses.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ProviderError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Executor,
    Judge,
    Predictor,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Generator, Role::Executor, Role::Judge, Role::Predictor];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Generator => "generator",
            Role::Executor => "executor",
            Role::Judge => "judge",
            Role::Predictor => "predictor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: &'static str,
    pub role: Role,
    pub text: &'static str,
}

impl Template {
    /// Placeholder names in order of first appearance.
    pub fn slots(&self) -> Vec<String> {
        placeholders(self.text)
    }

    pub fn render(&self, slots: &BTreeMap<String, String>) -> Result<String, ProviderError> {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) if is_slot_name(&after[..close]) => {
                    let name = &after[..close];
                    let value = slots.get(name).ok_or_else(|| ProviderError::MissingSlot {
                        template: self.id.to_string(),
                        slot: name.to_string(),
                    })?;
                    out.push_str(value);
                    rest = &after[close + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn is_slot_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

fn placeholders(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_slot_name(&after[..close]) => {
                let name = after[..close].to_string();
                if seen.insert(name.clone()) {
                    out.push(name);
                }
                rest = &after[close + 1..];
            }
            _ => rest = after,
        }
    }
    out
}

pub const EXPLAIN_COT: &str = "explain.cot";
pub const EXPLAIN_ZERO_SHOT_COT: &str = "explain.zero_shot_cot";
pub const EXPLAIN_SELF_REFINE: &str = "explain.self_refine";
pub const EXPLAIN_PLAN_AND_SOLVE: &str = "explain.plan_and_solve";
pub const INTERPRET_STEP: &str = "execute.interpret_step";
pub const JUDGE_EQUIVALENCE: &str = "judge.semantic_equivalence";
pub const PERTURB: &str = "perturb.generate";
pub const PREDICT_SUCCESS: &str = "predict.success";
pub const PREDICT_BASELINE: &str = "predict.baseline";
pub const FAILURE_DISCOVER: &str = "failure.discover";
pub const FAILURE_INJECT: &str = "failure.inject";
pub const FAILURE_REMOVE: &str = "failure.remove";
pub const FAILURE_DETECT: &str = "failure.detect";

const FORMAT_RULES: &str = "Write one step per line using exactly this record format:\n\
STEP <n>: <opcode>; in=<vars>; out=<var>; expr=\"<expression>\"; rule=\"<clause>\"; desc=\"<short description>\"\n\
Opcodes: bind_given (bind a quantity stated in the problem; expr is the literal), compute (arithmetic over earlier variables), \
lookup_rule (choose an option with a clause such as equals(x, option)), select_answer (in=<variable holding the answer>, last step), narrate (commentary, no effect).\n\
Expressions may use + - * / ^ ( ) and abs, min, max, floor, ceil, round, sqrt, mod, percent.\n\
Do NOT reveal intermediate numerical results or the final answer inside any step. Only bind_given may contain numbers from the problem.\n\
After the steps write a final line `ANSWER: <your answer>`.";

fn explain(strategy_instruction: &'static str) -> String {
    format!("{strategy_instruction}\n\n{FORMAT_RULES}\n\nProblem:\n{{problem}}\n{{choices}}")
}

/// All built-in templates.
pub fn builtin_templates() -> Vec<Template> {
    // Leaked once per process: templates are static for the program's life.
    fn leak(s: String) -> &'static str {
        Box::leak(s.into_boxed_str())
    }
    vec![
        Template {
            id: EXPLAIN_COT,
            role: Role::Generator,
            text: leak(explain("Solve the problem step by step, restating your reasoning as an executable process specification.")),
        },
        Template {
            id: EXPLAIN_ZERO_SHOT_COT,
            role: Role::Generator,
            text: leak(explain("Let's think step by step. Restate the reasoning as an executable process specification.")),
        },
        Template {
            id: EXPLAIN_SELF_REFINE,
            role: Role::Generator,
            text: leak(explain("Draft a solution, critique it, refine it, and output only the refined reasoning as an executable process specification.")),
        },
        Template {
            id: EXPLAIN_PLAN_AND_SOLVE,
            role: Role::Generator,
            text: leak(explain("First devise a plan that divides the problem into subtasks, then carry out the plan as an executable process specification.")),
        },
        Template {
            id: INTERPRET_STEP,
            role: Role::Executor,
            text: "You execute one step of a process specification. You do not see the original problem and must not use outside knowledge.\n\
Step: {step}\nBound variables: {bound}\nOptions: {choices}\n\
Reply with exactly one line: `EXPR: <arithmetic expression over the bound variables>` or `RULE: <clause>` or `FAIL: <reason>`.",
        },
        Template {
            id: JUDGE_EQUIVALENCE,
            role: Role::Judge,
            text: "Do these two reasoning steps perform the same operation on the same quantities?\nStep A: {a}\nStep B: {b}\nReply `1` for yes or `0` for no.",
        },
        Template {
            id: PERTURB,
            role: Role::Generator,
            text: "Rewrite the problem with a {kind} perturbation at {regime} strength ({guidance}) without changing how it is solved.\n\
Problem:\n{problem}\nGiven quantities: {givens}\nReference procedure:\n{reference}\nOptions: {choices}\n\
Reply with `STATEMENT: <new problem text>`, then one `SET <name>=<value>` line per changed given quantity, then one `CHOICE <label>: <text>` line per option if options exist.",
        },
        Template {
            id: PREDICT_SUCCESS,
            role: Role::Predictor,
            text: "Estimate the probability that the reasoning below leads to an executable, correct solution.\n\
Problem:\n{problem}\nFeasible-region graph of reasoning steps (node weights are step reliabilities):\n{structure}\nReasoning trace:\n{trace}\n\
Reply with `P: <probability between 0 and 1>`.",
        },
        Template {
            id: PREDICT_BASELINE,
            role: Role::Predictor,
            text: "Estimate the probability that the reasoning below leads to an executable, correct solution.\n\
Problem:\n{problem}\nSteps observed when re-sampling the anchor problem (node weights are observed frequencies):\n{structure}\nReasoning trace:\n{trace}\n\
Reply with `P: <probability between 0 and 1>`.",
        },
        Template {
            id: FAILURE_DISCOVER,
            role: Role::Generator,
            text: "The reasoning trace below reaches a wrong answer. Align it with the reference procedure, find where it diverges, and abstract each divergence into a failure mode.\n\
Problem:\n{problem}\nTrace:\n{trace}\nReference procedure:\n{reference}\n\
Reply with one line per failure mode: `CANDIDATE: <name> | <error type> | <complexity> | <comma-separated trigger keywords> | <description>`, or `NONE`.",
        },
        Template {
            id: FAILURE_INJECT,
            role: Role::Generator,
            text: "Modify the problem so that it exhibits the failure condition `{mode}` ({description}; triggers: {keywords}) while keeping its solution procedure.\n\
Problem:\n{problem}\nGiven quantities: {givens}\nReference procedure:\n{reference}\n\
Reply with `STATEMENT: <new problem text>` and one `SET <name>=<value>` line per changed given quantity, or `FAIL: <reason>`.",
        },
        Template {
            id: FAILURE_REMOVE,
            role: Role::Generator,
            text: "Remove or simplify the failure condition `{mode}` ({description}; triggers: {keywords}) in the problem while keeping its solution procedure.\n\
Problem:\n{problem}\nGiven quantities: {givens}\nReference procedure:\n{reference}\n\
Reply with `STATEMENT: <new problem text>` and one `SET <name>=<value>` line per changed given quantity, or `FAIL: <reason>`.",
        },
        Template {
            id: FAILURE_DETECT,
            role: Role::Judge,
            text: "Does the failure condition `{mode}` ({description}) occur in this problem or its reasoning trace?\nProblem:\n{problem}\nTrace:\n{trace}\nReply `1` or `0`.",
        },
    ]
}

/// Lookup table of templates by id.
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, Template>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        TemplateRegistry { templates: builtin_templates().into_iter().map(|t| (t.id.to_string(), t)).collect() }
    }

    pub fn empty() -> Self {
        TemplateRegistry { templates: BTreeMap::new() }
    }

    pub fn register(&mut self, template: Template) {
        self.templates.insert(template.id.to_string(), template);
    }

    pub fn get(&self, id: &str) -> Result<&Template, ProviderError> {
        self.templates.get(id).ok_or_else(|| ProviderError::TemplateMissing(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(|k| k.as_str())
    }
}

/// Template id for an explanation strategy name.
pub fn explain_template(strategy: &str) -> Option<&'static str> {
    Some(match strategy {
        "cot" => EXPLAIN_COT,
        "zero_shot_cot" => EXPLAIN_ZERO_SHOT_COT,
        "self_refine" => EXPLAIN_SELF_REFINE,
        "plan_and_solve" => EXPLAIN_PLAN_AND_SOLVE,
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_renders_with_its_slots() {
        let reg = TemplateRegistry::builtin();
        for id in reg.ids().map(|s| s.to_string()).collect::<Vec<_>>() {
            let t = reg.get(&id).unwrap();
            let slots: BTreeMap<String, String> = t.slots().into_iter().map(|s| (s.clone(), format!("<{s}>"))).collect();
            let text = t.render(&slots).unwrap();
            for s in t.slots() {
                assert!(text.contains(&format!("<{s}>")));
            }
        }
    }

    #[test]
    fn missing_slot_is_an_error() {
        let reg = TemplateRegistry::builtin();
        let t = reg.get(JUDGE_EQUIVALENCE).unwrap();
        let mut slots = BTreeMap::new();
        slots.insert("a".to_string(), "x".to_string());
        assert!(matches!(t.render(&slots), Err(ProviderError::MissingSlot { slot, .. }) if slot == "b"));
    }

    #[test]
    fn braces_that_are_not_slots_pass_through() {
        let t = Template { id: "t", role: Role::Judge, text: "json {\"k\": 1} and {x}" };
        let mut slots = BTreeMap::new();
        slots.insert("x".to_string(), "y".to_string());
        assert_eq!(t.render(&slots).unwrap(), "json {\"k\": 1} and y");
        assert_eq!(t.slots(), vec!["x"]);
    }

    #[test]
    fn unknown_template() {
        assert!(matches!(TemplateRegistry::builtin().get("nope"), Err(ProviderError::TemplateMissing(_))));
    }
}

//! Perturbation neighborhoods, step reliability and the feasible-region DAG.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::executor::{blind_execute, StepStatus, VerificationOutcome};
use crate::explain::Explanation;
use crate::judge::Judge;
use crate::model::{Answer, Choice, ExplanationSpec, Opcode, Problem, TaskKind, Tolerance};
use crate::protocol::{givens, parse_probability, parse_rewrite, render_choices, render_givens, Rewrite};
use crate::provider::{templates, Provider, ProviderError, ProviderRequest};
use crate::scalar::{format_rational, rational_serde, Rational};
use crate::step_format::{numerals, parse_reference, serialize_spec, serialize_step};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_RETRY_BUDGET: usize = 3;
pub const CE_EPSILON: f64 = 1e-6;
pub const DAG_SCHEMA: &str = "true.dag/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    ParameterVariation,
    EntitySubstitution,
    ConditionAdjustment,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 3] =
        [PerturbationKind::ParameterVariation, PerturbationKind::EntitySubstitution, PerturbationKind::ConditionAdjustment];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationKind::ParameterVariation => "parameter_variation",
            PerturbationKind::EntitySubstitution => "entity_substitution",
            PerturbationKind::ConditionAdjustment => "condition_adjustment",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Mild,
    Moderate,
    Aggressive,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Mild, Regime::Moderate, Regime::Aggressive];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Mild => "mild",
            Regime::Moderate => "moderate",
            Regime::Aggressive => "aggressive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }

    /// Instruction text placed in the perturbation prompt.
    pub fn guidance(self) -> &'static str {
        match self {
            Regime::Mild => "scale numbers by at most 20% or swap a single entity",
            Regime::Moderate => "scale numbers by up to 50% or swap several entities",
            Regime::Aggressive => "adjust the conditions substantially while keeping the same solution steps",
        }
    }
}

/// An anchor problem plus its verified perturbations, anchor first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub anchor: Problem,
    pub perturbed: Vec<Problem>,
    pub kinds: Vec<PerturbationKind>,
    pub regime: Regime,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Neighborhood {
    pub fn instances(&self) -> impl Iterator<Item = &Problem> {
        std::iter::once(&self.anchor).chain(self.perturbed.iter())
    }

    pub fn size(&self) -> usize {
        self.perturbed.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodConfig {
    pub k: usize,
    pub regime: Regime,
    pub kinds: Vec<PerturbationKind>,
    pub retry_budget: usize,
    pub temperature: f64,
}

impl Default for NeighborhoodConfig {
    fn default() -> Self {
        NeighborhoodConfig {
            k: DEFAULT_K,
            regime: Regime::Moderate,
            kinds: PerturbationKind::ALL.to_vec(),
            retry_budget: DEFAULT_RETRY_BUDGET,
            temperature: 0.0,
        }
    }
}

/// Replaces the literal of every bind_given step named in `sets`.
pub fn with_givens(spec: &ExplanationSpec, sets: &BTreeMap<String, Rational>) -> ExplanationSpec {
    let mut out = spec.clone();
    for step in out.steps.iter_mut().filter(|s| s.opcode == Opcode::BindGiven) {
        if let Some(v) = step.output.as_ref().and_then(|o| sets.get(o)) {
            step.expression = Some(format_rational(v));
        }
    }
    out
}

/// Recomputes a gold answer by running the reference procedure with new
/// givens through the white-box tools only.
pub fn relabel(reference: &ExplanationSpec, sets: &BTreeMap<String, Rational>, choices: &[Choice], kind: TaskKind) -> Result<(ExplanationSpec, Answer), String> {
    let spec = with_givens(reference, sets);
    let opts = (kind == TaskKind::MultipleChoice).then_some(choices);
    let out = blind_execute(&spec, opts, None);
    if !out.executable {
        let why = out.records.iter().rev().find_map(|r| r.detail.clone()).unwrap_or_else(|| "no answer".into());
        return Err(format!("reference does not execute: {why}"));
    }
    if !out.exact {
        return Err("recomputed answer is not exact".into());
    }
    match (kind, out.predicted) {
        (TaskKind::Numeric, Some(a @ Answer::Numeric { .. })) => Ok((spec, a)),
        (TaskKind::MultipleChoice, Some(a @ Answer::Choice { .. })) => Ok((spec, a)),
        (_, other) => Err(format!("recomputed answer has the wrong kind: {other:?}")),
    }
}

/// Checks a proposed rewrite and builds the perturbed problem.
pub fn verify_rewrite(anchor: &Problem, reference: &ExplanationSpec, rewrite: &Rewrite, id: &str) -> Result<Problem, String> {
    if rewrite.statement.trim() == anchor.statement.trim() {
        return Err("statement unchanged".into());
    }
    let known: BTreeSet<String> = givens(reference).into_iter().map(|(k, _)| k).collect();
    let stated = numerals(&rewrite.statement);
    for (name, v) in &rewrite.sets {
        if !known.contains(name) {
            return Err(format!("`{name}` is not a given quantity"));
        }
        if !stated.contains(v) {
            return Err(format!("value {} for `{name}` does not appear in the statement", format_rational(v)));
        }
    }
    let choices = if rewrite.choices.is_empty() { anchor.choices.clone() } else { rewrite.choices.clone() };
    if anchor.task_kind == TaskKind::MultipleChoice {
        let labels: BTreeSet<&str> = choices.iter().map(|c| c.label.as_str()).collect();
        let anchor_labels: BTreeSet<&str> = anchor.choices.iter().map(|c| c.label.as_str()).collect();
        if labels != anchor_labels || labels.len() != choices.len() {
            return Err("options do not keep the anchor's labels".into());
        }
    }
    let (spec, answer) = relabel(reference, &rewrite.sets, &choices, anchor.task_kind)?;
    let mut metadata = anchor.metadata.clone();
    metadata.insert("anchor".into(), anchor.id.clone());
    let p = Problem {
        schema_version: anchor.schema_version,
        id: id.to_string(),
        statement: rewrite.statement.clone(),
        answer,
        reference_steps: spec.steps.iter().map(serialize_step).collect(),
        task_kind: anchor.task_kind,
        choices: if anchor.task_kind == TaskKind::MultipleChoice { choices } else { Vec::new() },
        metadata,
    };
    p.validate().map_err(|e| e.to_string())?;
    Ok(p)
}

#[derive(Debug, thiserror::Error)]
pub enum NeighborhoodError {
    #[error("anchor `{0}` has no parseable reference procedure")]
    NoReference(String),
    #[error("perturbation kinds list is empty")]
    NoKinds,
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Generates up to `cfg.k` verified perturbations of `anchor`. Items that
/// fail verification are regenerated up to the retry budget and otherwise
/// dropped with a warning.
pub fn generate_neighborhood(provider: &Provider, anchor: &Problem, cfg: &NeighborhoodConfig) -> Result<Neighborhood, NeighborhoodError> {
    let reference = parse_reference(anchor).map_err(|_| NeighborhoodError::NoReference(anchor.id.clone()))?;
    if cfg.kinds.is_empty() && cfg.k > 0 {
        return Err(NeighborhoodError::NoKinds);
    }
    let reference_text = serialize_spec(&reference);
    let givens_text = render_givens(&givens(&reference));

    type Attempt = (Option<(Problem, PerturbationKind)>, Vec<String>);
    let items: Vec<Result<Attempt, ProviderError>> = (0..cfg.k)
        .into_par_iter()
        .map(|i| {
            let kind = cfg.kinds[i % cfg.kinds.len()];
            let id = format!("{}~p{}", anchor.id, i + 1);
            let mut warnings = Vec::new();
            for attempt in 0..cfg.retry_budget.max(1) {
                let req = ProviderRequest::new(templates::PERTURB)
                    .slot("problem", anchor.statement.as_str())
                    .slot("givens", givens_text.as_str())
                    .slot("kind", kind.as_str())
                    .slot("regime", cfg.regime.as_str())
                    .slot("guidance", cfg.regime.guidance())
                    .slot("reference", reference_text.as_str())
                    .slot("choices", render_choices(&anchor.choices))
                    .slot("index", i.to_string())
                    .slot("attempt", attempt.to_string())
                    .temperature(cfg.temperature);
                let text = provider.complete(&req)?.text;
                let verdict = parse_rewrite(&text)
                    .map_err(|e| e.to_string())
                    .and_then(|r| verify_rewrite(anchor, &reference, &r, &id));
                match verdict {
                    Ok(mut p) => {
                        p.metadata.insert("perturbation".into(), kind.as_str().into());
                        p.metadata.insert("regime".into(), cfg.regime.as_str().into());
                        return Ok((Some((p, kind)), warnings));
                    }
                    Err(why) => warnings.push(format!("{id} attempt {}: {why}", attempt + 1)),
                }
            }
            warnings.push(format!("{id}: retry budget exhausted, item dropped"));
            Ok((None, warnings))
        })
        .collect();

    let mut nb = Neighborhood { anchor: anchor.clone(), perturbed: Vec::new(), kinds: Vec::new(), regime: cfg.regime, warnings: Vec::new() };
    let mut seen: HashSet<String> = HashSet::from([anchor.statement.clone()]);
    for item in items {
        let (found, warnings) = item?;
        nb.warnings.extend(warnings);
        if let Some((p, kind)) = found {
            if seen.insert(p.statement.clone()) {
                nb.perturbed.push(p);
                nb.kinds.push(kind);
            } else {
                nb.warnings.push(format!("{}: duplicate of an earlier instance, dropped", p.id));
            }
        }
    }
    Ok(nb)
}

/// C, R and W for one generated step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepAssessment {
    pub instance_id: String,
    /// 1-based position in the trajectory.
    pub position: usize,
    pub text: String,
    pub c: u8,
    pub n_exec: u64,
    pub neighborhood_size: u64,
    #[serde(with = "rational_serde")]
    pub r: Rational,
    #[serde(with = "rational_serde")]
    pub w: Rational,
}

impl StepAssessment {
    pub fn new(instance_id: &str, position: usize, text: &str, c: bool, n_exec: u64, size: u64) -> Self {
        let r = if size == 0 { Rational::from_integer(0.into()) } else { Rational::new((n_exec as i64).into(), (size as i64).into()) };
        let w = if c { r.clone() } else { Rational::from_integer(0.into()) };
        StepAssessment { instance_id: instance_id.into(), position, text: text.into(), c: c as u8, n_exec, neighborhood_size: size, r, w }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssessedTrajectory {
    pub instance_id: String,
    pub steps: Vec<StepAssessment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub problem_id: String,
    pub executable: bool,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assessment {
    pub trajectories: Vec<AssessedTrajectory>,
    pub outcomes: Vec<InstanceOutcome>,
    pub neighborhood_size: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Assessment {
    /// Fraction of instances whose blind execution is correct.
    pub fn pert_sr(&self) -> Option<f64> {
        (!self.outcomes.is_empty())
            .then(|| self.outcomes.iter().filter(|o| o.correct).count() as f64 / self.outcomes.len() as f64)
    }
}

fn executed_texts(spec: &ExplanationSpec, outcome: &VerificationOutcome) -> Vec<String> {
    spec.steps
        .iter()
        .filter(|s| outcome.records.iter().any(|r| r.step_index == s.index && r.status == StepStatus::Executed))
        .map(|s| s.semantic_text())
        .collect()
}

/// Scores every step of every instance's trace.
///
/// C compares a step with the reference steps of its own instance; n_exec
/// counts instances whose blindly executed spec contains an equivalent step
/// that ran to completion. `explanations` are aligned with
/// [`Neighborhood::instances`].
pub fn assess_steps(
    nb: &Neighborhood,
    explanations: &[Explanation],
    judge: &Judge,
    interpreter: Option<&Provider>,
    tol: &Tolerance,
) -> Result<Assessment, ProviderError> {
    let instances: Vec<&Problem> = nb.instances().collect();
    let size = instances.len() as u64;
    let mut warnings = Vec::new();

    let runs: Vec<(Option<VerificationOutcome>, Vec<String>)> = instances
        .par_iter()
        .zip(explanations.par_iter())
        .map(|(p, e)| match &e.spec {
            Some(spec) => {
                let out = blind_execute(spec, p.choices_opt(), interpreter);
                let texts = executed_texts(spec, &out);
                (Some(out), texts)
            }
            None => (None, Vec::new()),
        })
        .collect();
    let outcomes: Vec<InstanceOutcome> = instances
        .iter()
        .zip(&runs)
        .map(|(p, (o, _))| InstanceOutcome {
            problem_id: p.id.clone(),
            executable: o.as_ref().is_some_and(|o| o.executable),
            correct: o.as_ref().is_some_and(|o| o.is_correct(&p.answer, tol)),
        })
        .collect();

    let refs: Vec<Option<Vec<String>>> = instances
        .iter()
        .map(|p| parse_reference(p).ok().map(|s| s.steps.iter().map(|st| st.semantic_text()).collect()))
        .collect();
    for (p, e) in instances.iter().zip(explanations) {
        if e.spec.is_none() {
            warnings.push(format!("{}: no parseable trace, assessment skipped", p.id));
        }
    }
    for (p, r) in instances.iter().zip(&refs) {
        if r.is_none() {
            warnings.push(format!("{}: missing reference, assessment skipped", p.id));
        }
    }

    let trajectories: Vec<Result<Option<AssessedTrajectory>, ProviderError>> = instances
        .par_iter()
        .zip(explanations.par_iter())
        .zip(refs.par_iter())
        .map(|((p, e), reference)| {
            let (Some(spec), Some(reference)) = (&e.spec, reference) else { return Ok(None) };
            let mut steps = Vec::with_capacity(spec.steps.len());
            for (pos, step) in spec.steps.iter().enumerate() {
                let text = step.semantic_text();
                let mut c = false;
                for r in reference {
                    if judge.equivalent(&text, r)? {
                        c = true;
                        break;
                    }
                }
                let mut n_exec = 0u64;
                for (_, executed) in &runs {
                    for t in executed {
                        if judge.equivalent(&text, t)? {
                            n_exec += 1;
                            break;
                        }
                    }
                }
                steps.push(StepAssessment::new(&p.id, pos + 1, &text, c, n_exec, size));
            }
            Ok(Some(AssessedTrajectory { instance_id: p.id.clone(), steps }))
        })
        .collect();
    let mut out = Vec::new();
    for t in trajectories {
        if let Some(t) = t? {
            out.push(t);
        }
    }
    Ok(Assessment { trajectories: out, outcomes, neighborhood_size: size, warnings })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StepRef {
    pub instance_id: String,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagNode {
    pub id: usize,
    /// Canonical description: the first member's text.
    pub text: String,
    #[serde(with = "rational_serde")]
    pub weight: Rational,
    /// Minimum observed position.
    pub rank: usize,
    pub members: Vec<StepRef>,
    /// Texts of all members, deduplicated, first-seen order.
    pub member_texts: Vec<String>,
    pub c_sum: u64,
    pub n_exec_sum: u64,
    pub size_sum: u64,
}

impl DagNode {
    pub fn count(&self) -> u64 {
        self.members.len() as u64
    }

    /// Pooled C times pooled R.
    fn pooled_weight(&self) -> Rational {
        if self.members.is_empty() || self.size_sum == 0 {
            return Rational::from_integer(0.into());
        }
        Rational::new((self.c_sum as i64).into(), (self.count() as i64).into())
            * Rational::new((self.n_exec_sum as i64).into(), (self.size_sum as i64).into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagEdge {
    pub from: usize,
    pub to: usize,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibleRegionDag {
    pub schema: String,
    pub anchor_id: String,
    pub nodes: Vec<DagNode>,
    pub edges: Vec<DagEdge>,
}

impl FeasibleRegionDag {
    pub fn empty(anchor_id: &str) -> Self {
        FeasibleRegionDag { schema: DAG_SCHEMA.into(), anchor_id: anchor_id.into(), nodes: Vec::new(), edges: Vec::new() }
    }

    fn successors(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.from == n).map(|e| e.to)
    }

    fn reaches(&self, from: usize, target: usize) -> bool {
        let mut stack = vec![from];
        let mut seen = HashSet::new();
        while let Some(n) = stack.pop() {
            if n == target {
                return true;
            }
            if seen.insert(n) {
                stack.extend(self.successors(n));
            }
        }
        false
    }

    fn add_edge(&mut self, from: usize, to: usize) {
        match self.edges.iter_mut().find(|e| e.from == from && e.to == to) {
            Some(e) => e.count += 1,
            None => {
                self.edges.push(DagEdge { from, to, count: 1 });
                self.edges.sort_by_key(|e| (e.from, e.to));
            }
        }
    }

    /// Kahn order, or `None` if a cycle exists.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let mut indeg: BTreeMap<usize, usize> = self.nodes.iter().map(|n| (n.id, 0)).collect();
        for e in &self.edges {
            *indeg.get_mut(&e.to)? += 1;
            indeg.get(&e.from)?;
        }
        let mut ready: Vec<usize> = indeg.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
        ready.reverse();
        let mut order = Vec::new();
        while let Some(n) = ready.pop() {
            order.push(n);
            for e in self.edges.iter().filter(|e| e.from == n) {
                let d = indeg.get_mut(&e.to).expect("edge target exists");
                *d -= 1;
                if *d == 0 {
                    ready.push(e.to);
                }
            }
        }
        (order.len() == self.nodes.len()).then_some(order)
    }

    pub fn node(&self, id: usize) -> Option<&DagNode> {
        self.nodes.get(id)
    }

    /// Node holding a given step.
    pub fn node_of(&self, instance_id: &str, position: usize) -> Option<&DagNode> {
        self.nodes.iter().find(|n| n.members.iter().any(|m| m.instance_id == instance_id && m.position == position))
    }

    /// Replaces weights with the share of trajectories that visit each node.
    pub fn reweight_by_frequency(&mut self, trajectories: usize) {
        for n in &mut self.nodes {
            let visits: BTreeSet<&str> = n.members.iter().map(|m| m.instance_id.as_str()).collect();
            n.weight = if trajectories == 0 {
                Rational::from_integer(0.into())
            } else {
                Rational::new((visits.len() as i64).into(), (trajectories as i64).into())
            };
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dag serializes")
    }

    /// Compact form given to the success predictor.
    pub fn prompt_structure(&self) -> String {
        let nodes: Vec<serde_json::Value> = self
            .nodes
            .iter()
            .map(|n| {
                let w = (crate::scalar::rational_to_f64(&n.weight) * 1000.0).round() / 1000.0;
                serde_json::json!({"id": n.id, "text": n.text, "weight": w})
            })
            .collect();
        let edges: Vec<[usize; 2]> = self.edges.iter().map(|e| [e.from, e.to]).collect();
        serde_json::json!({"nodes": nodes, "edges": edges}).to_string()
    }

    pub fn to_dot(&self) -> String {
        let mut out = format!("digraph \"{}\" {{\n  rankdir=LR;\n", escape_dot(&self.anchor_id));
        for n in &self.nodes {
            let w = crate::scalar::rational_to_f64(&n.weight);
            let _ = writeln!(out, "  n{} [label=\"{}\\nW={w:.3}\"];", n.id, escape_dot(&n.text));
        }
        for e in &self.edges {
            let _ = writeln!(out, "  n{} -> n{} [label=\"{}\"];", e.from, e.to, e.count);
        }
        out.push_str("}\n");
        out
    }
}

fn escape_dot(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Folds trajectories, in the given order, into a DAG.
///
/// A step joins the first node whose canonical text the judge deems
/// equivalent, unless that node was already visited by the same trajectory
/// or joining would close a cycle; otherwise it starts a new node.
pub fn build_dag(anchor_id: &str, trajectories: &[AssessedTrajectory], judge: &Judge) -> Result<FeasibleRegionDag, ProviderError> {
    let mut dag = FeasibleRegionDag::empty(anchor_id);
    for t in trajectories {
        let mut prev: Option<usize> = None;
        let mut visited: HashSet<usize> = HashSet::new();
        for s in &t.steps {
            let mut chosen = None;
            for n in 0..dag.nodes.len() {
                if visited.contains(&n) || prev == Some(n) {
                    continue;
                }
                if prev.is_some_and(|p| dag.reaches(n, p)) {
                    continue;
                }
                if judge.equivalent(&s.text, &dag.nodes[n].text)? {
                    chosen = Some(n);
                    break;
                }
            }
            let id = match chosen {
                Some(n) => n,
                None => {
                    let id = dag.nodes.len();
                    dag.nodes.push(DagNode {
                        id,
                        text: s.text.clone(),
                        weight: Rational::from_integer(0.into()),
                        rank: s.position,
                        members: Vec::new(),
                        member_texts: Vec::new(),
                        c_sum: 0,
                        n_exec_sum: 0,
                        size_sum: 0,
                    });
                    id
                }
            };
            let node = &mut dag.nodes[id];
            node.members.push(StepRef { instance_id: t.instance_id.clone(), position: s.position });
            if !node.member_texts.contains(&s.text) {
                node.member_texts.push(s.text.clone());
            }
            node.rank = node.rank.min(s.position);
            node.c_sum += s.c as u64;
            node.n_exec_sum += s.n_exec;
            node.size_sum += s.neighborhood_size;
            node.weight = node.pooled_weight();
            if let Some(p) = prev {
                dag.add_edge(p, id);
            }
            visited.insert(id);
            prev = Some(id);
        }
    }
    Ok(dag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectorySource {
    Anchor,
    Perturbed,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryCoverage {
    pub id: String,
    pub source: TrajectorySource,
    pub matched: usize,
    pub total: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub per_trajectory: Vec<TrajectoryCoverage>,
    /// Mean over perturbed-instance trajectories.
    pub pret_match: Option<f64>,
    /// Mean over reference trajectories.
    pub gt_match: Option<f64>,
    pub dag_nodes: usize,
    pub dag_edges: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Fraction of `steps` equivalent to some member of some node.
pub fn trajectory_coverage(dag: &FeasibleRegionDag, steps: &[String], judge: &Judge) -> Result<usize, ProviderError> {
    let mut matched = 0;
    'step: for s in steps {
        for n in &dag.nodes {
            for m in &n.member_texts {
                if judge.equivalent(s, m)? {
                    matched += 1;
                    continue 'step;
                }
            }
        }
    }
    Ok(matched)
}

pub fn coverage(
    dag: &FeasibleRegionDag,
    trajectories: &[(String, TrajectorySource, Vec<String>)],
    judge: &Judge,
) -> Result<CoverageReport, ProviderError> {
    let mut per = Vec::new();
    let mut warnings = Vec::new();
    for (id, source, steps) in trajectories {
        if steps.is_empty() {
            warnings.push(format!("{id}: empty trajectory excluded"));
            continue;
        }
        let matched = trajectory_coverage(dag, steps, judge)?;
        per.push(TrajectoryCoverage {
            id: id.clone(),
            source: *source,
            matched,
            total: steps.len(),
            fraction: matched as f64 / steps.len() as f64,
        });
    }
    let mean = |src: TrajectorySource| {
        let xs: Vec<f64> = per.iter().filter(|t| t.source == src).map(|t| t.fraction).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    Ok(CoverageReport {
        pret_match: mean(TrajectorySource::Perturbed),
        gt_match: mean(TrajectorySource::Reference),
        per_trajectory: per,
        dag_nodes: dag.nodes.len(),
        dag_edges: dag.edges.len(),
        warnings,
    })
}

/// Reference step texts of every instance, for GT coverage.
pub fn reference_trajectories(nb: &Neighborhood) -> Vec<(String, TrajectorySource, Vec<String>)> {
    nb.instances()
        .filter_map(|p| {
            let spec = parse_reference(p).ok()?;
            Some((p.id.clone(), TrajectorySource::Reference, spec.steps.iter().map(|s| s.semantic_text()).collect()))
        })
        .collect()
}

/// Binary cross-entropy with natural log; `p` is clamped to [ε, 1-ε].
pub fn cross_entropy(p: f64, y: bool) -> f64 {
    let p = p.clamp(CE_EPSILON, 1.0 - CE_EPSILON);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub problem_id: String,
    pub p: f64,
    pub y: u8,
    pub ce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub method: String,
    pub records: Vec<PredictionRecord>,
    pub mean_ce: Option<f64>,
    pub calls: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<String>,
}

/// One item to predict: the problem, its trace, and whether it succeeded.
#[derive(Debug, Clone)]
pub struct PredictionItem<'a> {
    pub problem: &'a Problem,
    pub trace: Vec<String>,
    pub outcome: bool,
}

fn numbered(trace: &[String]) -> String {
    trace.iter().enumerate().map(|(i, t)| format!("{}. {t}", i + 1)).collect::<Vec<_>>().join("\n")
}

fn predict_with(provider: &Provider, template: &str, method: &str, structure: &str, items: &[PredictionItem<'_>]) -> Result<PredictionReport, ProviderError> {
    type Scored = (Option<PredictionRecord>, usize, Option<String>);
    let results: Vec<Result<Scored, ProviderError>> = items
        .par_iter()
        .map(|it| {
            let base = ProviderRequest::new(template)
                .slot("problem", it.problem.statement.as_str())
                .slot("structure", structure)
                .slot("trace", numbered(&it.trace));
            let mut calls = 0;
            for attempt in 0..2 {
                let req = if attempt == 0 { base.clone() } else { base.clone().slot("retry", "1") };
                calls += 1;
                if let Some(p) = parse_probability(&provider.complete(&req)?.text) {
                    let ce = cross_entropy(p, it.outcome);
                    let p = p.clamp(CE_EPSILON, 1.0 - CE_EPSILON);
                    return Ok((Some(PredictionRecord { problem_id: it.problem.id.clone(), p, y: it.outcome as u8, ce }), calls, None));
                }
            }
            Ok((None, calls, Some(format!("{}: unparseable probability, excluded", it.problem.id))))
        })
        .collect();
    let mut report = PredictionReport { method: method.into(), records: Vec::new(), mean_ce: None, calls: 0, excluded: Vec::new() };
    for r in results {
        let (rec, calls, warn) = r?;
        report.calls += calls;
        report.records.extend(rec);
        report.excluded.extend(warn);
    }
    if !report.records.is_empty() {
        report.mean_ce = Some(report.records.iter().map(|r| r.ce).sum::<f64>() / report.records.len() as f64);
    }
    Ok(report)
}

/// Success prediction conditioned on the neighborhood DAG.
pub fn predict_success(provider: &Provider, dag: &FeasibleRegionDag, items: &[PredictionItem<'_>]) -> Result<PredictionReport, ProviderError> {
    predict_with(provider, templates::PREDICT_SUCCESS, "dag", &dag.prompt_structure(), items)
}

/// Baseline: the structure comes from repeated sampling on the anchor,
/// weighted by visit frequency.
pub fn baseline_predict(provider: &Provider, samples_dag: &FeasibleRegionDag, items: &[PredictionItem<'_>]) -> Result<PredictionReport, ProviderError> {
    predict_with(provider, templates::PREDICT_BASELINE, "baseline", &samples_dag.prompt_structure(), items)
}

/// Builds the frequency-weighted DAG from plain step-text trajectories.
pub fn sampling_dag(anchor_id: &str, samples: &[(String, Vec<String>)], judge: &Judge) -> Result<FeasibleRegionDag, ProviderError> {
    let assessed: Vec<AssessedTrajectory> = samples
        .iter()
        .map(|(id, steps)| AssessedTrajectory {
            instance_id: id.clone(),
            steps: steps.iter().enumerate().map(|(i, t)| StepAssessment::new(id, i + 1, t, true, 1, 1)).collect(),
        })
        .collect();
    let mut dag = build_dag(anchor_id, &assessed, judge)?;
    dag.reweight_by_frequency(samples.len());
    Ok(dag)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(id: &str, texts: &[&str]) -> AssessedTrajectory {
        AssessedTrajectory {
            instance_id: id.into(),
            steps: texts.iter().enumerate().map(|(i, t)| StepAssessment::new(id, i + 1, t, true, 1, 1)).collect(),
        }
    }

    fn edge_set(d: &FeasibleRegionDag) -> Vec<(usize, usize, u64)> {
        d.edges.iter().map(|e| (e.from, e.to, e.count)).collect()
    }

    #[test]
    fn assessment_identity() {
        let a = StepAssessment::new("x", 1, "t", true, 7, 10);
        assert_eq!(a.w, Rational::new(7.into(), 10.into()));
        let a = StepAssessment::new("x", 1, "t", false, 10, 10);
        assert_eq!(a.w, Rational::from_integer(0.into()));
        let a = StepAssessment::new("x", 1, "t", true, 5, 8);
        assert_eq!(a.w, Rational::new(5.into(), 8.into()));
    }

    #[test]
    fn single_path() {
        let j = Judge::overlap(0.5);
        let d = build_dag("a", &[traj("a", &["read apples", "read pears", "add apples and pears"])], &j).unwrap();
        assert_eq!(d.nodes.len(), 3);
        assert_eq!(edge_set(&d), vec![(0, 1, 1), (1, 2, 1)]);
    }

    #[test]
    fn identical_trajectories_double_edge_counts() {
        let j = Judge::overlap(0.5);
        let t = ["read apples", "read pears", "add apples and pears"];
        let d = build_dag("a", &[traj("a", &t), traj("b", &t)], &j).unwrap();
        assert_eq!(d.nodes.len(), 3);
        assert_eq!(edge_set(&d), vec![(0, 1, 2), (1, 2, 2)]);
    }

    #[test]
    fn diamond() {
        let j = Judge::overlap(0.5);
        let d = build_dag(
            "a",
            &[traj("a", &["read apples", "double the count", "report total"]), traj("b", &["read apples", "halve the count now", "report total"])],
            &j,
        )
        .unwrap();
        assert_eq!(d.nodes.iter().map(|n| n.text.as_str()).collect::<Vec<_>>(), vec!["read apples", "double the count", "report total", "halve the count now"]);
        assert_eq!(edge_set(&d), vec![(0, 1, 1), (0, 3, 1), (1, 2, 1), (3, 2, 1)]);
        assert!(d.topological_order().is_some());
    }

    #[test]
    fn back_edge_merge_is_rejected() {
        let j = Judge::overlap(0.5);
        let d = build_dag("a", &[traj("a", &["alpha step", "beta step"]), traj("b", &["beta step", "alpha step"])], &j).unwrap();
        assert!(d.topological_order().is_some());
        assert_eq!(d.nodes.len(), 3);
    }

    #[test]
    fn pooled_node_weight() {
        let j = Judge::overlap(0.5);
        let mut a = traj("a", &["same step"]);
        a.steps[0] = StepAssessment::new("a", 1, "same step", true, 3, 4);
        let mut b = traj("b", &["same step"]);
        b.steps[0] = StepAssessment::new("b", 1, "same step", false, 1, 4);
        let d = build_dag("a", &[a, b], &j).unwrap();
        // (1/2) * (4/8)
        assert_eq!(d.nodes[0].weight, Rational::new(1.into(), 4.into()));
    }

    #[test]
    fn coverage_counts() {
        let j = Judge::overlap(0.5);
        let d = build_dag("a", &[traj("a", &["read apples", "read pears", "add apples and pears", "report"])], &j).unwrap();
        let own: Vec<String> = ["read apples", "read pears", "add apples and pears", "report"].map(String::from).to_vec();
        assert_eq!(trajectory_coverage(&d, &own, &j).unwrap(), 4);
        let other: Vec<String> = ["read apples", "read pears", "add apples and pears", "divide by zero"].map(String::from).to_vec();
        let rep = coverage(&d, &[("x".into(), TrajectorySource::Perturbed, other), ("e".into(), TrajectorySource::Perturbed, vec![])], &j).unwrap();
        assert_eq!(rep.per_trajectory[0].fraction, 0.75);
        assert_eq!(rep.warnings.len(), 1);
    }

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy(0.5, true) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(cross_entropy(1.0, true) < 1e-5);
        // -ln(0.8) computed via log of the complement.
        assert!((cross_entropy(0.2, false) - (1.0f64 / 0.8).ln()).abs() < 1e-12);
        assert!(cross_entropy(0.0, true).is_finite());
    }

    #[test]
    fn dot_export_renders_three_decimals() {
        let j = Judge::overlap(0.5);
        let mut t = traj("a", &["x \"quoted\""]);
        t.steps[0] = StepAssessment::new("a", 1, "x \"quoted\"", true, 2, 3);
        let d = build_dag("a", &[t], &j).unwrap();
        assert!(d.to_dot().contains("n0 [label=\"x \\\"quoted\\\"\\nW=0.667\"]"));
        let back: FeasibleRegionDag = serde_json::from_str(&d.to_json()).unwrap();
        assert_eq!(back, d);
    }
}

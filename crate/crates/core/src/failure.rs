//! Failure-mode discovery, counterfactual interventions, characteristic
//! functions, Shapley attribution and subsampling stability.

use std::collections::{BTreeMap, BTreeSet};

use num_traits::{One, Zero};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explain::{explain_statement, Explanation};
use crate::judge::Judge;
use crate::model::{Problem, Tolerance};
use crate::neighborhood::relabel;
use crate::protocol::{givens, parse_candidates, parse_rewrite, parse_verdict, render_givens, Candidate};
use crate::provider::{templates, Provider, ProviderError, ProviderRequest};
use crate::scalar::{rational_serde, Rational, Scalar};
use crate::step_format::{numerals, parse_reference, serialize_spec, serialize_step};
use crate::text::mentions;

pub const DEFAULT_K_MAX: usize = 5;
pub const DEFAULT_TOP_K: usize = 3;
pub const EXACT_THRESHOLD: usize = 12;
pub const STABILITY_SIZES: [usize; 4] = [5, 10, 20, 40];
pub const LIBRARY_SCHEMA: &str = "true.failure-modes/v1";

#[derive(Debug, Error)]
pub enum FailureError {
    #[error("cluster needs at least two members, got {0}")]
    ClusterTooSmall(usize),
    #[error("duplicate cluster member `{0}`")]
    DuplicateMember(String),
    #[error("{k} modes exceed the exact threshold {threshold}; configure a sampling budget")]
    TooManyModes { k: usize, threshold: usize },
    #[error("characteristic table has {got} entries, expected {expected}")]
    TableSize { got: usize, expected: usize },
    #[error("no sample exhibits coalition(s) {}", fmt_masks(.missing, *.k))]
    Coverage { missing: Vec<u32>, k: usize },
    #[error("subsample size {size} exceeds cluster size {n}; enable sampling with replacement")]
    SubsampleTooLarge { size: usize, n: usize },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

fn fmt_masks(masks: &[u32], k: usize) -> String {
    masks.iter().map(|m| mask_label(*m, k)).collect::<Vec<_>>().join(", ")
}

/// `{f1,f3}` style label of a coalition.
pub fn mask_label(mask: u32, k: usize) -> String {
    let ids: Vec<String> = (0..k).filter(|i| mask & (1 << i) != 0).map(|i| format!("f{}", i + 1)).collect();
    format!("{{{}}}", ids.join(","))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: String,
    pub members: Vec<Problem>,
    #[serde(default)]
    pub pattern_summary: String,
}

impl Cluster {
    pub fn new(id: &str, members: Vec<Problem>, pattern_summary: &str) -> Result<Self, FailureError> {
        if members.len() < 2 {
            return Err(FailureError::ClusterTooSmall(members.len()));
        }
        let mut seen = BTreeSet::new();
        for m in &members {
            if !seen.insert(m.id.as_str()) {
                return Err(FailureError::DuplicateMember(m.id.clone()));
            }
        }
        Ok(Cluster { id: id.into(), members, pattern_summary: pattern_summary.into() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureMode {
    pub id: String,
    pub name: String,
    pub description: String,
    pub error_type: String,
    pub complexity: String,
    /// Keyword fallback for the detector.
    pub keywords: Vec<String>,
    pub detector_template: String,
    pub inject_template: String,
    pub remove_template: String,
    /// Number of merged discovery candidates.
    pub frequency: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

impl FailureMode {
    pub fn from_candidate(id: &str, c: &Candidate) -> Self {
        FailureMode {
            id: id.into(),
            name: c.name.clone(),
            description: c.description.clone(),
            error_type: c.error_type.clone(),
            complexity: c.complexity.clone(),
            keywords: c.keywords.clone(),
            detector_template: templates::FAILURE_DETECT.into(),
            inject_template: templates::FAILURE_INJECT.into(),
            remove_template: templates::FAILURE_REMOVE.into(),
            frequency: 1,
            aliases: Vec::new(),
        }
    }

    /// Keyword fallback: any keyword in the statement or trace.
    pub fn keyword_detect(&self, statement: &str, trace: &str) -> bool {
        self.keywords.iter().any(|k| mentions(statement, k) || mentions(trace, k))
    }
}

/// Versioned on-disk form of a mode set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureModeLibrary {
    pub schema: String,
    pub cluster_id: String,
    pub modes: Vec<FailureMode>,
}

impl FailureModeLibrary {
    pub fn new(cluster_id: &str, modes: Vec<FailureMode>) -> Self {
        FailureModeLibrary { schema: LIBRARY_SCHEMA.into(), cluster_id: cluster_id.into(), modes }
    }
}

/// A cluster member with the target model's trace on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMember {
    pub problem: Problem,
    pub explanation: Explanation,
    pub correct: bool,
}

fn trace_text(e: &Explanation) -> String {
    e.step_texts().iter().enumerate().map(|(i, t)| format!("{}. {t}", i + 1)).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discovery {
    pub modes: Vec<FailureMode>,
    pub candidates: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notices: Vec<String>,
}

/// Merges candidates greedily by name equivalence, then keeps the `k_max`
/// most frequent (ties keep first-seen order) and numbers them f1..fK.
pub fn merge_candidates(candidates: &[Candidate], judge: &Judge, k_max: usize) -> Result<Vec<FailureMode>, ProviderError> {
    let mut groups: Vec<FailureMode> = Vec::new();
    for c in candidates {
        let mut merged = false;
        for g in groups.iter_mut() {
            if judge.equivalent(&c.name, &g.name)? {
                g.frequency += 1;
                for k in &c.keywords {
                    if !g.keywords.contains(k) {
                        g.keywords.push(k.clone());
                    }
                }
                if c.name != g.name && !g.aliases.contains(&c.name) {
                    g.aliases.push(c.name.clone());
                }
                merged = true;
                break;
            }
        }
        if !merged {
            groups.push(FailureMode::from_candidate("", c));
        }
    }
    groups.sort_by_key(|g| std::cmp::Reverse(g.frequency));
    groups.truncate(k_max);
    for (i, g) in groups.iter_mut().enumerate() {
        g.id = format!("f{}", i + 1);
    }
    Ok(groups)
}

/// Aligns each incorrect member's trace with its reference and abstracts
/// the divergences into at most `k_max` modes.
pub fn discover_failure_modes(provider: &Provider, members: &[ClusterMember], judge: &Judge, k_max: usize) -> Result<Discovery, ProviderError> {
    let incorrect: Vec<&ClusterMember> = members.iter().filter(|m| !m.correct).collect();
    if incorrect.is_empty() {
        return Ok(Discovery { modes: Vec::new(), candidates: 0, notices: vec!["no incorrect members; no failure modes".into()] });
    }
    let replies: Vec<Result<Vec<Candidate>, ProviderError>> = incorrect
        .par_iter()
        .map(|m| {
            let reference = parse_reference(&m.problem).map(|s| serialize_spec(&s)).unwrap_or_default();
            let req = ProviderRequest::new(templates::FAILURE_DISCOVER)
                .slot("problem", m.problem.statement.as_str())
                .slot("trace", trace_text(&m.explanation))
                .slot("reference", reference);
            Ok(parse_candidates(&provider.complete(&req)?.text))
        })
        .collect();
    let mut candidates = Vec::new();
    for r in replies {
        candidates.extend(r?);
    }
    let modes = merge_candidates(&candidates, judge, k_max)?;
    let mut notices = Vec::new();
    if modes.is_empty() {
        notices.push("discovery produced no candidates".into());
    }
    Ok(Discovery { modes, candidates: candidates.len(), notices })
}

/// Detects modes with the provider when given, else with keywords.
#[derive(Debug, Clone)]
pub struct Detector {
    pub provider: Option<Provider>,
}

impl Detector {
    pub fn detect(&self, mode: &FailureMode, statement: &str, trace: &str) -> Result<bool, ProviderError> {
        let Some(p) = &self.provider else { return Ok(mode.keyword_detect(statement, trace)) };
        let req = ProviderRequest::new(&mode.detector_template)
            .slot("problem", statement)
            .slot("trace", trace)
            .slot("mode", mode.name.as_str())
            .slot("description", mode.description.as_str())
            .slot("keywords", mode.keywords.join(", "));
        Ok(parse_verdict(&p.complete(&req)?.text).unwrap_or_else(|| mode.keyword_detect(statement, trace)))
    }

    pub fn configuration(&self, modes: &[FailureMode], statement: &str, trace: &str) -> Result<u32, ProviderError> {
        let mut mask = 0;
        for (i, m) in modes.iter().enumerate() {
            if self.detect(m, statement, trace)? {
                mask |= 1 << i;
            }
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanItem {
    pub base: usize,
    pub target: u32,
}

/// One variant per member per coalition other than the member's own.
pub fn full_plan(base_configs: &[u32], k: usize) -> Vec<PlanItem> {
    let all = 1u32 << k;
    base_configs
        .iter()
        .enumerate()
        .flat_map(|(b, &cfg)| (0..all).filter(move |&t| t != cfg).map(move |t| PlanItem { base: b, target: t }))
        .collect()
}

/// Member of the augmented cluster C′.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedItem {
    pub problem: Problem,
    pub base_id: String,
    pub configuration: u32,
    pub variant: bool,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedCluster {
    pub cluster_id: String,
    pub modes: usize,
    pub items: Vec<AugmentedItem>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Settings shared by the intervention and evaluation steps.
#[derive(Debug, Clone)]
pub struct InterventionContext<'a> {
    pub generator: &'a Provider,
    pub detector: Detector,
    pub strategy: String,
    pub temperature: f64,
    pub tol: Tolerance,
}

fn rewrite_step(
    ctx: &InterventionContext<'_>,
    mode: &FailureMode,
    inject: bool,
    problem: &Problem,
    reference_text: &str,
    givens_text: &str,
) -> Result<Result<crate::protocol::Rewrite, String>, ProviderError> {
    let template = if inject { &mode.inject_template } else { &mode.remove_template };
    let req = ProviderRequest::new(template)
        .slot("problem", problem.statement.as_str())
        .slot("mode", mode.name.as_str())
        .slot("description", mode.description.as_str())
        .slot("keywords", mode.keywords.join(", "))
        .slot("givens", givens_text)
        .slot("reference", reference_text);
    Ok(parse_rewrite(&ctx.generator.complete(&req)?.text).map_err(|e| e.to_string()))
}

/// Builds the variant of `base` exhibiting exactly `target`, evaluates the
/// target model on it and verifies the configuration by re-detection.
fn make_variant(
    ctx: &InterventionContext<'_>,
    modes: &[FailureMode],
    base: &ClusterMember,
    base_cfg: u32,
    target: u32,
) -> Result<Result<AugmentedItem, String>, ProviderError> {
    let Ok(reference) = parse_reference(&base.problem) else {
        return Ok(Err(format!("{}: no reference procedure", base.problem.id)));
    };
    let reference_text = serialize_spec(&reference);
    let givens_text = render_givens(&givens(&reference));
    let mut current = base.problem.clone();
    let mut sets = BTreeMap::new();
    let mut choices = base.problem.choices.clone();
    let k = modes.len();
    let order = (0..k).filter(|i| base_cfg & (1 << i) != 0 && target & (1 << i) == 0).map(|i| (i, false)).chain(
        (0..k).filter(|i| base_cfg & (1 << i) == 0 && target & (1 << i) != 0).map(|i| (i, true)),
    );
    for (i, inject) in order {
        match rewrite_step(ctx, &modes[i], inject, &current, &reference_text, &givens_text)? {
            Ok(r) => {
                current.statement = r.statement;
                sets.extend(r.sets);
                if !r.choices.is_empty() {
                    choices = r.choices;
                }
            }
            Err(why) => return Ok(Err(format!("{} -> {}: {why}", base.problem.id, mask_label(target, k)))),
        }
    }
    let id = format!("{}~{}", base.problem.id, mask_label(target, k));
    if !sets.is_empty() {
        let stated = numerals(&current.statement);
        if let Some((name, _)) = sets.iter().find(|(_, v)| !stated.contains(v)) {
            return Ok(Err(format!("{id}: changed value of `{name}` is not stated")));
        }
        match relabel(&reference, &sets, &choices, base.problem.task_kind) {
            Ok((spec, answer)) => {
                current.answer = answer;
                current.reference_steps = spec.steps.iter().map(serialize_step).collect();
                if base.problem.choices_opt().is_some() {
                    current.choices = choices;
                }
            }
            Err(why) => return Ok(Err(format!("{id}: relabel failed: {why}"))),
        }
    }
    current.id = id.clone();
    current.metadata.insert("base".into(), base.problem.id.clone());
    current.metadata.insert("configuration".into(), mask_label(target, k));

    let e = explain_statement(
        ctx.generator,
        &current.id,
        &current.statement,
        &current.choices,
        current.task_kind,
        &ctx.strategy,
        ctx.temperature,
        None,
    )?;
    let detected = ctx.detector.configuration(modes, &current.statement, &trace_text(&e))?;
    if detected != target {
        return Ok(Err(format!("{id}: re-detection found {} instead", mask_label(detected, k))));
    }
    let correct = e.trajectory(&current.answer, &ctx.tol).correct == Some(true);
    Ok(Ok(AugmentedItem { problem: current, base_id: base.problem.id.clone(), configuration: target, variant: true, correct }))
}

/// Originals (tagged with their detected configuration) plus one verified
/// variant per plan item. Unverifiable variants are dropped with a warning.
pub fn intervene(
    ctx: &InterventionContext<'_>,
    cluster_id: &str,
    members: &[ClusterMember],
    modes: &[FailureMode],
    plan: &[PlanItem],
) -> Result<AugmentedCluster, ProviderError> {
    let configs: Vec<u32> = members
        .iter()
        .map(|m| ctx.detector.configuration(modes, &m.problem.statement, &trace_text(&m.explanation)))
        .collect::<Result<_, _>>()?;
    let mut items: Vec<AugmentedItem> = members
        .iter()
        .zip(&configs)
        .map(|(m, &c)| AugmentedItem {
            problem: m.problem.clone(),
            base_id: m.problem.id.clone(),
            configuration: c,
            variant: false,
            correct: m.correct,
        })
        .collect();
    let variants: Vec<Result<Result<AugmentedItem, String>, ProviderError>> = plan
        .par_iter()
        .map(|p| match members.get(p.base) {
            Some(m) => make_variant(ctx, modes, m, configs[p.base], p.target),
            None => Ok(Err(format!("plan references missing member {}", p.base))),
        })
        .collect();
    let mut warnings = Vec::new();
    for v in variants {
        match v? {
            Ok(item) => items.push(item),
            Err(w) => warnings.push(w),
        }
    }
    Ok(AugmentedCluster { cluster_id: cluster_id.into(), modes: modes.len(), items, warnings })
}

/// Configuration plans whose base already has the target need no variant.
pub fn base_configurations(detector: &Detector, members: &[ClusterMember], modes: &[FailureMode]) -> Result<Vec<u32>, ProviderError> {
    members
        .iter()
        .map(|m| detector.configuration(modes, &m.problem.statement, &trace_text(&m.explanation)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoalitionValue {
    pub mask: u32,
    pub label: String,
    #[serde(with = "rational_serde")]
    pub v: Rational,
    pub samples: u64,
    pub correct: u64,
    /// Filled from the nearest supersets because no sample had exactly this configuration.
    pub approximated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacteristicTable {
    pub k: usize,
    pub entries: Vec<CoalitionValue>,
}

impl CharacteristicTable {
    /// Builds a table from explicit values indexed by mask.
    pub fn from_values(k: usize, values: &[Rational]) -> Result<Self, FailureError> {
        let expected = 1usize << k;
        if values.len() != expected {
            return Err(FailureError::TableSize { got: values.len(), expected });
        }
        Ok(CharacteristicTable {
            k,
            entries: values
                .iter()
                .enumerate()
                .map(|(m, v)| CoalitionValue {
                    mask: m as u32,
                    label: mask_label(m as u32, k),
                    v: v.clone(),
                    samples: 1,
                    correct: 0,
                    approximated: false,
                })
                .collect(),
        })
    }

    pub fn v(&self, mask: u32) -> &Rational {
        &self.entries[mask as usize].v
    }

    /// The attributed function u = 1 - v, as `T`.
    pub fn u_values<T: Scalar>(&self) -> Vec<T> {
        self.entries.iter().map(|e| T::from_rational(&(Rational::one() - &e.v))).collect()
    }

    pub fn v_values<T: Scalar>(&self) -> Vec<T> {
        self.entries.iter().map(|e| T::from_rational(&e.v)).collect()
    }
}

/// v(S) = mean correctness over samples whose configuration is exactly S.
///
/// With `nearest_superset`, an uncovered S takes the mean of the covered
/// coalitions T ⊃ S with the fewest extra modes, and is flagged.
pub fn estimate_v(items: &[(u32, bool)], k: usize, nearest_superset: bool) -> Result<CharacteristicTable, FailureError> {
    let all = 1u32 << k;
    let mut counts = vec![(0u64, 0u64); all as usize];
    for &(mask, ok) in items {
        if mask < all {
            counts[mask as usize].0 += 1;
            counts[mask as usize].1 += ok as u64;
        }
    }
    let mut entries = Vec::with_capacity(all as usize);
    let mut missing = Vec::new();
    for m in 0..all {
        let (n, c) = counts[m as usize];
        if n > 0 {
            entries.push(CoalitionValue {
                mask: m,
                label: mask_label(m, k),
                v: Rational::new((c as i64).into(), (n as i64).into()),
                samples: n,
                correct: c,
                approximated: false,
            });
            continue;
        }
        let fill = nearest_superset
            .then(|| {
                let supers: Vec<u32> = (0..all).filter(|&t| t & m == m && t != m && counts[t as usize].0 > 0).collect();
                let best = supers.iter().map(|t| (t ^ m).count_ones()).min()?;
                let chosen: Vec<u32> = supers.into_iter().filter(|t| (t ^ m).count_ones() == best).collect();
                let mean = chosen.iter().fold(Rational::zero(), |acc, t| {
                    let (n, c) = counts[*t as usize];
                    acc + Rational::new((c as i64).into(), (n as i64).into())
                }) / Rational::from_integer((chosen.len() as i64).into());
                Some(mean)
            })
            .flatten();
        match fill {
            Some(v) => entries.push(CoalitionValue { mask: m, label: mask_label(m, k), v, samples: 0, correct: 0, approximated: true }),
            None => missing.push(m),
        }
    }
    if !missing.is_empty() {
        return Err(FailureError::Coverage { missing, k });
    }
    Ok(CharacteristicTable { k, entries })
}

fn factorial(n: usize) -> Rational {
    (1..=n).fold(Rational::one(), |acc, i| acc * Rational::from_integer((i as i64).into()))
}

/// Exact Shapley values of the game `u` (indexed by coalition mask).
pub fn shapley_exact<T: Scalar>(u: &[T], k: usize) -> Result<Vec<T>, FailureError> {
    let expected = 1usize << k;
    if u.len() != expected {
        return Err(FailureError::TableSize { got: u.len(), expected });
    }
    let kf = factorial(k);
    let weights: Vec<T> = (0..k.max(1)).map(|s| T::from_rational(&(factorial(s) * factorial(k.saturating_sub(s + 1)) / &kf))).collect();
    Ok((0..k)
        .into_par_iter()
        .map(|i| {
            let bit = 1usize << i;
            let mut phi = T::zero();
            for s in 0..expected {
                if s & bit != 0 {
                    continue;
                }
                let size = (s as u32).count_ones() as usize;
                phi = phi + weights[size].clone() * (u[s | bit].clone() - u[s].clone());
            }
            phi
        })
        .collect())
}

/// Monte-Carlo Shapley over `permutations` seeded uniform orderings.
pub fn shapley_sampled<T: Scalar>(u: &[T], k: usize, permutations: usize, seed: u64) -> Result<Vec<T>, FailureError> {
    let expected = 1usize << k;
    if u.len() != expected {
        return Err(FailureError::TableSize { got: u.len(), expected });
    }
    let mut rng = crate::seed::rng(seed, "shapley");
    let mut acc = vec![T::zero(); k];
    let mut order: Vec<usize> = (0..k).collect();
    for _ in 0..permutations {
        order.shuffle(&mut rng);
        let mut mask = 0usize;
        for &i in &order {
            let next = mask | (1 << i);
            acc[i] = acc[i].clone() + (u[next].clone() - u[mask].clone());
            mask = next;
        }
    }
    let n = T::from_int(permutations.max(1) as i64);
    Ok(acc.into_iter().map(|a| a / n.clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyMode {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapleyConfig {
    pub exact_threshold: usize,
    /// Permutation budget; required above the exact threshold.
    pub permutations: Option<usize>,
    pub seed: u64,
}

impl Default for ShapleyConfig {
    fn default() -> Self {
        ShapleyConfig { exact_threshold: EXACT_THRESHOLD, permutations: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Impact {
    Low,
    #[serde(rename = "Med.")]
    Medium,
    High,
}

impl Impact {
    pub fn as_str(self) -> &'static str {
        match self {
            Impact::Low => "Low",
            Impact::Medium => "Med.",
            Impact::High => "High",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpactThresholds {
    pub medium: f64,
    pub high: f64,
}

impl Default for ImpactThresholds {
    fn default() -> Self {
        ImpactThresholds { medium: 0.20, high: 0.30 }
    }
}

impl ImpactThresholds {
    pub fn bucket(&self, phi: f64) -> Impact {
        if phi >= self.high {
            Impact::High
        } else if phi >= self.medium {
            Impact::Medium
        } else {
            Impact::Low
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAttribution {
    pub id: String,
    pub name: String,
    pub error_type: String,
    pub complexity: String,
    /// Attribution on the error rate u = 1 - v.
    pub phi: f64,
    /// Attribution on v itself (always -phi).
    pub phi_v: f64,
    pub impact: Impact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyResult {
    pub mode: ShapleyMode,
    pub attributions: Vec<ModeAttribution>,
    /// u(F) - u(∅).
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Coalitions whose value was filled from supersets.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub approximated: Vec<String>,
}

impl ShapleyResult {
    /// Mode ids by descending φ, ties broken by id.
    pub fn ranking(&self) -> Vec<String> {
        let mut a: Vec<&ModeAttribution> = self.attributions.iter().collect();
        a.sort_by(|x, y| y.phi.total_cmp(&x.phi).then_with(|| x.id.cmp(&y.id)));
        a.into_iter().map(|m| m.id.clone()).collect()
    }
}

/// Attributes the table's error rate to `modes`.
pub fn shapley(table: &CharacteristicTable, modes: &[FailureMode], cfg: &ShapleyConfig, thresholds: &ImpactThresholds) -> Result<ShapleyResult, FailureError> {
    let k = table.k;
    let (mode, phis, perms): (ShapleyMode, Vec<f64>, Option<usize>) = if k <= cfg.exact_threshold {
        // Exact on rationals, converted once at the end.
        let u: Vec<Rational> = table.u_values();
        let phi = shapley_exact(&u, k)?;
        (ShapleyMode::Exact, phi.iter().map(|p| p.to_f64()).collect(), None)
    } else {
        let Some(n) = cfg.permutations else {
            return Err(FailureError::TooManyModes { k, threshold: cfg.exact_threshold });
        };
        let u: Vec<f64> = table.u_values();
        (ShapleyMode::Sampled, shapley_sampled(&u, k, n, cfg.seed)?, Some(n))
    };
    let full = (1u32 << k) - 1;
    let total = (table.v(0) - table.v(full)).to_f64();
    let attributions = phis
        .iter()
        .enumerate()
        .map(|(i, &phi)| {
            let m = modes.get(i);
            ModeAttribution {
                id: m.map_or_else(|| format!("f{}", i + 1), |m| m.id.clone()),
                name: m.map_or_else(String::new, |m| m.name.clone()),
                error_type: m.map_or_else(String::new, |m| m.error_type.clone()),
                complexity: m.map_or_else(String::new, |m| m.complexity.clone()),
                phi,
                phi_v: -phi,
                impact: thresholds.bucket(phi),
            }
        })
        .collect();
    Ok(ShapleyResult {
        mode,
        attributions,
        total,
        permutations: perms,
        seed: perms.map(|_| cfg.seed),
        approximated: table.entries.iter().filter(|e| e.approximated).map(|e| e.label.clone()).collect(),
    })
}

/// |A ∩ B| / |A ∪ B|; two empty sets are identical.
pub fn jaccard<T: Scalar, S: Ord>(a: &BTreeSet<S>, b: &BTreeSet<S>) -> T {
    let union = a.union(b).count();
    if union == 0 {
        return T::one();
    }
    T::from_ratio(a.intersection(b).count() as i64, union as i64)
}

/// Kendall τ over the items both rankings contain; `None` below two shared items.
pub fn kendall_tau<T: Scalar, S: PartialEq>(a: &[S], b: &[S]) -> Option<T> {
    let shared: Vec<(usize, usize)> =
        a.iter().enumerate().filter_map(|(i, x)| b.iter().position(|y| y == x).map(|j| (i, j))).collect();
    let m = shared.len();
    if m < 2 {
        return None;
    }
    let mut score = 0i64;
    for x in 0..m {
        for y in x + 1..m {
            let da = shared[x].0 as i64 - shared[y].0 as i64;
            let db = shared[x].1 as i64 - shared[y].1 as i64;
            score += (da * db).signum();
        }
    }
    Some(T::from_ratio(score, (m * (m - 1) / 2) as i64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleRun {
    pub repeat: usize,
    pub members: Vec<usize>,
    pub top_k: Vec<String>,
    pub jaccard: f64,
    pub kendall_tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeStability {
    pub size: usize,
    pub runs: Vec<SubsampleRun>,
    pub mean_jaccard: f64,
    pub mean_kendall_tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub k: usize,
    pub seed: u64,
    pub with_replacement: bool,
    pub full_top_k: Vec<String>,
    pub sizes: Vec<SizeStability>,
}

impl StabilityReport {
    /// Columns (size, jaccard, kendall_tau); undefined τ is left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,jaccard,kendall_tau\n");
        for s in &self.sizes {
            let tau = s.mean_kendall_tau.map(|t| format!("{t:.4}")).unwrap_or_default();
            out.push_str(&format!("{},{:.4},{tau}\n", s.size, s.mean_jaccard));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub k: usize,
    pub seed: u64,
    pub with_replacement: bool,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig { sizes: STABILITY_SIZES.to_vec(), repeats: 3, k: DEFAULT_TOP_K, seed: 0, with_replacement: true }
    }
}

/// Reruns `analyze` (which maps member indices to a mode ranking) on seeded
/// subsamples and compares each top-k with the full-cluster top-k.
pub fn stability<E, F>(n: usize, full_ranking: &[String], cfg: &StabilityConfig, analyze: F) -> Result<StabilityReport, E>
where
    E: From<FailureError>,
    F: Fn(&[usize]) -> Result<Vec<String>, E>,
{
    let full_top: Vec<String> = full_ranking.iter().take(cfg.k).cloned().collect();
    let full_set: BTreeSet<String> = full_top.iter().cloned().collect();
    let mut sizes = Vec::new();
    for &size in &cfg.sizes {
        if size > n && !cfg.with_replacement {
            return Err(FailureError::SubsampleTooLarge { size, n }.into());
        }
        let mut runs = Vec::new();
        for repeat in 0..cfg.repeats.max(1) {
            let mut rng = crate::seed::rng(cfg.seed, &format!("stability/{size}/{repeat}"));
            let mut members: Vec<usize> = if cfg.with_replacement {
                (0..size).map(|_| rand::Rng::gen_range(&mut rng, 0..n)).collect()
            } else {
                rand::seq::index::sample(&mut rng, n, size).into_vec()
            };
            members.sort_unstable();
            let top: Vec<String> = analyze(&members)?.into_iter().take(cfg.k).collect();
            let set: BTreeSet<String> = top.iter().cloned().collect();
            runs.push(SubsampleRun {
                repeat,
                jaccard: jaccard::<f64, _>(&set, &full_set),
                kendall_tau: kendall_tau::<f64, _>(&top, &full_top),
                members,
                top_k: top,
            });
        }
        let mean_jaccard = runs.iter().map(|r| r.jaccard).sum::<f64>() / runs.len() as f64;
        let taus: Vec<f64> = runs.iter().filter_map(|r| r.kendall_tau).collect();
        let mean_kendall_tau = (!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64);
        sizes.push(SizeStability { size, runs, mean_jaccard, mean_kendall_tau });
    }
    Ok(StabilityReport { k: cfg.k, seed: cfg.seed, with_replacement: cfg.with_replacement, full_top_k: full_top, sizes })
}

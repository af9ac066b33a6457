//! Stage orchestration. Stages run in a fixed dependency order; a stage
//! whose input hashes match its stored manifest is skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use true_core::executor::{blind_execute, score_e3, E3Counts, VerificationOutcome};
use true_core::explain::{explain, explain_statement, Explanation};
use true_core::failure::{
    base_configurations, discover_failure_modes, estimate_v, full_plan, intervene, shapley, stability, AugmentedCluster,
    CharacteristicTable, ClusterMember, Detector, Discovery, FailureError, FailureModeLibrary, InterventionContext,
    ShapleyResult, StabilityReport,
};
use true_core::judge::Judge;
use true_core::model::{parse_dataset, Problem, Tolerance};
use true_core::neighborhood::{
    assess_steps, baseline_predict, build_dag, coverage, generate_neighborhood, predict_success, reference_trajectories,
    sampling_dag, Assessment, CoverageReport, FeasibleRegionDag, Neighborhood, NeighborhoodError, PredictionItem,
    PredictionReport, TrajectorySource,
};
use true_core::provider::ProviderError;

use crate::config::{build_models, ConfigError, Models, RunConfig};
use crate::report::{build_report, render_text, Report};
use crate::store::{input_hash, sha256_hex, to_json_bytes, ArtifactManifest, ArtifactStore, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Verify,
    E3,
    Neighborhood,
    Dag,
    Coverage,
    Predict,
    Failures,
    Shapley,
    Stability,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Verify,
        Stage::E3,
        Stage::Neighborhood,
        Stage::Dag,
        Stage::Coverage,
        Stage::Predict,
        Stage::Failures,
        Stage::Shapley,
        Stage::Stability,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Verify => "verify",
            Stage::E3 => "e3",
            Stage::Neighborhood => "neighborhood",
            Stage::Dag => "dag",
            Stage::Coverage => "coverage",
            Stage::Predict => "predict",
            Stage::Failures => "failures",
            Stage::Shapley => "shapley",
            Stage::Stability => "stability",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|x| x.as_str() == s)
    }

    /// Main artifact, relative to the store root.
    pub fn artifact(self) -> String {
        format!("{0}/{0}.json", self.as_str())
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Verify | Stage::Neighborhood | Stage::Report => &[],
            Stage::E3 | Stage::Failures => &[Stage::Verify],
            Stage::Dag => &[Stage::Neighborhood],
            Stage::Coverage => &[Stage::Neighborhood, Stage::Dag],
            Stage::Predict => &[Stage::Neighborhood, Stage::Dag, Stage::Coverage],
            Stage::Shapley => &[Stage::Failures],
            Stage::Stability => &[Stage::Verify, Stage::Failures, Stage::Shapley],
        }
    }

    fn needs_models(self) -> bool {
        !matches!(self, Stage::E3 | Stage::Shapley | Stage::Report)
    }

    fn uses_dataset(self) -> bool {
        matches!(self, Stage::Verify | Stage::Neighborhood | Stage::Failures | Stage::Stability)
    }

    /// The slice of the config this stage depends on.
    fn config_slice(self, cfg: &RunConfig) -> serde_json::Value {
        let p = &cfg.providers;
        match self {
            Stage::Verify => serde_json::json!({"strategies": cfg.strategies, "temperature": cfg.temperature, "generator": p.generator, "executor": p.executor}),
            Stage::E3 | Stage::Report => serde_json::json!({}),
            Stage::Neighborhood => serde_json::json!({"neighborhood": cfg.neighborhood, "temperature": cfg.temperature, "generator": p.generator}),
            Stage::Dag | Stage::Coverage => serde_json::json!({
                "strategy": cfg.neighborhood.strategy, "temperature": cfg.temperature, "judge_threshold": cfg.judge_threshold,
                "generator": p.generator, "executor": p.executor, "judge": p.judge,
            }),
            Stage::Predict => serde_json::json!({
                "k": cfg.neighborhood.k, "strategy": cfg.neighborhood.strategy, "temperature": cfg.temperature,
                "judge_threshold": cfg.judge_threshold, "generator": p.generator, "executor": p.executor, "judge": p.judge, "predictor": p.predictor,
            }),
            Stage::Failures => serde_json::json!({"failures": cfg.failures, "temperature": cfg.temperature, "judge_threshold": cfg.judge_threshold, "generator": p.generator, "judge": p.judge}),
            Stage::Shapley => serde_json::json!({"shapley": cfg.shapley, "seed": cfg.seed}),
            Stage::Stability => serde_json::json!({
                "stability": cfg.stability, "failures": cfg.failures, "shapley": cfg.shapley, "seed": cfg.seed, "temperature": cfg.temperature,
                "judge_threshold": cfg.judge_threshold, "generator": p.generator, "judge": p.judge,
            }),
        }
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Failure(#[from] FailureError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<NeighborhoodError> for StageError {
    fn from(e: NeighborhoodError) -> Self {
        match e {
            NeighborhoodError::Provider(p) => StageError::Provider(p),
            other => StageError::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("stage `{stage}` needs `{artifact}`, which has not been produced; run `{producer}` first")]
    MissingArtifact { stage: &'static str, artifact: String, producer: &'static str },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: &'static str, source: StageError },
}

impl PipelineError {
    /// 1 usage, 2 data, 3 provider.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(ConfigError::Parse(_) | ConfigError::Invalid(_)) => 1,
            PipelineError::Config(ConfigError::Provider(_)) => 3,
            PipelineError::Stage { source: StageError::Provider(_), .. } => 3,
            PipelineError::Stage { source: StageError::Failure(FailureError::Provider(_)), .. } => 3,
            _ => 2,
        }
    }
}

macro_rules! artifact {
    ($name:ident, $schema:literal { $($field:ident : $ty:ty),* $(,)? }) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            pub schema: String,
            $(pub $field: $ty,)*
        }
        impl $name {
            pub const SCHEMA: &'static str = $schema;
            pub fn new($($field: $ty),*) -> Self {
                $name { schema: Self::SCHEMA.into(), $($field,)* }
            }
        }
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRecord {
    pub problem_id: String,
    pub strategy: String,
    pub explanation: Explanation,
    /// `None` when the trace did not parse.
    pub outcome: Option<VerificationOutcome>,
    pub executed_correct: bool,
    pub original_correct: bool,
}

artifact!(VerifyArtifact, "true.verify/v1" { records: Vec<VerifyRecord> });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E3Row {
    pub strategy: String,
    pub counts: E3Counts,
    pub ea: Option<f64>,
    pub oa: Option<f64>,
    pub ec: Option<f64>,
    pub err: Option<f64>,
    /// EA, OA, EC, ERR as one-decimal percentages.
    pub percents: [String; 4],
}

impl E3Row {
    pub fn new(strategy: &str, counts: E3Counts) -> Self {
        let m = score_e3::<f64>(&counts);
        E3Row { strategy: strategy.into(), counts, percents: m.percents(), ea: m.ea, oa: m.oa, ec: m.ec, err: m.err }
    }
}

artifact!(E3Artifact, "true.e3/v1" { rows: Vec<E3Row> });
artifact!(NeighborhoodArtifact, "true.neighborhood/v1" { neighborhoods: Vec<Neighborhood>, skipped: Vec<String> });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagEntry {
    pub anchor_id: String,
    pub explanations: Vec<Explanation>,
    pub assessment: Assessment,
    pub dag: FeasibleRegionDag,
}

artifact!(DagArtifact, "true.dag-set/v1" { entries: Vec<DagEntry> });

/// A fresh trace on a neighborhood instance, not used to build the DAG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutSample {
    pub instance_id: String,
    pub steps: Vec<String>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageEntry {
    pub anchor_id: String,
    pub samples: Vec<HeldOutSample>,
    pub report: CoverageReport,
}

artifact!(CoverageArtifact, "true.coverage/v1" { entries: Vec<CoverageEntry>, pret_match: Option<f64>, gt_match: Option<f64> });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictEntry {
    pub anchor_id: String,
    pub dag: PredictionReport,
    pub baseline: PredictionReport,
}

// delta_ce is baseline CE minus DAG CE, positive when the DAG helps.
artifact!(PredictArtifact, "true.predict/v1" {
    entries: Vec<PredictEntry>,
    mean_ce_dag: Option<f64>,
    mean_ce_baseline: Option<f64>,
    delta_ce: Option<f64>,
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAnalysis {
    pub discovery: Discovery,
    pub augmented: AugmentedCluster,
    pub table: CharacteristicTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub cluster_id: String,
    pub members: Vec<String>,
    pub summary: String,
    pub library: FailureModeLibrary,
    pub analysis: ClusterAnalysis,
}

artifact!(FailuresArtifact, "true.failures/v1" { entries: Vec<FailureEntry> });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyEntry {
    pub cluster_id: String,
    pub result: ShapleyResult,
}

artifact!(ShapleyArtifact, "true.shapley/v1" { entries: Vec<ShapleyEntry> });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityEntry {
    pub cluster_id: String,
    pub report: StabilityReport,
}

artifact!(StabilityArtifact, "true.stability/v1" { entries: Vec<StabilityEntry> });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRun {
    pub stage: Stage,
    pub status: StageStatus,
    pub manifest_hash: String,
}

#[derive(Debug, Default)]
pub struct RunOptions {
    /// Record every model answer so the run can be replayed by a mock script.
    pub record: bool,
}

#[derive(Debug)]
pub struct RunSummary {
    pub stages: Vec<StageRun>,
    /// Present when recording.
    pub recorded: Option<true_core::provider::MockScript>,
}

struct StageOutput {
    files: Vec<(String, Vec<u8>)>,
    warnings: Vec<String>,
}

impl StageOutput {
    fn json<T: Serialize>(stage: Stage, value: &T, warnings: Vec<String>) -> Self {
        StageOutput { files: vec![(stage.artifact(), to_json_bytes(value))], warnings }
    }
}

pub fn load_dataset(path: &Path) -> Result<Vec<Problem>, PipelineError> {
    let raw = std::fs::read_to_string(path).map_err(|e| PipelineError::Dataset(format!("{}: {e}", path.display())))?;
    parse_dataset(&raw).map_err(|e| PipelineError::Dataset(e.to_string()))
}

/// Everything a stage may need.
pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub dataset: Vec<Problem>,
    pub store: ArtifactStore,
    pub tol: Tolerance,
    models: Option<Models>,
    judge: Option<Judge>,
    record: bool,
}

impl<'a> Context<'a> {
    pub fn new(cfg: &'a RunConfig, record: bool) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let dataset = load_dataset(&cfg.dataset)?;
        Ok(Context { cfg, dataset, store: ArtifactStore::open(&cfg.output_dir)?, tol: Tolerance::default(), models: None, judge: None, record })
    }

    fn ensure_models(&mut self) -> Result<(), PipelineError> {
        if self.models.is_none() {
            let m = build_models(self.cfg, &self.dataset, self.record)?;
            self.judge = Some(m.judge());
            self.models = Some(m);
        }
        Ok(())
    }

    fn problem(&self, id: &str) -> Result<&Problem, StageError> {
        self.dataset.iter().find(|p| p.id == id).ok_or_else(|| StageError::Data(format!("unknown problem id `{id}`")))
    }
}

/// Runs `stages` (all when empty) in dependency order.
pub fn run_pipeline(cfg: &RunConfig, stages: &[Stage], opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    let mut ctx = Context::new(cfg, opts.record)?;
    let selected: BTreeSet<Stage> = if stages.is_empty() { Stage::ALL.into_iter().collect() } else { stages.iter().copied().collect() };
    let dataset_hash = sha256_hex(&std::fs::read(&cfg.dataset).map_err(|e| PipelineError::Dataset(e.to_string()))?);
    let mut runs = Vec::new();
    for stage in Stage::ALL.into_iter().filter(|s| selected.contains(s)) {
        let inputs = stage_inputs(&ctx, stage, &dataset_hash)?;
        if let Some(m) = ctx.store.manifest(stage.as_str())? {
            if m.input_hash() == input_hash(stage.as_str(), &inputs) && ctx.store.outputs_intact(&m) {
                runs.push(StageRun { stage, status: StageStatus::Skipped, manifest_hash: m.manifest_hash });
                continue;
            }
        }
        if stage.needs_models() {
            ctx.ensure_models()?;
        }
        let out = run_stage(&ctx, stage).map_err(|source| PipelineError::Stage { stage: stage.as_str(), source })?;
        let mut outputs = BTreeMap::new();
        for (rel, bytes) in &out.files {
            outputs.insert(rel.clone(), ctx.store.write(rel, bytes)?);
        }
        let m = ArtifactManifest::new(stage.as_str(), inputs, outputs, out.warnings);
        ctx.store.write_manifest(&m)?;
        runs.push(StageRun { stage, status: StageStatus::Ran, manifest_hash: m.manifest_hash });
    }
    let recorded = if opts.record { ctx.models.as_ref().map(|m| m.recorded_script()) } else { None };
    Ok(RunSummary { stages: runs, recorded })
}

fn stage_inputs(ctx: &Context<'_>, stage: Stage, dataset_hash: &str) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut inputs = BTreeMap::new();
    let slice = serde_json::to_vec(&stage.config_slice(ctx.cfg)).expect("config serializes");
    inputs.insert("config".to_string(), sha256_hex(&slice));
    if stage.uses_dataset() {
        inputs.insert("dataset".to_string(), dataset_hash.to_string());
    }
    for (_, b) in ctx.cfg.bindings() {
        for p in b.script.iter().chain(b.profile.iter()) {
            let bytes = std::fs::read(p).map_err(|e| PipelineError::Dataset(format!("{}: {e}", p.display())))?;
            inputs.insert(format!("file:{}", p.file_name().and_then(|n| n.to_str()).unwrap_or("?")), sha256_hex(&bytes));
        }
    }
    let upstream: Vec<Stage> = if stage == Stage::Report {
        Stage::ALL.into_iter().filter(|s| *s != Stage::Report && ctx.store.exists(&s.artifact())).collect()
    } else {
        stage.deps().to_vec()
    };
    for dep in upstream {
        let Some(m) = ctx.store.manifest(dep.as_str())? else {
            return Err(PipelineError::MissingArtifact { stage: stage.as_str(), artifact: dep.artifact(), producer: dep.as_str() });
        };
        if !ctx.store.exists(&dep.artifact()) {
            return Err(PipelineError::MissingArtifact { stage: stage.as_str(), artifact: dep.artifact(), producer: dep.as_str() });
        }
        for (rel, h) in &m.outputs {
            inputs.insert(format!("artifact:{rel}"), h.clone());
        }
    }
    Ok(inputs)
}

fn run_stage(ctx: &Context<'_>, stage: Stage) -> Result<StageOutput, StageError> {
    match stage {
        Stage::Verify => stage_verify(ctx),
        Stage::E3 => stage_e3(ctx),
        Stage::Neighborhood => stage_neighborhood(ctx),
        Stage::Dag => stage_dag(ctx),
        Stage::Coverage => stage_coverage(ctx),
        Stage::Predict => stage_predict(ctx),
        Stage::Failures => stage_failures(ctx),
        Stage::Shapley => stage_shapley(ctx),
        Stage::Stability => stage_stability(ctx),
        Stage::Report => stage_report(ctx),
    }
}

fn models<'c>(ctx: &'c Context<'_>) -> (&'c Models, &'c Judge) {
    (ctx.models.as_ref().expect("models built"), ctx.judge.as_ref().expect("judge built"))
}

fn stage_verify(ctx: &Context<'_>) -> Result<StageOutput, StageError> {
    let (m, _) = models(ctx);
    let pairs: Vec<(&Problem, &String)> = ctx.dataset.iter().flat_map(|p| ctx.cfg.strategies.iter().map(move |s| (p, s))).collect();
    let records: Vec<Result<VerifyRecord, ProviderError>> = pairs
        .par_iter()
        .map(|(p, s)| {
            let e = explain(&m.generator, p, s, ctx.cfg.temperature)?;
            let outcome = e.spec.as_ref().map(|spec| blind_execute(spec, p.choices_opt(), m.executor.as_ref()));
            let executed_correct = outcome.as_ref().is_some_and(|o| o.is_correct(&p.answer, &ctx.tol));
            let original_correct = e.trajectory(&p.answer, &ctx.tol).correct == Some(true);
            Ok(VerifyRecord { problem_id: p.id.clone(), strategy: s.to_string(), explanation: e, outcome, executed_correct, original_correct })
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>, _>>()?;
    let warnings = records
        .iter()
        .filter(|r| r.outcome.is_none())
        .map(|r| format!("{}/{}: trace did not parse", r.problem_id, r.strategy))
        .collect();
    Ok(StageOutput::json(Stage::Verify, &VerifyArtifact::new(records), warnings))
}

fn stage_e3(ctx: &Context<'_>) -> Result<StageOutput, StageError> {
    let v: VerifyArtifact = ctx.store.read_json(&Stage::Verify.artifact())?;
    let mut order: Vec<String> = Vec::new();
    for r in &v.records {
        if !order.contains(&r.strategy) {
            order.push(r.strategy.clone());
        }
    }
    let rows = order
        .iter()
        .map(|s| {
            let pairs = v.records.iter().filter(|r| &r.strategy == s).map(|r| (r.executed_correct, r.original_correct));
            E3Row::new(s, E3Counts::from_pairs(pairs))
        })
        .collect();
    Ok(StageOutput::json(Stage::E3, &E3Artifact::new(rows), vec![]))
}

fn anchors<'c>(ctx: &'c Context<'_>) -> Result<Vec<&'c Problem>, StageError> {
    if ctx.cfg.neighborhood.anchors.is_empty() {
        return Ok(ctx.dataset.iter().collect());
    }
    ctx.cfg.neighborhood.anchors.iter().map(|id| ctx.problem(id)).collect()
}

fn stage_neighborhood(ctx: &Context<'_>) -> Result<StageOutput, StageError> {
    let (m, _) = models(ctx);
    let ncfg = ctx.cfg.neighborhood_config().map_err(|e| StageError::Data(e.to_string()))?;
    let mut neighborhoods = Vec::new();
    let mut skipped = Vec::new();
    let mut warnings = Vec::new();
    for a in anchors(ctx)? {
        match generate_neighborhood(&m.generator, a, &ncfg) {
            Ok(nb) => {
                warnings.extend(nb.warnings.iter().cloned());
                neighborhoods.push(nb);
            }
            Err(NeighborhoodError::NoReference(id)) => {
                warnings.push(format!("{id}: no reference procedure, no neighborhood"));
                skipped.push(id);
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(StageOutput::json(Stage::Neighborhood, &NeighborhoodArtifact::new(neighborhoods, skipped), warnings))
}

fn stage_dag(ctx: &Context<'_>) -> Result<StageOutput, StageError> {
    let (m, judge) = models(ctx);
    let nbs: NeighborhoodArtifact = ctx.store.read_json(&Stage::Neighborhood.artifact())?;
    let strategy = &ctx.cfg.neighborhood.strategy;
    let mut entries = Vec::new();
    let mut files = Vec::new();
    let mut warnings = Vec::new();
    for nb in &nbs.neighborhoods {
        let instances: Vec<&Problem> = nb.instances().collect();
        let explanations = instances
            .par_iter()
            .map(|p| explain(&m.generator, p, strategy, ctx.cfg.temperature))
            .collect::<Result<Vec<_>, _>>()?;
        let assessment = assess_steps(nb, &explanations, judge, m.executor.as_ref(), &ctx.tol)?;
        let dag = build_dag(&nb.anchor.id, &assessment.trajectories, judge)?;
        warnings.extend(assessment.warnings.iter().cloned());
        files.push((format!("dag/{}.dot", nb.anchor.id), dag.to_dot().into_bytes()));
        entries.push(DagEntry { anchor_id: nb.anchor.id.clone(), explanations, assessment, dag });
    }
    let mut out = StageOutput::json(Stage::Dag, &DagArtifact::new(entries), warnings);
    out.files.extend(files);
    Ok(out)
}

/// Sample index for held-out traces, distinct from the constructing draw.
const HELD_OUT_SAMPLE: u32 = 1;
/// First sample index of the baseline's repeated anchor draws.
const BASELINE_SAMPLE_BASE: u32 = 100;

fn stage_coverage(ctx: &Context<'_>) -> Result<StageOutput, StageError> {
    let (m, judge) = models(ctx);
    let nbs: NeighborhoodArtifact = ctx.store.read_json(&Stage::Neighborhood.artifact())?;
    let dags: DagArtifact = ctx.store.read_json(&Stage::Dag.artifact())?;
    let strategy = &ctx.cfg.neighborhood.strategy;
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for (nb, d) in nbs.neighborhoods.iter().zip(&dags.entries) {
        let samples = nb
            .perturbed
            .par_iter()
            .map(|p| {
                let e = explain_statement(&m.generator, &p.id, &p.statement, &p.choices, p.task_kind, strategy, ctx.cfg.temperature, Some(HELD_OUT_SAMPLE))?;
                let correct = e
                    .spec
                    .as_ref()
                    .is_some_and(|s| blind_execute(s, p.choices_opt(), m.executor.as_ref()).is_correct(&p.answer, &ctx.tol));
                Ok(HeldOutSample { instance_id: p.id.clone(), steps: e.step_texts(), correct })
            })
            .collect::<Result<Vec<_>, ProviderError>>()?;
        let mut trajectories: Vec<(String, TrajectorySource, Vec<String>)> =
            samples.iter().map(|s| (s.instance_id.clone(), TrajectorySource::Perturbed, s.steps.clone())).collect();
        trajectories.extend(reference_trajectories(nb));
        let report = coverage(&d.dag, &trajectories, judge)?;
        warnings.extend(report.warnings.iter().map(|w| format!("{}: {w}", nb.anchor.id)));
        entries.push(CoverageEntry { anchor_id: nb.anchor.id.clone(), samples, report });
    }
    let mean = |f: fn(&CoverageReport) -> Option<f64>| {
        let xs: Vec<f64> = entries.iter().filter_map(|e| f(&e.report)).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    let pret = mean(|r| r.pret_match);
    let gt = mean(|r| r.gt_match);
    Ok(StageOutput::json(Stage::Coverage, &CoverageArtifact::new(entries, pret, gt), warnings))
}

fn mean_ce(reports: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = reports.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn stage_predict(ctx: &Context<'_>) -> Result<StageOutput, StageError> {
    let (m, judge) = models(ctx);
    let nbs: NeighborhoodArtifact = ctx.store.read_json(&Stage::Neighborhood.artifact())?;
    let dags: DagArtifact = ctx.store.read_json(&Stage::Dag.artifact())?;
    let cov: CoverageArtifact = ctx.store.read_json(&Stage::Coverage.artifact())?;
    let strategy = &ctx.cfg.neighborhood.strategy;
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for ((nb, d), c) in nbs.neighborhoods.iter().zip(&dags.entries).zip(&cov.entries) {
        let items: Vec<PredictionItem<'_>> = c
            .samples
            .iter()
            .filter_map(|s| nb.perturbed.iter().find(|p| p.id == s.instance_id).map(|p| (p, s)))
            .map(|(p, s)| PredictionItem { problem: p, trace: s.steps.clone(), outcome: s.correct })
            .collect();
        let dag_report = predict_success(&m.predictor, &d.dag, &items)?;
        // Equal budget: as many anchor draws as the neighborhood has instances.
        let a = &nb.anchor;
        let draws = (0..nb.size() as u32)
            .into_par_iter()
            .map(|i| {
                let e = explain_statement(&m.generator, &a.id, &a.statement, &a.choices, a.task_kind, strategy, ctx.cfg.temperature, Some(BASELINE_SAMPLE_BASE + i))?;
                Ok((format!("{}#s{i}", a.id), e.step_texts()))
            })
            .collect::<Result<Vec<_>, ProviderError>>()?;
        let samples_dag = sampling_dag(&a.id, &draws, judge)?;
        let baseline = baseline_predict(&m.predictor, &samples_dag, &items)?;
        warnings.extend(dag_report.excluded.iter().chain(&baseline.excluded).cloned());
        entries.push(PredictEntry { anchor_id: a.id.clone(), dag: dag_report, baseline });
    }
    let dag_ce = mean_ce(entries.iter().map(|e| e.dag.mean_ce));
    let base_ce = mean_ce(entries.iter().map(|e| e.baseline.mean_ce));
    let delta = dag_ce.zip(base_ce).map(|(d, b)| b - d);
    Ok(StageOutput::json(Stage::Predict, &PredictArtifact::new(entries, dag_ce, base_ce, delta), warnings))
}

/// Clusters to analyze: configured ones, or one cluster of every problem.
fn clusters(ctx: &Context<'_>) -> Vec<(String, Vec<String>, String)> {
    if ctx.cfg.failures.clusters.is_empty() {
        return vec![("all".into(), ctx.dataset.iter().map(|p| p.id.clone()).collect(), "every problem in the dataset".into())];
    }
    ctx.cfg.failures.clusters.iter().map(|c| (c.id.clone(), c.members.clone(), c.summary.clone())).collect()
}

fn cluster_members(ctx: &Context<'_>, verify: &VerifyArtifact, ids: &[String]) -> Result<Vec<ClusterMember>, StageError> {
    let strategy = &ctx.cfg.failures.strategy;
    ids.iter()
        .map(|id| {
            let problem = ctx.problem(id)?.clone();
            let r = verify
                .records
                .iter()
                .find(|r| &r.problem_id == id && &r.strategy == strategy)
                .ok_or_else(|| StageError::Data(format!("no `{strategy}` trace for `{id}`; add the strategy to `strategies`")))?;
            Ok(ClusterMember { problem, explanation: r.explanation.clone(), correct: r.original_correct })
        })
        .collect()
}

/// Discovery, interventions and the characteristic table for one cluster.
pub fn analyze_cluster(
    models: &Models,
    judge: &Judge,
    cfg: &RunConfig,
    tol: &Tolerance,
    cluster_id: &str,
    members: &[ClusterMember],
) -> Result<ClusterAnalysis, StageError> {
    let discovery = discover_failure_modes(&models.generator, members, judge, cfg.failures.k_max)?;
    let modes = &discovery.modes;
    let ctx = InterventionContext {
        generator: &models.generator,
        detector: Detector { provider: Some(models.generator.clone()) },
        strategy: cfg.failures.strategy.clone(),
        temperature: cfg.temperature,
        tol: tol.clone(),
    };
    let configs = base_configurations(&ctx.detector, members, modes)?;
    let plan = full_plan(&configs, modes.len());
    let augmented = intervene(&ctx, cluster_id, members, modes, &plan)?;
    let items: Vec<(u32, bool)> = augmented.items.iter().map(|i| (i.configuration, i.correct)).collect();
    let table = estimate_v(&items, modes.len(), cfg.failures.nearest_superset)?;
    Ok(ClusterAnalysis { discovery, augmented, table })
}

fn stage_failures(ctx: &Context<'_>) -> Result<StageOutput, StageError> {
    let (m, judge) = models(ctx);
    let verify: VerifyArtifact = ctx.store.read_json(&Stage::Verify.artifact())?;
    let mut entries = Vec::new();
    let mut files = Vec::new();
    let mut warnings = Vec::new();
    for (id, ids, summary) in clusters(ctx) {
        let members = cluster_members(ctx, &verify, &ids)?;
        true_core::failure::Cluster::new(&id, members.iter().map(|m| m.problem.clone()).collect(), &summary)?;
        let analysis = analyze_cluster(m, judge, ctx.cfg, &ctx.tol, &id, &members)?;
        warnings.extend(analysis.discovery.notices.iter().map(|n| format!("{id}: {n}")));
        warnings.extend(analysis.augmented.warnings.iter().map(|w| format!("{id}: {w}")));
        let library = FailureModeLibrary::new(&id, analysis.discovery.modes.clone());
        files.push((format!("failures/modes-{id}.json"), to_json_bytes(&library)));
        entries.push(FailureEntry { cluster_id: id, members: ids, summary, library, analysis });
    }
    let mut out = StageOutput::json(Stage::Failures, &FailuresArtifact::new(entries), warnings);
    out.files.extend(files);
    Ok(out)
}

fn stage_shapley(ctx: &Context<'_>) -> Result<StageOutput, StageError> {
    let failures: FailuresArtifact = ctx.store.read_json(&Stage::Failures.artifact())?;
    let entries = failures
        .entries
        .iter()
        .map(|f| {
            let result = shapley(&f.analysis.table, &f.library.modes, &ctx.cfg.shapley_config(), &ctx.cfg.impact_thresholds())?;
            Ok(ShapleyEntry { cluster_id: f.cluster_id.clone(), result })
        })
        .collect::<Result<Vec<_>, StageError>>()?;
    Ok(StageOutput::json(Stage::Shapley, &ShapleyArtifact::new(entries), vec![]))
}

/// Maps a subsample's mode to the full run's id when their names (or any
/// alias) are equivalent; otherwise keeps it distinct.
fn align_mode(judge: &Judge, library: &FailureModeLibrary, name: &str) -> Result<String, ProviderError> {
    for mode in &library.modes {
        for known in std::iter::once(&mode.name).chain(&mode.aliases) {
            if judge.equivalent(name, known)? {
                return Ok(mode.id.clone());
            }
        }
    }
    Ok(format!("new:{name}"))
}

fn stage_stability(ctx: &Context<'_>) -> Result<StageOutput, StageError> {
    let (m, judge) = models(ctx);
    let verify: VerifyArtifact = ctx.store.read_json(&Stage::Verify.artifact())?;
    let failures: FailuresArtifact = ctx.store.read_json(&Stage::Failures.artifact())?;
    let shap: ShapleyArtifact = ctx.store.read_json(&Stage::Shapley.artifact())?;
    let scfg = ctx.cfg.stability_config();
    let mut entries = Vec::new();
    let mut files = Vec::new();
    for (f, s) in failures.entries.iter().zip(&shap.entries) {
        let members = cluster_members(ctx, &verify, &f.members)?;
        let mut cfg_c = scfg.clone();
        cfg_c.seed = true_core::seed::substream(scfg.seed, &f.cluster_id);
        let report = stability(members.len(), &s.result.ranking(), &cfg_c, |idx: &[usize]| -> Result<Vec<String>, StageError> {
            let sub: Vec<ClusterMember> = idx.iter().map(|&i| members[i].clone()).collect();
            let a = analyze_cluster(m, judge, ctx.cfg, &ctx.tol, &f.cluster_id, &sub)?;
            let r = shapley(&a.table, &a.discovery.modes, &ctx.cfg.shapley_config(), &ctx.cfg.impact_thresholds())?;
            let by_id: BTreeMap<&str, &str> = a.discovery.modes.iter().map(|m| (m.id.as_str(), m.name.as_str())).collect();
            r.ranking().iter().map(|id| Ok(align_mode(judge, &f.library, by_id[id.as_str()])?)).collect()
        })?;
        files.push((format!("stability/stability-{}.csv", f.cluster_id), report.to_csv().into_bytes()));
        entries.push(StabilityEntry { cluster_id: f.cluster_id.clone(), report });
    }
    let mut out = StageOutput::json(Stage::Stability, &StabilityArtifact::new(entries), vec![]);
    out.files.extend(files);
    Ok(out)
}

fn stage_report(ctx: &Context<'_>) -> Result<StageOutput, StageError> {
    let report: Report = build_report(&ctx.store)?;
    let mut files = vec![
        ("report/report.txt".to_string(), render_text(&report).into_bytes()),
        (Stage::Report.artifact(), to_json_bytes(&report)),
    ];
    for s in report.stability.iter().flatten() {
        files.push((format!("report/stability-{}.csv", s.cluster_id), s.csv.clone().into_bytes()));
    }
    Ok(StageOutput { files, warnings: vec![] })
}

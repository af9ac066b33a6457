//! Run configuration, read from TOML. Relative paths resolve against the
//! directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use true_core::explain::STRATEGIES;
use true_core::failure::{ImpactThresholds, ShapleyConfig, StabilityConfig, DEFAULT_K_MAX, EXACT_THRESHOLD, STABILITY_SIZES};
use true_core::judge::{Judge, DEFAULT_OVERLAP_THRESHOLD};
use true_core::model::Problem;
use true_core::neighborhood::{NeighborhoodConfig, PerturbationKind, Regime, DEFAULT_K, DEFAULT_RETRY_BUDGET};
use true_core::provider::{
    Backend, FallbackPolicy, LiveBackend, LiveConfig, MockScript, Provider, ProviderError, Recorder, Recording,
    ResponseCache, RetryPolicy, SimProfile, SimulatedBackend,
};

pub const CACHE_DIR_ENV: &str = "TRUE_CACHE_DIR";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
pub const DEFAULT_MODEL: &str = "gpt-4o-mini";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("{0} does not exist")]
    MissingPath(PathBuf),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingKind {
    /// No model: tool-only execution, token-overlap judging.
    None,
    Mock,
    Simulated,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Binding {
    pub kind: BindingKind,
    /// Mock script (kind = "mock").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<FallbackPolicy>,
    /// Simulated-model profile (kind = "simulated"); built-in default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_in_flight: Option<usize>,
}

impl Binding {
    pub fn of(kind: BindingKind) -> Self {
        Binding { kind, script: None, fallback: None, profile: None, base_url: None, model: None, max_in_flight: None }
    }

    /// Cache namespace, so different models never share answers.
    fn cache_namespace(&self) -> String {
        match self.kind {
            BindingKind::None => "none".into(),
            BindingKind::Mock => "mock".into(),
            BindingKind::Simulated => "simulated".into(),
            BindingKind::Live => format!("live-{}", self.model.as_deref().unwrap_or("default").replace(['/', '\\', ':'], "_")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Providers {
    pub generator: Binding,
    #[serde(default = "none_binding")]
    pub executor: Binding,
    #[serde(default = "none_binding")]
    pub judge: Binding,
    pub predictor: Binding,
}

fn none_binding() -> Binding {
    Binding::of(BindingKind::None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeighborhoodSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_regime")]
    pub regime: String,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<String>,
    #[serde(default = "default_retry")]
    pub retry_budget: usize,
    /// Anchor problem ids; empty means every problem.
    #[serde(default)]
    pub anchors: Vec<String>,
    /// Strategy used for traces on neighborhood instances.
    #[serde(default = "default_strategy")]
    pub strategy: String,
}

fn default_k() -> usize {
    DEFAULT_K
}
fn default_regime() -> String {
    "moderate".into()
}
fn default_kinds() -> Vec<String> {
    PerturbationKind::ALL.iter().map(|k| k.as_str().to_string()).collect()
}
fn default_retry() -> usize {
    DEFAULT_RETRY_BUDGET
}
fn default_strategy() -> String {
    "cot".into()
}

impl Default for NeighborhoodSection {
    fn default() -> Self {
        NeighborhoodSection {
            k: default_k(),
            regime: default_regime(),
            kinds: default_kinds(),
            retry_budget: default_retry(),
            anchors: Vec::new(),
            strategy: default_strategy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub id: String,
    pub members: Vec<String>,
    #[serde(default)]
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSection {
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_strategy")]
    pub strategy: String,
    #[serde(default = "yes")]
    pub nearest_superset: bool,
    /// Manually selected clusters; empty means one cluster of every problem.
    #[serde(default)]
    pub clusters: Vec<ClusterSpec>,
}

fn default_k_max() -> usize {
    DEFAULT_K_MAX
}
fn yes() -> bool {
    true
}

impl Default for FailureSection {
    fn default() -> Self {
        FailureSection { k_max: DEFAULT_K_MAX, strategy: default_strategy(), nearest_superset: true, clusters: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapleySection {
    #[serde(default = "default_threshold")]
    pub exact_threshold: usize,
    #[serde(default)]
    pub permutations: Option<usize>,
    #[serde(default = "default_medium")]
    pub medium: f64,
    #[serde(default = "default_high")]
    pub high: f64,
}

fn default_threshold() -> usize {
    EXACT_THRESHOLD
}
fn default_medium() -> f64 {
    ImpactThresholds::default().medium
}
fn default_high() -> f64 {
    ImpactThresholds::default().high
}

impl Default for ShapleySection {
    fn default() -> Self {
        ShapleySection { exact_threshold: EXACT_THRESHOLD, permutations: None, medium: default_medium(), high: default_high() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySection {
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_top_k")]
    pub k: usize,
    #[serde(default = "yes")]
    pub with_replacement: bool,
}

fn default_sizes() -> Vec<usize> {
    STABILITY_SIZES.to_vec()
}
fn default_repeats() -> usize {
    StabilityConfig::default().repeats
}
fn default_top_k() -> usize {
    StabilityConfig::default().k
}

impl Default for StabilitySection {
    fn default() -> Self {
        StabilitySection { sizes: default_sizes(), repeats: default_repeats(), k: default_top_k(), with_replacement: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_overlap")]
    pub judge_threshold: f64,
    pub providers: Providers,
    #[serde(default)]
    pub neighborhood: NeighborhoodSection,
    #[serde(default)]
    pub failures: FailureSection,
    #[serde(default)]
    pub shapley: ShapleySection,
    #[serde(default)]
    pub stability: StabilitySection,
}

fn default_strategies() -> Vec<String> {
    STRATEGIES.iter().map(|s| s.to_string()).collect()
}
fn default_overlap() -> f64 {
    DEFAULT_OVERLAP_THRESHOLD
}

impl RunConfig {
    pub fn from_toml(raw: &str) -> Result<Self, ConfigError> {
        toml::from_str(raw).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Reads and resolves paths relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let mut cfg = Self::from_toml(&raw)?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.dataset);
        join(&mut self.output_dir);
        if let Some(c) = self.cache_dir.as_mut() {
            join(c);
        }
        for b in [&mut self.providers.generator, &mut self.providers.executor, &mut self.providers.judge, &mut self.providers.predictor] {
            if let Some(s) = b.script.as_mut() {
                join(s);
            }
            if let Some(p) = b.profile.as_mut() {
                join(p);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks paths and values; called before any stage runs.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.dataset.exists() {
            return Err(ConfigError::MissingPath(self.dataset.clone()));
        }
        for (role, b) in self.bindings() {
            for p in b.script.iter().chain(b.profile.iter()) {
                if !p.exists() {
                    return Err(ConfigError::MissingPath(p.clone()));
                }
            }
            if b.kind == BindingKind::Mock && b.script.is_none() {
                return Err(ConfigError::Invalid(format!("providers.{role}: mock binding needs `script`")));
            }
            if b.kind == BindingKind::None && matches!(role, "generator" | "predictor") {
                return Err(ConfigError::Invalid(format!("providers.{role}: a model is required")));
            }
        }
        for s in &self.strategies {
            if !STRATEGIES.contains(&s.as_str()) {
                return Err(ConfigError::Invalid(format!("unknown strategy `{s}`")));
            }
        }
        self.neighborhood_config()?;
        if self.stability.sizes.is_empty() || self.stability.k == 0 {
            return Err(ConfigError::Invalid("stability needs sizes and k >= 1".into()));
        }
        if self.shapley.medium.is_nan() || self.shapley.high.is_nan() || self.shapley.medium > self.shapley.high {
            return Err(ConfigError::Invalid("shapley.medium must not exceed shapley.high".into()));
        }
        Ok(())
    }

    pub fn bindings(&self) -> [(&'static str, &Binding); 4] {
        [
            ("generator", &self.providers.generator),
            ("executor", &self.providers.executor),
            ("judge", &self.providers.judge),
            ("predictor", &self.providers.predictor),
        ]
    }

    pub fn neighborhood_config(&self) -> Result<NeighborhoodConfig, ConfigError> {
        let n = &self.neighborhood;
        let regime = Regime::parse(&n.regime).ok_or_else(|| ConfigError::Invalid(format!("unknown regime `{}`", n.regime)))?;
        let kinds = n
            .kinds
            .iter()
            .map(|k| PerturbationKind::parse(k).ok_or_else(|| ConfigError::Invalid(format!("unknown perturbation kind `{k}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(NeighborhoodConfig { k: n.k, regime, kinds, retry_budget: n.retry_budget, temperature: self.temperature })
    }

    pub fn shapley_config(&self) -> ShapleyConfig {
        ShapleyConfig {
            exact_threshold: self.shapley.exact_threshold,
            permutations: self.shapley.permutations,
            seed: true_core::seed::substream(self.seed, "shapley"),
        }
    }

    pub fn impact_thresholds(&self) -> ImpactThresholds {
        ImpactThresholds { medium: self.shapley.medium, high: self.shapley.high }
    }

    pub fn stability_config(&self) -> StabilityConfig {
        StabilityConfig {
            sizes: self.stability.sizes.clone(),
            repeats: self.stability.repeats,
            k: self.stability.k,
            seed: true_core::seed::substream(self.seed, "stability"),
            with_replacement: self.stability.with_replacement,
        }
    }

    /// Cache root: config first, then `TRUE_CACHE_DIR`; in-memory otherwise.
    pub fn effective_cache_dir(&self) -> Option<PathBuf> {
        self.cache_dir.clone().or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
    }
}

/// Providers for each role, ready to use.
#[derive(Debug, Clone)]
pub struct Models {
    pub generator: Provider,
    pub executor: Option<Provider>,
    pub judge: Option<Provider>,
    pub predictor: Provider,
    pub judge_threshold: f64,
    /// Handles onto every recorded backend, when recording.
    pub recordings: Vec<Recording>,
}

impl Models {
    pub fn judge(&self) -> Judge {
        Judge::new(self.judge.clone(), self.judge_threshold)
    }

    /// Everything recorded so far, as one replayable script.
    pub fn recorded_script(&self) -> MockScript {
        let mut script = MockScript::new(FallbackPolicy::Error);
        for r in &self.recordings {
            r.drain_into(&mut script);
        }
        script
    }
}

fn boxed(b: impl Backend + 'static, record: bool, recordings: &mut Vec<Recording>) -> Provider {
    if record {
        let (rec, handle) = Recorder::new(b);
        recordings.push(handle);
        Provider::new(rec)
    } else {
        Provider::new(b)
    }
}

fn build_one(
    binding: &Binding,
    dataset: &[Problem],
    cache_root: Option<&Path>,
    record: bool,
    recordings: &mut Vec<Recording>,
) -> Result<Option<Provider>, ConfigError> {
    let provider = match binding.kind {
        BindingKind::None => return Ok(None),
        BindingKind::Mock => {
            let mut script = MockScript::load(binding.script.as_deref().expect("validated"))?;
            if let Some(f) = binding.fallback {
                script.fallback = f;
            }
            Provider::mock(script)
        }
        BindingKind::Simulated => {
            let profile = match &binding.profile {
                Some(p) => {
                    let raw = std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.clone(), source })?;
                    serde_json::from_str::<SimProfile>(&raw).map_err(|e| ConfigError::Parse(format!("{}: {e}", p.display())))?
                }
                None => SimProfile::default(),
            };
            boxed(SimulatedBackend::new(dataset, profile), record, recordings).with_retry(RetryPolicy::none())
        }
        BindingKind::Live => {
            let cfg = LiveConfig {
                base_url: binding.base_url.clone().unwrap_or_else(|| DEFAULT_BASE_URL.into()),
                model: binding.model.clone().unwrap_or_else(|| DEFAULT_MODEL.into()),
                timeout_secs: 60,
            };
            boxed(LiveBackend::from_env(cfg)?, record, recordings)
        }
    };
    let provider = match cache_root {
        Some(root) => provider.with_cache(ResponseCache::on_disk(root.join(binding.cache_namespace()))?),
        None => provider,
    };
    Ok(Some(match binding.max_in_flight {
        Some(n) => provider.with_max_in_flight(n),
        None => provider,
    }))
}

/// Builds one provider per role. Roles with identical bindings share a
/// response cache. With `record`, disk caching is skipped so every answer
/// passes through a recorder.
pub fn build_models(cfg: &RunConfig, dataset: &[Problem], record: bool) -> Result<Models, ConfigError> {
    let cache_root = if record { None } else { cfg.effective_cache_dir() };
    let mut recordings = Vec::new();
    let mut built: Vec<(Binding, Provider)> = Vec::new();
    let mut get = |b: &Binding, recordings: &mut Vec<Recording>| -> Result<Option<Provider>, ConfigError> {
        if let Some((_, p)) = built.iter().find(|(other, _)| other == b) {
            return Ok(Some(p.clone()));
        }
        let p = build_one(b, dataset, cache_root.as_deref(), record, recordings)?;
        if let Some(p) = &p {
            built.push((b.clone(), p.clone()));
        }
        Ok(p)
    };
    let generator = get(&cfg.providers.generator, &mut recordings)?.ok_or_else(|| ConfigError::Invalid("generator model required".into()))?;
    let executor = get(&cfg.providers.executor, &mut recordings)?;
    let judge = get(&cfg.providers.judge, &mut recordings)?;
    let predictor = get(&cfg.providers.predictor, &mut recordings)?.ok_or_else(|| ConfigError::Invalid("predictor model required".into()))?;
    Ok(Models { generator, executor, judge, predictor, judge_threshold: cfg.judge_threshold, recordings })
}

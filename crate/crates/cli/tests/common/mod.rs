#![allow(dead_code)]

use std::path::{Path, PathBuf};

use true_cli::config::{Binding, BindingKind};
use true_cli::RunConfig;
use true_core::provider::FallbackPolicy;

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

/// The bundled simulated run, writing to `out` with a private cache.
pub fn simulated_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(&data_dir().join("run.toml")).expect("bundled config loads");
    cfg.output_dir = out.to_path_buf();
    cfg.cache_dir = Some(out.join(".cache"));
    cfg
}

/// Same run with every model call answered from `script`, misses being errors.
pub fn replay_config(out: &Path, script: &Path) -> RunConfig {
    let mut cfg = simulated_config(out);
    let mock = Binding { script: Some(script.to_path_buf()), fallback: Some(FallbackPolicy::Error), ..Binding::of(BindingKind::Mock) };
    cfg.providers.generator = mock.clone();
    cfg.providers.predictor = mock;
    cfg
}

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{Backend, ProviderError, ProviderRequest};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    #[default]
    Error,
    /// Answer with the rendered prompt.
    Echo,
}

/// Canned responses keyed by request fingerprint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub responses: BTreeMap<String, String>,
    #[serde(default)]
    pub fallback: FallbackPolicy,
}

impl MockScript {
    pub fn new(fallback: FallbackPolicy) -> Self {
        MockScript { responses: BTreeMap::new(), fallback }
    }

    pub fn insert(&mut self, req: &ProviderRequest, text: &str) {
        self.responses.insert(super::fingerprint(req), text.to_string());
    }

    /// Reads either `{"responses": {...}, "fallback": ...}` or a bare
    /// fingerprint-to-text object.
    pub fn from_json(raw: &str) -> Result<Self, ProviderError> {
        let value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| ProviderError::Script(e.to_string()))?;
        if value.get("responses").is_some() {
            return serde_json::from_value(value).map_err(|e| ProviderError::Script(e.to_string()));
        }
        let responses: BTreeMap<String, String> =
            serde_json::from_value(value).map_err(|e| ProviderError::Script(e.to_string()))?;
        Ok(MockScript { responses, fallback: FallbackPolicy::Error })
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let raw = std::fs::read_to_string(path).map_err(|e| ProviderError::Script(format!("{}: {e}", path.display())))?;
        Self::from_json(&raw)
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    script: MockScript,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        MockBackend { script }
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn call(&self, req: &ProviderRequest, fp: &str, prompt: &str) -> Result<String, ProviderError> {
        if let Some(text) = self.script.responses.get(fp) {
            return Ok(text.clone());
        }
        match self.script.fallback {
            FallbackPolicy::Echo => Ok(prompt.to_string()),
            FallbackPolicy::Error => {
                Err(ProviderError::ScriptMiss { fingerprint: fp.to_string(), template_id: req.template_id.clone() })
            }
        }
    }
}

/// Wraps a backend and keeps every answer it gives, so a run can later be
/// replayed through [`MockBackend`].
pub struct Recorder<B> {
    inner: B,
    log: Arc<Mutex<BTreeMap<String, String>>>,
}

impl<B: Backend> Recorder<B> {
    pub fn new(inner: B) -> (Self, Recording) {
        let log = Arc::new(Mutex::new(BTreeMap::new()));
        (Recorder { inner, log: log.clone() }, Recording(log))
    }
}

impl<B: Backend> Backend for Recorder<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn call(&self, req: &ProviderRequest, fp: &str, prompt: &str) -> Result<String, ProviderError> {
        let text = self.inner.call(req, fp, prompt)?;
        self.log.lock().unwrap().insert(fp.to_string(), text.clone());
        Ok(text)
    }
}

/// Shared handle to a [`Recorder`]'s log.
#[derive(Debug, Clone, Default)]
pub struct Recording(Arc<Mutex<BTreeMap<String, String>>>);

impl Recording {
    pub fn len(&self) -> usize {
        self.0.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds everything recorded so far into `script`.
    pub fn drain_into(&self, script: &mut MockScript) {
        script.responses.extend(self.0.lock().unwrap().iter().map(|(k, v)| (k.clone(), v.clone())));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{templates, Provider};

    fn req() -> ProviderRequest {
        ProviderRequest::new(templates::JUDGE_EQUIVALENCE).slot("a", "x").slot("b", "y")
    }

    #[test]
    fn scripted_entry_is_returned_verbatim() {
        let mut script = MockScript::new(FallbackPolicy::Error);
        script.insert(&req(), "  1\n");
        let p = Provider::mock(script);
        assert_eq!(p.complete(&req()).unwrap().text, "  1\n");
    }

    #[test]
    fn error_fallback_is_a_typed_miss() {
        let p = Provider::mock(MockScript::new(FallbackPolicy::Error));
        assert!(matches!(p.complete(&req()), Err(ProviderError::ScriptMiss { .. })));
    }

    #[test]
    fn echo_fallback_returns_prompt() {
        let p = Provider::mock(MockScript::new(FallbackPolicy::Echo));
        let text = p.complete(&req()).unwrap().text;
        assert!(text.contains("Step A: x"));
    }

    #[test]
    fn bare_map_script_parses() {
        let s = MockScript::from_json(r#"{"abc": "hello"}"#).unwrap();
        assert_eq!(s.responses["abc"], "hello");
        assert_eq!(s.fallback, FallbackPolicy::Error);
        let s = MockScript::from_json(r#"{"responses": {}, "fallback": "echo"}"#).unwrap();
        assert_eq!(s.fallback, FallbackPolicy::Echo);
    }

    #[test]
    fn recording_replays_through_mock() {
        let mut live = MockScript::new(FallbackPolicy::Error);
        live.insert(&req(), "0");
        let (rec, log) = Recorder::new(MockBackend::new(live));
        Provider::new(rec).complete(&req()).unwrap();
        let mut script = MockScript::new(FallbackPolicy::Error);
        log.drain_into(&mut script);
        assert_eq!(log.len(), 1);
        assert_eq!(Provider::mock(script).complete(&req()).unwrap().text, "0");
    }
}

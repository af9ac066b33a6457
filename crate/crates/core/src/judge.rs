//! Semantic equivalence of two step descriptions.

use std::collections::HashMap;
use std::sync::Mutex;

use crate::protocol::parse_verdict;
use crate::provider::{templates, Provider, ProviderError, ProviderRequest};
use crate::text::{token_overlap, tokens};

pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.5;

/// Provider-backed judge with a token-overlap fallback. Verdicts are
/// memoized and symmetric.
#[derive(Debug)]
pub struct Judge {
    provider: Option<Provider>,
    threshold: f64,
    memo: Mutex<HashMap<(String, String), bool>>,
}

impl Judge {
    pub fn new(provider: Option<Provider>, threshold: f64) -> Self {
        Judge { provider, threshold, memo: Mutex::new(HashMap::new()) }
    }

    /// Token overlap only; never calls a provider.
    pub fn overlap(threshold: f64) -> Self {
        Self::new(None, threshold)
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn fallback(&self, a: &str, b: &str) -> bool {
        token_overlap(a, b) >= self.threshold
    }

    pub fn equivalent(&self, a: &str, b: &str) -> Result<bool, ProviderError> {
        if tokens(a) == tokens(b) {
            return Ok(true);
        }
        let key = if a <= b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) };
        if let Some(v) = self.memo.lock().unwrap().get(&key) {
            return Ok(*v);
        }
        let verdict = match &self.provider {
            None => self.fallback(a, b),
            Some(p) => {
                let req = ProviderRequest::new(templates::JUDGE_EQUIVALENCE).slot("a", key.0.as_str()).slot("b", key.1.as_str());
                parse_verdict(&p.complete(&req)?.text).unwrap_or_else(|| self.fallback(a, b))
            }
        };
        self.memo.lock().unwrap().insert(key, verdict);
        Ok(verdict)
    }
}

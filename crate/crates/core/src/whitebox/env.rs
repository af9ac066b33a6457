use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{format_rational, Rational};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("variable `{0}` is already bound")]
pub struct RebindError(pub String);

/// A value a step can bind: a number, or a choice label produced by a rule.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Bound {
    Number {
        #[serde(with = "crate::scalar::rational_serde")]
        value: Rational,
    },
    Label {
        value: String,
    },
}

impl Bound {
    pub fn number(value: Rational) -> Self {
        Bound::Number { value }
    }

    pub fn label(value: &str) -> Self {
        Bound::Label { value: value.to_string() }
    }

    pub fn render(&self) -> String {
        match self {
            Bound::Number { value } => format_rational(value),
            Bound::Label { value } => value.clone(),
        }
    }
}

/// Single-assignment variable store used during one execution.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Environment {
    values: BTreeMap<String, Bound>,
}

impl Environment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: &str, value: Bound) -> Result<(), RebindError> {
        if self.values.contains_key(name) {
            return Err(RebindError(name.to_string()));
        }
        self.values.insert(name.to_string(), value);
        Ok(())
    }

    pub fn bind_number(&mut self, name: &str, value: Rational) -> Result<(), RebindError> {
        self.bind(name, Bound::Number { value })
    }

    pub fn get(&self, name: &str) -> Option<&Bound> {
        self.values.get(name)
    }

    pub fn number(&self, name: &str) -> Option<&Rational> {
        match self.values.get(name) {
            Some(Bound::Number { value }) => Some(value),
            _ => None,
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Bound)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl FromIterator<(String, Rational)> for Environment {
    fn from_iter<I: IntoIterator<Item = (String, Rational)>>(iter: I) -> Self {
        Environment { values: iter.into_iter().map(|(k, v)| (k, Bound::Number { value: v })).collect() }
    }
}

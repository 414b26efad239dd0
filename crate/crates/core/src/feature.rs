//! Feature vocabulary shared by the broker, the policy encoder and the logs.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("invalid feature key {0:?}: components must be non-empty and contain no '|' or '='")]
    InvalidKey(String),
    #[error("duplicate feature key {0} in context")]
    DuplicateKey(FeatureKey),
    #[error("non-finite real value for {0}")]
    NonFiniteValue(FeatureKey),
}

/// `(namespace, name)` pair identifying a feature.
///
/// Ordering is by namespace then name, which is also the canonical order used
/// when a context is hashed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureKey {
    namespace: Arc<str>,
    name: Arc<str>,
}

fn valid_component(s: &str) -> bool {
    !s.is_empty() && !s.contains(['|', '='])
}

impl FeatureKey {
    pub fn new(
        namespace: impl Into<String>,
        name: impl Into<String>,
    ) -> Result<Self, FeatureError> {
        let namespace = namespace.into();
        let name = name.into();
        if !valid_component(&namespace) || !valid_component(&name) {
            return Err(FeatureError::InvalidKey(format!("{namespace}|{name}")));
        }
        Ok(Self {
            namespace: namespace.into(),
            name: name.into(),
        })
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}", self.namespace, self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueKind {
    Bool,
    Int,
    Real,
    Categorical,
}

impl ValueKind {
    /// Wire name used in the decision log.
    pub fn as_str(self) -> &'static str {
        match self {
            ValueKind::Bool => "bool",
            ValueKind::Int => "int",
            ValueKind::Real => "real",
            ValueKind::Categorical => "cat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bool" => Some(ValueKind::Bool),
            "int" => Some(ValueKind::Int),
            "real" => Some(ValueKind::Real),
            "cat" => Some(ValueKind::Categorical),
            _ => None,
        }
    }
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureValue {
    Bool(bool),
    Int(i64),
    Real(f64),
    Categorical(String),
}

impl FeatureValue {
    pub fn kind(&self) -> ValueKind {
        match self {
            FeatureValue::Bool(_) => ValueKind::Bool,
            FeatureValue::Int(_) => ValueKind::Int,
            FeatureValue::Real(_) => ValueKind::Real,
            FeatureValue::Categorical(_) => ValueKind::Categorical,
        }
    }

    pub fn cat(token: impl Into<String>) -> Self {
        FeatureValue::Categorical(token.into())
    }

    pub fn is_finite(&self) -> bool {
        !matches!(self, FeatureValue::Real(v) if !v.is_finite())
    }
}

impl fmt::Display for FeatureValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureValue::Bool(b) => write!(f, "{b}"),
            FeatureValue::Int(i) => write!(f, "{i}"),
            FeatureValue::Real(r) => write!(f, "{r}"),
            FeatureValue::Categorical(s) => f.write_str(s),
        }
    }
}

/// A collection of feature values with unique keys.
///
/// Insertion order is preserved for logging; hashing always walks the
/// features in canonical key order (see [`Context::canonical`]).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Context {
    features: Vec<(FeatureKey, FeatureValue)>,
}

impl Context {
    pub fn new(features: Vec<(FeatureKey, FeatureValue)>) -> Result<Self, FeatureError> {
        let mut keys: Vec<&FeatureKey> = features.iter().map(|(k, _)| k).collect();
        keys.sort();
        if let Some(w) = keys.windows(2).find(|w| w[0] == w[1]) {
            return Err(FeatureError::DuplicateKey(w[0].clone()));
        }
        if let Some((k, _)) = features.iter().find(|(_, v)| !v.is_finite()) {
            return Err(FeatureError::NonFiniteValue(k.clone()));
        }
        Ok(Self { features })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn features(&self) -> &[(FeatureKey, FeatureValue)] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn get(&self, key: &FeatureKey) -> Option<&FeatureValue> {
        self.features.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    /// Features sorted by namespace then name.
    pub fn canonical(&self) -> Vec<&(FeatureKey, FeatureValue)> {
        let mut out: Vec<_> = self.features.iter().collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Order-insensitive equality.
    pub fn same_features(&self, other: &Context) -> bool {
        self.len() == other.len()
            && self
                .canonical()
                .iter()
                .zip(other.canonical())
                .all(|(a, b)| a.0 == b.0 && value_eq(&a.1, &b.1))
    }
}

fn value_eq(a: &FeatureValue, b: &FeatureValue) -> bool {
    match (a, b) {
        (FeatureValue::Real(x), FeatureValue::Real(y)) => x.total_cmp(y) == Ordering::Equal,
        _ => a == b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_rejects_reserved_characters() {
        assert!(FeatureKey::new("call", "nwType").is_ok());
        assert!(FeatureKey::new("ca|ll", "nwType").is_err());
        assert!(FeatureKey::new("call", "nw=Type").is_err());
        assert!(FeatureKey::new("", "x").is_err());
        assert!(FeatureKey::new("x", "").is_err());
    }

    #[test]
    fn context_rejects_duplicates_and_non_finite() {
        let k = FeatureKey::new("a", "b").unwrap();
        let dup = Context::new(vec![
            (k.clone(), FeatureValue::Int(1)),
            (k.clone(), FeatureValue::Int(2)),
        ]);
        assert_eq!(dup, Err(FeatureError::DuplicateKey(k.clone())));
        let nan = Context::new(vec![(k.clone(), FeatureValue::Real(f64::NAN))]);
        assert_eq!(nan, Err(FeatureError::NonFiniteValue(k)));
    }

    #[test]
    fn canonical_order_is_namespace_then_name() {
        let ctx = Context::new(vec![
            (FeatureKey::new("z", "a").unwrap(), FeatureValue::Bool(true)),
            (FeatureKey::new("a", "z").unwrap(), FeatureValue::Bool(true)),
            (FeatureKey::new("a", "b").unwrap(), FeatureValue::Bool(true)),
        ])
        .unwrap();
        let order: Vec<String> = ctx.canonical().iter().map(|(k, _)| k.to_string()).collect();
        assert_eq!(order, ["a|b", "a|z", "z|a"]);
    }
}

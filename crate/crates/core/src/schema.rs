//! Parameter universe: names, value sets and the ordering that fixes the
//! condition-vector layout.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("parameter `{param}` lists value `{value}` more than once")]
    DuplicateValue { param: String, value: String },
    #[error("parameter `{0}` needs at least two values")]
    TooFewValues(String),
    #[error("parameter `{0}` has a zero embedding dimension")]
    ZeroEmbeddingDim(String),
    #[error("assignment is missing parameter `{0}`")]
    MissingParameter(String),
    #[error("parameter `{param}` has no value `{value}`")]
    UnknownValue { param: String, value: String },
    #[error("assignment names unknown parameter `{0}`")]
    ExtraKey(String),
    #[error("malformed schema config: {0}")]
    Parse(String),
    #[error("cannot read schema config: {0}")]
    Io(String),
}

impl SchemaError {
    /// Parameter name the violation refers to, if any.
    pub fn field(&self) -> Option<&str> {
        match self {
            SchemaError::DuplicateParameter(p)
            | SchemaError::TooFewValues(p)
            | SchemaError::ZeroEmbeddingDim(p)
            | SchemaError::MissingParameter(p)
            | SchemaError::ExtraKey(p) => Some(p),
            SchemaError::DuplicateValue { param, .. } | SchemaError::UnknownValue { param, .. } => {
                Some(param)
            }
            SchemaError::Parse(_) | SchemaError::Io(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub values: Vec<String>,
    pub embedding_dim: usize,
}

impl Parameter {
    pub fn new(name: &str, values: &[&str], embedding_dim: usize) -> Self {
        Parameter {
            name: name.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
            embedding_dim,
        }
    }

    pub fn value_index(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }
}

/// Ordered set of parameters. The order is part of the model layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParameterSchema {
    #[serde(rename = "parameter")]
    parameters: Vec<Parameter>,
}

#[derive(Deserialize)]
struct SchemaFile {
    #[serde(default, rename = "parameter")]
    parameters: Vec<Parameter>,
}

impl<'de> Deserialize<'de> for ParameterSchema {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = SchemaFile::deserialize(d)?;
        ParameterSchema::new(raw.parameters).map_err(serde::de::Error::custom)
    }
}

impl ParameterSchema {
    pub fn new(parameters: Vec<Parameter>) -> Result<Self, SchemaError> {
        let mut names = HashSet::new();
        for p in &parameters {
            if !names.insert(p.name.as_str()) {
                return Err(SchemaError::DuplicateParameter(p.name.clone()));
            }
            if p.values.len() < 2 {
                return Err(SchemaError::TooFewValues(p.name.clone()));
            }
            if p.embedding_dim == 0 {
                return Err(SchemaError::ZeroEmbeddingDim(p.name.clone()));
            }
            let mut seen = HashSet::new();
            for v in &p.values {
                if !seen.insert(v.as_str()) {
                    return Err(SchemaError::DuplicateValue {
                        param: p.name.clone(),
                        value: v.clone(),
                    });
                }
            }
        }
        Ok(ParameterSchema { parameters })
    }

    /// A schema with no parameters; the layout of an unconditioned model.
    pub fn empty() -> Self {
        ParameterSchema { parameters: Vec::new() }
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.parameters
    }

    pub fn len(&self) -> usize {
        self.parameters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parameters.is_empty()
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn parameter_index(&self, name: &str) -> Option<usize> {
        self.parameters.iter().position(|p| p.name == name)
    }

    /// Sum of per-parameter embedding dimensions.
    pub fn condition_dim(&self) -> usize {
        self.parameters.iter().map(|p| p.embedding_dim).sum()
    }

    /// Accepts iff `a` has exactly one valid value per schema parameter.
    pub fn validate(&self, a: &StyleAssignment) -> Result<(), SchemaError> {
        self.value_indices(a).map(|_| ())
    }

    /// Per-parameter value indices in schema order.
    pub fn value_indices(&self, a: &StyleAssignment) -> Result<Vec<usize>, SchemaError> {
        let mut out = Vec::with_capacity(self.parameters.len());
        for p in &self.parameters {
            let value = a
                .get(&p.name)
                .ok_or_else(|| SchemaError::MissingParameter(p.name.clone()))?;
            let idx = p.value_index(value).ok_or_else(|| SchemaError::UnknownValue {
                param: p.name.clone(),
                value: value.to_string(),
            })?;
            out.push(idx);
        }
        if let Some(extra) = a.entries.keys().find(|k| self.parameter(k).is_none()) {
            return Err(SchemaError::ExtraKey(extra.clone()));
        }
        Ok(out)
    }

    /// Check a partial map: every key is a parameter and every value belongs to it.
    pub fn validate_partial(&self, a: &StyleAssignment) -> Result<(), SchemaError> {
        for (k, v) in a.iter() {
            let p = self.parameter(k).ok_or_else(|| SchemaError::ExtraKey(k.to_string()))?;
            if p.value_index(v).is_none() {
                return Err(SchemaError::UnknownValue {
                    param: k.to_string(),
                    value: v.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, SchemaError> {
        toml::from_str(s).map_err(|e| SchemaError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes to toml")
    }

    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        let text = std::fs::read_to_string(path).map_err(|e| SchemaError::Io(e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), SchemaError> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| SchemaError::Io(e.to_string()))
    }
}

/// The six movie-review parameters, in the fixed condition-vector order.
pub fn default_schema() -> ParameterSchema {
    const DIM: usize = 20;
    ParameterSchema::new(vec![
        Parameter::new("professional", &["true", "false"], DIM),
        Parameter::new("personal", &["true", "false"], DIM),
        Parameter::new("length", &["<=10", "11-20", "21-40", ">40"], DIM),
        Parameter::new("descriptive", &["true", "false"], DIM),
        Parameter::new("sentiment", &["positive", "neutral", "negative", "none"], DIM),
        Parameter::new("theme", &["plot", "acting", "production", "effects", "other"], DIM),
    ])
    .expect("default schema is valid")
}

/// Parameter name -> value name. Also used for partial maps (subset filters).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StyleAssignment {
    entries: BTreeMap<String, String>,
}

impl StyleAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Self {
        StyleAssignment {
            entries: pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
        }
    }

    /// Parse `name=value,name=value`.
    pub fn parse(s: &str) -> Result<Self, SchemaError> {
        let mut out = StyleAssignment::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| SchemaError::Parse(format!("expected name=value, got `{part}`")))?;
            out.set(k.trim(), v.trim());
        }
        Ok(out)
    }

    pub fn get(&self, param: &str) -> Option<&str> {
        self.entries.get(param).map(String::as_str)
    }

    pub fn set(&mut self, param: &str, value: &str) {
        self.entries.insert(param.to_string(), value.to_string());
    }

    pub fn remove(&mut self, param: &str) -> Option<String> {
        self.entries.remove(param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True iff every entry of `partial` is present here with the same value.
    pub fn matches(&self, partial: &StyleAssignment) -> bool {
        partial.iter().all(|(k, v)| self.get(k) == Some(v))
    }
}

impl fmt::Display for StyleAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full() -> StyleAssignment {
        StyleAssignment::from_pairs([
            ("professional", "true"),
            ("personal", "false"),
            ("length", "11-20"),
            ("descriptive", "true"),
            ("sentiment", "positive"),
            ("theme", "plot"),
        ])
    }

    #[test]
    fn default_schema_layout() {
        let s = default_schema();
        assert_eq!(s.len(), 6);
        let names: Vec<_> = s.parameters().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            ["professional", "personal", "length", "descriptive", "sentiment", "theme"]
        );
        assert_eq!(
            s.parameter("sentiment").unwrap().values,
            ["positive", "neutral", "negative", "none"]
        );
        assert_eq!(s.condition_dim(), 120);
        assert_eq!(s, default_schema());
    }

    #[test]
    fn validate_paths() {
        let s = default_schema();
        assert!(s.validate(&full()).is_ok());

        let mut missing = full();
        missing.remove("theme");
        assert_eq!(s.validate(&missing), Err(SchemaError::MissingParameter("theme".into())));

        let mut bad = full();
        bad.set("sentiment", "great");
        assert_eq!(
            s.validate(&bad),
            Err(SchemaError::UnknownValue { param: "sentiment".into(), value: "great".into() })
        );

        let mut extra = full();
        extra.set("tense", "past");
        assert_eq!(s.validate(&extra), Err(SchemaError::ExtraKey("tense".into())));
    }

    #[test]
    fn rejects_malformed_schemas() {
        let dup = ParameterSchema::new(vec![
            Parameter::new("a", &["x", "y"], 2),
            Parameter::new("a", &["x", "y"], 2),
        ]);
        assert!(matches!(dup, Err(SchemaError::DuplicateParameter(_))));
        let single = ParameterSchema::new(vec![Parameter::new("a", &["x"], 2)]);
        assert!(matches!(single, Err(SchemaError::TooFewValues(_))));
        let dupv = ParameterSchema::new(vec![Parameter::new("a", &["x", "x"], 2)]);
        assert!(matches!(dupv, Err(SchemaError::DuplicateValue { .. })));
        assert!(ParameterSchema::from_toml_str("[[parameter]]\nname='a'\nvalues=['x']\nembedding_dim=1").is_err());
    }

    #[test]
    fn toml_round_trip_keeps_order() {
        let s = default_schema();
        let text = s.to_toml_string();
        let back = ParameterSchema::from_toml_str(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn exhaustive_validation_on_small_schema() {
        // Two parameters, two values each; candidate values include one stray.
        let s = ParameterSchema::new(vec![
            Parameter::new("a", &["0", "1"], 1),
            Parameter::new("b", &["0", "1"], 1),
        ])
        .unwrap();
        let choices = [None, Some("0"), Some("1"), Some("2")];
        for va in choices {
            for vb in choices {
                for extra in [false, true] {
                    let mut asg = StyleAssignment::new();
                    if let Some(v) = va {
                        asg.set("a", v);
                    }
                    if let Some(v) = vb {
                        asg.set("b", v);
                    }
                    if extra {
                        asg.set("c", "0");
                    }
                    let ok = |v: Option<&str>| matches!(v, Some("0") | Some("1"));
                    let expected = ok(va) && ok(vb) && !extra;
                    assert_eq!(s.validate(&asg).is_ok(), expected, "{asg}");
                }
            }
        }
    }

    #[test]
    fn parse_assignment_string() {
        let a = StyleAssignment::parse("theme=plot, personal=true").unwrap();
        assert_eq!(a.get("theme"), Some("plot"));
        assert_eq!(a.get("personal"), Some("true"));
        assert!(StyleAssignment::parse("theme").is_err());
        assert_eq!(a.to_string(), "personal=true,theme=plot");
    }
}

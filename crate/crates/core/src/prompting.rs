//! Condition strings for the inpainting and text encoders.
//!
//! Templates carry a `{label}` placeholder and an optional `{exclusions}`
//! placeholder. Refined prompts fill `{exclusions}` with negated near-OOD
//! concepts, e.g. `horse, not a donkey, not a zebra`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detections_io::{LabelError, LabelNormalizer};

pub const LABEL_SLOT: &str = "{label}";
pub const EXCLUSIONS_SLOT: &str = "{exclusions}";

pub const DEFAULT_INPAINT_TEMPLATE: &str = "{label}";
pub const DEFAULT_SCORING_TEMPLATE: &str = "a photo of a {label}";
pub const DEFAULT_REFINED_TEMPLATE: &str = "{label}{exclusions}";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template '{0}' must contain {{label}} exactly once")]
    LabelSlot(String),
    #[error("template '{0}' contains {{exclusions}} more than once")]
    ExclusionsSlot(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(pattern: impl Into<String>) -> Result<Self, PromptError> {
        let pattern = pattern.into();
        if pattern.matches(LABEL_SLOT).count() != 1 {
            return Err(PromptError::LabelSlot(pattern));
        }
        if pattern.matches(EXCLUSIONS_SLOT).count() > 1 {
            return Err(PromptError::ExclusionsSlot(pattern));
        }
        Ok(Self(pattern))
    }

    pub fn pattern(&self) -> &str {
        &self.0
    }

    pub fn has_exclusions_slot(&self) -> bool {
        self.0.contains(EXCLUSIONS_SLOT)
    }

    fn render(&self, label: &str, exclusions: &str) -> String {
        let text = self
            .0
            .replace(EXCLUSIONS_SLOT, exclusions)
            .replace(LABEL_SLOT, label);
        text.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    pub fn inpaint_default() -> Self {
        Self(DEFAULT_INPAINT_TEMPLATE.into())
    }

    pub fn scoring_default() -> Self {
        Self(DEFAULT_SCORING_TEMPLATE.into())
    }

    pub fn refined_default() -> Self {
        Self(DEFAULT_REFINED_TEMPLATE.into())
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = PromptError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::new(s)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> Self {
        t.0
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// `template` with the label substituted and any `{exclusions}` slot removed.
/// Runs of whitespace collapse to one space.
pub fn simple_prompt(label: &str, template: &PromptTemplate) -> String {
    template.render(label, "")
}

/// Label-conditioned prompt that also negates the label's near-OOD concepts.
///
/// Falls back to [`simple_prompt`] when the map has no entry for the label.
/// A template without an `{exclusions}` slot gets the negations appended.
pub fn refined_prompt(label: &str, exclusions: &ExclusionMap, template: &PromptTemplate) -> String {
    match exclusions.get(label) {
        Some(concepts) if !concepts.is_empty() => {
            let negations: String = concepts.iter().map(|c| format!(", not a {c}")).collect();
            if template.has_exclusions_slot() {
                template.render(label, &negations)
            } else {
                let base = template.render(label, "");
                format!("{base}{negations}")
            }
        }
        _ => {
            log::debug!("no exclusion concepts for '{label}', using simple prompt");
            simple_prompt(label, template)
        }
    }
}

#[derive(Debug, Error)]
pub enum ExclusionError {
    #[error("cannot read exclusions file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("exclusions file is not a JSON object of string arrays: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("exclusion entry '{0}': {1}")]
    Label(String, LabelError),
    #[error("exclusion entry '{0}' lists itself as a concept")]
    SelfReference(String),
    #[error("exclusion entry '{0}' has an empty concept list")]
    EmptyList(String),
}

/// Canonical ID label to an ordered list of near non-ID concepts.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ExclusionMap(BTreeMap<String, Vec<String>>);

impl ExclusionMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Canonicalize and validate raw entries.
    pub fn from_raw(
        raw: BTreeMap<String, Vec<String>>,
        normalizer: &LabelNormalizer,
    ) -> Result<Self, ExclusionError> {
        let mut out = BTreeMap::new();
        for (key, concepts) in raw {
            let label = normalizer
                .normalize(&key)
                .map_err(|e| ExclusionError::Label(key.clone(), e))?;
            if concepts.is_empty() {
                return Err(ExclusionError::EmptyList(label));
            }
            let mut canon = Vec::with_capacity(concepts.len());
            for c in &concepts {
                let c = normalizer
                    .normalize(c)
                    .map_err(|e| ExclusionError::Label(key.clone(), e))?;
                if c == label {
                    return Err(ExclusionError::SelfReference(label));
                }
                canon.push(c);
            }
            out.insert(label, canon);
        }
        Ok(Self(out))
    }

    pub fn get(&self, label: &str) -> Option<&[String]> {
        self.0.get(label).map(Vec::as_slice)
    }

    pub fn covers(&self, label: &str) -> bool {
        self.0.contains_key(label)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn parse_exclusions(text: &str) -> Result<ExclusionMap, ExclusionError> {
    let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text)?;
    ExclusionMap::from_raw(raw, &LabelNormalizer::default())
}

/// Read an exclusions file: a UTF-8 JSON object mapping labels to concept arrays.
pub fn load_exclusions(path: &Path) -> Result<ExclusionMap, ExclusionError> {
    let text = std::fs::read_to_string(path).map_err(|source| ExclusionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_exclusions(&text)
}

/// Source of near-OOD concepts for an ID label.
///
/// The static [`ExclusionMap`] is the only implementation shipped; a live
/// knowledge-base or language-model client would implement this trait.
pub trait ConceptSource {
    fn related_concepts(&self, label: &str, limit: usize) -> Vec<String>;
}

impl ConceptSource for ExclusionMap {
    fn related_concepts(&self, label: &str, limit: usize) -> Vec<String> {
        self.get(label)
            .map(|c| c.iter().take(limit).cloned().collect())
            .unwrap_or_default()
    }
}

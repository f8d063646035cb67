//! Core vocabulary: beliefs with provenance labels, intents with their
//! justifications, actions, and the configured risk classifier.
//!
//! Everything here is an immutable value type. Propositions are opaque text;
//! nothing in this crate interprets them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Binary trust verdict produced by the aggregator. `Low < High`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrustLevel {
    Low,
    High,
}

/// Source-assurance class, ordered by assurance:
/// `unknown < unverified < verified < attested`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProvenanceClass {
    Unknown,
    Unverified,
    Verified,
    Attested,
}

impl ProvenanceClass {
    pub const ALL: [ProvenanceClass; 4] = [
        ProvenanceClass::Unknown,
        ProvenanceClass::Unverified,
        ProvenanceClass::Verified,
        ProvenanceClass::Attested,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProvenanceClass::Unknown => "unknown",
            ProvenanceClass::Unverified => "unverified",
            ProvenanceClass::Verified => "verified",
            ProvenanceClass::Attested => "attested",
        }
    }
}

impl fmt::Display for ProvenanceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unrecognized provenance class `{0}`")]
pub struct ParseProvenanceError(pub String);

impl FromStr for ProvenanceClass {
    type Err = ParseProvenanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProvenanceClass::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| ParseProvenanceError(s.to_string()))
    }
}

/// Consequence severity of an action. `Low < High`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RiskClass {
    Low,
    High,
}

/// What kind of content a belief carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntentClass {
    Instructional,
    Factual,
    Mixed,
    Unknown,
}

/// Identifier of a belief, unique within one run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BeliefId(pub String);

impl BeliefId {
    pub fn new(id: impl Into<String>) -> Self {
        BeliefId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for BeliefId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Provenance label attached to every belief at ingress.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BeliefLabel {
    /// Source identifier, e.g. `MCP.ToolReturn(GitHub.Issues)`.
    pub src: String,
    pub int: IntentClass,
    /// Milliseconds since the epoch at which the content was received.
    pub age: u64,
    /// Channels the content travelled through, oldest first.
    pub path: Vec<String>,
}

impl BeliefLabel {
    pub fn new(src: impl Into<String>, int: IntentClass, age: u64) -> Self {
        let src = src.into();
        BeliefLabel {
            path: vec![src.clone()],
            src,
            int,
            age,
        }
    }

    /// Placeholder carried by justification entries whose belief cannot be
    /// resolved. It deliberately fails [`BeliefLabel::check`].
    pub fn unresolved() -> Self {
        BeliefLabel {
            src: String::new(),
            int: IntentClass::Unknown,
            age: 0,
            path: Vec::new(),
        }
    }

    pub fn check(&self) -> Result<(), DomainError> {
        if self.src.is_empty() {
            return Err(DomainError::InvalidBelief(BeliefField::Src));
        }
        if self.path.is_empty() {
            return Err(DomainError::InvalidBelief(BeliefField::Path));
        }
        Ok(())
    }
}

/// A labeled proposition together with its two partial trust scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub id: BeliefId,
    pub proposition: String,
    pub label: BeliefLabel,
    pub tau_epi: f64,
    pub tau_prov: ProvenanceClass,
}

/// Belief field named by [`DomainError::InvalidBelief`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeliefField {
    TauEpi,
    Src,
    Path,
}

impl fmt::Display for BeliefField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BeliefField::TauEpi => "tau_epi",
            BeliefField::Src => "src",
            BeliefField::Path => "path",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("invalid belief: bad `{0}`")]
    InvalidBelief(BeliefField),
    #[error("invalid risk pattern `{0}`: only exact names or one trailing `*` are allowed")]
    InvalidPattern(String),
    #[error("action name must not be empty")]
    EmptyActionName,
}

pub(crate) fn tau_in_range(tau: f64) -> bool {
    (0.0..=1.0).contains(&tau)
}

/// Returns the belief unchanged when its invariants hold.
pub fn validate_belief(b: Belief) -> Result<Belief, DomainError> {
    if !tau_in_range(b.tau_epi) {
        return Err(DomainError::InvalidBelief(BeliefField::TauEpi));
    }
    b.label.check()?;
    Ok(b)
}

/// A concrete tool call: name, arguments and target resource.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionSpec {
    pub name: String,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
    #[serde(default)]
    pub target: String,
}

impl ActionSpec {
    pub fn new(name: impl Into<String>, target: impl Into<String>) -> Self {
        ActionSpec {
            name: name.into(),
            args: BTreeMap::new(),
            target: target.into(),
        }
    }

    pub fn with_arg(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.args.insert(key.into(), value.into());
        self
    }

    pub fn check(&self) -> Result<(), DomainError> {
        if self.name.is_empty() {
            return Err(DomainError::EmptyActionName);
        }
        Ok(())
    }
}

/// One rule of a [`RiskTable`]: an exact action name, or a prefix followed by
/// a single trailing `*`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskRule {
    pub pattern: String,
    pub risk: RiskClass,
}

impl RiskRule {
    pub fn new(pattern: impl Into<String>, risk: RiskClass) -> Self {
        RiskRule {
            pattern: pattern.into(),
            risk,
        }
    }

    fn check(&self) -> Result<(), DomainError> {
        let stars = self.pattern.matches('*').count();
        let ok = match stars {
            0 => !self.pattern.is_empty(),
            1 => self.pattern.ends_with('*'),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(DomainError::InvalidPattern(self.pattern.clone()))
        }
    }

    pub fn matches(&self, name: &str) -> bool {
        match self.pattern.strip_suffix('*') {
            Some(prefix) => name.starts_with(prefix),
            None => self.pattern == name,
        }
    }
}

/// Configured action-risk labeling. The first matching rule wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskTable {
    #[serde(default)]
    pub rules: Vec<RiskRule>,
    pub default: RiskClass,
}

impl RiskTable {
    pub fn new(rules: Vec<RiskRule>, default: RiskClass) -> Result<Self, DomainError> {
        let table = RiskTable { rules, default };
        table.check()?;
        Ok(table)
    }

    pub fn check(&self) -> Result<(), DomainError> {
        self.rules.iter().try_for_each(RiskRule::check)
    }
}

/// Classifies an action by name only; arguments and target never matter.
pub fn classify_risk(action: &ActionSpec, table: &RiskTable) -> RiskClass {
    table
        .rules
        .iter()
        .find(|rule| rule.matches(&action.name))
        .map_or(table.default, |rule| rule.risk)
}

/// One cited belief with the label data copied at plan time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JustificationEntry {
    pub belief_id: BeliefId,
    pub lambda: BeliefLabel,
    pub tau_epi: f64,
    pub tau_prov: ProvenanceClass,
}

impl JustificationEntry {
    pub fn snapshot(belief: &Belief) -> Self {
        JustificationEntry {
            belief_id: belief.id.clone(),
            lambda: belief.label.clone(),
            tau_epi: belief.tau_epi,
            tau_prov: belief.tau_prov,
        }
    }

    /// A citation of a belief the run has never received.
    pub fn unresolved(belief_id: BeliefId) -> Self {
        JustificationEntry {
            belief_id,
            lambda: BeliefLabel::unresolved(),
            tau_epi: 0.0,
            tau_prov: ProvenanceClass::Unknown,
        }
    }

    /// True when the snapshot satisfies the belief invariants.
    pub fn is_verifiable(&self) -> bool {
        tau_in_range(self.tau_epi) && self.lambda.check().is_ok()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Justification {
    #[serde(default)]
    pub uses: Vec<JustificationEntry>,
}

impl Justification {
    pub fn new(uses: Vec<JustificationEntry>) -> Self {
        Justification { uses }
    }
}

/// A planned action together with the beliefs that justify it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    pub action: ActionSpec,
    #[serde(default)]
    pub just: Justification,
}

impl Intent {
    pub fn new(action: ActionSpec, just: Justification) -> Self {
        Intent { action, just }
    }

    pub fn args(&self) -> &BTreeMap<String, String> {
        &self.action.args
    }

    pub fn target(&self) -> &str {
        &self.action.target
    }
}

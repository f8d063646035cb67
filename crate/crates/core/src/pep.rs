//! Policy enforcement point for planned tool calls.
//!
//! Two deciders share the [`Decision`] type:
//!
//! - [`decide_belief_aware`] reads the justification of the intent and applies
//!   three rules, checked in this order for high-risk actions:
//!   missing or unverifiable justification denies (R2), any low-trust citation
//!   denies (R1), and an all-high-trust justification is routed to a human (R3).
//!   Low-risk actions are permitted whatever their justification.
//! - [`decide_belief_blind`] is a static scope whitelist. It never looks at
//!   beliefs and serves as the baseline.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{Intent, RiskClass, TrustLevel};
use crate::trust::{evaluate_justification, TrustConfig, TrustEval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "PERMIT")]
    Permit,
    #[serde(rename = "DENY")]
    Deny,
    #[serde(rename = "HITL")]
    Hitl,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Permit => "PERMIT",
            Verdict::Deny => "DENY",
            Verdict::Hitl => "HITL",
        })
    }
}

/// Stable reason codes. The string form is part of the log format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[allow(non_camel_case_types)]
pub enum Reason {
    R1_LOW_TRUST_HIGH_RISK,
    R2_MISSING_OR_UNVERIFIABLE_JUST,
    R3_HIGH_HIGH_REQUIRES_HITL,
    CONTAINED_LOW_RISK,
    BASELINE_SCOPE_ALLOW,
    BASELINE_SCOPE_DENY,
}

impl Reason {
    pub const ALL: [Reason; 6] = [
        Reason::R1_LOW_TRUST_HIGH_RISK,
        Reason::R2_MISSING_OR_UNVERIFIABLE_JUST,
        Reason::R3_HIGH_HIGH_REQUIRES_HITL,
        Reason::CONTAINED_LOW_RISK,
        Reason::BASELINE_SCOPE_ALLOW,
        Reason::BASELINE_SCOPE_DENY,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Reason::R1_LOW_TRUST_HIGH_RISK => "R1_LOW_TRUST_HIGH_RISK",
            Reason::R2_MISSING_OR_UNVERIFIABLE_JUST => "R2_MISSING_OR_UNVERIFIABLE_JUST",
            Reason::R3_HIGH_HIGH_REQUIRES_HITL => "R3_HIGH_HIGH_REQUIRES_HITL",
            Reason::CONTAINED_LOW_RISK => "CONTAINED_LOW_RISK",
            Reason::BASELINE_SCOPE_ALLOW => "BASELINE_SCOPE_ALLOW",
            Reason::BASELINE_SCOPE_DENY => "BASELINE_SCOPE_DENY",
        }
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Reason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Reason::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown reason code `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Verdict,
    pub reason: Reason,
    pub trust_evals: Vec<TrustEval>,
}

impl Decision {
    fn new(verdict: Verdict, reason: Reason, trust_evals: Vec<TrustEval>) -> Self {
        Decision {
            verdict,
            reason,
            trust_evals,
        }
    }
}

/// Static set of action names an agent identity may invoke.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScopeSet(BTreeSet<String>);

impl ScopeSet {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScopeSet(names.into_iter().map(Into::into).collect())
    }

    pub fn allows(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

pub fn decide_belief_aware(intent: &Intent, risk: RiskClass, cfg: &TrustConfig) -> Decision {
    let evals = evaluate_justification(&intent.just, cfg);
    if risk == RiskClass::Low {
        return Decision::new(Verdict::Permit, Reason::CONTAINED_LOW_RISK, evals);
    }
    if evals.is_empty() || evals.iter().any(|e| e.unverifiable) {
        return Decision::new(Verdict::Deny, Reason::R2_MISSING_OR_UNVERIFIABLE_JUST, evals);
    }
    if evals.iter().any(|e| e.trust == TrustLevel::Low) {
        return Decision::new(Verdict::Deny, Reason::R1_LOW_TRUST_HIGH_RISK, evals);
    }
    Decision::new(Verdict::Hitl, Reason::R3_HIGH_HIGH_REQUIRES_HITL, evals)
}

/// Baseline whitelist check; the justification is ignored and no trust
/// evaluations are attached.
pub fn decide_belief_blind(intent: &Intent, scope: &ScopeSet) -> Decision {
    if scope.allows(&intent.action.name) {
        Decision::new(Verdict::Permit, Reason::BASELINE_SCOPE_ALLOW, Vec::new())
    } else {
        Decision::new(Verdict::Deny, Reason::BASELINE_SCOPE_DENY, Vec::new())
    }
}

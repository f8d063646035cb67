//! Belief-aware reference monitor for agent tool calls.
//!
//! Beliefs are labeled with their provenance at ingress, plans cite the
//! beliefs they rely on, and every execution request passes a policy
//! enforcement point that denies high-risk actions justified by low-trust
//! beliefs. All transitions are written to an append-only log that can be
//! checked offline.

pub mod audit;
pub mod domain;
pub mod monitor;
pub mod pep;
pub mod simlab;
pub mod trust;

pub use audit::{check_theorem1, AuditLog, AuditRecord, Event, Violation, ViolationKind};
pub use domain::{ActionSpec, BeliefId, RiskClass, RiskTable, TrustLevel};
pub use monitor::{ExecOutcome, ExecStatus, HitlVerdict, PolicyMode, Run, RunConfig};
pub use pep::{Decision, Reason, ScopeSet, Verdict};
pub use trust::{Attestation, TrustConfig};

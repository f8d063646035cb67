//! Scripted runs loaded from a JSON document.
//!
//! Beliefs are referred to by symbolic names inside a scenario; names are
//! resolved to run-assigned ids while the scenario is driven.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditError, AuditLog, AuditRecord};
use crate::domain::{ActionSpec, BeliefId, IntentClass, ProvenanceClass, RiskTable, TrustLevel};
use crate::monitor::{Clock, ExecOutcome, ExecStatus, HitlVerdict, MonitorError, PolicyMode, Run, RunConfig};
use crate::pep::ScopeSet;
use crate::trust::{Attestation, TrustConfig, DEFAULT_THETA};

/// Start of the deterministic clock used for scenario replays.
pub const REPLAY_EPOCH_MS: u64 = 1_735_689_600_000;

fn default_theta() -> f64 {
    DEFAULT_THETA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Step {
    Recv {
        name: String,
        payload: String,
        channel: String,
        intent_class: IntentClass,
        attestation: Attestation,
        tau_epi: f64,
    },
    Derive {
        name: String,
        parents: Vec<String>,
        proposition: String,
    },
    Plan {
        action: ActionSpec,
        #[serde(default)]
        uses: Vec<String>,
    },
    RequestExec {
        action: ActionSpec,
        /// Declared side effect, logged as an annotation when the action runs.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        effect: Option<String>,
    },
    /// Resolves the most recent pending review.
    ResolveHitl { verdict: HitlVerdict, approver: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub mode: PolicyMode,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high_prov_set: Option<Vec<ProvenanceClass>>,
    pub risk_table: RiskTable,
    #[serde(default)]
    pub scope: ScopeSet,
    pub steps: Vec<Step>,
    /// One expected outcome label per step, see [`StepOutcome::label`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<Vec<String>>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("step {step}: unresolved belief reference `{name}`")]
    UnresolvedReference { step: usize, name: String },
    #[error("bad scenario parameters: {0}")]
    BadParams(String),
    #[error("step {step}: {source}")]
    Monitor { step: usize, source: MonitorError },
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn trust_config(&self) -> Result<TrustConfig, ScenarioError> {
        let bad = |e: crate::trust::TrustError| ScenarioError::BadParams(e.to_string());
        let mut cfg = TrustConfig::new(self.theta).map_err(bad)?;
        if let Some(set) = &self.high_prov_set {
            cfg = cfg.with_high_prov_set(set.iter().copied()).map_err(bad)?;
        }
        Ok(cfg)
    }

    pub fn run_config(&self) -> Result<RunConfig, ScenarioError> {
        self.risk_table
            .check()
            .map_err(|e| ScenarioError::BadParams(e.to_string()))?;
        Ok(RunConfig {
            mode: self.mode,
            trust: self.trust_config()?,
            risk_table: self.risk_table.clone(),
            scope: self.scope.clone(),
        })
    }

    /// Static checks: every symbolic reference is defined by an earlier step,
    /// names are unique, and `expected` has one entry per step.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.run_config()?;
        if let Some(expected) = &self.expected {
            if expected.len() != self.steps.len() {
                return Err(ScenarioError::BadParams(format!(
                    "{} expected outcomes for {} steps",
                    expected.len(),
                    self.steps.len()
                )));
            }
        }
        let mut defined = std::collections::HashSet::new();
        for (i, step) in self.steps.iter().enumerate() {
            let (refs, new_name): (&[String], Option<&String>) = match step {
                Step::Recv { name, .. } => (&[], Some(name)),
                Step::Derive { name, parents, .. } => (parents, Some(name)),
                Step::Plan { uses, .. } => (uses, None),
                _ => (&[], None),
            };
            if let Some(missing) = refs.iter().find(|r| !defined.contains(*r)) {
                return Err(ScenarioError::UnresolvedReference {
                    step: i,
                    name: missing.clone(),
                });
            }
            if let Some(name) = new_name {
                if !defined.insert(name.clone()) {
                    return Err(ScenarioError::BadParams(format!("belief name `{name}` defined twice")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepOutcome {
    Received { belief_id: BeliefId, trust: TrustLevel },
    Planned { seq: u64, trust: TrustLevel },
    Exec(ExecOutcome),
}

impl StepOutcome {
    /// Compact label used by `expected`: `ok` for ingest and planning steps,
    /// otherwise `Executed`, `PendingHITL` or `Denied(<reason>)`.
    pub fn label(&self) -> String {
        match self {
            StepOutcome::Received { .. } | StepOutcome::Planned { .. } => "ok".to_string(),
            StepOutcome::Exec(out) => match out.status {
                ExecStatus::Executed => "Executed".to_string(),
                ExecStatus::PendingHitl => "PendingHITL".to_string(),
                ExecStatus::Denied => format!("Denied({})", out.decision.reason),
            },
        }
    }
}

impl fmt::Display for StepOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone)]
pub struct Transcript {
    pub scenario: String,
    pub mode: PolicyMode,
    pub outcomes: Vec<StepOutcome>,
    pub records: Vec<AuditRecord>,
    /// Mismatches against `expected`, one message per differing step.
    pub failures: Vec<String>,
    pub log_path: Option<PathBuf>,
}

/// Optional side channels of a scenario run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub log_path: Option<PathBuf>,
    pub sink: Option<Arc<AuditLog>>,
}

pub fn run_scenario(s: &Scenario) -> Result<Transcript, ScenarioError> {
    run_scenario_with(s, RunOptions::default())
}

/// Builds the run a scenario drives: deterministic clock, optional sink.
/// An existing file at `opts.log_path` is replaced.
pub fn start_run(s: &Scenario, opts: &RunOptions) -> Result<Run, ScenarioError> {
    s.validate()?;
    let mut run = Run::new(s.name.clone(), s.run_config()?, Clock::step(REPLAY_EPOCH_MS, 1));
    let sink = match (&opts.sink, &opts.log_path) {
        (Some(sink), _) => Some(sink.clone()),
        (None, Some(path)) => {
            if path.exists() {
                std::fs::remove_file(path)?;
            }
            Some(Arc::new(AuditLog::open(path)?))
        }
        (None, None) => None,
    };
    if let Some(sink) = sink {
        run = run.with_sink(sink);
    }
    Ok(run)
}

/// Applies scenario steps one at a time, keeping the name → id map and the
/// most recent review token.
#[derive(Debug, Default)]
pub struct Driver {
    names: HashMap<String, BeliefId>,
    last_token: Option<String>,
}

impl Driver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Token of the last request that went to review, if still unresolved here.
    pub fn last_token(&self) -> Option<&str> {
        self.last_token.as_deref()
    }

    pub fn apply(&mut self, run: &mut Run, i: usize, step: &Step) -> Result<StepOutcome, ScenarioError> {
        let monitor = |source| ScenarioError::Monitor { step: i, source };
        let names = &self.names;
        let resolve = |name: &String| {
            names
                .get(name)
                .cloned()
                .ok_or_else(|| ScenarioError::UnresolvedReference {
                    step: i,
                    name: name.clone(),
                })
        };
        let outcome = match step {
            Step::Recv {
                name,
                payload,
                channel,
                intent_class,
                attestation,
                tau_epi,
            } => {
                let id = run
                    .recv(payload.clone(), channel, *intent_class, *attestation, *tau_epi)
                    .map_err(monitor)?;
                let trust = run.trust_of(&id).unwrap_or(TrustLevel::Low);
                self.names.insert(name.clone(), id.clone());
                StepOutcome::Received { belief_id: id, trust }
            }
            Step::Derive {
                name,
                parents,
                proposition,
            } => {
                let parents = parents.iter().map(resolve).collect::<Result<Vec<_>, _>>()?;
                let id = run.derive(&parents, proposition.clone()).map_err(monitor)?;
                let trust = run.trust_of(&id).unwrap_or(TrustLevel::Low);
                self.names.insert(name.clone(), id.clone());
                StepOutcome::Received { belief_id: id, trust }
            }
            Step::Plan { action, uses } => {
                let ids = uses.iter().map(resolve).collect::<Result<Vec<_>, _>>()?;
                let seq = run.plan_citing(action.clone(), &ids).map_err(monitor)?;
                let trust = run
                    .records()
                    .last()
                    .and_then(|r| r.just_uses.as_ref())
                    .and_then(|u| u.iter().map(|e| e.trust).min())
                    .unwrap_or(TrustLevel::Low);
                StepOutcome::Planned { seq, trust }
            }
            Step::RequestExec { action, effect } => {
                let out = run.request_exec(action).map_err(monitor)?;
                if out.status == ExecStatus::Executed {
                    if let Some(effect) = effect {
                        run.annotate(effect.clone()).map_err(monitor)?;
                    }
                }
                self.last_token = out.token.clone();
                StepOutcome::Exec(out)
            }
            Step::ResolveHitl { verdict, approver } => {
                let token = self
                    .last_token
                    .take()
                    .ok_or_else(|| ScenarioError::BadParams(format!("step {i}: no pending review to resolve")))?;
                StepOutcome::Exec(run.resolve_hitl(&token, *verdict, approver).map_err(monitor)?)
            }
        };
        Ok(outcome)
    }
}

/// Drives the monitor step by step on a deterministic clock.
pub fn run_scenario_with(s: &Scenario, opts: RunOptions) -> Result<Transcript, ScenarioError> {
    let mut run = start_run(s, &opts)?;
    let mut driver = Driver::new();
    let outcomes = s
        .steps
        .iter()
        .enumerate()
        .map(|(i, step)| driver.apply(&mut run, i, step))
        .collect::<Result<Vec<_>, _>>()?;

    let failures = s
        .expected
        .iter()
        .flatten()
        .zip(&outcomes)
        .enumerate()
        .filter(|(_, (want, got))| **want != got.label())
        .map(|(i, (want, got))| format!("step {i}: expected {want}, got {}", got.label()))
        .collect();

    Ok(Transcript {
        scenario: s.name.clone(),
        mode: s.mode,
        outcomes,
        records: run.records().to_vec(),
        failures,
        log_path: opts.log_path,
    })
}

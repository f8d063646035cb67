//! The instrumented run: labels beliefs at ingress, records plans with their
//! justifications, and gates every execution request through the policy
//! enforcement point before anything is executed.
//!
//! A [`Run`] is single-writer. Every transition appends exactly the records
//! it describes, both to the run's own history and to the shared sink, so the
//! log alone is enough to replay and check the run.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditError, AuditLog, AuditRecord, Event, HitlAnnotation, HitlOutcome, RunCursor};
use crate::domain::{
    classify_risk, tau_in_range, ActionSpec, Belief, BeliefId, BeliefLabel, DomainError, Intent, IntentClass,
    Justification, JustificationEntry, RiskClass, RiskTable,
};
use crate::pep::{decide_belief_aware, decide_belief_blind, Decision, Reason, ScopeSet, Verdict};
use crate::trust::{
    aggregate, evaluate_entry, evaluate_justification, ingress_provenance, Attestation, TrustConfig, TrustEval,
};

/// Plan-record flag for an intent that cites nothing.
pub const FLAG_O2_EMPTY: &str = "O2_EMPTY";
/// Plan-record flag for an intent that cites a belief the run never received.
pub const FLAG_O2_UNVERIFIABLE_REF: &str = "O2_UNVERIFIABLE_REF";
/// Approver recorded when a pending review runs out of time.
pub const TIMEOUT_APPROVER: &str = "system:timeout";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    BeliefAware,
    BeliefBlind,
}

/// Monotonic millisecond source. `Step` is deterministic and used for
/// replayable scenarios and enumeration.
#[derive(Debug, Clone)]
pub enum Clock {
    System { last: u64 },
    Step { next: u64, step: u64 },
}

impl Clock {
    pub fn system() -> Self {
        Clock::System { last: 0 }
    }

    pub fn step(start: u64, step: u64) -> Self {
        Clock::Step { next: start, step }
    }

    pub fn now_ms(&mut self) -> u64 {
        match self {
            Clock::System { last } => {
                let wall = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map_or(0, |d| d.as_millis() as u64);
                *last = (*last).max(wall);
                *last
            }
            Clock::Step { next, step } => {
                let now = *next;
                *next += *step;
                now
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MonitorError {
    #[error("tau_epi {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error(transparent)]
    InvalidBelief(#[from] DomainError),
    #[error("unknown belief `{0}`")]
    DanglingBeliefRef(BeliefId),
    #[error("a derived belief needs at least one parent")]
    NoParents,
    #[error("no plan precedes an exec request for `{0}`")]
    NoPrecedingPlan(String),
    #[error("run is blocked on pending review `{0}`")]
    HitlPending(String),
    #[error("unknown review token `{0}`")]
    UnknownToken(String),
    #[error("review `{0}` was already resolved")]
    AlreadyResolved(String),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExecStatus {
    Executed,
    Denied,
    #[serde(rename = "PendingHITL")]
    PendingHitl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub status: ExecStatus,
    pub decision: Decision,
    /// Review token when `status` is `PendingHitl`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

/// Human verdict on a pending review.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HitlVerdict {
    #[serde(rename = "APPROVE")]
    Approve,
    #[serde(rename = "DENY")]
    Deny,
}

#[derive(Debug, Clone, PartialEq)]
struct PlanEntry {
    intent: Intent,
    evals: Vec<TrustEval>,
    seq: u64,
}

/// A high-risk request waiting for a human verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingHitl {
    pub token: String,
    pub action: ActionSpec,
    pub risk: RiskClass,
    pub decision: Decision,
    pub plan_seq: u64,
    pub created_ts: u64,
}

/// Static policy configuration of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: PolicyMode,
    pub trust: TrustConfig,
    pub risk_table: RiskTable,
    pub scope: ScopeSet,
}

#[derive(Debug, Clone)]
pub struct Run {
    run_id: String,
    config: Arc<RunConfig>,
    beliefs: HashMap<BeliefId, Arc<Belief>>,
    plans: Vec<Arc<PlanEntry>>,
    pending: Option<PendingHitl>,
    resolved: HashSet<String>,
    records: Vec<AuditRecord>,
    cursor: RunCursor,
    sink: Option<Arc<AuditLog>>,
    clock: Clock,
    next_seq: u64,
    next_belief: u64,
    next_token: u64,
}

impl Run {
    pub fn new(run_id: impl Into<String>, config: RunConfig, clock: Clock) -> Self {
        Run {
            run_id: run_id.into(),
            config: Arc::new(config),
            beliefs: HashMap::new(),
            plans: Vec::new(),
            pending: None,
            resolved: HashSet::new(),
            records: Vec::new(),
            cursor: RunCursor::default(),
            sink: None,
            clock,
            next_seq: 1,
            next_belief: 1,
            next_token: 1,
        }
    }

    /// Also append every record to `sink`.
    pub fn with_sink(mut self, sink: Arc<AuditLog>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn mode(&self) -> PolicyMode {
        self.config.mode
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    /// Moves the retained records out of the run. Ordering state is kept, so
    /// later appends are still validated against the full history.
    pub fn drain_records(&mut self) -> Vec<AuditRecord> {
        std::mem::take(&mut self.records)
    }

    pub fn belief(&self, id: &BeliefId) -> Option<&Belief> {
        self.beliefs.get(id).map(Arc::as_ref)
    }

    pub fn pending(&self) -> Option<&PendingHitl> {
        self.pending.as_ref()
    }

    pub fn eval_belief(&self, id: &BeliefId) -> Option<TrustEval> {
        self.belief(id)
            .map(|b| evaluate_entry(&JustificationEntry::snapshot(b), &self.config.trust))
    }

    fn record(&mut self, event: Event) -> AuditRecord {
        let seq = self.next_seq;
        self.next_seq += 1;
        AuditRecord::new(self.clock.now_ms(), seq, self.run_id.clone(), event)
    }

    fn emit(&mut self, rec: AuditRecord) -> Result<(), MonitorError> {
        self.cursor.check(&rec)?;
        if let Some(sink) = &self.sink {
            sink.append(&rec)?;
        }
        self.cursor.advance(&rec);
        self.records.push(rec);
        Ok(())
    }

    fn store(&mut self, belief: Belief, derived: bool) -> Result<BeliefId, MonitorError> {
        let id = belief.id.clone();
        let eval = evaluate_entry(&JustificationEntry::snapshot(&belief), &self.config.trust);
        let mut rec = self.record(Event::Recv);
        rec.just_uses = Some(vec![eval]);
        rec.derived = derived.then_some(true);
        self.emit(rec)?;
        self.beliefs.insert(id.clone(), Arc::new(belief));
        Ok(id)
    }

    fn fresh_belief_id(&mut self) -> BeliefId {
        let id = BeliefId(format!("b{}", self.next_belief));
        self.next_belief += 1;
        id
    }

    /// Ingests content from `channel`, labels it and returns the new belief id.
    pub fn recv(
        &mut self,
        payload: impl Into<String>,
        channel: &str,
        intent_class: IntentClass,
        attestation: Attestation,
        tau_epi: f64,
    ) -> Result<BeliefId, MonitorError> {
        if !tau_in_range(tau_epi) {
            return Err(MonitorError::OutOfRange(tau_epi));
        }
        let label = BeliefLabel::new(channel, intent_class, self.peek_now());
        label.check()?;
        let belief = Belief {
            id: self.fresh_belief_id(),
            proposition: payload.into(),
            label,
            tau_epi,
            tau_prov: ingress_provenance(channel, attestation),
        };
        self.store(belief, false)
    }

    /// Forms a belief from existing ones. It inherits the weakest evidence and
    /// the weakest provenance of its parents.
    pub fn derive(
        &mut self,
        parent_ids: &[BeliefId],
        proposition: impl Into<String>,
    ) -> Result<BeliefId, MonitorError> {
        if parent_ids.is_empty() {
            return Err(MonitorError::NoParents);
        }
        let parents = parent_ids
            .iter()
            .map(|id| {
                self.beliefs
                    .get(id)
                    .cloned()
                    .ok_or_else(|| MonitorError::DanglingBeliefRef(id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let tau_epi = parents.iter().map(|p| p.tau_epi).fold(1.0, f64::min);
        let tau_prov = parents.iter().map(|p| p.tau_prov).min().expect("non-empty");
        let first_int = parents[0].label.int;
        let int = if parents.iter().all(|p| p.label.int == first_int) {
            first_int
        } else {
            IntentClass::Mixed
        };
        let id = self.fresh_belief_id();
        let mut path: Vec<String> = parents.iter().flat_map(|p| p.label.path.iter().cloned()).collect();
        path.push(format!("derive:{id}"));
        let src = format!(
            "derive({})",
            parent_ids.iter().map(BeliefId::as_str).collect::<Vec<_>>().join(",")
        );
        let belief = Belief {
            label: BeliefLabel {
                src,
                int,
                age: self.peek_now(),
                path,
            },
            id,
            proposition: proposition.into(),
            tau_epi,
            tau_prov,
        };
        self.store(belief, true)
    }

    /// Timestamp the next record will carry.
    fn peek_now(&self) -> u64 {
        self.clock.clone().now_ms()
    }

    /// Records a plan. Cited beliefs are re-snapshotted from the run's own
    /// records; citations the run cannot resolve are kept as unverifiable
    /// entries that evaluate to `Low`. Returns the plan record's seq.
    pub fn plan(&mut self, intent: Intent) -> Result<u64, MonitorError> {
        let uses: Vec<JustificationEntry> = intent
            .just
            .uses
            .iter()
            .map(|e| match self.beliefs.get(&e.belief_id) {
                Some(b) => JustificationEntry::snapshot(b),
                None => JustificationEntry::unresolved(e.belief_id.clone()),
            })
            .collect();
        let intent = Intent::new(intent.action, Justification::new(uses));
        let evals = evaluate_justification(&intent.just, &self.config.trust);
        let flag = if evals.is_empty() {
            Some(FLAG_O2_EMPTY)
        } else if evals.iter().any(|e| e.unverifiable) {
            Some(FLAG_O2_UNVERIFIABLE_REF)
        } else {
            None
        };
        let mut rec = self.record(Event::Plan);
        let seq = rec.seq;
        rec.alpha = Some(intent.action.clone());
        rec.just_uses = Some(evals.clone());
        rec.reason = flag.map(str::to_string);
        self.emit(rec)?;
        self.plans.push(Arc::new(PlanEntry { intent, evals, seq }));
        Ok(seq)
    }

    /// Convenience: plan `action` citing `uses` by id.
    pub fn plan_citing(&mut self, action: ActionSpec, uses: &[BeliefId]) -> Result<u64, MonitorError> {
        let just = uses
            .iter()
            .map(|id| match self.beliefs.get(id) {
                Some(b) => JustificationEntry::snapshot(b),
                None => JustificationEntry::unresolved(id.clone()),
            })
            .collect();
        self.plan(Intent::new(action, Justification::new(just)))
    }

    fn decision_record(
        &mut self,
        action: &ActionSpec,
        verdict: Verdict,
        reason: Reason,
        evals: Vec<TrustEval>,
        hitl: Option<HitlAnnotation>,
    ) -> AuditRecord {
        let mut rec = self.record(Event::Permit);
        rec.alpha = Some(action.clone());
        rec.just_uses = Some(evals);
        rec.decision = Some(verdict);
        rec.reason = Some(reason.to_string());
        rec.hitl = hitl;
        rec
    }

    fn execute(
        &mut self,
        action: &ActionSpec,
        reason: Reason,
        evals: Vec<TrustEval>,
        hitl: Option<HitlAnnotation>,
    ) -> Result<(), MonitorError> {
        let permit = self.decision_record(action, Verdict::Permit, reason, evals, hitl.clone());
        self.emit(permit)?;
        let mut exec = self.record(Event::Exec);
        exec.alpha = Some(action.clone());
        exec.reason = Some(reason.to_string());
        exec.hitl = hitl;
        self.emit(exec)
    }

    /// Gates an execution request. The closest preceding plan with the same
    /// action name supplies the justification.
    pub fn request_exec(&mut self, action: &ActionSpec) -> Result<ExecOutcome, MonitorError> {
        if let Some(p) = &self.pending {
            return Err(MonitorError::HitlPending(p.token.clone()));
        }
        let plan = self
            .plans
            .iter()
            .rev()
            .find(|p| p.intent.action.name == action.name)
            .cloned()
            .ok_or_else(|| MonitorError::NoPrecedingPlan(action.name.clone()))?;
        let risk = classify_risk(action, &self.config.risk_table);
        let decision = match self.config.mode {
            PolicyMode::BeliefAware => decide_belief_aware(&plan.intent, risk, &self.config.trust),
            PolicyMode::BeliefBlind => decide_belief_blind(&plan.intent, &self.config.scope),
        };
        match decision.verdict {
            Verdict::Permit => {
                self.execute(action, decision.reason, plan.evals.clone(), None)?;
                Ok(ExecOutcome {
                    status: ExecStatus::Executed,
                    decision,
                    token: None,
                })
            }
            Verdict::Deny => {
                let rec = self.decision_record(action, Verdict::Deny, decision.reason, plan.evals.clone(), None);
                self.emit(rec)?;
                Ok(ExecOutcome {
                    status: ExecStatus::Denied,
                    decision,
                    token: None,
                })
            }
            Verdict::Hitl => {
                let token = format!("{}-h{}", self.run_id, self.next_token);
                self.next_token += 1;
                self.pending = Some(PendingHitl {
                    token: token.clone(),
                    action: action.clone(),
                    risk,
                    decision: decision.clone(),
                    plan_seq: plan.seq,
                    created_ts: self.peek_now(),
                });
                Ok(ExecOutcome {
                    status: ExecStatus::PendingHitl,
                    decision,
                    token: Some(token),
                })
            }
        }
    }

    fn take_pending(&mut self, token: &str) -> Result<PendingHitl, MonitorError> {
        if self.resolved.contains(token) {
            return Err(MonitorError::AlreadyResolved(token.to_string()));
        }
        match &self.pending {
            Some(p) if p.token == token => {}
            _ => return Err(MonitorError::UnknownToken(token.to_string())),
        }
        self.resolved.insert(token.to_string());
        Ok(self.pending.take().expect("checked above"))
    }

    fn close_review(&mut self, token: &str, outcome: HitlOutcome, approver: &str) -> Result<ExecOutcome, MonitorError> {
        let pending = self.take_pending(token)?;
        let annotation = HitlAnnotation {
            approver: approver.to_string(),
            verdict: outcome,
        };
        let evals = pending.decision.trust_evals.clone();
        let reason = pending.decision.reason;
        let status = if outcome == HitlOutcome::Approve {
            self.execute(&pending.action, reason, evals, Some(annotation))?;
            ExecStatus::Executed
        } else {
            let rec = self.decision_record(&pending.action, Verdict::Deny, reason, evals, Some(annotation));
            self.emit(rec)?;
            ExecStatus::Denied
        };
        Ok(ExecOutcome {
            status,
            decision: pending.decision,
            token: Some(pending.token),
        })
    }

    /// Applies a human verdict to the pending review `token`.
    pub fn resolve_hitl(
        &mut self,
        token: &str,
        verdict: HitlVerdict,
        approver: &str,
    ) -> Result<ExecOutcome, MonitorError> {
        let outcome = match verdict {
            HitlVerdict::Approve => HitlOutcome::Approve,
            HitlVerdict::Deny => HitlOutcome::Deny,
        };
        self.close_review(token, outcome, approver)
    }

    /// Denies the pending review `token` because no verdict arrived in time.
    pub fn expire_hitl(&mut self, token: &str) -> Result<ExecOutcome, MonitorError> {
        self.close_review(token, HitlOutcome::Timeout, TIMEOUT_APPROVER)
    }

    /// Free-form annotation record.
    pub fn annotate(&mut self, message: impl Into<String>) -> Result<u64, MonitorError> {
        let mut rec = self.record(Event::Log);
        let seq = rec.seq;
        rec.reason = Some(message.into());
        self.emit(rec)?;
        Ok(seq)
    }

    /// Trust of a belief as the monitor sees it now.
    pub fn trust_of(&self, id: &BeliefId) -> Option<crate::domain::TrustLevel> {
        self.belief(id)
            .and_then(|b| aggregate(b.tau_epi, b.tau_prov, &self.config.trust).ok())
    }
}

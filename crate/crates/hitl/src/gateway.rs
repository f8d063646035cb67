use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use bip_core::audit::AuditError;
use bip_core::domain::classify_risk;
use bip_core::monitor::{ExecStatus, HitlVerdict, MonitorError, PendingHitl};
use bip_core::simlab::{start_run, Driver, RunOptions, Scenario, ScenarioError, Step, StepOutcome};
use bip_core::trust::TrustEval;
use bip_core::{ActionSpec, ExecOutcome, RiskClass, Run};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

pub type SharedRun = Arc<Mutex<Run>>;
type ClockFn = dyn Fn() -> u64 + Send + Sync;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingDecision {
    pub token: String,
    pub run_id: String,
    pub created_ts: u64,
    pub action: ActionSpec,
    pub trust_evals: Vec<TrustEval>,
    pub risk: RiskClass,
    pub deadline_ts: u64,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("token {0} is already queued")]
    DuplicateToken(String),
    #[error("unknown token {0}")]
    UnknownToken(String),
    #[error("token {0} was already resolved")]
    AlreadyResolved(String),
    #[error("token {0} expired and was denied")]
    Expired(String),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("run {0} is already registered")]
    DuplicateRun(String),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Closed {
    Resolved,
    Expired,
}

#[derive(Default)]
struct State {
    runs: HashMap<String, SharedRun>,
    pending: BTreeMap<String, PendingDecision>,
    closed: HashMap<String, Closed>,
}

/// Pending reviews of all registered runs.
///
/// Every state change happens under one lock, so a verdict and an expiry
/// racing for the same token are settled by whichever takes it out of the
/// pending set first. Run locks are never taken while that lock is held.
#[derive(Clone)]
pub struct Gateway {
    state: Arc<Mutex<State>>,
    timeout_ms: u64,
    clock: Arc<ClockFn>,
}

fn wall_clock_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Default for Gateway {
    fn default() -> Self {
        Gateway::new(DEFAULT_TIMEOUT_MS)
    }
}

impl Gateway {
    pub fn new(timeout_ms: u64) -> Self {
        Gateway {
            state: Arc::default(),
            timeout_ms,
            clock: Arc::new(wall_clock_ms),
        }
    }

    /// Replaces the wall clock, e.g. with a manual one in tests.
    pub fn with_clock(mut self, clock: impl Fn() -> u64 + Send + Sync + 'static) -> Self {
        self.clock = Arc::new(clock);
        self
    }

    pub fn timeout_ms(&self) -> u64 {
        self.timeout_ms
    }

    pub fn now_ms(&self) -> u64 {
        (self.clock)()
    }

    pub fn register(&self, run: Run) -> Result<SharedRun, GatewayError> {
        let id = run.run_id().to_string();
        let mut st = self.state.lock();
        if st.runs.contains_key(&id) {
            return Err(GatewayError::DuplicateRun(id));
        }
        let shared = Arc::new(Mutex::new(run));
        st.runs.insert(id, shared.clone());
        Ok(shared)
    }

    pub fn run(&self, run_id: &str) -> Option<SharedRun> {
        self.state.lock().runs.get(run_id).cloned()
    }

    pub fn run_ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.state.lock().runs.keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Builds the queue entry for a review the run is holding.
    pub fn pending_from(&self, run: &Run, p: &PendingHitl) -> PendingDecision {
        let created_ts = self.now_ms();
        PendingDecision {
            token: p.token.clone(),
            run_id: run.run_id().to_string(),
            created_ts,
            action: p.action.clone(),
            trust_evals: p.decision.trust_evals.clone(),
            risk: classify_risk(&p.action, &run.config().risk_table),
            deadline_ts: created_ts + self.timeout_ms,
        }
    }

    /// Requests execution on a registered run and queues the review if the
    /// monitor asks for one.
    pub fn request_exec(&self, run_id: &str, action: &ActionSpec) -> Result<ExecOutcome, GatewayError> {
        let run = self
            .run(run_id)
            .ok_or_else(|| GatewayError::UnknownRun(run_id.to_string()))?;
        let (outcome, pending) = {
            let mut run = run.lock();
            let outcome = run.request_exec(action)?;
            let pending = match outcome.status {
                ExecStatus::PendingHitl => run.pending().map(|p| self.pending_from(&run, p)),
                _ => None,
            };
            (outcome, pending)
        };
        if let Some(p) = pending {
            self.submit(p)?;
        }
        Ok(outcome)
    }

    pub fn submit(&self, mut p: PendingDecision) -> Result<String, GatewayError> {
        let mut st = self.state.lock();
        if st.pending.contains_key(&p.token) || st.closed.contains_key(&p.token) {
            return Err(GatewayError::DuplicateToken(p.token));
        }
        p.deadline_ts = p.created_ts + self.timeout_ms;
        let token = p.token.clone();
        st.pending.insert(token.clone(), p);
        Ok(token)
    }

    /// Open reviews ordered by creation time.
    pub fn list_pending(&self) -> Vec<PendingDecision> {
        let mut out: Vec<_> = self.state.lock().pending.values().cloned().collect();
        out.sort_by(|a, b| (a.created_ts, &a.token).cmp(&(b.created_ts, &b.token)));
        out
    }

    pub fn resolve(&self, token: &str, verdict: HitlVerdict, approver: &str) -> Result<ExecOutcome, GatewayError> {
        let now = self.now_ms();
        let entry = {
            let mut st = self.state.lock();
            match st.closed.get(token) {
                Some(Closed::Resolved) => return Err(GatewayError::AlreadyResolved(token.to_string())),
                Some(Closed::Expired) => return Err(GatewayError::Expired(token.to_string())),
                None => {}
            }
            let Some(entry) = st.pending.get(token) else {
                return Err(GatewayError::UnknownToken(token.to_string()));
            };
            if now >= entry.deadline_ts {
                drop(st);
                self.expire_due();
                return Err(GatewayError::Expired(token.to_string()));
            }
            let entry = st.pending.remove(token).expect("checked above");
            st.closed.insert(token.to_string(), Closed::Resolved);
            entry
        };
        let run = self.run(&entry.run_id).ok_or(GatewayError::UnknownRun(entry.run_id))?;
        let outcome = run.lock().resolve_hitl(token, verdict, approver)?;
        Ok(outcome)
    }

    /// Denies every review whose deadline has passed; returns the outcomes.
    pub fn expire_due(&self) -> Vec<(String, Result<ExecOutcome, GatewayError>)> {
        let now = self.now_ms();
        let due: Vec<PendingDecision> = {
            let mut st = self.state.lock();
            let tokens: Vec<String> = st
                .pending
                .values()
                .filter(|p| now >= p.deadline_ts)
                .map(|p| p.token.clone())
                .collect();
            tokens
                .into_iter()
                .map(|t| {
                    st.closed.insert(t.clone(), Closed::Expired);
                    st.pending.remove(&t).expect("listed above")
                })
                .collect()
        };
        due.into_iter()
            .map(|p| {
                let out = match self.run(&p.run_id) {
                    Some(run) => run.lock().expire_hitl(&p.token).map_err(GatewayError::from),
                    None => Err(GatewayError::UnknownRun(p.run_id.clone())),
                };
                (p.token, out)
            })
            .collect()
    }

    /// Drives `scenario` on a background thread as a registered run.
    ///
    /// Scripted `resolve_hitl` steps are skipped: reviews go to the queue and
    /// the script waits until a human or the deadline closes them.
    pub fn spawn_scenario(
        &self,
        scenario: Scenario,
        opts: RunOptions,
    ) -> Result<JoinHandle<Result<Vec<StepOutcome>, GatewayError>>, GatewayError> {
        let run = self.register(start_run(&scenario, &opts)?)?;
        let gw = self.clone();
        let handle = std::thread::spawn(move || {
            let mut driver = Driver::new();
            let mut outcomes = Vec::new();
            for (i, step) in scenario.steps.iter().enumerate() {
                if matches!(step, Step::ResolveHitl { .. }) {
                    continue;
                }
                while run.lock().pending().is_some() {
                    std::thread::sleep(Duration::from_millis(10));
                }
                let (outcome, pending) = {
                    let mut r = run.lock();
                    let outcome = driver.apply(&mut r, i, step)?;
                    let pending = match &outcome {
                        StepOutcome::Exec(o) if o.status == ExecStatus::PendingHitl => {
                            r.pending().map(|p| gw.pending_from(&r, p))
                        }
                        _ => None,
                    };
                    (outcome, pending)
                };
                if let Some(p) = pending {
                    gw.submit(p)?;
                }
                outcomes.push(outcome);
            }
            Ok(outcomes)
        });
        Ok(handle)
    }

    /// Earliest deadline among open reviews.
    pub fn next_deadline(&self) -> Option<u64> {
        self.state.lock().pending.values().map(|p| p.deadline_ts).min()
    }

    /// The run's audit records as JSON lines, starting after `after_seq`.
    pub fn log_lines(&self, run_id: &str, after_seq: u64) -> Result<Vec<String>, GatewayError> {
        let run = self
            .run(run_id)
            .ok_or_else(|| GatewayError::UnknownRun(run_id.to_string()))?;
        let run = run.lock();
        run.records()
            .iter()
            .filter(|r| r.seq > after_seq)
            .map(|r| r.to_line().map_err(GatewayError::from))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicU64, Ordering};

    use bip_core::domain::{IntentClass, RiskRule};
    use bip_core::monitor::Clock;
    use bip_core::{Attestation, PolicyMode, RiskTable, RunConfig, ScopeSet, TrustConfig};

    use super::*;

    fn run(id: &str) -> Run {
        let config = RunConfig {
            mode: PolicyMode::BeliefAware,
            trust: TrustConfig::default(),
            risk_table: RiskTable::new(vec![RiskRule::new("deploy", RiskClass::High)], RiskClass::Low).unwrap(),
            scope: ScopeSet::new(["deploy"]),
        };
        let mut run = Run::new(id, config, Clock::step(0, 1));
        let b = run
            .recv(
                "ci green",
                "ci.signed",
                IntentClass::Factual,
                Attestation::SignedAttested,
                0.9,
            )
            .unwrap();
        run.plan_citing(ActionSpec::new("deploy", "prod"), &[b]).unwrap();
        run
    }

    fn manual() -> (Gateway, Arc<AtomicU64>) {
        let now = Arc::new(AtomicU64::new(1_000));
        let t = now.clone();
        (Gateway::new(100).with_clock(move || t.load(Ordering::SeqCst)), now)
    }

    fn queued(gw: &Gateway, id: &str) -> String {
        gw.register(run(id)).unwrap();
        let out = gw.request_exec(id, &ActionSpec::new("deploy", "prod")).unwrap();
        assert_eq!(out.status, ExecStatus::PendingHitl);
        out.token.unwrap()
    }

    #[test]
    fn queue_lifecycle() {
        let (gw, now) = manual();
        assert!(gw.list_pending().is_empty());
        let a = queued(&gw, "r1");
        now.store(1_010, Ordering::SeqCst);
        let b = queued(&gw, "r2");
        let listed: Vec<_> = gw.list_pending().into_iter().map(|p| p.token).collect();
        assert_eq!(listed, [a.clone(), b.clone()]);
        let first = &gw.list_pending()[0];
        assert_eq!(first.deadline_ts, first.created_ts + 100);
        assert_eq!(first.risk, RiskClass::High);
        assert_eq!(first.trust_evals.len(), 1);

        let dup = gw.list_pending()[0].clone();
        assert!(matches!(gw.submit(dup), Err(GatewayError::DuplicateToken(_))));

        let out = gw.resolve(&a, HitlVerdict::Approve, "alice").unwrap();
        assert_eq!(out.status, ExecStatus::Executed);
        assert_eq!(gw.list_pending().len(), 1);
        assert!(matches!(
            gw.resolve(&a, HitlVerdict::Deny, "bob"),
            Err(GatewayError::AlreadyResolved(_))
        ));
        assert!(matches!(
            gw.resolve("nope", HitlVerdict::Deny, "bob"),
            Err(GatewayError::UnknownToken(_))
        ));
        let out = gw.resolve(&b, HitlVerdict::Deny, "bob").unwrap();
        assert_eq!(out.status, ExecStatus::Denied);
        let lines = gw.log_lines("r2", 0).unwrap();
        assert!(lines.last().unwrap().contains(r#""verdict":"DENY""#));
        assert!(lines.iter().all(|l| !l.contains(r#""event":"exec""#)));
    }

    #[test]
    fn deadline_denies_and_blocks_late_verdicts() {
        let (gw, now) = manual();
        let t = queued(&gw, "r1");
        now.store(1_099, Ordering::SeqCst);
        assert!(gw.expire_due().is_empty());
        now.store(1_100, Ordering::SeqCst);
        assert!(matches!(
            gw.resolve(&t, HitlVerdict::Approve, "late"),
            Err(GatewayError::Expired(_))
        ));
        assert!(gw.list_pending().is_empty());
        let run = gw.run("r1").unwrap();
        let run = run.lock();
        let last = run.records().last().unwrap();
        assert_eq!(
            last.hitl.as_ref().unwrap().approver,
            bip_core::monitor::TIMEOUT_APPROVER
        );
        assert!(run.records().iter().all(|r| r.event != bip_core::Event::Exec));
        drop(run);
        assert!(matches!(
            gw.resolve(&t, HitlVerdict::Approve, "late"),
            Err(GatewayError::Expired(_))
        ));
    }

    #[test]
    fn unknown_run_and_duplicate_registration() {
        let gw = Gateway::default();
        assert_eq!(gw.timeout_ms(), DEFAULT_TIMEOUT_MS);
        assert!(matches!(
            gw.request_exec("ghost", &ActionSpec::new("deploy", "prod")),
            Err(GatewayError::UnknownRun(_))
        ));
        gw.register(run("r1")).unwrap();
        assert!(matches!(gw.register(run("r1")), Err(GatewayError::DuplicateRun(_))));
        assert!(matches!(gw.log_lines("ghost", 0), Err(GatewayError::UnknownRun(_))));
    }
}

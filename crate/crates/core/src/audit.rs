//! Audit log: record schema, append-only JSONL sink, reader, backward slicing
//! and the offline trace-safety checker.
//!
//! # Wire format
//!
//! One JSON object per line, UTF-8. Keys: `ts`, `seq`, `run_id`, `event`,
//! `alpha`, `just.uses`, `decision`, `reason`, `hitl`, `derived`. Optional
//! fields are omitted when absent. `seq` increases strictly within a run and
//! breaks ties between equal timestamps.
//!
//! ```text
//! {"ts":1735689600000,"seq":1,"run_id":"mcp_github","event":"recv","just.uses":[{"belief_id":"b1",...,"trust":"Low"}]}
//! {"ts":1735689600001,"seq":2,"run_id":"mcp_github","event":"plan","alpha":{"name":"post_comment",...},"just.uses":[...]}
//! {"ts":1735689600002,"seq":3,"run_id":"mcp_github","event":"permit","alpha":{...},"just.uses":[...],"decision":"DENY","reason":"R1_LOW_TRUST_HIGH_RISK"}
//! ```
//!
//! Everything the checker needs is in the log itself; no monitor state is
//! consulted.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufRead, Write};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{classify_risk, ActionSpec, BeliefId, BeliefLabel, RiskClass, RiskTable, TrustLevel};
use crate::pep::Verdict;
use crate::trust::TrustEval;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Event {
    Recv,
    Plan,
    Permit,
    Exec,
    Log,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Event::Recv => "recv",
            Event::Plan => "plan",
            Event::Permit => "permit",
            Event::Exec => "exec",
            Event::Log => "log",
        })
    }
}

/// Outcome recorded for a human review.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HitlOutcome {
    #[serde(rename = "APPROVE")]
    Approve,
    #[serde(rename = "DENY")]
    Deny,
    /// No verdict arrived before the deadline.
    #[serde(rename = "TIMEOUT")]
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitlAnnotation {
    pub approver: String,
    pub verdict: HitlOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecord {
    pub ts: u64,
    pub seq: u64,
    pub run_id: String,
    pub event: Event,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<ActionSpec>,
    #[serde(rename = "just.uses", default, skip_serializing_if = "Option::is_none")]
    pub just_uses: Option<Vec<TrustEval>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hitl: Option<HitlAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived: Option<bool>,
}

impl AuditRecord {
    pub fn new(ts: u64, seq: u64, run_id: impl Into<String>, event: Event) -> Self {
        AuditRecord {
            ts,
            seq,
            run_id: run_id.into(),
            event,
            alpha: None,
            just_uses: None,
            decision: None,
            reason: None,
            hitl: None,
            derived: None,
        }
    }

    pub fn action_name(&self) -> Option<&str> {
        self.alpha.as_ref().map(|a| a.name.as_str())
    }

    pub fn to_line(&self) -> Result<String, AuditError> {
        serde_json::to_string(self).map_err(|e| AuditError::Serialization(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuditError {
    #[error("serialization failed: {0}")]
    Serialization(String),
    #[error("record {seq} violates log invariant: {what}")]
    InvariantViolation { seq: u64, what: String },
    #[error("line {line}: {cause}")]
    Parse { line: usize, cause: String },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("no record with seq {0}")]
    NoSuchRecord(u64),
    #[error("seq {0} occurs in more than one run; filter the log by run first")]
    AmbiguousSeq(u64),
    #[error("record {0} is not an exec")]
    NotAnExec(u64),
    #[error("exec {0} has no preceding plan for its action")]
    MissingPlan(u64),
}

impl From<io::Error> for AuditError {
    fn from(e: io::Error) -> Self {
        AuditError::Io(e.to_string())
    }
}

/// Per-run ordering state used to validate appends.
#[derive(Debug, Clone, Default)]
pub struct RunCursor {
    last_seq: Option<u64>,
    /// Action name -> whether the latest permit/exec record for it is an
    /// unconsumed PERMIT.
    open_permits: HashMap<String, bool>,
}

impl RunCursor {
    /// Checks `rec` against the run's history without recording it.
    pub fn check(&self, rec: &AuditRecord) -> Result<(), AuditError> {
        let violation = |what: &str| AuditError::InvariantViolation {
            seq: rec.seq,
            what: what.to_string(),
        };
        if self.last_seq.is_some_and(|last| rec.seq <= last) {
            return Err(violation("seq must increase strictly within a run"));
        }
        match rec.event {
            Event::Plan if rec.just_uses.is_none() => Err(violation("plan without just.uses")),
            Event::Plan | Event::Permit | Event::Exec if rec.alpha.is_none() => Err(violation("missing alpha")),
            Event::Permit if rec.decision.is_none() => Err(violation("permit without decision")),
            Event::Exec => {
                let name = rec.action_name().unwrap_or_default();
                if self.open_permits.get(name).copied().unwrap_or(false) {
                    Ok(())
                } else {
                    Err(violation("exec without a preceding PERMIT for the same action"))
                }
            }
            _ => Ok(()),
        }
    }

    pub fn advance(&mut self, rec: &AuditRecord) {
        self.last_seq = Some(rec.seq);
        if let (Event::Permit | Event::Exec, Some(name)) = (rec.event, rec.action_name()) {
            let open = rec.event == Event::Permit && rec.decision == Some(Verdict::Permit);
            self.open_permits.insert(name.to_string(), open);
        }
    }
}

struct SinkInner {
    out: Box<dyn Write + Send>,
    cursors: HashMap<String, RunCursor>,
}

/// Append-only JSONL sink shared by any number of runs.
///
/// Each append validates the record against its run's history, then writes
/// and flushes exactly one line under a single lock, so concurrent writers
/// never interleave partial lines.
pub struct AuditLog {
    inner: Mutex<SinkInner>,
}

impl fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuditLog").finish_non_exhaustive()
    }
}

impl AuditLog {
    pub fn new(out: impl Write + Send + 'static) -> Self {
        AuditLog {
            inner: Mutex::new(SinkInner {
                out: Box::new(out),
                cursors: HashMap::new(),
            }),
        }
    }

    /// Opens `path` for appending, creating it if needed.
    pub fn open(path: impl AsRef<std::path::Path>) -> Result<Self, AuditError> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::new(file))
    }

    /// Discards output but still validates.
    pub fn null() -> Self {
        Self::new(io::sink())
    }

    pub fn append(&self, rec: &AuditRecord) -> Result<(), AuditError> {
        let mut inner = self.inner.lock();
        let cursor = inner.cursors.entry(rec.run_id.clone()).or_default();
        cursor.check(rec)?;
        let mut line = rec.to_line()?;
        line.push('\n');
        cursor.advance(rec);
        inner.out.write_all(line.as_bytes())?;
        inner.out.flush()?;
        Ok(())
    }
}

/// Parses a JSONL log. Empty lines are skipped; anything else that fails to
/// parse aborts with its 1-based line number.
pub fn read_log(reader: impl BufRead) -> Result<Vec<AuditRecord>, AuditError> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| AuditError::Parse {
            line: idx + 1,
            cause: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| AuditError::Parse {
            line: idx + 1,
            cause: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

pub fn read_log_file(path: impl AsRef<std::path::Path>) -> Result<Vec<AuditRecord>, AuditError> {
    let file = std::fs::File::open(path)?;
    read_log(io::BufReader::new(file))
}

pub fn write_log(out: &mut impl Write, records: &[AuditRecord]) -> Result<(), AuditError> {
    for rec in records {
        writeln!(out, "{}", rec.to_line()?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub belief_id: BeliefId,
    pub lambda: BeliefLabel,
    pub trust: TrustLevel,
}

/// Index of the closest `plan` before `idx` in the same run with the same
/// action name.
fn closest_plan(log: &[AuditRecord], idx: usize) -> Option<usize> {
    let exec = &log[idx];
    let name = exec.action_name()?;
    log[..idx]
        .iter()
        .rposition(|r| r.event == Event::Plan && r.run_id == exec.run_id && r.action_name() == Some(name))
}

fn locate(log: &[AuditRecord], seq: u64) -> Result<usize, AuditError> {
    let mut hits = log.iter().enumerate().filter(|(_, r)| r.seq == seq);
    let (idx, first) = hits.next().ok_or(AuditError::NoSuchRecord(seq))?;
    if hits.any(|(_, r)| r.run_id != first.run_id) {
        return Err(AuditError::AmbiguousSeq(seq));
    }
    Ok(idx)
}

/// Reconstructs the beliefs that justified the exec record `exec_seq`.
pub fn backward_slice(log: &[AuditRecord], exec_seq: u64) -> Result<Vec<SliceEntry>, AuditError> {
    let idx = locate(log, exec_seq)?;
    slice_at(log, idx)
}

fn slice_at(log: &[AuditRecord], idx: usize) -> Result<Vec<SliceEntry>, AuditError> {
    let exec = &log[idx];
    if exec.event != Event::Exec {
        return Err(AuditError::NotAnExec(exec.seq));
    }
    let plan = closest_plan(log, idx).ok_or(AuditError::MissingPlan(exec.seq))?;
    Ok(log[plan]
        .just_uses
        .iter()
        .flatten()
        .map(|e| SliceEntry {
            belief_id: e.belief_id.clone(),
            lambda: e.lambda.clone(),
            trust: e.trust,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[allow(non_camel_case_types)]
pub enum ViolationKind {
    LOW_TRUST_CITATION,
    MISSING_PLAN,
    MISSING_PERMIT,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub run_id: String,
    pub exec_seq: u64,
    pub belief_ids: Vec<BeliefId>,
    pub kind: ViolationKind,
}

/// Checks the exec record at `idx` (any other record yields `None`).
///
/// A high-risk exec violates the property when its closest preceding plan is
/// missing, cites a low-trust belief, or when the latest permit/exec record
/// for the action before it is not a PERMIT.
pub fn check_exec(log: &[AuditRecord], idx: usize, table: &RiskTable) -> Option<Violation> {
    let exec = &log[idx];
    let action = exec.alpha.as_ref()?;
    if exec.event != Event::Exec || classify_risk(action, table) != RiskClass::High {
        return None;
    }
    let violation = |kind, belief_ids| Violation {
        run_id: exec.run_id.clone(),
        exec_seq: exec.seq,
        belief_ids,
        kind,
    };
    let slice = match slice_at(log, idx) {
        Ok(slice) => slice,
        Err(_) => return Some(violation(ViolationKind::MISSING_PLAN, Vec::new())),
    };
    let low: Vec<BeliefId> = slice
        .into_iter()
        .filter(|e| e.trust == TrustLevel::Low)
        .map(|e| e.belief_id)
        .collect();
    if !low.is_empty() {
        return Some(violation(ViolationKind::LOW_TRUST_CITATION, low));
    }
    let gate = log[..idx].iter().rev().find(|r| {
        matches!(r.event, Event::Permit | Event::Exec)
            && r.run_id == exec.run_id
            && r.action_name() == Some(action.name.as_str())
    });
    match gate {
        Some(r) if r.event == Event::Permit && r.decision == Some(Verdict::Permit) => None,
        _ => Some(violation(ViolationKind::MISSING_PERMIT, Vec::new())),
    }
}

/// All violations of the trace-safety property, in log order. An empty
/// result means no high-risk exec is justified by a low-trust belief.
pub fn check_theorem1(log: &[AuditRecord], table: &RiskTable) -> Vec<Violation> {
    (0..log.len()).filter_map(|i| check_exec(log, i, table)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{IntentClass, ProvenanceClass, RiskRule};
    use std::sync::Arc;

    #[derive(Clone, Default)]
    struct Shared(Arc<Mutex<Vec<u8>>>);

    impl Write for Shared {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            self.0.lock().extend_from_slice(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    fn eval(id: &str, trust: TrustLevel) -> TrustEval {
        TrustEval {
            belief_id: BeliefId::new(id),
            lambda: BeliefLabel::new("chan", IntentClass::Factual, 1),
            tau_epi: 0.9,
            tau_prov: if trust == TrustLevel::High {
                ProvenanceClass::Attested
            } else {
                ProvenanceClass::Unverified
            },
            trust,
            unverifiable: false,
        }
    }

    fn rec(seq: u64, event: Event, action: Option<&str>) -> AuditRecord {
        let mut r = AuditRecord::new(seq * 10, seq, "run", event);
        r.alpha = action.map(|a| ActionSpec::new(a, "t"));
        r
    }

    fn plan(seq: u64, action: &str, uses: Vec<TrustEval>) -> AuditRecord {
        let mut r = rec(seq, Event::Plan, Some(action));
        r.just_uses = Some(uses);
        r
    }

    fn permit(seq: u64, action: &str, verdict: Verdict) -> AuditRecord {
        let mut r = rec(seq, Event::Permit, Some(action));
        r.decision = Some(verdict);
        r
    }

    fn table() -> RiskTable {
        RiskTable::new(vec![RiskRule::new("post_comment", RiskClass::High)], RiskClass::Low).unwrap()
    }

    #[test]
    fn append_writes_one_line_each() {
        let buf = Shared::default();
        let log = AuditLog::new(buf.clone());
        log.append(&plan(1, "post_comment", vec![])).unwrap();
        log.append(&permit(2, "post_comment", Verdict::Permit)).unwrap();
        let text = String::from_utf8(buf.0.lock().clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back = read_log(text.as_bytes()).unwrap();
        assert!(back[1].seq > back[0].seq);
    }

    #[test]
    fn append_rejects_broken_records() {
        let log = AuditLog::null();
        let mut p = plan(1, "x", vec![]);
        p.just_uses = None;
        assert!(matches!(log.append(&p), Err(AuditError::InvariantViolation { .. })));
        let mut q = permit(1, "x", Verdict::Permit);
        q.decision = None;
        assert!(matches!(log.append(&q), Err(AuditError::InvariantViolation { .. })));
        assert!(matches!(
            log.append(&rec(1, Event::Exec, Some("x"))),
            Err(AuditError::InvariantViolation { .. })
        ));
        log.append(&plan(5, "x", vec![])).unwrap();
        assert!(matches!(
            log.append(&plan(5, "x", vec![])),
            Err(AuditError::InvariantViolation { .. })
        ));
        log.append(&permit(6, "x", Verdict::Deny)).unwrap();
        assert!(log.append(&rec(7, Event::Exec, Some("x"))).is_err());
        log.append(&permit(8, "x", Verdict::Permit)).unwrap();
        log.append(&rec(9, Event::Exec, Some("x"))).unwrap();
        // the permit is consumed by the exec
        assert!(log.append(&rec(10, Event::Exec, Some("x"))).is_err());
    }

    #[test]
    fn runs_are_validated_independently() {
        let log = AuditLog::null();
        let mut a = plan(3, "x", vec![]);
        a.run_id = "a".into();
        let mut b = plan(1, "x", vec![]);
        b.run_id = "b".into();
        log.append(&a).unwrap();
        log.append(&b).unwrap();
    }

    #[test]
    fn wire_keys() {
        let mut r = plan(2, "post_comment", vec![eval("b1", TrustLevel::Low)]);
        r.reason = Some("O2_EMPTY".into());
        let v: serde_json::Value = serde_json::from_str(&r.to_line().unwrap()).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 7);
        for k in ["ts", "seq", "run_id", "event", "alpha", "just.uses", "reason"] {
            assert!(keys.contains(&k.to_string()), "{k}");
        }
        assert_eq!(v["just.uses"][0]["trust"], "Low");
        assert!(v["just.uses"][0].get("unverifiable").is_none());
    }

    #[test]
    fn read_errors_carry_line_numbers() {
        assert_eq!(read_log(&b""[..]).unwrap(), vec![]);
        let good = plan(1, "x", vec![]).to_line().unwrap();
        let text = format!("{good}\n{}\n", &good[..good.len() - 5]);
        match read_log(text.as_bytes()) {
            Err(AuditError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn slice_and_check() {
        let log = vec![
            plan(
                1,
                "post_comment",
                vec![eval("b1", TrustLevel::High), eval("b2", TrustLevel::Low)],
            ),
            permit(2, "post_comment", Verdict::Permit),
            rec(3, Event::Exec, Some("post_comment")),
        ];
        let slice = backward_slice(&log, 3).unwrap();
        assert_eq!(slice.len(), 2);
        assert_eq!(slice[0].belief_id.as_str(), "b1");
        assert_eq!(slice[1].belief_id.as_str(), "b2");
        assert_eq!(backward_slice(&log, 2), Err(AuditError::NotAnExec(2)));
        assert_eq!(backward_slice(&log, 9), Err(AuditError::NoSuchRecord(9)));
        assert_eq!(backward_slice(&log[1..], 3), Err(AuditError::MissingPlan(3)));

        let v = check_theorem1(&log, &table());
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::LOW_TRUST_CITATION);
        assert_eq!(v[0].belief_ids, vec![BeliefId::new("b2")]);
        assert!(check_theorem1(&[], &table()).is_empty());
    }

    #[test]
    fn missing_plan_and_permit_kinds() {
        let log = vec![
            permit(1, "post_comment", Verdict::Permit),
            rec(2, Event::Exec, Some("post_comment")),
        ];
        assert_eq!(check_theorem1(&log, &table())[0].kind, ViolationKind::MISSING_PLAN);
        let log = vec![
            plan(1, "post_comment", vec![eval("b", TrustLevel::High)]),
            rec(2, Event::Exec, Some("post_comment")),
        ];
        assert_eq!(check_theorem1(&log, &table())[0].kind, ViolationKind::MISSING_PERMIT);
        let log = vec![
            plan(1, "post_comment", vec![eval("b", TrustLevel::High)]),
            permit(2, "post_comment", Verdict::Deny),
            rec(3, Event::Exec, Some("post_comment")),
        ];
        assert_eq!(check_theorem1(&log, &table())[0].kind, ViolationKind::MISSING_PERMIT);
    }

    #[test]
    fn low_risk_execs_are_not_checked() {
        let log = vec![rec(1, Event::Exec, Some("read_file"))];
        assert!(check_theorem1(&log, &table()).is_empty());
    }

    #[test]
    fn ambiguous_seq_across_runs() {
        let mut a = rec(1, Event::Exec, Some("x"));
        a.run_id = "a".into();
        let b = rec(1, Event::Exec, Some("x"));
        assert_eq!(backward_slice(&[a, b], 1), Err(AuditError::AmbiguousSeq(1)));
    }
}

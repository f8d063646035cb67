//! Exhaustive trace enumeration over a small event alphabet.
//!
//! The alphabet is built from a trust profile for each belief and a risk class
//! for each action:
//!
//! | symbol          | legal when                                        |
//! |-----------------|---------------------------------------------------|
//! | `recv(bi)`      | belief `i` not yet received, no review pending    |
//! | `plan(aj,{..})` | cites any subset of the received beliefs          |
//! | `exec(aj)`      | some plan for `aj` exists, no review pending      |
//! | `approve`, `deny`, `timeout` | a review is pending (only these) |
//!
//! Every sequence of length `1..=max_len` is driven through a real [`Run`]
//! and the resulting log is checked. Human review branches into every
//! possible verdict, so reviewer behaviour is covered as nondeterminism.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{check_exec, check_theorem1, AuditRecord, Event, HitlOutcome};
use crate::domain::{classify_risk, ActionSpec, BeliefId, IntentClass, RiskClass, RiskRule, RiskTable, TrustLevel};
use crate::monitor::{Clock, HitlVerdict, PolicyMode, Run, RunConfig};
use crate::pep::{ScopeSet, Verdict};
use crate::trust::{Attestation, TrustConfig};

pub const MAX_TRACE_LEN: usize = 8;
pub const MAX_BELIEFS: usize = 4;
pub const MAX_ACTIONS: usize = 4;
pub const SEQUENCE_BUDGET: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationParams {
    pub max_len: usize,
    /// Trust each belief will evaluate to once received.
    pub beliefs: Vec<TrustLevel>,
    /// Risk class of each action.
    pub actions: Vec<RiskClass>,
    pub mode: PolicyMode,
    /// Whether a pending review may also time out.
    pub timeouts: bool,
}

impl EnumerationParams {
    pub fn new(max_len: usize, beliefs: Vec<TrustLevel>, actions: Vec<RiskClass>, mode: PolicyMode) -> Self {
        EnumerationParams {
            max_len,
            beliefs,
            actions,
            mode,
            timeouts: true,
        }
    }

    pub fn action_name(j: usize) -> String {
        format!("a{j}")
    }

    pub fn risk_table(&self) -> RiskTable {
        RiskTable {
            rules: self
                .actions
                .iter()
                .enumerate()
                .map(|(j, r)| RiskRule::new(Self::action_name(j), *r))
                .collect(),
            default: RiskClass::Low,
        }
    }

    fn run_config(&self) -> RunConfig {
        RunConfig {
            mode: self.mode,
            trust: TrustConfig::default(),
            risk_table: self.risk_table(),
            scope: ScopeSet::new((0..self.actions.len()).map(Self::action_name)),
        }
    }

    fn check(&self) -> Result<(), EnumerationError> {
        if self.max_len > MAX_TRACE_LEN {
            return Err(EnumerationError::BadParams(format!(
                "max_len {} exceeds {MAX_TRACE_LEN}",
                self.max_len
            )));
        }
        if self.beliefs.len() > MAX_BELIEFS || self.actions.len() > MAX_ACTIONS {
            return Err(EnumerationError::BadParams(format!(
                "at most {MAX_BELIEFS} beliefs and {MAX_ACTIONS} actions"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnumerationError {
    #[error("{count} sequences exceed the budget of {budget}")]
    BudgetExceeded { count: u64, budget: u64 },
    #[error("bad enumeration parameters: {0}")]
    BadParams(String),
}

/// One input event. The derived order is the lexicographic order used to
/// pick witnesses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Symbol {
    Recv(u8),
    Plan { action: u8, cites: u8 },
    Exec(u8),
    Approve,
    Deny,
    Timeout,
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Recv(i) => write!(f, "recv(b{i})"),
            Symbol::Plan { action, cites } => {
                let cited: Vec<String> = (0..8)
                    .filter(|i| cites & (1 << i) != 0)
                    .map(|i| format!("b{i}"))
                    .collect();
                write!(f, "plan(a{action},{{{}}})", cited.join(","))
            }
            Symbol::Exec(j) => write!(f, "exec(a{j})"),
            Symbol::Approve => f.write_str("approve"),
            Symbol::Deny => f.write_str("deny"),
            Symbol::Timeout => f.write_str("timeout"),
        }
    }
}

/// Abstract control state: enough to know which symbols are legal and
/// whether an exec request will block on review.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Control {
    received: u8,
    /// Cited mask of the latest plan per action.
    plans: [Option<u8>; MAX_ACTIONS],
    pending: bool,
}

impl Control {
    fn start() -> Self {
        Control {
            received: 0,
            plans: [None; MAX_ACTIONS],
            pending: false,
        }
    }

    fn legal(&self, p: &EnumerationParams) -> Vec<Symbol> {
        if self.pending {
            let mut v = vec![Symbol::Approve, Symbol::Deny];
            if p.timeouts {
                v.push(Symbol::Timeout);
            }
            return v;
        }
        let mut v = Vec::new();
        for i in 0..p.beliefs.len() as u8 {
            if self.received & (1 << i) == 0 {
                v.push(Symbol::Recv(i));
            }
        }
        for j in 0..p.actions.len() as u8 {
            // every submask of `received`, ascending
            let mut subsets = Vec::new();
            let mut s = self.received;
            loop {
                subsets.push(s);
                if s == 0 {
                    break;
                }
                s = (s - 1) & self.received;
            }
            subsets.reverse();
            v.extend(subsets.into_iter().map(|cites| Symbol::Plan { action: j, cites }));
        }
        for j in 0..p.actions.len() as u8 {
            if self.plans[j as usize].is_some() {
                v.push(Symbol::Exec(j));
            }
        }
        v
    }

    /// Whether `exec(aj)` reaches the review queue (belief-aware, high risk,
    /// non-empty all-high justification).
    fn exec_blocks(&self, j: u8, p: &EnumerationParams) -> bool {
        let Some(cites) = self.plans[j as usize] else {
            return false;
        };
        p.mode == PolicyMode::BeliefAware
            && p.actions[j as usize] == RiskClass::High
            && cites != 0
            && (0..p.beliefs.len()).all(|i| cites & (1 << i) == 0 || p.beliefs[i] == TrustLevel::High)
    }

    fn step(mut self, sym: Symbol, p: &EnumerationParams) -> Self {
        match sym {
            Symbol::Recv(i) => self.received |= 1 << i,
            Symbol::Plan { action, cites } => self.plans[action as usize] = Some(cites),
            Symbol::Exec(j) => self.pending = self.exec_blocks(j, p),
            Symbol::Approve | Symbol::Deny | Symbol::Timeout => self.pending = false,
        }
        self
    }
}

/// Exact number of non-empty legal sequences of length at most `p.max_len`.
pub fn count_sequences(p: &EnumerationParams) -> u64 {
    fn go(c: Control, left: usize, p: &EnumerationParams, memo: &mut HashMap<(Control, usize), u64>) -> u64 {
        if left == 0 {
            return 0;
        }
        if let Some(n) = memo.get(&(c, left)) {
            return *n;
        }
        let n = c
            .legal(p)
            .into_iter()
            .map(|s| 1 + go(c.step(s, p), left - 1, p, memo))
            .fold(0u64, u64::saturating_add);
        memo.insert((c, left), n);
        n
    }
    go(Control::start(), p.max_len, p, &mut HashMap::new())
}

/// A run under construction together with its abstract state.
#[derive(Clone)]
pub(crate) struct Sim {
    pub run: Run,
    ids: Vec<Option<BeliefId>>,
    control: Control,
}

impl Sim {
    pub fn new(run_id: impl Into<String>, p: &EnumerationParams) -> Self {
        Sim {
            run: Run::new(run_id, p.run_config(), Clock::step(0, 1)),
            ids: vec![None; p.beliefs.len()],
            control: Control::start(),
        }
    }

    pub fn legal(&self, p: &EnumerationParams) -> Vec<Symbol> {
        self.control.legal(p)
    }

    /// Applies a legal symbol to the monitor.
    pub fn apply(&mut self, sym: Symbol, p: &EnumerationParams) {
        let run = &mut self.run;
        match sym {
            Symbol::Recv(i) => {
                let (channel, int, att) = match p.beliefs[i as usize] {
                    TrustLevel::High => ("signed.channel", IntentClass::Factual, Attestation::SignedAttested),
                    TrustLevel::Low => (
                        "MCP.ToolReturn(untrusted)",
                        IntentClass::Instructional,
                        Attestation::Unsigned,
                    ),
                };
                let id = run
                    .recv(format!("payload {i}"), channel, int, att, 0.9)
                    .expect("legal recv");
                self.ids[i as usize] = Some(id);
            }
            Symbol::Plan { action, cites } => {
                let uses: Vec<BeliefId> = (0..self.ids.len())
                    .filter(|i| cites & (1 << i) != 0)
                    .filter_map(|i| self.ids[i].clone())
                    .collect();
                run.plan_citing(
                    ActionSpec::new(EnumerationParams::action_name(action as usize), "res"),
                    &uses,
                )
                .expect("plan never fails");
            }
            Symbol::Exec(j) => {
                run.request_exec(&ActionSpec::new(EnumerationParams::action_name(j as usize), "res"))
                    .expect("legal exec");
            }
            Symbol::Approve | Symbol::Deny | Symbol::Timeout => {
                let token = run.pending().expect("review pending").token.clone();
                match sym {
                    Symbol::Approve => run.resolve_hitl(&token, HitlVerdict::Approve, "enumerator"),
                    Symbol::Deny => run.resolve_hitl(&token, HitlVerdict::Deny, "enumerator"),
                    _ => run.expire_hitl(&token),
                }
                .expect("legal resolution");
            }
        }
        self.control = self.control.step(sym, p);
        debug_assert_eq!(self.control.pending, self.run.pending().is_some());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub symbols: Vec<Symbol>,
    pub log: Vec<AuditRecord>,
}

impl Witness {
    pub fn events(&self) -> Vec<Event> {
        self.log.iter().map(|r| r.event).collect()
    }

    fn better_than(&self, other: &Witness) -> bool {
        match self.symbols.len().cmp(&other.symbols.len()) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => self.symbols < other.symbols,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub total: u64,
    pub violating: u64,
    /// High-risk exec records across all traces (counting each trace's own).
    pub high_risk_execs: u64,
    /// Of those, how many carry an approving human review.
    pub high_risk_execs_via_hitl: u64,
    pub timeouts: u64,
    /// Shortest violating trace, lexicographically least among equals.
    pub witness: Option<Witness>,
}

impl Report {
    fn merge(mut self, other: Report) -> Report {
        self.total += other.total;
        self.violating += other.violating;
        self.high_risk_execs += other.high_risk_execs;
        self.high_risk_execs_via_hitl += other.high_risk_execs_via_hitl;
        self.timeouts += other.timeouts;
        self.witness = match (self.witness, other.witness) {
            (Some(a), Some(b)) => Some(if b.better_than(&a) { b } else { a }),
            (a, b) => a.or(b),
        };
        self
    }
}

struct Walker<'a> {
    p: &'a EnumerationParams,
    table: RiskTable,
    path: Vec<Symbol>,
    /// Log of the trace ending at the current node. Runs are drained after
    /// every step, so cloning a run never copies its history.
    log: Vec<AuditRecord>,
    report: Report,
}

impl Walker<'_> {
    /// Counts the trace ending in `sim`, whose records from `new_from` on were
    /// produced by the last symbol, and recurses into its extensions.
    /// `inherited` is whether the parent trace already violated.
    fn visit(&mut self, sim: &Sim, new_from: usize, inherited: bool) {
        let mut violating = inherited;
        for idx in new_from..self.log.len() {
            let rec = &self.log[idx];
            if rec.event == Event::Exec
                && rec
                    .alpha
                    .as_ref()
                    .is_some_and(|a| classify_risk(a, &self.table) == RiskClass::High)
            {
                self.report.high_risk_execs += 1;
                if rec.hitl.as_ref().is_some_and(|h| h.verdict == HitlOutcome::Approve) {
                    self.report.high_risk_execs_via_hitl += 1;
                }
            }
            if rec.hitl.as_ref().is_some_and(|h| h.verdict == HitlOutcome::Timeout) {
                self.report.timeouts += 1;
            }
            violating |= check_exec(&self.log, idx, &self.table).is_some();
        }
        let children = if self.path.len() < self.p.max_len {
            sim.legal(self.p)
        } else {
            Vec::new()
        };
        if children.is_empty() {
            // maximal trace: run the full checker on the whole log
            let full = !check_theorem1(&self.log, &self.table).is_empty();
            debug_assert_eq!(full, violating);
            violating = full;
        }
        self.report.total += 1;
        if violating {
            self.report.violating += 1;
            let candidate = Witness {
                symbols: self.path.clone(),
                log: self.log.clone(),
            };
            if self.report.witness.as_ref().is_none_or(|w| candidate.better_than(w)) {
                self.report.witness = Some(candidate);
            }
        }
        for sym in children {
            let mut next = sim.clone();
            next.apply(sym, self.p);
            let mark = self.log.len();
            self.log.extend(next.run.drain_records());
            self.path.push(sym);
            self.visit(&next, mark, violating);
            self.path.pop();
            self.log.truncate(mark);
        }
    }
}

/// Enumerates every legal sequence up to `p.max_len`, runs the monitor on it
/// and checks the resulting log. Fails up front when the exact sequence count
/// exceeds [`SEQUENCE_BUDGET`].
pub fn enumerate_traces(p: &EnumerationParams) -> Result<Report, EnumerationError> {
    p.check()?;
    let count = count_sequences(p);
    if count > SEQUENCE_BUDGET {
        return Err(EnumerationError::BudgetExceeded {
            count,
            budget: SEQUENCE_BUDGET,
        });
    }
    if p.max_len == 0 {
        return Ok(Report::default());
    }
    let root = Sim::new("enum", p);
    let report = root
        .legal(p)
        .into_par_iter()
        .map(|sym| {
            let mut sim = root.clone();
            sim.apply(sym, p);
            let mut walker = Walker {
                p,
                table: p.risk_table(),
                path: vec![sym],
                log: sim.run.drain_records(),
                report: Report::default(),
            };
            walker.visit(&sim, 0, false);
            walker.report
        })
        .reduce(Report::default, Report::merge);
    debug_assert_eq!(report.total, count);
    Ok(report)
}

/// Positions of the four records that form a mismatch chain in `log`: a
/// low-trust recv, a plan citing that belief, a PERMIT for the planned
/// high-risk action, and its exec, in this order.
pub fn mismatch_chain(log: &[AuditRecord], table: &RiskTable) -> Option<[usize; 4]> {
    for (r, recv) in log.iter().enumerate() {
        if recv.event != Event::Recv {
            continue;
        }
        let Some(belief) = recv.just_uses.iter().flatten().find(|e| e.trust == TrustLevel::Low) else {
            continue;
        };
        for (p, plan) in log.iter().enumerate().skip(r + 1) {
            let cites = plan.event == Event::Plan
                && plan
                    .just_uses
                    .iter()
                    .flatten()
                    .any(|e| e.belief_id == belief.belief_id && e.trust == TrustLevel::Low);
            let Some(action) = plan.alpha.as_ref().filter(|_| cites) else {
                continue;
            };
            if classify_risk(action, table) != RiskClass::High {
                continue;
            }
            let same = |rec: &AuditRecord| rec.action_name() == Some(action.name.as_str());
            let Some(q) = (p + 1..log.len())
                .find(|&q| log[q].event == Event::Permit && log[q].decision == Some(Verdict::Permit) && same(&log[q]))
            else {
                continue;
            };
            if let Some(x) = (q + 1..log.len()).find(|&x| log[x].event == Event::Exec && same(&log[x])) {
                return Some([r, p, q, x]);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use RiskClass as R;
    use TrustLevel as T;

    fn params(beliefs: Vec<T>, actions: Vec<R>, mode: PolicyMode, max_len: usize) -> EnumerationParams {
        EnumerationParams::new(max_len, beliefs, actions, mode)
    }

    /// Brute-force count by walking the abstract control states.
    fn brute_count(p: &EnumerationParams) -> u64 {
        fn go(c: Control, left: usize, p: &EnumerationParams) -> u64 {
            if left == 0 {
                return 0;
            }
            c.legal(p).into_iter().map(|s| 1 + go(c.step(s, p), left - 1, p)).sum()
        }
        go(Control::start(), p.max_len, p)
    }

    #[test]
    fn counts_agree() {
        let p = params(vec![T::High, T::Low], vec![R::High, R::Low], PolicyMode::BeliefAware, 4);
        assert_eq!(count_sequences(&p), brute_count(&p));
        let report = enumerate_traces(&p).unwrap();
        assert_eq!(report.total, brute_count(&p));
    }

    #[test]
    fn hand_counted_small_alphabet() {
        // one Low belief, one action, blind, length 2:
        // len 1: recv, plan{}            -> 2
        // len 2: recv.plan{}, recv.plan{b0}, plan{}.recv, plan{}.plan{}, plan{}.exec -> 5
        let p = params(vec![T::Low], vec![R::High], PolicyMode::BeliefBlind, 2);
        assert_eq!(count_sequences(&p), 7);
    }

    #[test]
    fn aware_one_low_belief_is_safe() {
        let p = params(vec![T::Low], vec![R::High], PolicyMode::BeliefAware, 6);
        let r = enumerate_traces(&p).unwrap();
        assert_eq!(r.violating, 0);
        assert!(r.witness.is_none());
        assert_eq!(r.high_risk_execs, 0);
    }

    #[test]
    fn blind_finds_definition_shaped_witness() {
        let p = params(vec![T::Low], vec![R::High], PolicyMode::BeliefBlind, 6);
        let r = enumerate_traces(&p).unwrap();
        assert!(r.violating >= 1);
        let w = r.witness.unwrap();
        assert_eq!(
            w.symbols,
            vec![Symbol::Recv(0), Symbol::Plan { action: 0, cites: 1 }, Symbol::Exec(0)]
        );
        assert_eq!(w.events(), [Event::Recv, Event::Plan, Event::Permit, Event::Exec]);
        assert_eq!(mismatch_chain(&w.log, &p.risk_table()), Some([0, 1, 2, 3]));
    }

    #[test]
    fn high_trust_execs_all_pass_review() {
        let p = params(vec![T::High], vec![R::High], PolicyMode::BeliefAware, 6);
        let r = enumerate_traces(&p).unwrap();
        assert_eq!(r.violating, 0);
        assert!(r.high_risk_execs > 0);
        assert_eq!(r.high_risk_execs, r.high_risk_execs_via_hitl);
        assert!(r.timeouts > 0);
    }

    #[test]
    fn budget_enforced() {
        let p = params(
            vec![T::High, T::Low, T::Low],
            vec![R::High, R::Low, R::High],
            PolicyMode::BeliefAware,
            8,
        );
        assert!(matches!(
            enumerate_traces(&p),
            Err(EnumerationError::BudgetExceeded { .. })
        ));
        let p = params(vec![T::High], vec![R::High], PolicyMode::BeliefAware, 9);
        assert!(matches!(enumerate_traces(&p), Err(EnumerationError::BadParams(_))));
    }

    #[test]
    fn symbols_display() {
        assert_eq!(Symbol::Plan { action: 1, cites: 0b11 }.to_string(), "plan(a1,{b0,b1})");
        assert_eq!(Symbol::Plan { action: 0, cites: 0 }.to_string(), "plan(a0,{})");
    }
}

//! Run-level properties of the monitor over randomized inputs.

use std::collections::HashSet;

use bip_core::audit::{AuditRecord, Event};
use bip_core::domain::{IntentClass, RiskRule};
use bip_core::monitor::{Clock, HitlVerdict};
use bip_core::simlab::{random_traces, EnumerationParams};
use bip_core::{
    check_theorem1, ActionSpec, Attestation, BeliefId, PolicyMode, RiskClass, RiskTable, Run, RunConfig, ScopeSet,
    TrustConfig, TrustLevel, Verdict,
};
use proptest::prelude::*;

fn ordering_holds(log: &[AuditRecord]) -> bool {
    log.iter().enumerate().all(|(i, r)| {
        if r.event != Event::Exec {
            return true;
        }
        let prev = log[..i]
            .iter()
            .rev()
            .find(|p| matches!(p.event, Event::Permit | Event::Exec) && p.action_name() == r.action_name());
        matches!(prev, Some(p) if p.event == Event::Permit && p.decision == Some(Verdict::Permit))
    })
}

fn cited_after_recv(log: &[AuditRecord]) -> bool {
    let mut seen = HashSet::new();
    for r in log {
        let uses = r.just_uses.iter().flatten();
        if r.event == Event::Recv {
            for e in uses {
                assert!(!e.lambda.src.is_empty() && !e.lambda.path.is_empty());
                seen.insert(e.belief_id.clone());
            }
        } else {
            for e in uses {
                if !e.unverifiable && !seen.contains(&e.belief_id) {
                    return false;
                }
            }
        }
    }
    true
}

#[test]
fn aware_random_runs_are_safe_and_well_ordered() {
    use RiskClass as R;
    use TrustLevel as T;
    let p = EnumerationParams::new(
        8,
        vec![T::High, T::Low, T::High],
        vec![R::High, R::Low, R::High],
        PolicyMode::BeliefAware,
    );
    for log in random_traces(42, 2000, &p) {
        assert!(check_theorem1(&log, &p.risk_table()).is_empty());
        assert!(ordering_holds(&log));
        assert!(cited_after_recv(&log));
        assert!(log.windows(2).all(|w| w[0].seq < w[1].seq));
    }
}

#[derive(Debug, Clone)]
enum Op {
    Recv { attestation: u8, tau: f64 },
    Derive { parents: Vec<u8> },
    Plan { action: u8, cites: Vec<u8> },
    Exec { action: u8 },
    Resolve { approve: bool },
    Expire,
}

fn arb_op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..4, 0.0f64..=1.0).prop_map(|(attestation, tau)| Op::Recv { attestation, tau }),
        prop::collection::vec(0u8..6, 1..3).prop_map(|parents| Op::Derive { parents }),
        (0u8..3, prop::collection::vec(0u8..7, 0..3)).prop_map(|(action, cites)| Op::Plan { action, cites }),
        (0u8..3).prop_map(|action| Op::Exec { action }),
        any::<bool>().prop_map(|approve| Op::Resolve { approve }),
        Just(Op::Expire),
    ]
}

fn drive(ops: &[Op], theta: f64) -> Run {
    let config = RunConfig {
        mode: PolicyMode::BeliefAware,
        trust: TrustConfig::new(theta).unwrap(),
        risk_table: RiskTable::new(
            vec![
                RiskRule::new("send_*", RiskClass::High),
                RiskRule::new("read", RiskClass::Low),
            ],
            RiskClass::High,
        )
        .unwrap(),
        scope: ScopeSet::new(["read", "send_mail", "wipe"]),
    };
    let actions = ["read", "send_mail", "wipe"];
    let attest = [
        Attestation::SignedAttested,
        Attestation::SignedVerified,
        Attestation::Unsigned,
        Attestation::UnknownSource,
    ];
    let mut run = Run::new("prop", config, Clock::step(0, 1));
    let id = |k: &u8| BeliefId(format!("b{k}"));
    for op in ops {
        // errors (blocked run, missing plan, unknown parents) are legal rejections
        let _ = match op {
            Op::Recv { attestation, tau } => run
                .recv("p", "chan", IntentClass::Factual, attest[*attestation as usize], *tau)
                .map(|_| ()),
            Op::Derive { parents } => run.derive(&parents.iter().map(id).collect::<Vec<_>>(), "d").map(|_| ()),
            Op::Plan { action, cites } => run
                .plan_citing(
                    ActionSpec::new(actions[*action as usize], "t"),
                    &cites.iter().map(id).collect::<Vec<_>>(),
                )
                .map(|_| ()),
            Op::Exec { action } => run
                .request_exec(&ActionSpec::new(actions[*action as usize], "t"))
                .map(|_| ()),
            Op::Resolve { approve } => match run.pending().map(|p| p.token.clone()) {
                Some(t) => {
                    let v = if *approve {
                        HitlVerdict::Approve
                    } else {
                        HitlVerdict::Deny
                    };
                    run.resolve_hitl(&t, v, "prop").map(|_| ())
                }
                None => Ok(()),
            },
            Op::Expire => match run.pending().map(|p| p.token.clone()) {
                Some(t) => run.expire_hitl(&t).map(|_| ()),
                None => Ok(()),
            },
        };
    }
    run
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn every_aware_log_satisfies_trace_safety(ops in prop::collection::vec(arb_op(), 0..24), theta in 0.05f64..0.95) {
        let run = drive(&ops, theta);
        let log = run.records();
        prop_assert!(check_theorem1(log, &run.config().risk_table).is_empty());
        prop_assert!(ordering_holds(log));
        prop_assert!(cited_after_recv(log));
        for r in log.iter().filter(|r| r.event == Event::Exec) {
            let high = bip_core::domain::classify_risk(r.alpha.as_ref().unwrap(), &run.config().risk_table) == RiskClass::High;
            if high {
                prop_assert!(r.hitl.is_some(), "high-risk exec without review");
            }
        }
    }
}

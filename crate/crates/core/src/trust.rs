//! Trust aggregation: maps an evidence score and a provenance class to a
//! binary trust level, and lifts that to whole justifications.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    tau_in_range, BeliefId, BeliefLabel, Justification, JustificationEntry, ProvenanceClass, TrustLevel,
};

pub const DEFAULT_THETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrustError {
    #[error("tau_epi {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("theta {0} must lie strictly between 0 and 1")]
    InvalidTheta(f64),
    #[error("high-provenance set must be upward closed in the assurance order")]
    NotUpwardClosed,
    #[error("justification cites unknown belief `{0}`")]
    DanglingBeliefRef(BeliefId),
}

/// Parameters of the aggregator: an evidence threshold and the provenance
/// classes that count as high assurance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustConfig {
    theta: f64,
    high_prov_set: BTreeSet<ProvenanceClass>,
}

impl Default for TrustConfig {
    fn default() -> Self {
        TrustConfig {
            theta: DEFAULT_THETA,
            high_prov_set: [ProvenanceClass::Attested, ProvenanceClass::Verified].into(),
        }
    }
}

impl TrustConfig {
    pub fn new(theta: f64) -> Result<Self, TrustError> {
        Self::default().with_theta(theta)
    }

    pub fn with_theta(mut self, theta: f64) -> Result<Self, TrustError> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(TrustError::InvalidTheta(theta));
        }
        self.theta = theta;
        Ok(self)
    }

    pub fn with_high_prov_set(mut self, set: impl IntoIterator<Item = ProvenanceClass>) -> Result<Self, TrustError> {
        let set: BTreeSet<_> = set.into_iter().collect();
        let upward_closed = set.iter().all(|low| {
            ProvenanceClass::ALL
                .iter()
                .filter(|p| *p > low)
                .all(|p| set.contains(p))
        });
        if !upward_closed {
            return Err(TrustError::NotUpwardClosed);
        }
        self.high_prov_set = set;
        Ok(self)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn high_prov_set(&self) -> &BTreeSet<ProvenanceClass> {
        &self.high_prov_set
    }
}

/// `High` iff the evidence meets the threshold (inclusive) and the provenance
/// is in the configured high-assurance set.
pub fn aggregate(tau_epi: f64, tau_prov: ProvenanceClass, cfg: &TrustConfig) -> Result<TrustLevel, TrustError> {
    if !tau_in_range(tau_epi) {
        return Err(TrustError::OutOfRange(tau_epi));
    }
    if tau_epi >= cfg.theta && cfg.high_prov_set.contains(&tau_prov) {
        Ok(TrustLevel::High)
    } else {
        Ok(TrustLevel::Low)
    }
}

/// How an ingress channel vouches for its content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attestation {
    SignedAttested,
    SignedVerified,
    Unsigned,
    UnknownSource,
}

/// Provenance class assigned at the adapter boundary. The channel is carried
/// in the label; only the attestation decides the class.
pub fn ingress_provenance(_channel: &str, attestation: Attestation) -> ProvenanceClass {
    match attestation {
        Attestation::SignedAttested => ProvenanceClass::Attested,
        Attestation::SignedVerified => ProvenanceClass::Verified,
        Attestation::Unsigned => ProvenanceClass::Unverified,
        Attestation::UnknownSource => ProvenanceClass::Unknown,
    }
}

/// Per-belief trust evaluation, as written into `just.uses` of the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustEval {
    pub belief_id: BeliefId,
    pub lambda: BeliefLabel,
    pub tau_epi: f64,
    pub tau_prov: ProvenanceClass,
    pub trust: TrustLevel,
    /// Set when the citation could not be resolved or its snapshot is malformed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unverifiable: bool,
}

/// Evaluates one citation. Unverifiable snapshots evaluate to `Low`.
pub fn evaluate_entry(entry: &JustificationEntry, cfg: &TrustConfig) -> TrustEval {
    let unverifiable = !entry.is_verifiable();
    let trust = if unverifiable {
        TrustLevel::Low
    } else {
        aggregate(entry.tau_epi, entry.tau_prov, cfg).unwrap_or(TrustLevel::Low)
    };
    TrustEval {
        belief_id: entry.belief_id.clone(),
        lambda: entry.lambda.clone(),
        tau_epi: entry.tau_epi,
        tau_prov: entry.tau_prov,
        trust,
        unverifiable,
    }
}

pub fn evaluate_justification(just: &Justification, cfg: &TrustConfig) -> Vec<TrustEval> {
    just.uses.iter().map(|e| evaluate_entry(e, cfg)).collect()
}

/// Minimum trust over the cited entries; an empty justification is `Low`.
pub fn justification_trust(just: &Justification, cfg: &TrustConfig) -> TrustLevel {
    just.uses
        .iter()
        .map(|e| evaluate_entry(e, cfg).trust)
        .min()
        .unwrap_or(TrustLevel::Low)
}

/// Like [`justification_trust`], but rejects citations outside `known`.
pub fn justification_trust_checked(
    just: &Justification,
    cfg: &TrustConfig,
    known: &HashSet<BeliefId>,
) -> Result<TrustLevel, TrustError> {
    if let Some(dangling) = just.uses.iter().find(|e| !known.contains(&e.belief_id)) {
        return Err(TrustError::DanglingBeliefRef(dangling.belief_id.clone()));
    }
    Ok(justification_trust(just, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::IntentClass;
    use proptest::prelude::*;
    use ProvenanceClass::*;

    fn cfg() -> TrustConfig {
        TrustConfig::default()
    }

    fn entry(id: &str, tau: f64, prov: ProvenanceClass) -> JustificationEntry {
        JustificationEntry {
            belief_id: BeliefId::new(id),
            lambda: BeliefLabel::new("chan", IntentClass::Factual, 1),
            tau_epi: tau,
            tau_prov: prov,
        }
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(0.8, Attested, &cfg()), Ok(TrustLevel::High));
        assert_eq!(aggregate(1.0, Unverified, &cfg()), Ok(TrustLevel::Low));
        assert_eq!(aggregate(0.5, Verified, &cfg()), Ok(TrustLevel::High));
        assert_eq!(aggregate(0.49, Attested, &cfg()), Ok(TrustLevel::Low));
        assert_eq!(aggregate(1.5, Attested, &cfg()), Err(TrustError::OutOfRange(1.5)));
        assert!(aggregate(f64::NAN, Attested, &cfg()).is_err());
        assert!(aggregate(-0.1, Attested, &cfg()).is_err());
    }

    #[test]
    fn theta_bounds() {
        assert!(TrustConfig::new(0.0).is_err());
        assert!(TrustConfig::new(1.0).is_err());
        assert!(TrustConfig::new(f64::NAN).is_err());
        let c = TrustConfig::new(0.7).unwrap();
        assert_eq!(aggregate(0.7, Verified, &c), Ok(TrustLevel::High));
        assert_eq!(aggregate(0.69, Verified, &c), Ok(TrustLevel::Low));
    }

    #[test]
    fn high_prov_set_must_be_upward_closed() {
        assert_eq!(cfg().with_high_prov_set([Verified]), Err(TrustError::NotUpwardClosed));
        assert!(cfg().with_high_prov_set([Attested]).is_ok());
        assert!(cfg().with_high_prov_set([Unverified, Verified, Attested]).is_ok());
        assert!(cfg().with_high_prov_set([]).is_ok());
    }

    #[test]
    fn ingress_mapping() {
        assert_eq!(
            ingress_provenance("MCP.ToolReturn(GitHub.Issues)", Attestation::Unsigned),
            Unverified
        );
        assert_eq!(
            ingress_provenance("system.config", Attestation::SignedAttested),
            Attested
        );
        assert_eq!(ingress_provenance("?", Attestation::SignedVerified), Verified);
        assert_eq!(ingress_provenance("?", Attestation::UnknownSource), Unknown);
    }

    #[test]
    fn justification_examples() {
        let mixed = Justification::new(vec![entry("b1", 0.9, Attested), entry("b2", 0.9, Unverified)]);
        assert_eq!(justification_trust(&mixed, &cfg()), TrustLevel::Low);
        assert_eq!(justification_trust(&Justification::default(), &cfg()), TrustLevel::Low);
        let high = Justification::new(vec![entry("b1", 0.9, Attested), entry("b2", 0.6, Verified)]);
        assert_eq!(justification_trust(&high, &cfg()), TrustLevel::High);
    }

    #[test]
    fn dangling_reference_checked() {
        let just = Justification::new(vec![entry("b1", 0.9, Attested), entry("ghost", 0.9, Attested)]);
        let known: HashSet<_> = [BeliefId::new("b1")].into();
        assert_eq!(
            justification_trust_checked(&just, &cfg(), &known),
            Err(TrustError::DanglingBeliefRef(BeliefId::new("ghost")))
        );
        let just = Justification::new(vec![JustificationEntry::unresolved(BeliefId::new("ghost"))]);
        let eval = evaluate_justification(&just, &cfg());
        assert!(eval[0].unverifiable);
        assert_eq!(eval[0].trust, TrustLevel::Low);
    }

    #[test]
    fn monotone_on_grid() {
        for theta in [0.1, 0.5, 0.9] {
            let c = TrustConfig::new(theta).unwrap();
            for i in 0..=20 {
                for j in i..=20 {
                    for p1 in ProvenanceClass::ALL {
                        for p2 in ProvenanceClass::ALL.into_iter().filter(|p| *p >= p1) {
                            let lo = aggregate(i as f64 * 0.05, p1, &c).unwrap();
                            let hi = aggregate(j as f64 * 0.05, p2, &c).unwrap();
                            assert!(lo <= hi, "theta={theta} ({i},{p1}) vs ({j},{p2})");
                        }
                    }
                }
            }
        }
    }

    fn arb_entry() -> impl Strategy<Value = JustificationEntry> {
        (0.0f64..=1.0, 0usize..4).prop_map(|(t, p)| entry("b", t, ProvenanceClass::ALL[p]))
    }

    proptest! {
        #[test]
        fn unverified_and_unknown_never_high(tau in 0.0f64..=1.0, theta in 0.001f64..0.999) {
            let c = TrustConfig::new(theta).unwrap();
            prop_assert_eq!(aggregate(tau, Unverified, &c).unwrap(), TrustLevel::Low);
            prop_assert_eq!(aggregate(tau, Unknown, &c).unwrap(), TrustLevel::Low);
        }

        #[test]
        fn extension_never_raises(uses in prop::collection::vec(arb_entry(), 0..5), extra in arb_entry()) {
            let base = Justification::new(uses.clone());
            let mut extended = uses;
            extended.push(extra);
            let extended = Justification::new(extended);
            prop_assert!(justification_trust(&extended, &cfg()) <= justification_trust(&base, &cfg()) || base.uses.is_empty());
        }

        #[test]
        fn justification_is_min_over_entries(uses in prop::collection::vec(arb_entry(), 1..6)) {
            let just = Justification::new(uses.clone());
            let all_high = uses.iter().all(|e| aggregate(e.tau_epi, e.tau_prov, &cfg()).unwrap() == TrustLevel::High);
            let expect = if all_high { TrustLevel::High } else { TrustLevel::Low };
            prop_assert_eq!(justification_trust(&just, &cfg()), expect);
        }
    }
}

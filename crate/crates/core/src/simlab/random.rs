//! Seeded random walks over the enumeration alphabet, producing a corpus of
//! logs for property and oracle-equivalence tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audit::{AuditError, AuditRecord};
use crate::simlab::enumerate::{EnumerationParams, Sim};

/// `n` logs, each from one run with a uniformly chosen length in
/// `1..=p.max_len` and uniformly chosen legal symbols. Deterministic in
/// `seed`. Run ids are `rand-<seed>-<k>`.
pub fn random_traces(seed: u64, n: usize, p: &EnumerationParams) -> Vec<Vec<AuditRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let mut sim = Sim::new(format!("rand-{seed}-{k}"), p);
            let len = rng.gen_range(1..=p.max_len.max(1));
            for _ in 0..len {
                let legal = sim.legal(p);
                let Some(sym) = legal.choose(&mut rng) else { break };
                sim.apply(*sym, p);
            }
            sim.run.records().to_vec()
        })
        .collect()
}

/// Serializes a corpus as JSONL, one log after another.
pub fn corpus_to_jsonl(corpus: &[Vec<AuditRecord>]) -> Result<String, AuditError> {
    let mut out = Vec::new();
    for log in corpus {
        crate::audit::write_log(&mut out, log)?;
    }
    Ok(String::from_utf8(out).expect("JSON is UTF-8"))
}

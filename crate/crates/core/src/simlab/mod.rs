//! Simulation harness: scripted scenarios, the built-in MCP case study,
//! exhaustive trace enumeration and seeded random traces.

pub mod builtin;
pub mod enumerate;
pub mod random;
pub mod scenario;

pub use builtin::{mcp_github, stage_table, StageRow, StageTable};
pub use enumerate::{enumerate_traces, mismatch_chain, EnumerationError, EnumerationParams, Report, Symbol, Witness};
pub use random::{corpus_to_jsonl, random_traces};
pub use scenario::{
    run_scenario, run_scenario_with, start_run, Driver, RunOptions, Scenario, ScenarioError, Step, StepOutcome,
    Transcript,
};

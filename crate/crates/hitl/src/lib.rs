//! Review gateway for requests the monitor routed to a human.
//!
//! [`Gateway`] holds the pending set and the runs it belongs to; [`Server`]
//! exposes it over HTTP:
//!
//! - `GET /pending` lists open reviews, oldest first.
//! - `POST /decisions/{token}` with `{"verdict": "APPROVE"|"DENY", "approver": "..."}`
//!   answers 200, or 404 / 409 / 410 for unknown, already resolved and expired tokens.
//! - `GET /runs/{run_id}/log` returns the run's audit records as JSON lines.
//!
//! Reviews nobody answers are denied once their deadline passes.

mod gateway;
mod http;

pub use gateway::{Gateway, GatewayError, PendingDecision, SharedRun, DEFAULT_TIMEOUT_MS};
pub use http::{router, Server};

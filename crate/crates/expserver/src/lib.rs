//! Forced-choice experiment server: per-participant trial plans over three
//! blocks (background-only, body-only, original), trial delivery, an
//! append-only response log and per-block scoring.

pub mod error;
pub mod http;
pub mod plan;
pub mod store;

pub use error::{ExpError, Result};
pub use http::{router, serve, AppState};
pub use plan::{build_session, Catalog, TrialPlan, BLOCK_ORDER};
pub use store::{replay_log, BlockAccuracy, NextTrial, Store, StoreConfig, TrialRecord};

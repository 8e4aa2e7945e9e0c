//! Metrics and experiment runners: success rate, desk-FID, identity
//! preservation, attribute changes, impact tables, ablations and sweeps.

pub mod metrics;
pub mod proxies;
pub mod report;
pub mod runners;

pub use metrics::*;
pub use proxies::*;
pub use runners::*;

/// Cosine similarity above which two images count as the same identity.
pub const IDENTITY_THRESHOLD: f64 = 0.5;

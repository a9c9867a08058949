//! Evaluation battery for trained models.

pub mod circuit;
pub mod ioi;
pub mod metrics;
pub mod record;
pub mod sae;

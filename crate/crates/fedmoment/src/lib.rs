//! Deterministic single-process simulator for grouped sequential federated
//! learning on a synthetic moment-localization task.
//!
//! Clients hold disjoint shards of a planted-map corpus ([`datagen`]), train a
//! small differentiable localizer locally ([`localizer`]), and a server merges
//! the per-client snapshots with validation-derived attention weights
//! ([`metrics`], [`federation`]). A temporal-distribution-gap penalty
//! ([`temporal`]) regularizes clients toward the population's moment-class
//! distribution. Everything is a pure function of its inputs and seeds: equal
//! seeds give byte-identical outputs regardless of thread count.

pub mod datagen;
pub mod error;
pub mod federation;
pub mod localizer;
pub mod metrics;
pub mod seeds;
pub mod temporal;

pub(crate) mod textfmt;

pub use error::{Error, Result};

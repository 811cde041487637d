//! Evacuation behavior inference from mobile device GPS pings.
//!
//! The crate is organised as a staged batch pipeline:
//! [`ingest`] cleans raw pings into projected per-user tracks, [`home`]
//! infers proxy home cells, [`staypoints`] extracts activities, [`zones`]
//! answers zone membership, [`classify`] assigns evacuation classes and
//! [`metrics`] aggregates the outcomes. [`synth`] generates labelled
//! scenarios for end-to-end validation and [`pipeline`] wires the stages
//! together over files.

pub mod classify;
pub mod config;
pub mod geometry;
pub mod home;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod projection;
pub mod staypoints;
pub mod synth;
pub mod time;
pub mod zones;

//! Concept-drift lifecycle engine for hierarchical retail demand forecasting.
//!
//! The pipeline trains per-store boosted-tree forecasters, injects controlled
//! drift scenarios, detects drift with a four-detector voting ensemble,
//! attributes it with exact Shapley values and a hierarchical impact map, and
//! plans cost-aware selective retraining gated on projected ROI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod detect;
pub mod diagnose;
pub mod error;
pub mod forecast;
pub mod harness;
pub mod ingest;
pub mod inject;
pub mod retrain;
pub mod rng;

pub use data::{
    aggregate_series, build_hierarchy, slice_window, Branch, CalendarDay, Hierarchy, Level, NodeId, Panel, SeriesKey,
};
pub use error::{Error, Result};

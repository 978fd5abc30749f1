//! Quality-controlled epidemiological time series: region registry,
//! cumulative series store, deployment gate, ingestion, cross-level
//! reconciliation and issue desk.

pub mod engine;
pub mod gate;
pub mod ingest;
pub mod issues;
pub mod journal;
pub mod reconciler;
pub mod region;
pub mod series;
pub mod store;

pub use engine::{Engine, EngineConfig, EngineError};
pub use region::{Level, Region, RegionTree};
pub use series::{CumulativeSeries, Metric};
pub use store::Store;

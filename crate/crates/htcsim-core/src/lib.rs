//! Discrete-event simulator for high-throughput workloads on HPC clusters.
//!
//! Models two integration patterns between an HTC task pool and a batch
//! cluster: glidein pilot overlays and backfill-window brokering, together
//! with the data staging and credential machinery around them.

pub mod cluster;
pub mod dataplane;
pub mod engine;
pub mod event;
pub mod ids;
pub mod metrics;
pub mod overlay;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod sim;
#[cfg(any(test, feature = "testkit"))]
pub mod testkit;
pub mod time;
pub mod trace;
pub mod workload;

pub use engine::{Engine, EngineError};
pub use event::{EventId, EventKind, EventQueue, HostRef};
pub use ids::{JobId, NodeId, PilotId, TaskId, TransferId};
pub use metrics::{MetricSeries, SimReport};
pub use time::SimTime;

//! Integer id newtypes for the simulated entities.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident, $prefix:literal) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, ":{}"), self.0)
            }
        }
    };
}

id_type!(/// A batch job (hpc, pilot or wrapper kind).
    JobId, "job");
id_type!(/// An HTC task flowing through the overlay.
    TaskId, "task");
id_type!(/// A registered glidein pilot.
    PilotId, "pilot");
id_type!(/// A stage-in or stage-out transfer.
    TransferId, "transfer");
id_type!(/// An input dataset; tasks may share one.
    DatasetId, "dataset");

/// A compute node, indexed densely from zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node:{}", self.0)
    }
}

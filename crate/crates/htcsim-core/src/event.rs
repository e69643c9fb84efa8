//! Event queue with a total, reproducible processing order.
//!
//! Events are ordered by `(fire_at, seq)` where `seq` is assigned at
//! insertion, so simultaneous events fire in the order they were scheduled.

use crate::ids::{JobId, PilotId, TaskId, TransferId};
use crate::time::SimTime;

/// Where a dispatched task executes: a pilot slot or a wrapper lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HostRef {
    Pilot(PilotId),
    Lane { job: JobId, lane: u32 },
}

/// The closed set of event tags processed by the simulation loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    JobArrival { job: JobId },
    JobEnd { job: JobId },
    SchedulerCycle,
    BrokerCycle,
    PilotRegister { pilot: PilotId },
    PilotExpire { pilot: PilotId },
    TaskDispatch { task: TaskId, host: HostRef },
    TaskComplete { task: TaskId },
    TransferComplete { transfer: TransferId },
    CredentialRenewal,
    CredentialExpire,
    MetricSample,
}

/// Handle for a scheduled event, usable to cancel it before it fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventId {
    fire_at: SimTime,
    seq: u64,
}

/// Ordered pending-event set keyed by `(fire_at, seq)`.
#[derive(Debug, Clone, Default)]
pub struct EventQueue {
    events: std::collections::BTreeMap<(SimTime, u64), EventKind>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, fire_at: SimTime, kind: EventKind) -> EventId {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.events.insert((fire_at, seq), kind);
        EventId { fire_at, seq }
    }

    /// Removes a pending event. Returns false if it already fired or was cancelled.
    pub fn cancel(&mut self, id: EventId) -> bool {
        self.events.remove(&(id.fire_at, id.seq)).is_some()
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.events.keys().next().map(|(t, _)| *t)
    }

    /// Pops the next event if it fires at or before `t_end`.
    pub fn pop_due(&mut self, t_end: SimTime) -> Option<(SimTime, EventKind)> {
        match self.events.first_key_value() {
            Some(((t, _), _)) if *t <= t_end => {
                let ((t, _), kind) = self.events.pop_first().unwrap();
                Some((t, kind))
            }
            _ => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }
}

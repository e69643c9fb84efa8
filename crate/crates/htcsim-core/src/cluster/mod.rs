//! One HPC machine: nodes on a 3D torus, a priority batch queue scheduled
//! with EASY backfill, and backfill-window queries for external brokers.

mod easy;
pub mod torus;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{JobId, NodeId};
use crate::time::SimTime;
pub use easy::{BackfillWindow, Reservation};
pub use torus::{bounding_volume, place_topology_aware, place_transparent, PlaceOutcome, TorusDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Hpc,
    Pilot,
    Wrapper,
}

impl JobKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            JobKind::Hpc => "hpc",
            JobKind::Pilot => "pilot",
            JobKind::Wrapper => "wrapper",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    TopologyAware,
    Transparent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeState {
    Idle,
    Busy(JobId),
    Drained,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub cores: u32,
    pub memory_gb: f64,
    pub coord: (u32, u32, u32),
    pub state: NodeState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobState {
    Queued,
    Running,
    Finished,
}

/// A multi-node batch scheduler entity. Pilots and backfill wrappers are
/// ordinary jobs of special kind.
#[derive(Debug, Clone)]
pub struct BatchJob {
    pub id: JobId,
    pub nodes_requested: u32,
    pub walltime_req: SimTime,
    pub priority: i32,
    pub kind: JobKind,
    pub placement: Placement,
    pub preemptible: bool,
    pub arrival: SimTime,
    pub assigned_nodes: BTreeSet<NodeId>,
    pub start: Option<SimTime>,
    pub end: Option<SimTime>,
    /// Natural runtime for hpc jobs when walltimes are overestimated;
    /// `None` means the job holds its nodes until the walltime kill.
    pub actual_runtime: Option<SimTime>,
    /// Reservation start recorded the first time this job was the blocked
    /// head of the queue. Under EASY it must never be exceeded.
    pub first_head_reservation: Option<SimTime>,
    pub state: JobState,
}

impl BatchJob {
    pub fn new(
        id: JobId,
        kind: JobKind,
        nodes_requested: u32,
        walltime_req: SimTime,
        priority: i32,
        placement: Placement,
        arrival: SimTime,
    ) -> Self {
        BatchJob {
            id,
            nodes_requested,
            walltime_req,
            priority,
            kind,
            placement,
            // wrappers are always preemptible; pilots expire rather than preempt
            preemptible: matches!(kind, JobKind::Wrapper),
            arrival,
            assigned_nodes: BTreeSet::new(),
            start: None,
            end: None,
            actual_runtime: None,
            first_head_reservation: None,
            state: JobState::Queued,
        }
    }

    /// Scheduler-visible end estimate once running.
    pub fn estimated_end(&self) -> Option<SimTime> {
        self.start.map(|s| s + self.walltime_req)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("job requests {requested} nodes but the cluster has {cluster}")]
    TooLarge { requested: u32, cluster: u32 },
    #[error("job {0} was already submitted")]
    AlreadySubmitted(JobId),
    #[error("utilization window is empty")]
    EmptyWindow,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub nodes: u32,
    pub cores_per_node: u32,
    pub memory_gb: f64,
    pub torus: TorusDims,
    /// Placement policy for hpc jobs; pilot and wrapper jobs always run
    /// transparent (they may land anywhere in the torus).
    pub placement: Placement,
    pub compactness_limit: f64,
    pub scheduler_period: SimTime,
    /// Walltime overestimation: natural runtime = walltime / factor.
    pub overestimate_factor: f64,
}

impl ClusterConfig {
    pub fn total_cores(&self) -> u64 {
        u64::from(self.nodes) * u64::from(self.cores_per_node)
    }
}

/// Busy-core accounting split by job kind; all values are exact core-ms.
#[derive(Debug, Clone, Copy, Default)]
pub struct CoreUsage {
    pub hpc: u128,
    pub pilot: u128,
    pub wrapper: u128,
}

impl CoreUsage {
    pub fn total(&self) -> u128 {
        self.hpc + self.pilot + self.wrapper
    }
}

/// Cluster state. Mutated only from event handlers of the owning simulation.
#[derive(Debug, Clone)]
pub struct Cluster {
    cfg: ClusterConfig,
    nodes: Vec<Node>,
    free: BTreeSet<NodeId>,
    jobs: BTreeMap<JobId, BatchJob>,
    /// Queued jobs ordered by (priority desc, arrival, id).
    queue: BTreeSet<(std::cmp::Reverse<i32>, SimTime, JobId)>,
    running: BTreeSet<JobId>,
    reservation: Option<Reservation>,
    /// Set when queue or running set changed since the last cycle.
    dirty: bool,

    busy_cores: [u64; 3],
    core_ms: CoreUsage,
    last_usage_update: SimTime,
    /// Closed busy intervals per node, for the independent utilization route.
    node_busy: Vec<Vec<(SimTime, SimTime)>>,
    node_busy_since: Vec<Option<SimTime>>,
    /// Starts that happened later than the reservation recorded when the job
    /// first became head. Must stay zero: EASY never delays the head.
    reservation_delays: u64,
}

impl Cluster {
    pub fn new(cfg: ClusterConfig) -> Self {
        assert_eq!(cfg.torus.len(), cfg.nodes, "torus extents must cover the node count");
        let nodes: Vec<Node> = (0..cfg.nodes)
            .map(|i| Node {
                id: NodeId(i),
                cores: cfg.cores_per_node,
                memory_gb: cfg.memory_gb,
                coord: cfg.torus.coord_of(NodeId(i)),
                state: NodeState::Idle,
            })
            .collect();
        let free = nodes.iter().map(|n| n.id).collect();
        Cluster {
            node_busy: vec![Vec::new(); cfg.nodes as usize],
            node_busy_since: vec![None; cfg.nodes as usize],
            nodes,
            free,
            jobs: BTreeMap::new(),
            queue: BTreeSet::new(),
            running: BTreeSet::new(),
            reservation: None,
            dirty: false,
            busy_cores: [0; 3],
            core_ms: CoreUsage::default(),
            last_usage_update: SimTime::ZERO,
            reservation_delays: 0,
            cfg,
        }
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn size(&self) -> u32 {
        self.cfg.nodes
    }

    pub fn job(&self, id: JobId) -> &BatchJob {
        &self.jobs[&id]
    }

    pub fn get_job(&self, id: JobId) -> Option<&BatchJob> {
        self.jobs.get(&id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &BatchJob> {
        self.jobs.values()
    }

    pub fn free_nodes(&self) -> usize {
        self.free.len()
    }

    pub fn running_jobs(&self) -> usize {
        self.running.len()
    }

    pub fn queued_jobs(&self) -> usize {
        self.queue.len()
    }

    /// Total nodes requested by queued (not yet started) jobs.
    pub fn queued_node_demand(&self) -> u64 {
        self.queue.iter().map(|(_, _, id)| u64::from(self.jobs[id].nodes_requested)).sum()
    }

    pub fn reservation(&self) -> Option<&Reservation> {
        self.reservation.as_ref()
    }

    pub fn reservation_delays(&self) -> u64 {
        self.reservation_delays
    }

    pub fn needs_cycle(&self) -> bool {
        self.dirty
    }

    /// Queues a job. A scheduler cycle should follow at the current time.
    pub fn submit(&mut self, job: BatchJob, now: SimTime) -> Result<(), ClusterError> {
        if job.nodes_requested > self.cfg.nodes {
            return Err(ClusterError::TooLarge {
                requested: job.nodes_requested,
                cluster: self.cfg.nodes,
            });
        }
        if self.jobs.contains_key(&job.id) {
            return Err(ClusterError::AlreadySubmitted(job.id));
        }
        debug_assert!(job.arrival <= now);
        self.queue.insert((std::cmp::Reverse(job.priority), job.arrival, job.id));
        self.jobs.insert(job.id, job);
        self.dirty = true;
        Ok(())
    }

    /// Releases a running job's nodes (natural end or walltime kill).
    pub fn end_job(&mut self, id: JobId, now: SimTime) -> &BatchJob {
        self.update_usage(now);
        assert!(self.running.remove(&id), "job {id} is not running");
        let job = self.jobs.get_mut(&id).expect("unknown job");
        debug_assert!(job.state == JobState::Running);
        job.state = JobState::Finished;
        job.end = Some(now);
        let kind_idx = job.kind as usize;
        for node in &job.assigned_nodes {
            let slot = &mut self.nodes[node.0 as usize];
            debug_assert_eq!(slot.state, NodeState::Busy(id));
            slot.state = NodeState::Idle;
            self.free.insert(*node);
            let since = self.node_busy_since[node.0 as usize].take().expect("open interval");
            self.node_busy[node.0 as usize].push((since, now));
        }
        self.busy_cores[kind_idx] -=
            u64::from(job.nodes_requested) * u64::from(self.cfg.cores_per_node);
        self.dirty = true;
        self.jobs.get(&id).unwrap()
    }

    fn start_job(&mut self, id: JobId, nodes: Vec<NodeId>, now: SimTime) {
        self.update_usage(now);
        let job = self.jobs.get_mut(&id).expect("unknown job");
        debug_assert_eq!(job.state, JobState::Queued);
        assert_eq!(nodes.len() as u32, job.nodes_requested);
        let removed = self.queue.remove(&(std::cmp::Reverse(job.priority), job.arrival, id));
        debug_assert!(removed);
        if let Some(reserved_start) = job.first_head_reservation {
            if now > reserved_start {
                self.reservation_delays += 1;
            }
        }
        job.state = JobState::Running;
        job.start = Some(now);
        job.assigned_nodes = nodes.iter().copied().collect();
        let kind_idx = job.kind as usize;
        for node in &nodes {
            let was_free = self.free.remove(node);
            assert!(was_free, "placing job {id} on busy {node}");
            self.nodes[node.0 as usize].state = NodeState::Busy(id);
            self.node_busy_since[node.0 as usize] = Some(now);
        }
        self.busy_cores[kind_idx] += nodes.len() as u64 * u64::from(self.cfg.cores_per_node);
        self.running.insert(id);
    }

    fn update_usage(&mut self, now: SimTime) {
        debug_assert!(now >= self.last_usage_update);
        let dt = u128::from((now - self.last_usage_update).as_ms());
        self.core_ms.hpc += u128::from(self.busy_cores[JobKind::Hpc as usize]) * dt;
        self.core_ms.pilot += u128::from(self.busy_cores[JobKind::Pilot as usize]) * dt;
        self.core_ms.wrapper += u128::from(self.busy_cores[JobKind::Wrapper as usize]) * dt;
        self.last_usage_update = now;
    }

    /// Busy core-ms integrated event-by-event, split by kind, up to `now`.
    pub fn core_usage(&mut self, now: SimTime) -> CoreUsage {
        self.update_usage(now);
        self.core_ms
    }

    /// Busy core-ms recomputed from per-node busy intervals: the independent
    /// route that must agree exactly with [`Cluster::core_usage`].
    pub fn core_ms_from_intervals(&self, now: SimTime) -> u128 {
        let per_core = u128::from(self.cfg.cores_per_node);
        let mut total = 0u128;
        for (node_idx, intervals) in self.node_busy.iter().enumerate() {
            for (s, e) in intervals {
                total += u128::from((*e - *s).as_ms()) * per_core;
            }
            if let Some(s) = self.node_busy_since[node_idx] {
                total += u128::from((now - s).as_ms()) * per_core;
            }
        }
        total
    }

    /// Fraction of busy core-time over `[from, to)`.
    pub fn utilization(&self, from: SimTime, to: SimTime) -> Result<f64, ClusterError> {
        if to <= from {
            return Err(ClusterError::EmptyWindow);
        }
        let per_core = u128::from(self.cfg.cores_per_node);
        let mut busy = 0u128;
        let clip = |s: SimTime, e: SimTime| -> u128 {
            let s = s.max(from);
            let e = e.min(to);
            if e > s {
                u128::from((e - s).as_ms())
            } else {
                0
            }
        };
        for (node_idx, intervals) in self.node_busy.iter().enumerate() {
            for (s, e) in intervals {
                busy += clip(*s, *e) * per_core;
            }
            if let Some(s) = self.node_busy_since[node_idx] {
                busy += clip(s, to) * per_core;
            }
        }
        let capacity = u128::from(self.cfg.total_cores()) * u128::from((to - from).as_ms());
        Ok(busy as f64 / capacity as f64)
    }

    /// Instantaneous busy-core fraction.
    pub fn busy_fraction(&self) -> f64 {
        let busy: u64 = self.busy_cores.iter().sum();
        busy as f64 / self.cfg.total_cores() as f64
    }

    /// Conservation check: busy + idle + drained node counts must equal size.
    pub fn node_accounting(&self) -> (u32, u32, u32) {
        let mut counts = (0, 0, 0);
        for n in &self.nodes {
            match n.state {
                NodeState::Busy(_) => counts.0 += 1,
                NodeState::Idle => counts.1 += 1,
                NodeState::Drained => counts.2 += 1,
            }
        }
        counts
    }

    fn try_place(&self, job: &BatchJob, free: &BTreeSet<NodeId>) -> PlaceOutcome {
        match job.placement {
            Placement::Transparent => place_transparent(job.nodes_requested, free),
            Placement::TopologyAware => place_topology_aware(
                self.cfg.torus,
                job.nodes_requested,
                free,
                self.cfg.compactness_limit,
            ),
        }
    }
}

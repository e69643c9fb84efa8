//! The HTC side: task pool, OSG constraint validation, glidein pilot
//! lifecycle and matchmaking, wrapper-lane execution state, and the
//! preemption/re-run semantics shared by both overlay modes.

pub mod packing;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::HostRef;
use crate::ids::{DatasetId, JobId, NodeId, PilotId, TaskId};
use crate::time::SimTime;
pub use packing::{pack_backfill, first_fit, EmptyPlan, WrapperPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlayMode {
    Glidein,
    BackfillBroker,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayConfig {
    pub mode: OverlayMode,
    pub target_pilots: u32,
    pub pilot_nodes: u32,
    pub pilot_walltime: SimTime,
    pub pilot_priority: i32,
    /// Checkpoint granularity; zero keeps all work on preemption.
    pub checkpoint_interval: SimTime,
    pub osg_policy: bool,
    pub startup_latency: SimTime,
    pub broker_period: SimTime,
    pub wrapper_max_walltime: SimTime,
    pub wrapper_priority: i32,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        OverlayConfig {
            mode: OverlayMode::Glidein,
            target_pilots: 2,
            pilot_nodes: 4,
            pilot_walltime: SimTime::from_hours_f64(12.0),
            pilot_priority: 0,
            checkpoint_interval: SimTime::from_hours_f64(0.5),
            osg_policy: true,
            startup_latency: SimTime::from_secs(60),
            broker_period: SimTime::from_secs(60),
            wrapper_max_walltime: SimTime::from_hours_f64(12.0),
            wrapper_priority: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// OSG policy
// ---------------------------------------------------------------------------

/// The job envelope for opportunistic grid execution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OsgPolicy {
    pub max_memory_gb: f64,
    pub max_runtime_h: f64,
    pub max_io_gb: f64,
    pub max_cores: u32,
}

impl Default for OsgPolicy {
    fn default() -> Self {
        OsgPolicy { max_memory_gb: 2.0, max_runtime_h: 12.0, max_io_gb: 10.0, max_cores: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    MemLimit,
    WalltimeLimit,
    IoLimit,
    CoresLimit,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Violation::MemLimit => "MEM_LIMIT",
            Violation::WalltimeLimit => "WALLTIME_LIMIT",
            Violation::IoLimit => "IO_LIMIT",
            Violation::CoresLimit => "CORES_LIMIT",
        })
    }
}

impl OsgPolicy {
    /// Every violated constraint for the given task shape.
    pub fn check(
        &self,
        cores: u32,
        memory_gb: f64,
        est_runtime: SimTime,
        io_gb: f64,
    ) -> Vec<Violation> {
        let mut v = Vec::new();
        if memory_gb > self.max_memory_gb {
            v.push(Violation::MemLimit);
        }
        if est_runtime > SimTime::from_hours_f64(self.max_runtime_h) {
            v.push(Violation::WalltimeLimit);
        }
        if io_gb > self.max_io_gb {
            v.push(Violation::IoLimit);
        }
        if cores > self.max_cores {
            v.push(Violation::CoresLimit);
        }
        v
    }

    pub fn validate(&self, task: &Task) -> Vec<Violation> {
        self.check(task.cores, task.memory_gb, task.est_runtime, task.input_gb + task.output_gb)
    }
}

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskState {
    Pending,
    Staging,
    Running,
    /// Output stage-out in flight; the compute slot is already released.
    StagingOut,
    Completed,
    Preempted,
}

/// A single HTC work item flowing through the overlay.
#[derive(Debug, Clone)]
pub struct Task {
    pub id: TaskId,
    pub cores: u32,
    pub memory_gb: f64,
    pub est_runtime: SimTime,
    /// Drawn at generation; hidden from the matchmaker.
    pub actual_runtime: SimTime,
    pub input_gb: f64,
    pub output_gb: f64,
    pub dataset: DatasetId,
    pub priority: i32,
    pub arrival: SimTime,
    pub state: TaskState,
    pub attempts: u32,
    /// Checkpointed progress carried across preemptions.
    pub completed_work: SimTime,
    pub host: Option<HostRef>,
    pub exec_start: Option<SimTime>,
    pub first_dispatch: Option<SimTime>,
    /// Total compute time consumed across all attempts, wasted or not.
    pub executed_total: SimTime,
    /// Input staged and readable for the current attempt.
    pub input_ready: bool,
}

#[allow(clippy::too_many_arguments)]
impl Task {
    pub fn new(
        id: TaskId,
        cores: u32,
        memory_gb: f64,
        est_runtime: SimTime,
        actual_runtime: SimTime,
        input_gb: f64,
        output_gb: f64,
        dataset: DatasetId,
        priority: i32,
        arrival: SimTime,
    ) -> Task {
        Task {
            id,
            cores,
            memory_gb,
            est_runtime,
            actual_runtime,
            input_gb,
            output_gb,
            dataset,
            priority,
            arrival,
            state: TaskState::Pending,
            attempts: 0,
            completed_work: SimTime::ZERO,
            host: None,
            exec_start: None,
            first_dispatch: None,
            executed_total: SimTime::ZERO,
            input_ready: false,
        }
    }

    pub fn remaining_runtime(&self) -> SimTime {
        self.actual_runtime - self.completed_work
    }

    /// What the matchmaker believes is left, based on the estimate.
    pub fn est_remaining(&self) -> SimTime {
        self.est_runtime.saturating_sub(self.completed_work)
    }
}

// ---------------------------------------------------------------------------
// Pilots and wrappers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PilotState {
    /// Batch job submitted, not yet running or still pulling its image.
    Submitted,
    /// Registered with the pool and accepting tasks.
    Live,
    Expired,
}

/// A glidein instance. Capacity is counted in cores: a pilot over `n` nodes
/// offers `n * cores_per_node` single-core slots and a task occupies
/// `task.cores` of them.
#[derive(Debug, Clone)]
pub struct Pilot {
    pub id: PilotId,
    pub batch_job_id: JobId,
    pub nodes: BTreeSet<NodeId>,
    pub capacity_cores: u32,
    pub busy_cores: u32,
    pub registered_at: Option<SimTime>,
    pub expires_at: Option<SimTime>,
    pub state: PilotState,
    pub active_tasks: BTreeSet<TaskId>,
}

impl Pilot {
    pub fn free_cores(&self) -> u32 {
        self.capacity_cores - self.busy_cores
    }
}

/// Execution state of one wrapper job's lanes.
#[derive(Debug, Clone)]
pub struct WrapperState {
    pub job: JobId,
    /// Tasks not yet computing, per lane, in plan order.
    pub lanes: Vec<VecDeque<TaskId>>,
    /// Currently computing task per lane.
    pub active: BTreeMap<u32, TaskId>,
    /// Packed tasks that have not finished compute yet.
    pub outstanding: usize,
    pub started: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("task {0} completed more than once")]
pub struct DuplicateCompletion(pub TaskId);

#[derive(Debug, Clone, Default)]
pub struct OverlayStats {
    pub tasks_total: u64,
    pub completed: u64,
    pub preemptions: u64,
    pub dispatches: u64,
    pub pilots_submitted: u64,
    pub pilots_registered: u64,
    pub wrappers_submitted: u64,
    pub executed_ms_total: u128,
    pub executed_core_ms: u128,
    pub wasted_ms_total: u128,
    pub max_wasted_ms: u64,
    pub wait_ms_total: u128,
    pub waited_tasks: u64,
    /// Dispatches that would have violated the OSG policy. Must stay zero
    /// when the policy is enabled.
    pub osg_gate_violations: u64,
}

// ---------------------------------------------------------------------------
// Overlay
// ---------------------------------------------------------------------------

/// Task pool plus pilot/wrapper registries. Owned by the simulation thread;
/// transitions are invoked from event handlers.
#[derive(Debug, Clone)]
pub struct Overlay {
    cfg: OverlayConfig,
    osg: Option<OsgPolicy>,
    tasks: BTreeMap<TaskId, Task>,
    /// Pending tasks ordered by (priority desc, arrival, id).
    pending: BTreeSet<(std::cmp::Reverse<i32>, SimTime, TaskId)>,
    /// Pending tasks keyed by estimated remaining runtime, so matching
    /// against a nearly-expired pilot fails in O(log n).
    pending_by_need: BTreeSet<(SimTime, TaskId)>,
    running_now: u64,
    pilots: BTreeMap<PilotId, Pilot>,
    next_pilot: u64,
    wrappers: BTreeMap<JobId, WrapperState>,
    stats: OverlayStats,
}

impl Overlay {
    pub fn new(cfg: OverlayConfig) -> Self {
        let osg = cfg.osg_policy.then(OsgPolicy::default);
        Overlay {
            cfg,
            osg,
            tasks: BTreeMap::new(),
            pending: BTreeSet::new(),
            pending_by_need: BTreeSet::new(),
            running_now: 0,
            pilots: BTreeMap::new(),
            next_pilot: 0,
            wrappers: BTreeMap::new(),
            stats: OverlayStats::default(),
        }
    }

    pub fn config(&self) -> &OverlayConfig {
        &self.cfg
    }

    pub fn osg(&self) -> Option<&OsgPolicy> {
        self.osg.as_ref()
    }

    pub fn stats(&self) -> &OverlayStats {
        &self.stats
    }

    pub fn task(&self, id: TaskId) -> &Task {
        &self.tasks[&id]
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values()
    }

    pub fn pilot(&self, id: PilotId) -> &Pilot {
        &self.pilots[&id]
    }

    pub fn pilots(&self) -> impl Iterator<Item = &Pilot> {
        self.pilots.values()
    }

    pub fn wrapper(&self, job: JobId) -> Option<&WrapperState> {
        self.wrappers.get(&job)
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    /// Pending tasks in matchmaking order (priority desc, arrival, id).
    pub fn pending_tasks(&self) -> impl Iterator<Item = &Task> {
        self.pending.iter().map(|(_, _, tid)| &self.tasks[tid])
    }

    pub fn mark_input_ready(&mut self, tid: TaskId) {
        let task = self.tasks.get_mut(&tid).expect("unknown task");
        debug_assert_eq!(task.state, TaskState::Staging);
        task.input_ready = true;
    }

    /// Undoes a dispatch whose stage-in could not begin: releases the host
    /// booking and returns the task to the pool as if never dispatched.
    pub fn abort_dispatch(&mut self, tid: TaskId) {
        let (host, cores) = {
            let task = self.tasks.get_mut(&tid).expect("unknown task");
            debug_assert_eq!(task.state, TaskState::Staging);
            task.attempts -= 1;
            (task.host.take(), task.cores)
        };
        self.stats.dispatches -= 1;
        match host {
            Some(HostRef::Pilot(pid)) => {
                let p = self.pilots.get_mut(&pid).expect("unknown pilot");
                p.busy_cores -= cores;
                p.active_tasks.remove(&tid);
            }
            Some(HostRef::Lane { job, lane }) => {
                if let Some(w) = self.wrappers.get_mut(&job) {
                    let lane = &mut w.lanes[lane as usize];
                    if let Some(pos) = lane.iter().position(|t| *t == tid) {
                        lane.remove(pos);
                        w.outstanding -= 1;
                    }
                }
            }
            None => debug_assert!(false, "abort without host"),
        }
        let task = self.tasks.get_mut(&tid).expect("unknown task");
        task.state = TaskState::Preempted;
        self.requeue(tid);
    }

    pub fn add_task(&mut self, task: Task) {
        debug_assert_eq!(task.state, TaskState::Pending);
        self.stats.tasks_total += 1;
        self.pending.insert((std::cmp::Reverse(task.priority), task.arrival, task.id));
        self.pending_by_need.insert((task.est_remaining(), task.id));
        self.tasks.insert(task.id, task);
    }

    pub fn running_count(&self) -> u64 {
        self.running_now
    }

    /// Pilots alive for target maintenance: submitted or registered.
    pub fn live_or_submitted_pilots(&self) -> u32 {
        self.pilots
            .values()
            .filter(|p| matches!(p.state, PilotState::Submitted | PilotState::Live))
            .count() as u32
    }

    pub fn create_pilot(&mut self, batch_job_id: JobId) -> PilotId {
        let id = PilotId(self.next_pilot);
        self.next_pilot += 1;
        self.stats.pilots_submitted += 1;
        self.pilots.insert(
            id,
            Pilot {
                id,
                batch_job_id,
                nodes: BTreeSet::new(),
                capacity_cores: 0,
                busy_cores: 0,
                registered_at: None,
                expires_at: None,
                state: PilotState::Submitted,
                active_tasks: BTreeSet::new(),
            },
        );
        id
    }

    /// Called when the pilot's batch job starts: fixes its node set and
    /// expiry (batch start + walltime, independent of startup latency).
    pub fn pilot_job_started(
        &mut self,
        pilot: PilotId,
        nodes: &BTreeSet<NodeId>,
        cores_per_node: u32,
        start: SimTime,
        walltime: SimTime,
    ) {
        let p = self.pilots.get_mut(&pilot).expect("unknown pilot");
        p.nodes = nodes.clone();
        p.capacity_cores = nodes.len() as u32 * cores_per_node;
        p.expires_at = Some(start + walltime);
    }

    /// Registration after the startup latency. Returns false if the pilot
    /// already expired (pathological latency >= walltime).
    pub fn register_pilot(&mut self, pilot: PilotId, now: SimTime) -> bool {
        let p = self.pilots.get_mut(&pilot).expect("unknown pilot");
        if p.state != PilotState::Submitted {
            return false;
        }
        p.state = PilotState::Live;
        p.registered_at = Some(now);
        self.stats.pilots_registered += 1;
        true
    }

    /// Highest-priority pending task that fits the pilot's free cores and
    /// remaining lifetime. `stage_est` returns the stage-in estimate, or
    /// `None` when the task cannot stage right now (credential lapse).
    pub fn match_for_pilot(
        &self,
        pilot: PilotId,
        now: SimTime,
        mut stage_est: impl FnMut(&Task) -> Option<SimTime>,
    ) -> Option<TaskId> {
        let p = &self.pilots[&pilot];
        if p.state != PilotState::Live || p.free_cores() == 0 {
            return None;
        }
        let lifetime_left = p.expires_at?.checked_sub(now)?;
        // No pending task can fit if even the shortest one exceeds what is
        // left (stage-in estimates only add to the need).
        match self.pending_by_need.first() {
            Some((min_need, _)) if *min_need > lifetime_left => return None,
            None => return None,
            _ => {}
        }
        for &(_, _, tid) in &self.pending {
            let task = &self.tasks[&tid];
            if task.cores > p.free_cores() {
                continue;
            }
            let Some(est_stage) = stage_est(task) else {
                continue;
            };
            if task.est_remaining() + est_stage <= lifetime_left {
                return Some(tid);
            }
        }
        None
    }

    /// Binds a task to a host and marks it staging. The OSG gate is checked
    /// here: dispatching a non-compliant task is a simulation defect.
    pub fn dispatch(&mut self, tid: TaskId, host: HostRef, now: SimTime) {
        if let Some(policy) = &self.osg {
            if !policy.validate(&self.tasks[&tid]).is_empty() {
                self.stats.osg_gate_violations += 1;
                debug_assert!(false, "OSG gate: dispatched task violates policy");
            }
        }
        let task = self.tasks.get_mut(&tid).expect("unknown task");
        debug_assert_eq!(task.state, TaskState::Pending);
        let removed = self.pending.remove(&(std::cmp::Reverse(task.priority), task.arrival, tid));
        debug_assert!(removed);
        self.pending_by_need.remove(&(task.est_remaining(), tid));
        task.state = TaskState::Staging;
        task.host = Some(host);
        task.attempts += 1;
        task.input_ready = task.input_gb <= 0.0;
        if task.first_dispatch.is_none() {
            task.first_dispatch = Some(now);
            self.stats.wait_ms_total += u128::from((now - task.arrival).as_ms());
            self.stats.waited_tasks += 1;
        }
        self.stats.dispatches += 1;
        match host {
            HostRef::Pilot(pid) => {
                let cores = self.tasks[&tid].cores;
                let p = self.pilots.get_mut(&pid).expect("unknown pilot");
                debug_assert!(p.free_cores() >= cores);
                p.busy_cores += cores;
                p.active_tasks.insert(tid);
            }
            HostRef::Lane { .. } => {}
        }
    }

    /// Input ready: the task starts computing for its remaining runtime.
    pub fn start_compute(&mut self, tid: TaskId, now: SimTime) -> SimTime {
        let task = self.tasks.get_mut(&tid).expect("unknown task");
        debug_assert_eq!(task.state, TaskState::Staging);
        task.state = TaskState::Running;
        task.exec_start = Some(now);
        self.running_now += 1;
        task.remaining_runtime()
    }

    /// Compute finished: releases the slot/lane. The caller decides between
    /// stage-out and immediate finalization.
    pub fn complete_compute(&mut self, tid: TaskId, now: SimTime) {
        let task = self.tasks.get_mut(&tid).expect("unknown task");
        debug_assert_eq!(task.state, TaskState::Running);
        let elapsed = now - task.exec_start.take().expect("running task has exec_start");
        debug_assert_eq!(elapsed, task.remaining_runtime());
        task.executed_total += elapsed;
        task.completed_work = task.actual_runtime;
        let cores = task.cores;
        task.state = TaskState::StagingOut;
        self.running_now -= 1;
        self.stats.executed_ms_total += u128::from(elapsed.as_ms());
        self.stats.executed_core_ms += u128::from(elapsed.as_ms()) * u128::from(cores);
        self.release_host(tid);
    }

    /// Terminal transition; exactly once per task.
    pub fn finalize(&mut self, tid: TaskId) -> Result<(), DuplicateCompletion> {
        let task = self.tasks.get_mut(&tid).expect("unknown task");
        if task.state == TaskState::Completed {
            return Err(DuplicateCompletion(tid));
        }
        debug_assert_eq!(task.state, TaskState::StagingOut);
        task.state = TaskState::Completed;
        task.host = None;
        self.stats.completed += 1;
        Ok(())
    }

    /// Preempts a staging or running task (host killed under it): progress
    /// floors to the last checkpoint, the task re-queues pending, and the
    /// input stays cached. Returns the wasted compute time.
    pub fn preempt(&mut self, tid: TaskId, now: SimTime) -> SimTime {
        let checkpoint = self.cfg.checkpoint_interval;
        let task = self.tasks.get_mut(&tid).expect("unknown task");
        let wasted = match task.state {
            TaskState::Running => {
                self.running_now -= 1;
                let elapsed = now - task.exec_start.take().expect("running task has exec_start");
                let kept = elapsed.floor_to(checkpoint);
                task.completed_work += kept;
                task.executed_total += elapsed;
                self.stats.executed_ms_total += u128::from(elapsed.as_ms());
                self.stats.executed_core_ms += u128::from(elapsed.as_ms()) * u128::from(task.cores);
                elapsed - kept
            }
            TaskState::Staging => SimTime::ZERO, // no work done yet
            other => panic!("preempt of task {tid} in state {other:?}"),
        };
        task.state = TaskState::Preempted;
        task.host = None;
        task.input_ready = false;
        self.stats.preemptions += 1;
        self.stats.wasted_ms_total += u128::from(wasted.as_ms());
        self.stats.max_wasted_ms = self.stats.max_wasted_ms.max(wasted.as_ms());
        self.requeue(tid);
        wasted
    }

    fn requeue(&mut self, tid: TaskId) {
        let task = self.tasks.get_mut(&tid).expect("unknown task");
        debug_assert_eq!(task.state, TaskState::Preempted);
        task.state = TaskState::Pending;
        self.pending.insert((std::cmp::Reverse(task.priority), task.arrival, tid));
        self.pending_by_need.insert((task.est_remaining(), tid));
    }

    fn release_host(&mut self, tid: TaskId) {
        let (host, cores) = {
            let task = &self.tasks[&tid];
            (task.host, task.cores)
        };
        match host {
            Some(HostRef::Pilot(pid)) => {
                let p = self.pilots.get_mut(&pid).expect("unknown pilot");
                p.busy_cores -= cores;
                p.active_tasks.remove(&tid);
            }
            Some(HostRef::Lane { job, lane }) => {
                if let Some(w) = self.wrappers.get_mut(&job) {
                    w.active.remove(&lane);
                    w.outstanding -= 1;
                }
            }
            None => debug_assert!(false, "release without host"),
        }
    }

    /// Expires a pilot, detaching its in-flight tasks. Returns the tasks the
    /// caller must preempt (running or staging toward this pilot).
    pub fn expire_pilot(&mut self, pilot: PilotId) -> Vec<TaskId> {
        let p = self.pilots.get_mut(&pilot).expect("unknown pilot");
        p.state = PilotState::Expired;
        p.busy_cores = 0;
        std::mem::take(&mut p.active_tasks).into_iter().collect()
    }

    pub fn add_wrapper(&mut self, job: JobId, plan: &WrapperPlan) {
        self.stats.wrappers_submitted += 1;
        self.wrappers.insert(
            job,
            WrapperState {
                job,
                lanes: plan.lanes.iter().map(|l| l.iter().copied().collect()).collect(),
                active: BTreeMap::new(),
                outstanding: plan.task_count(),
                started: false,
            },
        );
    }

    pub fn wrapper_mut(&mut self, job: JobId) -> Option<&mut WrapperState> {
        self.wrappers.get_mut(&job)
    }

    /// Tears down a wrapper at job end. Returns every task still attached:
    /// computing, or packed and staged but never started.
    pub fn end_wrapper(&mut self, job: JobId) -> Vec<TaskId> {
        let Some(w) = self.wrappers.remove(&job) else {
            return Vec::new();
        };
        let mut tasks: Vec<TaskId> = w.active.values().copied().collect();
        for lane in w.lanes {
            tasks.extend(lane);
        }
        tasks.sort_unstable();
        tasks
    }

    /// Checks the no-zombie invariant: no running task outlives its host.
    pub fn assert_no_zombies(&self, now: SimTime) {
        for task in self.tasks.values() {
            if task.state != TaskState::Running {
                continue;
            }
            if let Some(HostRef::Pilot(pid)) = task.host {
                let exp = self.pilots[&pid].expires_at.expect("live pilot has expiry");
                assert!(now <= exp, "task {} running past pilot expiry", task.id);
            }
        }
    }
}

#[cfg(test)]
mod tests;

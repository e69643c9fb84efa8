//! The assembled simulation: cluster, overlay, data plane, and workload
//! wired onto the event engine, with handlers for every event kind.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::cluster::{BatchJob, Cluster, JobKind, Placement};
use crate::dataplane::{DataError, DataPlane, Direction, StageIn};
use crate::engine::Engine;
use crate::event::{EventId, EventKind, HostRef};
use crate::ids::{JobId, PilotId, TaskId};
use crate::metrics::SimReport;
use crate::overlay::{pack_backfill, Overlay, OverlayMode, PilotState, TaskState, WrapperPlan};
use crate::report::RunSummary;
use crate::scenario::{Scenario, ScenarioError};
use crate::time::SimTime;
use crate::workload::{generate_tasks, WorkloadError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    /// A violated internal invariant; must never occur on shipped scenarios.
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: SimReport,
    pub summary: RunSummary,
    pub trace: Option<String>,
}

#[derive(Debug)]
struct StagedWrapper {
    plan: WrapperPlan,
    waiting: std::collections::BTreeSet<TaskId>,
}

const METRICS: &[&str] = &[
    "utilization",
    "backlog_nodes",
    "free_nodes",
    "pending_tasks",
    "running_tasks",
    "live_pilots",
    "active_transfers",
    "tasks_completed",
];

pub struct Simulation {
    engine: Engine,
    scenario: Scenario,
    duration: SimTime,
    cluster: Cluster,
    overlay: Overlay,
    data: DataPlane,
    next_job_id: u64,
    /// Jobs created but not yet arrived (their arrival event is queued).
    pending_jobs: BTreeMap<JobId, BatchJob>,
    job_end_events: BTreeMap<JobId, EventId>,
    task_complete_events: BTreeMap<TaskId, EventId>,
    stage_in_of: BTreeMap<TaskId, crate::ids::TransferId>,
    job_pilot: BTreeMap<JobId, PilotId>,
    /// Packed wrapper plans whose inputs are still staging; the batch job
    /// is submitted only once every packed input is on the filesystem.
    staged_wrappers: BTreeMap<JobId, StagedWrapper>,
    /// The next background arrival, if the Poisson stream is on.
    background_next: Option<JobId>,
    cycle_requested_at: Option<SimTime>,
    next_periodic_cycle: SimTime,
}

impl Simulation {
    pub fn new(scenario: Scenario, trace: bool) -> Result<Simulation, SimError> {
        let diags = scenario.validate();
        if !diags.is_empty() {
            return Err(ScenarioError::Invalid(diags).into());
        }
        let mut engine = Engine::new(scenario.seed, trace);
        for m in METRICS {
            engine.register_metric(m);
        }
        let duration = scenario.duration();
        let cluster = Cluster::new(scenario.cluster_config());
        let overlay = Overlay::new(scenario.overlay_config());
        let data = DataPlane::new(scenario.data_config());
        let mut sim = Simulation {
            engine,
            duration,
            cluster,
            overlay,
            data,
            next_job_id: 0,
            pending_jobs: BTreeMap::new(),
            job_end_events: BTreeMap::new(),
            task_complete_events: BTreeMap::new(),
            stage_in_of: BTreeMap::new(),
            job_pilot: BTreeMap::new(),
            staged_wrappers: BTreeMap::new(),
            background_next: None,
            cycle_requested_at: None,
            next_periodic_cycle: SimTime::ZERO,
            scenario,
        };
        sim.init()?;
        Ok(sim)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn cluster_mut(&mut self) -> &mut Cluster {
        &mut self.cluster
    }

    pub fn overlay(&self) -> &Overlay {
        &self.overlay
    }

    pub fn data(&self) -> &DataPlane {
        &self.data
    }

    fn init(&mut self) -> Result<(), SimError> {
        self.data.issue_credential(&mut self.engine);
        if self.data.config().credential.auto_renew {
            let period = self.data.renewal_period();
            self.engine.schedule_after(period, EventKind::CredentialRenewal);
        }

        if let Some(htc) = &self.scenario.workload.htc {
            let mut runtime_rng = self.engine.rng("htc.runtime").clone();
            let mut input_rng = self.engine.rng("htc.input").clone();
            let mut output_rng = self.engine.rng("htc.output").clone();
            let tasks = generate_tasks(
                htc,
                self.overlay.osg().copied().as_ref(),
                &mut runtime_rng,
                &mut input_rng,
                &mut output_rng,
            )?;
            if self.scenario.data.prepopulate_cache {
                let datasets: Vec<_> = tasks.iter().map(|t| (t.dataset, t.input_gb)).collect();
                self.data.prepopulate(&datasets);
            }
            for task in tasks {
                self.overlay.add_task(task);
            }
        }

        if let Some(bg) = self.scenario.workload.background.clone() {
            if bg.arrival_per_h > 0.0 {
                self.schedule_background_arrival(&bg);
            }
        }

        self.engine.schedule(SimTime::ZERO, EventKind::SchedulerCycle).expect("t=0");
        self.cycle_requested_at = Some(SimTime::ZERO);
        self.engine.schedule(SimTime::ZERO, EventKind::BrokerCycle).expect("t=0");
        self.engine.schedule(SimTime::ZERO, EventKind::MetricSample).expect("t=0");
        Ok(())
    }

    fn alloc_job_id(&mut self) -> JobId {
        let id = JobId(self.next_job_id);
        self.next_job_id += 1;
        id
    }

    fn schedule_background_arrival(&mut self, bg: &crate::workload::HpcBackgroundSpec) {
        let Some(dt) = bg.draw_interarrival(self.engine.rng("bg.arrival")) else {
            return;
        };
        let (nodes, walltime) = bg.draw_shape(self.cluster.size(), self.engine.rng("bg.shape"));
        let id = self.alloc_job_id();
        let arrival = self.engine.now() + dt;
        let mut job = BatchJob::new(
            id,
            JobKind::Hpc,
            nodes,
            walltime,
            bg.priority,
            self.cluster.config().placement,
            arrival,
        );
        job.actual_runtime = Some(natural_runtime(walltime, self.cluster.config().overestimate_factor));
        self.pending_jobs.insert(id, job);
        self.background_next = Some(id);
        self.engine.schedule(arrival, EventKind::JobArrival { job: id }).expect("future arrival");
    }

    fn request_cycle(&mut self) {
        let now = self.engine.now();
        if self.cycle_requested_at != Some(now) {
            self.cycle_requested_at = Some(now);
            self.engine.schedule(now, EventKind::SchedulerCycle).expect("now");
        }
    }

    /// Drives the simulation until the scenario duration.
    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        while self.step()? {}
        Ok(())
    }

    /// Processes one event; false once the horizon is reached.
    pub fn step(&mut self) -> Result<bool, SimError> {
        match self.engine.next_due(self.duration) {
            Some((_, kind)) => {
                self.handle(kind)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn run(mut self) -> Result<RunOutput, SimError> {
        self.run_to_end()?;
        self.output()
    }

    fn handle(&mut self, kind: EventKind) -> Result<(), SimError> {
        match kind {
            EventKind::JobArrival { job } => self.on_job_arrival(job),
            EventKind::SchedulerCycle => {
                self.cycle_requested_at = None;
                self.run_cycle();
                let now = self.engine.now();
                if now >= self.next_periodic_cycle {
                    let period = self.cluster.config().scheduler_period;
                    self.next_periodic_cycle = now + period;
                    self.engine
                        .schedule(self.next_periodic_cycle, EventKind::SchedulerCycle)
                        .expect("future");
                }
                Ok(())
            }
            EventKind::BrokerCycle => {
                self.broker_cycle()?;
                let period = self.overlay.config().broker_period;
                self.engine.schedule_after(period, EventKind::BrokerCycle);
                Ok(())
            }
            EventKind::JobEnd { job } => self.on_job_end(job),
            EventKind::PilotRegister { pilot } => {
                if self.overlay.register_pilot(pilot, self.engine.now()) {
                    let p = self.overlay.pilot(pilot);
                    let detail = format!(
                        "cores={} expires_ms={}",
                        p.capacity_cores,
                        p.expires_at.expect("started pilot").as_ms()
                    );
                    self.engine.trace("pilot-register", pilot, &detail);
                    self.try_dispatch();
                }
                Ok(())
            }
            EventKind::PilotExpire { pilot } => {
                let tasks = self.overlay.expire_pilot(pilot);
                let detail = format!("preempting={}", tasks.len());
                self.engine.trace("pilot-expire", pilot, &detail);
                for tid in tasks {
                    self.preempt_or_complete_at_boundary(tid)?;
                }
                self.try_dispatch();
                Ok(())
            }
            EventKind::TaskDispatch { task, host } => self.on_task_dispatch(task, host),
            EventKind::TaskComplete { task } => self.on_task_complete(task),
            EventKind::TransferComplete { transfer } => self.on_transfer_complete(transfer),
            EventKind::CredentialRenewal => {
                self.data.issue_credential(&mut self.engine);
                self.engine.trace("credential-renewal", "cred", "");
                let period = self.data.renewal_period();
                self.engine.schedule_after(period, EventKind::CredentialRenewal);
                self.try_dispatch();
                Ok(())
            }
            EventKind::CredentialExpire => {
                if self.data.handle_expiry(&mut self.engine) {
                    self.engine.trace("credential-expire", "cred", "hub transfers paused");
                }
                Ok(())
            }
            EventKind::MetricSample => {
                self.sample_metrics();
                let period = SimTime::from_secs_f64(self.scenario.sample_period_s);
                self.engine.schedule_after(period, EventKind::MetricSample);
                Ok(())
            }
        }
    }

    fn on_job_arrival(&mut self, id: JobId) -> Result<(), SimError> {
        let job = self
            .pending_jobs
            .remove(&id)
            .ok_or_else(|| SimError::Internal(format!("arrival of unknown job {id}")))?;
        let detail = format!(
            "kind={} nodes={} walltime_ms={}",
            job.kind.as_str(),
            job.nodes_requested,
            job.walltime_req.as_ms()
        );
        self.engine.trace("job-arrival", id, &detail);
        self.cluster
            .submit(job, self.engine.now())
            .map_err(|e| SimError::Internal(e.to_string()))?;
        if self.background_next == Some(id) {
            self.background_next = None;
            if let Some(bg) = self.scenario.workload.background.clone() {
                self.schedule_background_arrival(&bg);
            }
        }
        self.request_cycle();
        Ok(())
    }

    /// One scheduler pass plus backlog top-up and the backlog sample.
    fn run_cycle(&mut self) {
        let now = self.engine.now();
        let started = self.cluster.schedule_cycle(now);
        for id in &started {
            self.on_job_started(*id);
        }
        let mut injected = 0u32;
        if let Some(bg) = self.scenario.workload.background.clone() {
            if bg.target_backlog_nodes > 0 {
                while self.cluster.queued_node_demand() < u64::from(bg.target_backlog_nodes) {
                    let (nodes, walltime) =
                        bg.draw_shape(self.cluster.size(), self.engine.rng("bg.inject"));
                    let id = self.alloc_job_id();
                    let mut job = BatchJob::new(
                        id,
                        JobKind::Hpc,
                        nodes,
                        walltime,
                        bg.priority,
                        self.cluster.config().placement,
                        now,
                    );
                    job.actual_runtime = Some(natural_runtime(
                        walltime,
                        self.cluster.config().overestimate_factor,
                    ));
                    let detail = format!(
                        "kind=hpc nodes={} walltime_ms={} injected=1",
                        job.nodes_requested,
                        job.walltime_req.as_ms()
                    );
                    self.engine.trace("job-arrival", id, &detail);
                    self.cluster.submit(job, now).expect("injected job fits");
                    injected += 1;
                }
                if injected > 0 {
                    self.request_cycle();
                }
            }
        }
        let backlog = self.cluster.queued_node_demand();
        self.engine.sample("backlog_nodes", backlog as f64).expect("registered");
        let detail = format!(
            "started={} injected={} queued={} backlog_nodes={}",
            started.len(),
            injected,
            self.cluster.queued_jobs(),
            backlog
        );
        self.engine.trace("scheduler-cycle", "cluster", &detail);
    }

    fn on_job_started(&mut self, id: JobId) {
        let now = self.engine.now();
        let (kind, walltime, actual, nodes) = {
            let job = self.cluster.job(id);
            (job.kind, job.walltime_req, job.actual_runtime, job.assigned_nodes.clone())
        };
        let detail = format!("kind={} nodes={}", kind.as_str(), nodes.len());
        self.engine.trace("job-start", id, &detail);
        let end_at = match kind {
            JobKind::Hpc => now + actual.unwrap_or(walltime).min(walltime),
            JobKind::Pilot | JobKind::Wrapper => now + walltime,
        };
        let ev = self.engine.schedule(end_at, EventKind::JobEnd { job: id }).expect("future end");
        self.job_end_events.insert(id, ev);
        match kind {
            JobKind::Hpc => {}
            JobKind::Pilot => {
                let pilot = self.job_pilot[&id];
                let cfg = *self.overlay.config();
                self.overlay.pilot_job_started(
                    pilot,
                    &nodes,
                    self.cluster.config().cores_per_node,
                    now,
                    walltime,
                );
                self.engine
                    .schedule(now + cfg.startup_latency, EventKind::PilotRegister { pilot })
                    .expect("future registration");
                self.engine
                    .schedule(end_at, EventKind::PilotExpire { pilot })
                    .expect("future expiry");
            }
            JobKind::Wrapper => {
                if let Some(w) = self.overlay.wrapper_mut(id) {
                    w.started = true;
                }
                self.advance_wrapper_lanes(id);
            }
        }
    }

    fn on_job_end(&mut self, id: JobId) -> Result<(), SimError> {
        self.job_end_events.remove(&id);
        let kind = self.cluster.end_job(id, self.engine.now()).kind;
        self.engine.trace("job-end", id, &format!("kind={}", kind.as_str()));
        if kind == JobKind::Wrapper {
            let tasks = self.overlay.end_wrapper(id);
            for tid in tasks {
                self.preempt_or_complete_at_boundary(tid)?;
            }
            self.try_dispatch();
        }
        self.request_cycle();
        Ok(())
    }

    /// A task whose completion falls exactly on its host's kill instant has
    /// finished its work (job end at walltime is inclusive); everything else
    /// is preempted.
    fn preempt_or_complete_at_boundary(&mut self, tid: TaskId) -> Result<(), SimError> {
        let now = self.engine.now();
        let due = {
            let t = self.overlay.task(tid);
            t.state == TaskState::Running
                && t.exec_start.map(|s| s + t.remaining_runtime()) == Some(now)
        };
        if due {
            if let Some(ev) = self.task_complete_events.remove(&tid) {
                self.engine.cancel(ev);
            }
            self.complete_task_compute(tid)
        } else {
            self.preempt_task(tid);
            Ok(())
        }
    }

    fn on_task_dispatch(&mut self, tid: TaskId, host: HostRef) -> Result<(), SimError> {
        let (state, input_gb, input_ready, dataset) = {
            let t = self.overlay.task(tid);
            (t.state, t.input_gb, t.input_ready, t.dataset)
        };
        if state != TaskState::Staging {
            return Ok(()); // preempted between binding and kickoff
        }
        let detail = format!("host={host:?} attempt={}", self.overlay.task(tid).attempts);
        self.engine.trace("task-dispatch", tid, &detail);
        if input_ready {
            self.on_task_input_ready(tid);
            return Ok(());
        }
        debug_assert!(input_gb > 0.0);
        match self.data.begin_stage_in(&mut self.engine, dataset, input_gb, tid) {
            Ok(stage) => {
                self.stage_in_of.insert(tid, stage.transfer_id());
                if let StageIn::Started { cache_hit: true, .. } = stage {
                    self.engine.trace("task-dispatch", tid, "stage_in=cache_hit");
                }
                Ok(())
            }
            Err(err) => {
                self.engine.trace("task-dispatch", tid, &format!("aborted={err}"));
                let host = self.overlay.task(tid).host;
                self.overlay.abort_dispatch(tid);
                if let Some(HostRef::Lane { job, .. }) = host {
                    self.note_staged_input(job, tid);
                }
                Ok(())
            }
        }
    }

    fn on_task_input_ready(&mut self, tid: TaskId) {
        self.overlay.mark_input_ready(tid);
        match self.overlay.task(tid).host {
            Some(HostRef::Pilot(_)) => self.start_task_compute(tid),
            Some(HostRef::Lane { job, .. }) => {
                if !self.note_staged_input(job, tid) {
                    self.advance_wrapper_lanes(job);
                }
            }
            None => debug_assert!(false, "input ready without a host"),
        }
    }

    fn start_task_compute(&mut self, tid: TaskId) {
        let now = self.engine.now();
        let remaining = self.overlay.start_compute(tid, now);
        let ev = self
            .engine
            .schedule(now + remaining, EventKind::TaskComplete { task: tid })
            .expect("future completion");
        self.task_complete_events.insert(tid, ev);
    }

    fn advance_wrapper_lanes(&mut self, job: JobId) {
        loop {
            let pick = {
                let Some(w) = self.overlay.wrapper(job) else { return };
                if !w.started {
                    return;
                }
                let mut pick = None;
                for (i, lane) in w.lanes.iter().enumerate() {
                    let li = i as u32;
                    if w.active.contains_key(&li) {
                        continue;
                    }
                    if let Some(&front) = lane.front() {
                        if self.overlay.task(front).input_ready {
                            pick = Some((li, front));
                            break;
                        }
                    }
                }
                pick
            };
            let Some((lane, tid)) = pick else { return };
            let w = self.overlay.wrapper_mut(job).expect("checked above");
            w.lanes[lane as usize].pop_front();
            w.active.insert(lane, tid);
            self.start_task_compute(tid);
        }
    }

    fn on_task_complete(&mut self, tid: TaskId) -> Result<(), SimError> {
        self.task_complete_events.remove(&tid);
        let host = self.overlay.task(tid).host;
        self.complete_task_compute(tid)?;
        match host {
            Some(HostRef::Pilot(_)) => self.try_dispatch(),
            Some(HostRef::Lane { job, .. }) => {
                self.advance_wrapper_lanes(job);
                self.maybe_end_wrapper_early(job);
            }
            None => {}
        }
        Ok(())
    }

    /// Compute-end bookkeeping shared by the completion event and the
    /// kill-boundary case: release the slot, start the stage-out or
    /// finalize immediately.
    fn complete_task_compute(&mut self, tid: TaskId) -> Result<(), SimError> {
        let now = self.engine.now();
        let (input_gb, output_gb, dataset) = {
            let t = self.overlay.task(tid);
            (t.input_gb, t.output_gb, t.dataset)
        };
        self.overlay.complete_compute(tid, now);
        if input_gb > 0.0 {
            self.data.unpin(dataset);
        }
        self.engine.trace("task-complete", tid, &format!("output_gb={output_gb}"));
        if output_gb > 0.0 {
            self.data.begin_stage_out(&mut self.engine, dataset, output_gb, tid);
        } else {
            self.finalize_task(tid)?;
        }
        Ok(())
    }

    fn maybe_end_wrapper_early(&mut self, job: JobId) {
        let done = self.overlay.wrapper(job).is_some_and(|w| w.outstanding == 0);
        if done {
            if let Some(ev) = self.job_end_events.remove(&job) {
                self.engine.cancel(ev);
            }
            let now = self.engine.now();
            let ev = self.engine.schedule(now, EventKind::JobEnd { job }).expect("now");
            self.job_end_events.insert(job, ev);
        }
    }

    fn on_transfer_complete(&mut self, id: crate::ids::TransferId) -> Result<(), SimError> {
        let done = self.data.complete_transfer(&mut self.engine, id);
        let detail = format!(
            "dataset={} dir={} size_gb={}",
            done.dataset,
            match done.direction {
                Direction::StageIn => "stage_in",
                Direction::StageOut => "stage_out",
            },
            done.size_gb()
        );
        self.engine.trace("transfer-complete", id, &detail);
        match done.direction {
            Direction::StageIn => {
                for tid in done.waiters {
                    self.stage_in_of.remove(&tid);
                    debug_assert_eq!(self.overlay.task(tid).state, TaskState::Staging);
                    self.on_task_input_ready(tid);
                }
            }
            Direction::StageOut => {
                let producer = done.waiters[0];
                self.finalize_task(producer)?;
            }
        }
        Ok(())
    }

    fn finalize_task(&mut self, tid: TaskId) -> Result<(), SimError> {
        self.overlay.finalize(tid).map_err(|e| SimError::Internal(e.to_string()))
    }

    fn preempt_task(&mut self, tid: TaskId) {
        let now = self.engine.now();
        let (state, input_gb, dataset) = {
            let t = self.overlay.task(tid);
            (t.state, t.input_gb, t.dataset)
        };
        match state {
            TaskState::Staging => {
                if let Some(tr) = self.stage_in_of.remove(&tid) {
                    self.data.remove_waiter(tr, tid);
                }
                if input_gb > 0.0 {
                    self.data.unpin(dataset);
                }
            }
            TaskState::Running => {
                if let Some(ev) = self.task_complete_events.remove(&tid) {
                    self.engine.cancel(ev);
                }
                if input_gb > 0.0 {
                    self.data.unpin(dataset);
                }
            }
            other => {
                debug_assert!(false, "preempting task {tid} in state {other:?}");
                return;
            }
        }
        let wasted = self.overlay.preempt(tid, now);
        self.engine.trace("task-preempt", tid, &format!("wasted_ms={}", wasted.as_ms()));
    }

    /// Fills free pilot slots from the pool in priority order.
    fn try_dispatch(&mut self) {
        let now = self.engine.now();
        let live: Vec<PilotId> = self
            .overlay
            .pilots()
            .filter(|p| p.state == PilotState::Live && p.free_cores() > 0)
            .map(|p| p.id)
            .collect();
        let cap = self.data.config().stream_cap_gbps;
        for pid in live {
            loop {
                let pick = {
                    let data = &self.data;
                    self.overlay.match_for_pilot(pid, now, |task| {
                        if task.input_gb <= 0.0 {
                            return Some(SimTime::ZERO);
                        }
                        data.can_stage_in(task.dataset, now).then(|| {
                            SimTime::from_secs_f64(task.input_gb * 8.0 / cap)
                        })
                    })
                };
                let Some(tid) = pick else { break };
                self.overlay.dispatch(tid, HostRef::Pilot(pid), now);
                self.engine
                    .schedule(now, EventKind::TaskDispatch { task: tid, host: HostRef::Pilot(pid) })
                    .expect("now");
            }
        }
    }

    /// Overlay brokering: keep the glidein pool at target size, or pack
    /// wrappers into the currently available backfill windows.
    fn broker_cycle(&mut self) -> Result<(), SimError> {
        if self.cluster.needs_cycle() {
            self.run_cycle();
        }
        let cfg = *self.overlay.config();
        match cfg.mode {
            OverlayMode::Glidein => {
                if cfg.target_pilots == 0 || self.overlay.pending_count() == 0 {
                    return Ok(());
                }
                let alive = self.overlay.live_or_submitted_pilots();
                for _ in alive..cfg.target_pilots {
                    if self.submit_glidein().is_err() {
                        break;
                    }
                }
                Ok(())
            }
            OverlayMode::BackfillBroker => {
                // One plan per cycle: the wrapper job is only submitted once
                // its inputs are staged, so packing more against the same
                // (unchanged) window would overcommit it.
                if self.overlay.pending_count() == 0 {
                    return Ok(());
                }
                let now = self.engine.now();
                let windows = self.cluster.query_backfill_windows(now);
                let Some(window) = windows.into_iter().next() else {
                    return Ok(());
                };
                let candidates = self.wrapper_candidates(&window);
                if candidates.is_empty() {
                    return Ok(());
                }
                let plan = match pack_backfill(
                    &window,
                    &candidates,
                    self.cluster.config().cores_per_node,
                    cfg.wrapper_max_walltime,
                ) {
                    Ok(plan) => plan,
                    Err(_) => return Ok(()),
                };
                self.stage_wrapper(plan);
                Ok(())
            }
        }
    }

    fn wrapper_candidates(&self, window: &crate::cluster::BackfillWindow) -> Vec<(TaskId, SimTime)> {
        let cfg = self.overlay.config();
        let capacity = match window.duration {
            Some(d) => d.min(cfg.wrapper_max_walltime),
            None => cfg.wrapper_max_walltime,
        };
        let lanes = (window.node_count * self.cluster.config().cores_per_node) as usize;
        let now = self.engine.now();
        self.overlay
            .pending_tasks()
            .filter(|t| t.cores == 1)
            .filter(|t| t.est_remaining() <= capacity)
            .filter(|t| t.input_gb <= 0.0 || self.data.can_stage_in(t.dataset, now))
            .map(|t| (t.id, t.est_remaining()))
            .take(lanes.saturating_mul(32))
            .collect()
    }

    /// Binds a packed plan to a reserved job id and starts all stage-ins.
    /// The batch job itself follows in [`Simulation::submit_staged_wrapper`]
    /// once the last input lands.
    fn stage_wrapper(&mut self, plan: WrapperPlan) {
        let now = self.engine.now();
        let id = self.alloc_job_id();
        self.overlay.add_wrapper(id, &plan);
        let mut waiting = std::collections::BTreeSet::new();
        for (lane_idx, lane) in plan.lanes.iter().enumerate() {
            let host = HostRef::Lane { job: id, lane: lane_idx as u32 };
            for tid in lane {
                self.overlay.dispatch(*tid, host, now);
                waiting.insert(*tid);
                self.engine
                    .schedule(now, EventKind::TaskDispatch { task: *tid, host })
                    .expect("now");
            }
        }
        self.staged_wrappers.insert(id, StagedWrapper { plan, waiting });
    }

    fn submit_staged_wrapper(&mut self, id: JobId) {
        let staged = self.staged_wrappers.remove(&id).expect("staged wrapper");
        let now = self.engine.now();
        let plan = staged.plan;
        let job = BatchJob::new(
            id,
            JobKind::Wrapper,
            plan.nodes,
            plan.walltime,
            self.overlay.config().wrapper_priority,
            Placement::Transparent,
            now,
        );
        let detail = format!(
            "kind=wrapper nodes={} walltime_ms={} tasks={}",
            plan.nodes,
            plan.walltime.as_ms(),
            plan.task_count()
        );
        self.engine.trace("job-arrival", id, &detail);
        self.cluster.submit(job, now).expect("wrapper sized to a window");
        self.request_cycle();
    }

    /// Readiness bookkeeping for wrappers still waiting on stage-ins.
    /// Returns true when the task belonged to such a wrapper.
    fn note_staged_input(&mut self, job: JobId, tid: TaskId) -> bool {
        let Some(staged) = self.staged_wrappers.get_mut(&job) else {
            return false;
        };
        staged.waiting.remove(&tid);
        if staged.waiting.is_empty() {
            let alive = self.overlay.wrapper(job).is_some_and(|w| w.outstanding > 0);
            if alive {
                self.submit_staged_wrapper(job);
            } else {
                // every packed task aborted; drop the plan
                self.staged_wrappers.remove(&job);
                self.overlay.end_wrapper(job);
            }
        }
        true
    }

    /// Submits one glidein pilot as a regular batch job; fails when the
    /// credential has lapsed.
    pub fn submit_glidein(&mut self) -> Result<JobId, DataError> {
        let now = self.engine.now();
        if !self.data.credential_valid(now) {
            self.engine.trace("job-arrival", "broker", "glidein_rejected=credential_expired");
            return Err(DataError::CredentialExpired);
        }
        let cfg = *self.overlay.config();
        let id = self.alloc_job_id();
        let job = BatchJob::new(
            id,
            JobKind::Pilot,
            cfg.pilot_nodes,
            cfg.pilot_walltime,
            cfg.pilot_priority,
            Placement::Transparent,
            now,
        );
        let pilot = self.overlay.create_pilot(id);
        self.job_pilot.insert(id, pilot);
        let detail = format!(
            "kind=pilot nodes={} walltime_ms={}",
            cfg.pilot_nodes,
            cfg.pilot_walltime.as_ms()
        );
        self.engine.trace("job-arrival", id, &detail);
        self.cluster.submit(job, now).expect("pilot size validated");
        self.request_cycle();
        Ok(id)
    }

    fn sample_metrics(&mut self) {
        let util = self.cluster.busy_fraction();
        let backlog = self.cluster.queued_node_demand() as f64;
        let free = self.cluster.free_nodes() as f64;
        let pending = self.overlay.pending_count() as f64;
        let running = self.overlay.running_count() as f64;
        let pilots =
            self.overlay.pilots().filter(|p| p.state == PilotState::Live).count() as f64;
        let transfers = self.data.active_transfers() as f64;
        let completed = self.overlay.stats().completed as f64;
        for (name, value) in [
            ("utilization", util),
            ("backlog_nodes", backlog),
            ("free_nodes", free),
            ("pending_tasks", pending),
            ("running_tasks", running),
            ("live_pilots", pilots),
            ("active_transfers", transfers),
            ("tasks_completed", completed),
        ] {
            self.engine.sample(name, value).expect("registered");
        }
        self.engine.trace("metric-sample", "metrics", &format!("utilization={util}"));
    }

    /// Builds the report and summary after the run.
    pub fn output(&mut self) -> Result<RunOutput, SimError> {
        let end = self.duration;
        let usage = self.cluster.core_usage(end);
        let interval_total = self.cluster.core_ms_from_intervals(end);
        if usage.total() != interval_total {
            return Err(SimError::Internal(format!(
                "utilization conservation broken: integral {} != interval sum {}",
                usage.total(),
                interval_total
            )));
        }
        self.overlay.assert_no_zombies(end);

        let capacity_core_ms =
            u128::from(self.cluster.config().total_cores()) * u128::from(end.as_ms());
        let utilization_mean = usage.total() as f64 / capacity_core_ms as f64;
        let stats = self.overlay.stats().clone();
        let data_stats = self.data.stats().clone();

        let mut scalars = BTreeMap::new();
        scalars.insert("utilization_mean".into(), utilization_mean);
        scalars.insert("htc_tasks_completed".into(), stats.completed as f64);
        scalars.insert("preemption_count".into(), stats.preemptions as f64);
        let report = self.engine.report(scalars);

        let warmup = SimTime::from_secs_f64(self.scenario.warmup_s);
        let backlog_min_nodes = report
            .series
            .iter()
            .find(|s| s.name == "backlog_nodes")
            .map(|s| {
                s.samples
                    .iter()
                    .filter(|(t, _)| *t >= warmup)
                    .map(|(_, v)| *v as u64)
                    .min()
                    .unwrap_or(0)
            })
            .unwrap_or(0);

        let mean_task_wait_s = if stats.waited_tasks > 0 {
            stats.wait_ms_total as f64 / stats.waited_tasks as f64 / 1_000.0
        } else {
            0.0
        };
        let summary = RunSummary {
            scenario_name: self.scenario.name.clone(),
            scenario_hash: self.scenario.hash(),
            seed: self.scenario.seed,
            duration_ms: end.as_ms(),
            utilization_mean,
            htc_tasks_generated: stats.tasks_total,
            htc_tasks_completed: stats.completed,
            htc_core_hours: stats.executed_core_ms as f64 / 3.6e6,
            hpc_core_hours: usage.hpc as f64 / 3.6e6,
            mean_task_wait_s,
            preemption_count: stats.preemptions,
            backlog_min_nodes,
            pilots_registered: stats.pilots_registered,
            wrappers_submitted: stats.wrappers_submitted,
            reservation_delays: self.cluster.reservation_delays(),
            credential_pauses: data_stats.pause_events,
            flow_violations: data_stats.flow_violations,
            executed_task_hours: stats.executed_ms_total as f64 / 3.6e6,
            wasted_task_hours: stats.wasted_ms_total as f64 / 3.6e6,
        };
        summary.check(capacity_core_ms as f64 / 3.6e6).map_err(SimError::Internal)?;
        let trace = self
            .engine
            .trace_enabled()
            .then(|| self.engine.trace_contents().to_string());
        Ok(RunOutput { report, summary, trace })
    }
}

/// Natural runtime under walltime overestimation, never above the walltime.
fn natural_runtime(walltime: SimTime, factor: f64) -> SimTime {
    if factor <= 1.0 {
        return walltime;
    }
    SimTime::from_ms(((walltime.as_ms() as f64 / factor).round() as u64).max(1)).min(walltime)
}

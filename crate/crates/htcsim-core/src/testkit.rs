//! Independent oracles and instance generators used by unit tests, the
//! acceptance suite and benches. Deliberately written from first principles
//! with different data layouts than the implementation they check.

use std::collections::BTreeMap;

use rand::Rng;

use crate::cluster::{BatchJob, Cluster, ClusterConfig, JobKind, Placement, TorusDims};
use crate::ids::{JobId, NodeId};
use crate::time::SimTime;

// ---------------------------------------------------------------------------
// EASY backfill oracle (node-count formulation)
// ---------------------------------------------------------------------------

/// A job as the oracle sees it: counts only, milliseconds only.
#[derive(Debug, Clone, Copy)]
pub struct OracleJob {
    pub id: u64,
    pub nodes: u32,
    pub walltime_ms: u64,
    pub priority: i32,
    pub arrival_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScheduleOutcome {
    /// Start time per job id.
    pub starts: BTreeMap<u64, u64>,
    /// Reservation start recorded the first time each job was the blocked head.
    pub first_reservations: BTreeMap<u64, u64>,
}

/// Brute-force EASY timeline: repeatedly advance to the next event time and
/// re-derive the whole schedule step from scratch using the classic
/// shadow-time / extra-nodes rule. Exact walltimes.
pub fn easy_oracle(n_nodes: u32, jobs: &[OracleJob]) -> ScheduleOutcome {
    let mut out = ScheduleOutcome::default();
    let mut running: Vec<(u64, u32, u64)> = Vec::new(); // (end, nodes, id)
    let mut t = jobs.iter().map(|j| j.arrival_ms).min().unwrap_or(0);
    loop {
        running.retain(|(end, _, _)| *end > t);
        schedule_step(n_nodes, jobs, t, &mut running, &mut out);

        let next_end = running.iter().map(|(end, _, _)| *end).min();
        let next_arrival = jobs
            .iter()
            .filter(|j| j.arrival_ms > t && !out.starts.contains_key(&j.id))
            .map(|j| j.arrival_ms)
            .min();
        match (next_end, next_arrival) {
            (None, None) => break,
            (a, b) => t = a.into_iter().chain(b).min().unwrap(),
        }
    }
    out
}

fn schedule_step(
    n_nodes: u32,
    jobs: &[OracleJob],
    t: u64,
    running: &mut Vec<(u64, u32, u64)>,
    out: &mut ScheduleOutcome,
) {
    loop {
        let mut queued: Vec<&OracleJob> = jobs
            .iter()
            .filter(|j| j.arrival_ms <= t && !out.starts.contains_key(&j.id))
            .collect();
        queued.sort_by_key(|j| (std::cmp::Reverse(j.priority), j.arrival_ms, j.id));
        let Some(head) = queued.first().copied() else {
            return;
        };
        let mut free = n_nodes - running.iter().map(|(_, n, _)| *n).sum::<u32>();
        if head.nodes <= free {
            out.starts.insert(head.id, t);
            running.push((t + head.walltime_ms, head.nodes, head.id));
            continue; // a new head may now fit as well
        }

        // Shadow time: when enough nodes have been released for the head.
        let mut ends: Vec<(u64, u32)> = running.iter().map(|(e, n, _)| (*e, *n)).collect();
        ends.sort_unstable();
        let mut avail = free;
        let mut shadow = u64::MAX;
        for (end, nodes) in &ends {
            avail += nodes;
            if avail >= head.nodes {
                shadow = *end;
                break;
            }
        }
        assert!(shadow != u64::MAX, "head must eventually fit");
        let mut extra = avail - head.nodes;
        out.first_reservations.entry(head.id).or_insert(shadow);

        // Single backfill pass in queue order.
        for j in &queued[1..] {
            if j.nodes > free {
                continue;
            }
            let ends_in_time = t + j.walltime_ms <= shadow;
            if ends_in_time || j.nodes <= extra {
                out.starts.insert(j.id, t);
                running.push((t + j.walltime_ms, j.nodes, j.id));
                free -= j.nodes;
                if !ends_in_time {
                    extra -= j.nodes;
                }
            }
        }
        return;
    }
}

/// Drives the real [`Cluster`] over the same instance with exact walltimes,
/// cycling at every job end, and collects the comparable outcome.
pub fn run_cluster_easy(n_nodes: u32, jobs: &[OracleJob]) -> (ScheduleOutcome, Cluster) {
    let cfg = ClusterConfig {
        nodes: n_nodes,
        cores_per_node: 1,
        memory_gb: 64.0,
        torus: TorusDims::for_nodes(n_nodes),
        placement: Placement::Transparent,
        compactness_limit: 2.0,
        scheduler_period: SimTime::from_secs(60),
        overestimate_factor: 1.0,
    };
    let mut cluster = Cluster::new(cfg);
    let mut pending: Vec<&OracleJob> = jobs.iter().collect();
    pending.sort_by_key(|j| (j.arrival_ms, j.id));
    let mut t = SimTime::ZERO;
    let mut guard = 0usize;
    loop {
        let arrived: Vec<&OracleJob> =
            pending.iter().filter(|j| j.arrival_ms <= t.as_ms()).copied().collect();
        pending.retain(|j| j.arrival_ms > t.as_ms());
        for j in arrived {
            let job = BatchJob::new(
                JobId(j.id),
                JobKind::Hpc,
                j.nodes,
                SimTime::from_ms(j.walltime_ms),
                j.priority,
                Placement::Transparent,
                SimTime::from_ms(j.arrival_ms),
            );
            cluster.submit(job, t).expect("instance jobs fit the cluster");
        }
        cluster.schedule_cycle(t);

        let next_end = cluster
            .jobs()
            .filter(|j| j.state == crate::cluster::JobState::Running)
            .map(|j| j.estimated_end().unwrap())
            .min();
        let next_arrival = pending.iter().map(|j| SimTime::from_ms(j.arrival_ms)).min();
        let next = match (next_end, next_arrival) {
            (None, None) => break,
            (a, b) => a.into_iter().chain(b).min().unwrap(),
        };
        let ending: Vec<JobId> = cluster
            .jobs()
            .filter(|j| {
                j.state == crate::cluster::JobState::Running
                    && j.estimated_end().unwrap() <= next
            })
            .map(|j| j.id)
            .collect();
        t = next;
        for id in ending {
            cluster.end_job(id, t);
        }
        guard += 1;
        assert!(guard < 100_000, "instance did not drain");
    }
    let mut out = ScheduleOutcome::default();
    for job in cluster.jobs() {
        if let Some(s) = job.start {
            out.starts.insert(job.id.0, s.as_ms());
        }
        if let Some(r) = job.first_head_reservation {
            out.first_reservations.insert(job.id.0, r.as_ms());
        }
    }
    (out, cluster)
}

/// Random instance for the EASY soundness checks: everything arrives at
/// time zero with random priorities, so headship is never re-ordered.
pub fn random_easy_instance(rng: &mut impl Rng, max_nodes: u32, max_jobs: u32) -> (u32, Vec<OracleJob>) {
    let n_nodes = rng.random_range(2..=max_nodes);
    let n_jobs = rng.random_range(2..=max_jobs);
    let jobs = (0..n_jobs)
        .map(|i| OracleJob {
            id: u64::from(i),
            nodes: rng.random_range(1..=n_nodes),
            walltime_ms: u64::from(rng.random_range(1..=12u32)) * 3_600_000,
            priority: rng.random_range(0..3),
            arrival_ms: 0,
        })
        .collect();
    (n_nodes, jobs)
}

// ---------------------------------------------------------------------------
// Packing oracle (exhaustive over subsets and lane assignments)
// ---------------------------------------------------------------------------

/// Most tasks packable into `max_lanes` lanes of `capacity_ms`, by trying
/// subsets from largest to smallest. Intended for instances of <= 6 tasks.
pub fn optimal_pack_count(ests_ms: &[u64], capacity_ms: u64, max_lanes: usize) -> usize {
    let n = ests_ms.len();
    assert!(n <= 16, "exhaustive oracle is exponential");
    for size in (1..=n).rev() {
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != size {
                continue;
            }
            let subset: Vec<u64> =
                (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ests_ms[i]).collect();
            if lanes_feasible(&subset, capacity_ms, max_lanes) {
                return size;
            }
        }
    }
    0
}

/// Can `items` be partitioned into at most `max_lanes` lanes of `capacity`?
pub fn lanes_feasible(items: &[u64], capacity: u64, max_lanes: usize) -> bool {
    let mut sorted = items.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    if sorted.iter().any(|&x| x > capacity) {
        return false;
    }
    fn place(items: &[u64], i: usize, lanes: &mut Vec<u64>, cap: u64, max: usize) -> bool {
        if i == items.len() {
            return true;
        }
        let it = items[i];
        let mut tried = std::collections::BTreeSet::new();
        for l in 0..lanes.len() {
            if lanes[l] + it <= cap && tried.insert(lanes[l]) {
                lanes[l] += it;
                if place(items, i + 1, lanes, cap, max) {
                    return true;
                }
                lanes[l] -= it;
            }
        }
        if lanes.len() < max {
            lanes.push(it);
            if place(items, i + 1, lanes, cap, max) {
                return true;
            }
            lanes.pop();
        }
        false
    }
    place(&sorted, 0, &mut Vec::new(), capacity, max_lanes)
}

/// Random window-plus-tasks instance for packing parity checks.
pub fn random_packing_instance(
    rng: &mut impl Rng,
    max_tasks: usize,
) -> (crate::cluster::BackfillWindow, Vec<(crate::ids::TaskId, SimTime)>, u32) {
    let node_count = rng.random_range(1..=3u32);
    let cores_per_node = rng.random_range(1..=4u32);
    let duration = if rng.random_bool(0.85) {
        Some(SimTime::from_ms(rng.random_range(1..=12u64) * 3_600_000))
    } else {
        None
    };
    let n = rng.random_range(1..=max_tasks);
    let tasks = (0..n)
        .map(|i| {
            let est = SimTime::from_ms(rng.random_range(1..=13 * 60u64) * 60_000);
            (crate::ids::TaskId(i as u64), est)
        })
        .collect();
    (
        crate::cluster::BackfillWindow { node_count, start: SimTime::ZERO, duration },
        tasks,
        cores_per_node,
    )
}

// ---------------------------------------------------------------------------
// Placement oracle (exhaustive subset search)
// ---------------------------------------------------------------------------

/// Minimal covering arc of `coords` on a ring of `dim` cells, by trying
/// every arc start position.
fn oracle_arc(coords: &[u32], dim: u32) -> u32 {
    (0..dim)
        .map(|s| coords.iter().map(|c| (c + dim - s) % dim + 1).max().unwrap())
        .min()
        .unwrap()
}

fn oracle_volume(dims: TorusDims, nodes: &[NodeId]) -> u32 {
    let xs: Vec<u32> = nodes.iter().map(|n| dims.coord_of(*n).0).collect();
    let ys: Vec<u32> = nodes.iter().map(|n| dims.coord_of(*n).1).collect();
    let zs: Vec<u32> = nodes.iter().map(|n| dims.coord_of(*n).2).collect();
    oracle_arc(&xs, dims.x) * oracle_arc(&ys, dims.y) * oracle_arc(&zs, dims.z)
}

/// Exhaustive minimum over all `count`-subsets of `free`: returns the
/// minimal bounding volume and the lexicographically smallest subset
/// achieving it.
pub fn min_volume_subset(
    dims: TorusDims,
    free: &[NodeId],
    count: usize,
) -> Option<(u32, Vec<NodeId>)> {
    if free.len() < count || count == 0 {
        return None;
    }
    let mut best: Option<(u32, Vec<NodeId>)> = None;
    let mut subset: Vec<usize> = (0..count).collect();
    loop {
        let nodes: Vec<NodeId> = subset.iter().map(|i| free[*i]).collect();
        let vol = oracle_volume(dims, &nodes);
        let better = match &best {
            None => true,
            Some((bv, bn)) => (vol, &nodes) < (*bv, bn),
        };
        if better {
            best = Some((vol, nodes));
        }
        // next combination
        let mut i = count;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if subset[i] != i + free.len() - count {
                subset[i] += 1;
                for j in i + 1..count {
                    subset[j] = subset[j - 1] + 1;
                }
                break;
            }
        }
    }
}

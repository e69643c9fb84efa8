//! EASY backfill: one reservation for the head of the queue, and backfill
//! of later jobs only where it cannot delay that reservation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Cluster, PlaceOutcome, Placement};
use crate::ids::{JobId, NodeId};
use crate::time::SimTime;

/// The head job's planned start: the earliest time enough nodes free
/// themselves (under scheduler-visible walltimes) to admit a placement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reservation {
    pub job_id: JobId,
    pub start: SimTime,
    pub nodes: BTreeSet<NodeId>,
}

/// A hole in the schedule: `node_count` nodes usable from `start` for
/// `duration` (`None` when no reservation bounds it) without delaying the
/// head job's reserved start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackfillWindow {
    pub node_count: u32,
    pub start: SimTime,
    pub duration: Option<SimTime>,
}

impl BackfillWindow {
    /// Whether a job of `nodes` nodes and `walltime` run length fits.
    pub fn admits(&self, nodes: u32, walltime: SimTime) -> bool {
        nodes <= self.node_count && self.duration.is_none_or(|d| walltime <= d)
    }
}

impl Cluster {
    /// One scheduler pass: start queued jobs in priority order while they
    /// place, reserve for the first blocked head, then backfill.
    ///
    /// Returns the ids of jobs started in this cycle, in start order.
    pub fn schedule_cycle(&mut self, now: SimTime) -> Vec<JobId> {
        self.dirty = false;
        let mut started = Vec::new();

        // Phase 1: start from the head while placements succeed.
        let head_id = loop {
            let Some(&(_, _, id)) = self.queue.iter().next() else {
                self.reservation = None;
                return started;
            };
            match self.try_place(&self.jobs[&id], &self.free) {
                PlaceOutcome::Placed(nodes) => {
                    self.start_job(id, nodes, now);
                    started.push(id);
                }
                _ => break id,
            }
        };

        // Phase 2: reservation for the blocked head.
        let reservation = self.compute_reservation(head_id, now);
        if let Some(res) = &reservation {
            let job = self.jobs.get_mut(&head_id).expect("head exists");
            match job.first_head_reservation {
                None => job.first_head_reservation = Some(res.start),
                // While the same job stays head, its reservation never regresses.
                Some(first) => debug_assert!(res.start <= first),
            }
        }
        self.reservation = reservation;

        // Phase 3: backfill the rest of the queue in order.
        let reserved: BTreeSet<NodeId> =
            self.reservation.as_ref().map(|r| r.nodes.clone()).unwrap_or_default();
        let reservation_start = self.reservation.as_ref().map(|r| r.start);
        let rest: Vec<JobId> = self.queue.iter().skip(1).map(|&(_, _, id)| id).collect();
        // Placement failures seen this pass, keyed by (nodes, policy, avoided
        // reservation). The free set only shrinks, so failures stay valid.
        let mut failed: BTreeSet<(u32, Placement, bool)> = BTreeSet::new();
        for id in rest {
            let job = &self.jobs[&id];
            let req = job.nodes_requested;
            if (self.free.len() as u32) < req {
                continue;
            }
            let fits_before_reservation =
                reservation_start.is_none_or(|s| now + job.walltime_req <= s);
            let memo_key = (req, job.placement, !fits_before_reservation);
            if failed.contains(&memo_key) {
                continue;
            }
            let outcome = if fits_before_reservation {
                self.try_place(job, &self.free)
            } else {
                // Must leave every reserved node untouched.
                let avoid: BTreeSet<NodeId> = self.free.difference(&reserved).copied().collect();
                self.try_place(job, &avoid)
            };
            match outcome {
                PlaceOutcome::Placed(nodes) => {
                    self.start_job(id, nodes, now);
                    started.push(id);
                }
                _ => {
                    failed.insert(memo_key);
                }
            }
        }
        started
    }

    /// Earliest time the head job can be placed on nodes freed by running
    /// jobs ending at their walltime estimates.
    ///
    /// Transparent reservations prefer nodes that become free in the future
    /// over nodes free right now, leaving the current free set maximally
    /// available for backfill (this matches the node-count EASY rule).
    fn compute_reservation(&self, head_id: JobId, now: SimTime) -> Option<Reservation> {
        let head = &self.jobs[&head_id];
        let req = head.nodes_requested as usize;
        let mut ends: Vec<(SimTime, JobId)> = self
            .running
            .iter()
            .map(|id| {
                let job = &self.jobs[id];
                (job.estimated_end().expect("running job has a start"), *id)
            })
            .collect();
        ends.sort_unstable();

        let mut future_free = self.free.clone();
        let mut freed_later: BTreeSet<NodeId> = BTreeSet::new();
        let mut i = 0;
        while i < ends.len() {
            let t = ends[i].0.max(now);
            // absorb every job ending at the same instant before retrying
            while i < ends.len() && ends[i].0 <= t {
                let nodes = &self.jobs[&ends[i].1].assigned_nodes;
                future_free.extend(nodes.iter().copied());
                freed_later.extend(nodes.iter().copied());
                i += 1;
            }
            if future_free.len() < req {
                continue;
            }
            match head.placement {
                Placement::Transparent => {
                    let mut nodes: BTreeSet<NodeId> =
                        freed_later.iter().copied().take(req).collect();
                    nodes.extend(self.free.iter().copied().take(req - nodes.len()));
                    debug_assert_eq!(nodes.len(), req);
                    return Some(Reservation { job_id: head_id, start: t, nodes });
                }
                Placement::TopologyAware => {
                    if let PlaceOutcome::Placed(nodes) = self.try_place(head, &future_free) {
                        return Some(Reservation {
                            job_id: head_id,
                            start: t,
                            nodes: nodes.into_iter().collect(),
                        });
                    }
                }
            }
        }
        None
    }

    /// Maximal backfill windows at the current instant, largest first.
    ///
    /// With a reservation at `s` there are at most two: all free nodes until
    /// `s`, and the free nodes outside the reserved set indefinitely.
    pub fn query_backfill_windows(&self, now: SimTime) -> Vec<BackfillWindow> {
        let free_count = self.free.len() as u32;
        if free_count == 0 {
            return Vec::new();
        }
        let Some(res) = &self.reservation else {
            return vec![BackfillWindow { node_count: free_count, start: now, duration: None }];
        };
        let outside = self.free.difference(&res.nodes).count() as u32;
        if outside == free_count {
            // reservation claims no currently-free node
            return vec![BackfillWindow { node_count: free_count, start: now, duration: None }];
        }
        let mut windows = Vec::new();
        if res.start > now {
            windows.push(BackfillWindow {
                node_count: free_count,
                start: now,
                duration: Some(res.start - now),
            });
        }
        if outside > 0 {
            windows.push(BackfillWindow { node_count: outside, start: now, duration: None });
        }
        windows
    }

    /// The window soundness probe used by tests: submit a synthetic job that
    /// fits a returned window, run one cycle, and check that it starts now
    /// and that the head job's reservation start is unchanged afterwards.
    pub fn reservation_unchanged_after(&self, nodes: u32, walltime: SimTime, now: SimTime) -> bool {
        let Some(res) = self.reservation.clone() else {
            return true;
        };
        let mut probe = self.clone();
        let probe_id = JobId(u64::MAX);
        let job = super::BatchJob::new(
            probe_id,
            super::JobKind::Wrapper,
            nodes,
            walltime,
            i32::MIN,
            Placement::Transparent,
            now,
        );
        if probe.submit(job, now).is_err() {
            return false;
        }
        let started = probe.schedule_cycle(now);
        if !started.contains(&probe_id) {
            return false; // the window overstated available capacity
        }
        match probe.compute_reservation(res.job_id, now) {
            Some(new_res) => new_res.start == res.start,
            None => false,
        }
    }
}

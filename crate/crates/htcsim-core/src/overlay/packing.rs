//! Packing task payloads into a backfill window over per-core lanes.
//!
//! Small candidate sets are packed count-optimally by exhaustive subset
//! search (an exact packer is the only way to dominate every single-order
//! first-fit baseline); larger sets fall back to first-fit-decreasing on
//! estimated runtime.

use thiserror::Error;

use crate::cluster::BackfillWindow;
use crate::ids::TaskId;
use crate::time::SimTime;

/// Candidate-set size up to which packing is exact.
const EXACT_PACK_LIMIT: usize = 12;

/// A wrapper job blueprint: per-core-lane ordered task lists sized to fit a
/// backfill window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrapperPlan {
    pub window: BackfillWindow,
    pub lanes: Vec<Vec<TaskId>>,
    pub nodes: u32,
    pub walltime: SimTime,
}

impl WrapperPlan {
    pub fn task_count(&self) -> usize {
        self.lanes.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no candidate task fits the window duration")]
pub struct EmptyPlan;

/// First-fit over lanes in a fixed candidate order. Tasks that fit no lane
/// are skipped. Shared by the production packer (which presorts) and by
/// reshuffle-based test baselines.
pub fn first_fit(
    ordered: &[(TaskId, SimTime)],
    capacity: SimTime,
    max_lanes: usize,
) -> Vec<Vec<(TaskId, SimTime)>> {
    let mut lanes: Vec<(SimTime, Vec<(TaskId, SimTime)>)> = Vec::new();
    for &(id, est) in ordered {
        if est > capacity {
            continue;
        }
        match lanes.iter().position(|(used, _)| *used + est <= capacity) {
            Some(i) => {
                lanes[i].0 += est;
                lanes[i].1.push((id, est));
            }
            None if lanes.len() < max_lanes => {
                lanes.push((est, vec![(id, est)]));
            }
            None => {}
        }
    }
    lanes.into_iter().map(|(_, lane)| lane).collect()
}

/// Builds a feasible plan for `window` from `candidates` (pool order):
/// wrapper walltime = the longest lane, node count = the fewest nodes
/// covering the lanes.
pub fn pack_backfill(
    window: &BackfillWindow,
    candidates: &[(TaskId, SimTime)],
    cores_per_node: u32,
    max_walltime: SimTime,
) -> Result<WrapperPlan, EmptyPlan> {
    let capacity = match window.duration {
        Some(d) => d.min(max_walltime),
        None => max_walltime,
    };
    let max_lanes = (window.node_count as usize) * (cores_per_node as usize);
    let lanes = if candidates.len() <= EXACT_PACK_LIMIT {
        pack_exact(candidates, capacity, max_lanes)
    } else {
        let mut by_est: Vec<(TaskId, SimTime)> = candidates.to_vec();
        // stable: equal estimates keep pool priority order
        by_est.sort_by(|a, b| b.1.cmp(&a.1));
        first_fit(&by_est, capacity, max_lanes)
    };
    if lanes.is_empty() {
        return Err(EmptyPlan);
    }
    let walltime = lanes
        .iter()
        .map(|lane| lane.iter().map(|(_, est)| *est).fold(SimTime::ZERO, |a, b| a + b))
        .max()
        .unwrap();
    let nodes = (lanes.len() as u32).div_ceil(cores_per_node);
    Ok(WrapperPlan {
        window: window.clone(),
        lanes: lanes.into_iter().map(|lane| lane.into_iter().map(|(id, _)| id).collect()).collect(),
        nodes,
        walltime,
    })
}

/// Count-optimal packing by subset search: the largest candidate subset
/// with a feasible lane assignment wins, earliest candidates preferred
/// among equally-sized subsets.
fn pack_exact(
    candidates: &[(TaskId, SimTime)],
    capacity: SimTime,
    max_lanes: usize,
) -> Vec<Vec<(TaskId, SimTime)>> {
    let n = candidates.len();
    debug_assert!(n <= EXACT_PACK_LIMIT);
    for count in (1..=n).rev() {
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != count {
                continue;
            }
            let subset: Vec<(TaskId, SimTime)> = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| candidates[i])
                .collect();
            if let Some(lanes) = assign_lanes(&subset, capacity, max_lanes) {
                return lanes;
            }
        }
    }
    Vec::new()
}

/// Backtracking lane assignment: items largest-first into the first lane
/// with room, trying alternatives on failure.
fn assign_lanes(
    items: &[(TaskId, SimTime)],
    capacity: SimTime,
    max_lanes: usize,
) -> Option<Vec<Vec<(TaskId, SimTime)>>> {
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| b.1.cmp(&a.1));
    if sorted.iter().any(|(_, est)| *est > capacity) {
        return None;
    }
    let mut lanes: Vec<(SimTime, Vec<(TaskId, SimTime)>)> = Vec::new();
    fn place(
        items: &[(TaskId, SimTime)],
        i: usize,
        lanes: &mut Vec<(SimTime, Vec<(TaskId, SimTime)>)>,
        capacity: SimTime,
        max_lanes: usize,
    ) -> bool {
        let Some(&(id, est)) = items.get(i) else {
            return true;
        };
        let mut tried = std::collections::BTreeSet::new();
        for l in 0..lanes.len() {
            let used = lanes[l].0;
            if used + est <= capacity && tried.insert(used) {
                lanes[l].0 += est;
                lanes[l].1.push((id, est));
                if place(items, i + 1, lanes, capacity, max_lanes) {
                    return true;
                }
                lanes[l].0 = used;
                lanes[l].1.pop();
            }
        }
        if lanes.len() < max_lanes {
            lanes.push((est, vec![(id, est)]));
            if place(items, i + 1, lanes, capacity, max_lanes) {
                return true;
            }
            lanes.pop();
        }
        false
    }
    if place(&sorted, 0, &mut lanes, capacity, max_lanes) {
        Some(lanes.into_iter().map(|(_, lane)| lane).collect())
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn win(nodes: u32, duration_h: Option<f64>) -> BackfillWindow {
        BackfillWindow {
            node_count: nodes,
            start: SimTime::ZERO,
            duration: duration_h.map(SimTime::from_hours_f64),
        }
    }

    fn tasks(ests_h: &[f64]) -> Vec<(TaskId, SimTime)> {
        ests_h
            .iter()
            .enumerate()
            .map(|(i, h)| (TaskId(i as u64), SimTime::from_hours_f64(*h)))
            .collect()
    }

    #[test]
    fn ffd_packs_the_reference_window() {
        // 2 nodes x 4 cores, 10 h window; estimates [6,6,6,4,4] h:
        // lanes [6,4], [6,4], [6]; wrapper walltime 10 h.
        let plan = pack_backfill(
            &win(2, Some(10.0)),
            &tasks(&[6.0, 6.0, 6.0, 4.0, 4.0]),
            4,
            SimTime::from_hours_f64(12.0),
        )
        .unwrap();
        assert_eq!(plan.task_count(), 5);
        assert_eq!(plan.walltime, SimTime::from_hours_f64(10.0));
        assert_eq!(
            plan.lanes,
            vec![
                vec![TaskId(0), TaskId(3)],
                vec![TaskId(1), TaskId(4)],
                vec![TaskId(2)],
            ]
        );
        assert_eq!(plan.nodes, 1, "three lanes fit on one 4-core node");
    }

    #[test]
    fn nothing_fits_is_an_empty_plan() {
        let err = pack_backfill(
            &win(2, Some(1.0)),
            &tasks(&[2.0, 3.0]),
            4,
            SimTime::from_hours_f64(12.0),
        )
        .unwrap_err();
        assert_eq!(err, EmptyPlan);
    }

    #[test]
    fn exact_fit_single_lane() {
        let plan = pack_backfill(
            &win(1, Some(12.0)),
            &tasks(&[12.0]),
            1,
            SimTime::from_hours_f64(12.0),
        )
        .unwrap();
        assert_eq!(plan.lanes, vec![vec![TaskId(0)]]);
        assert_eq!(plan.walltime, SimTime::from_hours_f64(12.0));
        assert_eq!(plan.nodes, 1);
    }

    #[test]
    fn unbounded_window_capped_by_max_walltime() {
        let plan = pack_backfill(
            &win(1, None),
            &tasks(&[8.0, 8.0, 8.0]),
            1,
            SimTime::from_hours_f64(12.0),
        )
        .unwrap();
        // only one lane available and at most 12 h of it
        assert_eq!(plan.task_count(), 1);
        assert_eq!(plan.walltime, SimTime::from_hours_f64(8.0));
    }

    #[test]
    fn lane_sums_respect_window_duration() {
        let plan = pack_backfill(
            &win(2, Some(7.5)),
            &tasks(&[6.0, 4.0, 3.0, 2.0, 1.5, 1.0]),
            2,
            SimTime::from_hours_f64(12.0),
        )
        .unwrap();
        for lane in &plan.lanes {
            let sum: SimTime = lane
                .iter()
                .map(|id| SimTime::from_hours_f64([6.0, 4.0, 3.0, 2.0, 1.5, 1.0][id.0 as usize]))
                .fold(SimTime::ZERO, |a, b| a + b);
            assert!(sum <= SimTime::from_hours_f64(7.5));
        }
        assert!(plan.lanes.len() <= 4);
    }
}

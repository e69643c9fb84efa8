use super::*;

fn hours(h: f64) -> SimTime {
    SimTime::from_hours_f64(h)
}

fn simple_task(id: u64, est_h: f64, actual_h: f64) -> Task {
    Task::new(
        TaskId(id),
        1,
        1.5,
        hours(est_h),
        hours(actual_h),
        0.4,
        0.1,
        DatasetId(id),
        0,
        SimTime::ZERO,
    )
}

fn live_pilot(overlay: &mut Overlay, cores: u32, expires_h: f64) -> PilotId {
    let pid = overlay.create_pilot(JobId(100));
    let nodes: BTreeSet<NodeId> = (0..cores).map(NodeId).collect();
    overlay.pilot_job_started(pid, &nodes, 1, SimTime::ZERO, hours(expires_h));
    overlay.register_pilot(pid, SimTime::ZERO);
    pid
}

mod validate {
    use super::*;

    #[test]
    fn memory_over_two_gb() {
        let policy = OsgPolicy::default();
        let mut t = simple_task(0, 6.0, 6.0);
        t.memory_gb = 2.5;
        assert_eq!(policy.validate(&t), vec![Violation::MemLimit]);
    }

    #[test]
    fn runtime_over_twelve_hours() {
        let policy = OsgPolicy::default();
        let t = simple_task(0, 13.0, 13.0);
        assert_eq!(policy.validate(&t), vec![Violation::WalltimeLimit]);
    }

    #[test]
    fn combined_io_over_ten_gb() {
        let policy = OsgPolicy::default();
        let mut t = simple_task(0, 6.0, 6.0);
        t.input_gb = 6.0;
        t.output_gb = 6.0;
        assert_eq!(policy.validate(&t), vec![Violation::IoLimit]);
    }

    #[test]
    fn compliant_task_accepted() {
        let policy = OsgPolicy::default();
        let mut t = simple_task(0, 6.0, 6.0);
        t.memory_gb = 1.5;
        t.input_gb = 0.4;
        t.output_gb = 0.0;
        assert!(policy.validate(&t).is_empty());
    }

    #[test]
    fn multi_core_task_flagged() {
        let policy = OsgPolicy::default();
        let mut t = simple_task(0, 6.0, 6.0);
        t.cores = 4;
        assert_eq!(policy.validate(&t), vec![Violation::CoresLimit]);
    }
}

mod matching {
    use super::*;

    #[test]
    fn task_fitting_lifetime_matches() {
        let mut ov = Overlay::new(OverlayConfig::default());
        let pid = live_pilot(&mut ov, 4, 3.0);
        ov.add_task(simple_task(0, 2.0, 2.0));
        let got = ov.match_for_pilot(pid, SimTime::ZERO, |_| Some(hours(0.1)));
        assert_eq!(got, Some(TaskId(0)));
    }

    #[test]
    fn task_exceeding_lifetime_skipped() {
        let mut ov = Overlay::new(OverlayConfig::default());
        let pid = live_pilot(&mut ov, 4, 3.0);
        ov.add_task(simple_task(0, 3.5, 3.5));
        let got = ov.match_for_pilot(pid, SimTime::ZERO, |_| Some(hours(0.1)));
        assert_eq!(got, None);
    }

    #[test]
    fn equal_priority_breaks_by_arrival() {
        let mut ov = Overlay::new(OverlayConfig::default());
        let pid = live_pilot(&mut ov, 4, 12.0);
        let mut early = simple_task(7, 2.0, 2.0);
        early.arrival = SimTime::from_secs(1);
        let mut late = simple_task(3, 2.0, 2.0);
        late.arrival = SimTime::from_secs(2);
        ov.add_task(late);
        ov.add_task(early);
        let got = ov.match_for_pilot(pid, SimTime::from_secs(10), |_| Some(hours(0.1)));
        assert_eq!(got, Some(TaskId(7)), "earlier arrival wins the tie");
    }

    #[test]
    fn unstageable_task_skipped() {
        let mut ov = Overlay::new(OverlayConfig::default());
        let pid = live_pilot(&mut ov, 4, 12.0);
        ov.add_task(simple_task(0, 2.0, 2.0));
        let got = ov.match_for_pilot(pid, SimTime::ZERO, |_| None);
        assert_eq!(got, None);
    }

    #[test]
    fn busy_pilot_rejects_wide_tasks() {
        let mut ov = Overlay::new(OverlayConfig::default());
        let pid = live_pilot(&mut ov, 1, 12.0);
        ov.add_task(simple_task(0, 1.0, 1.0));
        ov.dispatch(TaskId(0), HostRef::Pilot(pid), SimTime::ZERO);
        ov.add_task(simple_task(1, 1.0, 1.0));
        let got = ov.match_for_pilot(pid, SimTime::ZERO, |_| Some(SimTime::ZERO));
        assert_eq!(got, None, "no free cores left");
    }
}

mod preemption {
    use super::*;

    #[test]
    fn progress_floors_to_checkpoint() {
        // 10 h task killed after 7 h with 2 h checkpoints: 6 h kept, 4 h left
        let cfg =
            OverlayConfig { checkpoint_interval: hours(2.0), ..OverlayConfig::default() };
        let mut ov = Overlay::new(cfg);
        let pid = live_pilot(&mut ov, 4, 12.0);
        ov.add_task(simple_task(0, 10.0, 10.0));
        ov.dispatch(TaskId(0), HostRef::Pilot(pid), SimTime::ZERO);
        ov.start_compute(TaskId(0), SimTime::ZERO);
        ov.expire_pilot(pid);
        let wasted = ov.preempt(TaskId(0), hours(7.0));
        assert_eq!(wasted, hours(1.0));
        let t = ov.task(TaskId(0));
        assert_eq!(t.completed_work, hours(6.0));
        assert_eq!(t.remaining_runtime(), hours(4.0));
        assert_eq!(t.state, TaskState::Pending, "preempted task re-queues");
        assert_eq!(t.attempts, 1);
    }

    #[test]
    fn killed_during_stage_in_keeps_nothing_and_requeues() {
        let mut ov = Overlay::new(OverlayConfig::default());
        let pid = live_pilot(&mut ov, 4, 12.0);
        ov.add_task(simple_task(0, 2.0, 2.0));
        ov.dispatch(TaskId(0), HostRef::Pilot(pid), SimTime::ZERO);
        ov.expire_pilot(pid);
        let wasted = ov.preempt(TaskId(0), hours(1.0));
        assert_eq!(wasted, SimTime::ZERO);
        let t = ov.task(TaskId(0));
        assert_eq!(t.completed_work, SimTime::ZERO);
        assert_eq!(t.state, TaskState::Pending);
    }

    #[test]
    fn continuous_checkpointing_keeps_everything() {
        // checkpoint_interval 0: 7 h of a 10 h task leaves exactly 3 h
        let cfg = OverlayConfig { checkpoint_interval: SimTime::ZERO, ..OverlayConfig::default() };
        let mut ov = Overlay::new(cfg);
        let pid = live_pilot(&mut ov, 4, 12.0);
        ov.add_task(simple_task(0, 10.0, 10.0));
        ov.dispatch(TaskId(0), HostRef::Pilot(pid), SimTime::ZERO);
        ov.start_compute(TaskId(0), SimTime::ZERO);
        ov.expire_pilot(pid);
        let wasted = ov.preempt(TaskId(0), hours(7.0));
        assert_eq!(wasted, SimTime::ZERO);
        assert_eq!(ov.task(TaskId(0)).remaining_runtime(), hours(3.0));
    }

    #[test]
    fn expire_pilot_hands_back_its_tasks() {
        let mut ov = Overlay::new(OverlayConfig::default());
        let pid = live_pilot(&mut ov, 4, 12.0);
        ov.add_task(simple_task(0, 1.0, 1.0));
        ov.add_task(simple_task(1, 1.0, 1.0));
        ov.dispatch(TaskId(0), HostRef::Pilot(pid), SimTime::ZERO);
        ov.dispatch(TaskId(1), HostRef::Pilot(pid), SimTime::ZERO);
        ov.start_compute(TaskId(0), SimTime::ZERO);
        let handed = ov.expire_pilot(pid);
        assert_eq!(handed, vec![TaskId(0), TaskId(1)]);
        assert_eq!(ov.pilot(pid).state, PilotState::Expired);
    }
}

mod completion {
    use super::*;

    #[test]
    fn compute_end_releases_slot_then_finalizes_once() {
        let mut ov = Overlay::new(OverlayConfig::default());
        let pid = live_pilot(&mut ov, 1, 12.0);
        ov.add_task(simple_task(0, 2.0, 2.0));
        ov.dispatch(TaskId(0), HostRef::Pilot(pid), SimTime::ZERO);
        ov.start_compute(TaskId(0), SimTime::ZERO);
        ov.complete_compute(TaskId(0), hours(2.0));
        assert_eq!(ov.pilot(pid).busy_cores, 0, "slot freed at compute end");
        assert_eq!(ov.task(TaskId(0)).state, TaskState::StagingOut);
        ov.finalize(TaskId(0)).unwrap();
        assert_eq!(ov.task(TaskId(0)).state, TaskState::Completed);
        // replaying the completion must trip the exactly-once guard
        assert_eq!(ov.finalize(TaskId(0)), Err(DuplicateCompletion(TaskId(0))));
        assert_eq!(ov.stats().completed, 1);
    }

    #[test]
    fn executed_time_accumulates_across_attempts() {
        let cfg = OverlayConfig { checkpoint_interval: SimTime::ZERO, ..OverlayConfig::default() };
        let mut ov = Overlay::new(cfg);
        let pid = live_pilot(&mut ov, 1, 5.0);
        ov.add_task(simple_task(0, 4.0, 4.0));
        ov.dispatch(TaskId(0), HostRef::Pilot(pid), SimTime::ZERO);
        ov.start_compute(TaskId(0), SimTime::ZERO);
        ov.expire_pilot(pid);
        ov.preempt(TaskId(0), hours(3.0));

        let pid2 = live_pilot(&mut ov, 1, 12.0);
        ov.dispatch(TaskId(0), HostRef::Pilot(pid2), hours(3.0));
        assert_eq!(ov.task(TaskId(0)).attempts, 2);
        ov.start_compute(TaskId(0), hours(3.0));
        ov.complete_compute(TaskId(0), hours(4.0));
        assert_eq!(ov.task(TaskId(0)).executed_total, hours(4.0));
        ov.finalize(TaskId(0)).unwrap();
    }
}

mod packing_oracle {
    use super::*;
    use crate::testkit;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ffd_beats_shuffled_first_fit_and_respects_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let (window, tasks, cores) = testkit::random_packing_instance(&mut rng, 6);
            let max_walltime = SimTime::from_hours_f64(12.0);
            let capacity = window.duration.unwrap_or(max_walltime).min(max_walltime);
            let max_lanes = (window.node_count * cores) as usize;
            let ffd_count = match pack_backfill(&window, &tasks, cores, max_walltime) {
                Ok(plan) => {
                    assert!(plan.lanes.len() <= max_lanes);
                    plan.task_count()
                }
                Err(EmptyPlan) => 0,
            };
            // no single-order first-fit does better
            let mut order = tasks.clone();
            for _ in 0..200 {
                order.shuffle(&mut rng);
                let packed: usize =
                    first_fit(&order, capacity, max_lanes).iter().map(Vec::len).sum();
                assert!(
                    packed <= ffd_count,
                    "shuffle packed {packed} > ffd {ffd_count} for {tasks:?}"
                );
            }
            // and the exhaustive optimum is an upper bound
            let ests: Vec<u64> = tasks.iter().map(|(_, e)| e.as_ms()).collect();
            let optimal = testkit::optimal_pack_count(&ests, capacity.as_ms(), max_lanes);
            assert!(ffd_count <= optimal, "ffd {ffd_count} > optimal {optimal}");
        }
    }
}

mod wrappers {
    use super::*;
    use crate::cluster::BackfillWindow;

    #[test]
    fn end_wrapper_returns_unfinished_tasks() {
        let mut ov = Overlay::new(OverlayConfig::default());
        for i in 0..3 {
            ov.add_task(simple_task(i, 2.0, 2.0));
        }
        let window =
            BackfillWindow { node_count: 1, start: SimTime::ZERO, duration: Some(hours(4.0)) };
        let plan = pack_backfill(
            &window,
            &[(TaskId(0), hours(2.0)), (TaskId(1), hours(2.0)), (TaskId(2), hours(2.0))],
            2,
            hours(12.0),
        )
        .unwrap();
        assert_eq!(plan.task_count(), 3);
        let job = JobId(9);
        ov.add_wrapper(job, &plan);
        for lane in plan.lanes.iter() {
            for tid in lane {
                ov.dispatch(*tid, HostRef::Lane { job, lane: 0 }, SimTime::ZERO);
            }
        }
        let returned = ov.end_wrapper(job);
        assert_eq!(returned, vec![TaskId(0), TaskId(1), TaskId(2)]);
    }
}

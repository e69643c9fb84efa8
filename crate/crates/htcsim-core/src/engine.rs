//! Deterministic discrete-event engine: virtual clock, ordered event queue,
//! seeded random streams, metrics and trace collection.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::event::{EventId, EventKind, EventQueue};
use crate::metrics::{MetricsHub, SimReport, UnknownMetric};
use crate::rng::RngStreams;
use crate::time::SimTime;
use crate::trace::TraceLog;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("event at {fire_at} is in the past (clock {clock})")]
    PastEvent { fire_at: SimTime, clock: SimTime },
    #[error(transparent)]
    UnknownMetric(#[from] UnknownMetric),
}

/// The simulation engine core. Domain modules schedule events and record
/// metrics through it; a handler supplied to [`Engine::run_until`] reacts
/// to each event.
#[derive(Debug, Clone)]
pub struct Engine {
    clock: SimTime,
    queue: EventQueue,
    rng: RngStreams,
    metrics: MetricsHub,
    trace: TraceLog,
}

impl Engine {
    pub fn new(seed: u64, trace_enabled: bool) -> Self {
        Engine {
            clock: SimTime::ZERO,
            queue: EventQueue::new(),
            rng: RngStreams::new(seed),
            metrics: MetricsHub::new(),
            trace: TraceLog::new(trace_enabled),
        }
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn seed(&self) -> u64 {
        self.rng.seed()
    }

    /// Enqueues an event; `fire_at` must not precede the clock.
    pub fn schedule(&mut self, fire_at: SimTime, kind: EventKind) -> Result<EventId, EngineError> {
        if fire_at < self.clock {
            return Err(EngineError::PastEvent { fire_at, clock: self.clock });
        }
        Ok(self.queue.insert(fire_at, kind))
    }

    /// Schedule relative to the current clock.
    pub fn schedule_after(&mut self, delay: SimTime, kind: EventKind) -> EventId {
        self.queue.insert(self.clock + delay, kind)
    }

    pub fn cancel(&mut self, id: EventId) -> bool {
        self.queue.cancel(id)
    }

    pub fn register_metric(&mut self, name: &str) {
        self.metrics.register(name);
    }

    /// Appends `(clock, value)` to a registered series.
    pub fn sample(&mut self, metric: &str, value: f64) -> Result<(), EngineError> {
        self.metrics.sample(metric, self.clock, value)?;
        Ok(())
    }

    pub fn trace(&mut self, kind: &str, entity: impl std::fmt::Display, detail: &str) {
        let at = self.clock;
        self.trace.emit(at, kind, entity, detail);
    }

    pub fn trace_enabled(&self) -> bool {
        self.trace.enabled()
    }

    pub fn trace_contents(&self) -> &str {
        self.trace.contents()
    }

    pub fn rng(&mut self, label: &str) -> &mut ChaCha8Rng {
        self.rng.stream(label)
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Pops the next event due at or before `t_end`, advancing the clock to
    /// its fire time. When the queue holds nothing due, the clock advances
    /// to `t_end` and `None` is returned.
    pub fn next_due(&mut self, t_end: SimTime) -> Option<(SimTime, EventKind)> {
        match self.queue.pop_due(t_end) {
            Some((t, kind)) => {
                debug_assert!(t >= self.clock);
                self.clock = t;
                Some((t, kind))
            }
            None => {
                if t_end > self.clock {
                    self.clock = t_end;
                }
                None
            }
        }
    }

    /// Processes all events with `fire_at <= t_end` through `handler`.
    pub fn run_until(
        &mut self,
        t_end: SimTime,
        mut handler: impl FnMut(&mut Engine, SimTime, EventKind),
    ) {
        while let Some((t, kind)) = self.next_due(t_end) {
            handler(self, t, kind);
        }
    }

    /// Snapshot of all series and the supplied scalar summaries.
    pub fn report(&self, scalars: BTreeMap<String, f64>) -> SimReport {
        SimReport {
            clock_ms: self.clock.as_ms(),
            series: self.metrics.series().to_vec(),
            scalars,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_in_past_rejected() {
        let mut e = Engine::new(0, false);
        e.schedule(SimTime::from_ms(3), EventKind::SchedulerCycle).unwrap();
        e.run_until(SimTime::from_ms(3), |_, _, _| {});
        assert_eq!(e.now(), SimTime::from_ms(3));
        assert!(e.schedule(SimTime::from_ms(5), EventKind::SchedulerCycle).is_ok());
        let err = e.schedule(SimTime::from_ms(2), EventKind::SchedulerCycle).unwrap_err();
        assert_eq!(
            err,
            EngineError::PastEvent { fire_at: SimTime::from_ms(2), clock: SimTime::from_ms(3) }
        );
    }

    #[test]
    fn empty_queue_advances_clock() {
        let mut e = Engine::new(0, false);
        e.run_until(SimTime::from_ms(10), |_, _, _| panic!("no events expected"));
        assert_eq!(e.now(), SimTime::from_ms(10));
    }

    #[test]
    fn events_process_in_time_then_seq_order() {
        let mut e = Engine::new(0, false);
        e.schedule(SimTime::from_ms(5), EventKind::SchedulerCycle).unwrap();
        e.schedule(SimTime::from_ms(3), EventKind::BrokerCycle).unwrap();
        e.schedule(SimTime::from_ms(5), EventKind::MetricSample).unwrap();
        let mut seen = Vec::new();
        e.run_until(SimTime::from_ms(10), |_, t, kind| seen.push((t.as_ms(), kind)));
        assert_eq!(
            seen,
            vec![
                (3, EventKind::BrokerCycle),
                (5, EventKind::SchedulerCycle),
                (5, EventKind::MetricSample),
            ]
        );
        assert_eq!(e.now(), SimTime::from_ms(10));
    }

    #[test]
    fn event_before_end_processed_then_clock_reaches_end() {
        let mut e = Engine::new(0, false);
        e.schedule(SimTime::from_ms(4), EventKind::SchedulerCycle).unwrap();
        let mut fired = Vec::new();
        e.run_until(SimTime::from_ms(10), |_, t, _| fired.push(t.as_ms()));
        assert_eq!(fired, vec![4]);
        assert_eq!(e.now(), SimTime::from_ms(10));
    }

    #[test]
    fn deterministic_trace_for_same_seed() {
        let run = || {
            let mut e = Engine::new(9, true);
            e.register_metric("m");
            for i in 0..5 {
                e.schedule(SimTime::from_ms(i * 2), EventKind::MetricSample).unwrap();
            }
            e.run_until(SimTime::from_ms(20), |e, _, _| {
                let v: f64 = rand::Rng::random(e.rng("noise"));
                e.sample("m", v).unwrap();
                e.trace("metric-sample", "metrics", &format!("v={v}"));
            });
            e.trace_contents().to_string()
        };
        assert_eq!(run(), run());
    }
}

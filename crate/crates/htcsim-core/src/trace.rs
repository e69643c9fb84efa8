//! Optional line-per-event trace log.
//!
//! Each line is `<time_ms> <kind> <entity_id> <detail>`. The trace covers
//! queue events and the logical transitions they cause (job starts, task
//! preemptions), and is the reference artifact for replay comparison.

use std::fmt::Write as _;

use crate::time::SimTime;

#[derive(Debug, Clone, Default)]
pub struct TraceLog {
    enabled: bool,
    lines: String,
}

impl TraceLog {
    pub fn new(enabled: bool) -> Self {
        TraceLog { enabled, lines: String::new() }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn emit(&mut self, at: SimTime, kind: &str, entity: impl std::fmt::Display, detail: &str) {
        if self.enabled {
            if detail.is_empty() {
                let _ = writeln!(self.lines, "{} {} {}", at.as_ms(), kind, entity);
            } else {
                let _ = writeln!(self.lines, "{} {} {} {}", at.as_ms(), kind, entity, detail);
            }
        }
    }

    pub fn contents(&self) -> &str {
        &self.lines
    }
}

//! Event trace records and their CSV form.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

/// Fixed trace columns, in file order.
pub const TRACE_COLUMNS: [&str; 6] = ["time_ms", "event", "job", "stage", "task", "detail"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEvent {
    /// Invocation submitted to the platform.
    Invoke,
    /// Function began executing after spawn.
    Start,
    /// Function ended; detail carries outcome, billed_ms and mem_mb.
    Finish,
    /// Output object written.
    Write,
    /// Write notification delivered to the controller.
    Notify,
    StageFired,
    Respawn,
    JobSubmitted,
    JobDone,
    JobFailed,
    Paused,
    Resumed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time_ms: u64,
    pub event: TraceEvent,
    pub job: String,
    pub stage: Option<u32>,
    pub task: Option<u32>,
    pub detail: String,
}

impl TraceRecord {
    /// Value of a `name=value` token in the detail field.
    pub fn detail_field(&self, name: &str) -> Option<&str> {
        self.detail
            .split_whitespace()
            .find_map(|tok| tok.strip_prefix(name).and_then(|r| r.strip_prefix('=')))
    }
}

pub fn write_csv<W: Write>(records: &[TraceRecord], out: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TRACE_COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> csv::Result<Vec<TraceRecord>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Largest number of functions running at once, counted from start and
/// finish records.
pub fn max_running(records: &[TraceRecord]) -> u32 {
    let mut running = 0i64;
    let mut max = 0i64;
    for r in records {
        match r.event {
            TraceEvent::Start => {
                running += 1;
                max = max.max(running);
            }
            TraceEvent::Finish => running -= 1,
            _ => {}
        }
    }
    max as u32
}

/// Per-job totals recomputed from a trace.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceTotals {
    pub invocations: u64,
    pub respawns: u64,
    pub billed_mb_ms: u128,
    pub first_ms: Option<u64>,
    pub done_ms: Option<u64>,
}

pub fn job_totals(records: &[TraceRecord]) -> BTreeMap<String, TraceTotals> {
    let mut out: BTreeMap<String, TraceTotals> = BTreeMap::new();
    for r in records {
        let t = out.entry(r.job.clone()).or_default();
        match r.event {
            TraceEvent::Invoke => t.invocations += 1,
            TraceEvent::Respawn => t.respawns += 1,
            TraceEvent::Finish => {
                let billed: u128 = r.detail_field("billed_ms").and_then(|v| v.parse().ok()).unwrap_or(0);
                let mem: u128 = r.detail_field("mem_mb").and_then(|v| v.parse().ok()).unwrap_or(0);
                t.billed_mb_ms += billed * mem;
            }
            TraceEvent::JobSubmitted => t.first_ms = Some(r.time_ms),
            TraceEvent::JobDone => t.done_ms = Some(r.time_ms),
            _ => {}
        }
    }
    out
}

/// Running-function count per stage of one job, as (time, count) steps.
pub fn stage_timeline(records: &[TraceRecord], job: &str) -> BTreeMap<u32, Vec<(u64, u32)>> {
    let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
    let mut out: BTreeMap<u32, Vec<(u64, u32)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.job == job) {
        let Some(stage) = r.stage else { continue };
        let c = counts.entry(stage).or_default();
        match r.event {
            TraceEvent::Start => *c += 1,
            TraceEvent::Finish => *c = c.saturating_sub(1),
            _ => continue,
        }
        let steps = out.entry(stage).or_default();
        match steps.last_mut() {
            Some(last) if last.0 == r.time_ms => last.1 = *c,
            _ => steps.push((r.time_ms, *c)),
        }
    }
    out
}

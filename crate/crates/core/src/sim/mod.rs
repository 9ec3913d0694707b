//! Discrete-event model of a function-as-a-service platform.
//!
//! Time is virtual and measured in whole milliseconds. Events at the same
//! instant are ordered by class (finishes before signals), then by an order
//! key chosen by the caller, then by insertion sequence.

pub mod trace;
pub mod vm;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use trace::{TraceEvent, TraceRecord};

/// Platform parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterModel {
    pub concurrency_limit: u32,
    pub spawn_latency_ms: u64,
    pub function_timeout_s: u64,
    pub failure_prob: f64,
    pub straggler_prob: f64,
    pub straggler_factor: f64,
    /// Currency per GB-second.
    pub cost_rate: f64,
    pub vcpus_per_function: u32,
    /// Per-function scratch space; tasks whose input exceeds it fail.
    pub disk_cap_mb: u64,
    pub rng_seed: u64,
}

impl Default for ClusterModel {
    fn default() -> Self {
        ClusterModel {
            concurrency_limit: 1000,
            spawn_latency_ms: 50,
            function_timeout_s: 900,
            failure_prob: 0.0,
            straggler_prob: 0.0,
            straggler_factor: 10.0,
            cost_rate: 0.000_016_666_7,
            vcpus_per_function: 2,
            disk_cap_mb: 512,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid cluster model: {0}")]
    Invalid(String),
}

impl ClusterModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Invalid(m.to_string()));
        if self.concurrency_limit == 0 {
            return bad("concurrency_limit must be > 0");
        }
        if self.function_timeout_s == 0 {
            return bad("function_timeout_s must be > 0");
        }
        for (name, p) in [
            ("failure_prob", self.failure_prob),
            ("straggler_prob", self.straggler_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ModelError::Invalid(format!("{name} must be in [0, 1]")));
            }
        }
        if !(self.straggler_factor >= 1.0) || !self.straggler_factor.is_finite() {
            return bad("straggler_factor must be >= 1");
        }
        if !(self.cost_rate >= 0.0) || !self.cost_rate.is_finite() {
            return bad("cost_rate must be >= 0");
        }
        if self.vcpus_per_function == 0 {
            return bad("vcpus_per_function must be > 0");
        }
        Ok(())
    }

    pub fn function_timeout_ms(&self) -> u64 {
        self.function_timeout_s * 1000
    }

    /// Cost of `mb_ms` megabyte-milliseconds.
    pub fn cost_of(&self, mb_ms: u128) -> f64 {
        mb_ms as f64 / 1024.0 / 1000.0 * self.cost_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    /// Completed, but slowed by the straggler factor.
    Straggling,
    /// Never produced a result; the function hung until the platform timeout.
    Failed,
    TimedOut,
}

impl Outcome {
    pub fn succeeded(self) -> bool {
        matches!(self, Outcome::Ok | Outcome::Straggling)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Ok => "ok",
            Outcome::Straggling => "straggling",
            Outcome::Failed => "failed",
            Outcome::TimedOut => "timed_out",
        }
    }
}

/// Identifies an invocation in traces and the cost ledger.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskTag {
    pub job: String,
    pub stage: u32,
    pub task: u32,
}

impl TaskTag {
    pub fn new(job: &str, stage: u32, task: u32) -> Self {
        TaskTag {
            job: job.to_string(),
            stage,
            task,
        }
    }
}

pub type InvocationId = u64;

/// Lifecycle of one function invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionInstance<P> {
    pub id: InvocationId,
    pub tag: TaskTag,
    pub payload: P,
    pub memory_mb: u32,
    pub submit: u64,
    pub start: u64,
    pub end: u64,
    pub outcome: Outcome,
    pub billed_ms: u64,
}

impl<P> FunctionInstance<P> {
    pub fn mb_ms(&self) -> u128 {
        u128::from(self.memory_mb) * u128::from(self.billed_ms)
    }
}

/// Billing totals in exact megabyte-milliseconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostLedger {
    per_task: Vec<(TaskTag, u128)>,
    per_job: BTreeMap<String, u128>,
    total: u128,
}

impl CostLedger {
    fn charge(&mut self, tag: &TaskTag, mb_ms: u128) {
        self.per_task.push((tag.clone(), mb_ms));
        *self.per_job.entry(tag.job.clone()).or_default() += mb_ms;
        self.total += mb_ms;
    }

    pub fn per_task(&self) -> &[(TaskTag, u128)] {
        &self.per_task
    }

    pub fn job_mb_ms(&self, job: &str) -> u128 {
        self.per_job.get(job).copied().unwrap_or(0)
    }

    pub fn total_mb_ms(&self) -> u128 {
        self.total
    }

    pub fn jobs(&self) -> impl Iterator<Item = (&str, u128)> {
        self.per_job.iter().map(|(j, v)| (j.as_str(), *v))
    }
}

/// What `next` hands back to the driver.
#[derive(Debug)]
pub enum SimEvent<P, S> {
    Finished(FunctionInstance<P>),
    Signal(S),
}

#[derive(Debug)]
enum Kind<S> {
    Finish(InvocationId),
    Start(InvocationId),
    Signal(S),
}

impl<S> Kind<S> {
    fn class(&self) -> u8 {
        match self {
            Kind::Finish(_) => 0,
            Kind::Start(_) => 1,
            Kind::Signal(_) => 2,
        }
    }
}

#[derive(Debug)]
struct Event<S> {
    at: u64,
    class: u8,
    key: String,
    seq: u64,
    kind: Kind<S>,
}

impl<S> Event<S> {
    fn rank(&self) -> (u64, u8, &str, u64) {
        (self.at, self.class, &self.key, self.seq)
    }
}

impl<S> PartialEq for Event<S> {
    fn eq(&self, other: &Self) -> bool {
        self.rank() == other.rank()
    }
}

impl<S> Eq for Event<S> {}

impl<S> PartialOrd for Event<S> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<S> Ord for Event<S> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.rank().cmp(&other.rank())
    }
}

#[derive(Debug)]
struct Pending<P> {
    inst: FunctionInstance<P>,
    /// Run time once started, before any timeout cut.
    planned_ms: u64,
}

/// The simulator. `P` is the invocation payload, `S` the driver's signal type.
#[derive(Debug)]
pub struct FaasSim<P, S> {
    model: ClusterModel,
    now: u64,
    seq: u64,
    next_id: InvocationId,
    rng: ChaCha8Rng,
    heap: BinaryHeap<Reverse<Event<S>>>,
    waiting: VecDeque<InvocationId>,
    pending: BTreeMap<InvocationId, Pending<P>>,
    /// Invocations holding a slot, with their start times.
    admitted: BTreeMap<InvocationId, u64>,
    running_mb_since: BTreeMap<InvocationId, (u32, u64)>,
    ledger: CostLedger,
    trace: Vec<TraceRecord>,
    record_trace: bool,
    max_admitted: u32,
}

impl<P, S> FaasSim<P, S> {
    pub fn new(model: ClusterModel) -> Self {
        FaasSim::starting_at(model, 0)
    }

    /// A simulator whose clock starts at `now`.
    pub fn starting_at(model: ClusterModel, now: u64) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(model.rng_seed);
        FaasSim {
            model,
            now,
            seq: 0,
            next_id: 0,
            rng,
            heap: BinaryHeap::new(),
            waiting: VecDeque::new(),
            pending: BTreeMap::new(),
            admitted: BTreeMap::new(),
            running_mb_since: BTreeMap::new(),
            ledger: CostLedger::default(),
            trace: Vec::new(),
            record_trace: true,
            max_admitted: 0,
        }
    }

    pub fn set_trace(&mut self, on: bool) {
        self.record_trace = on;
    }

    pub fn model(&self) -> &ClusterModel {
        &self.model
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Invocations holding a concurrency slot.
    pub fn admitted_count(&self) -> u32 {
        self.admitted.len() as u32
    }

    /// Invocations past their spawn latency and not yet finished.
    pub fn running_count(&self) -> u32 {
        self.running_mb_since.len() as u32
    }

    pub fn queued_count(&self) -> u32 {
        self.waiting.len() as u32
    }

    /// Admitted plus queued invocations.
    pub fn active_count(&self) -> u32 {
        self.admitted_count() + self.queued_count()
    }

    /// Slots a driver can fill without queueing.
    pub fn free_slots(&self) -> u32 {
        self.model.concurrency_limit.saturating_sub(self.active_count())
    }

    pub fn max_admitted(&self) -> u32 {
        self.max_admitted
    }

    pub fn running_vcpus(&self) -> u32 {
        self.running_count() * self.model.vcpus_per_function
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn cost(&self, job: Option<&str>) -> f64 {
        let mb_ms = match job {
            Some(j) => self.ledger.job_mb_ms(j),
            None => self.ledger.total_mb_ms(),
        };
        self.model.cost_of(mb_ms)
    }

    /// Megabyte-milliseconds consumed up to `now`, counting running
    /// functions up to the current instant.
    pub fn accrued_mb_ms(&self) -> u128 {
        self.ledger.total_mb_ms()
            + self
                .running_mb_since
                .values()
                .map(|(mb, since)| u128::from(*mb) * u128::from(self.now.saturating_sub(*since)))
                .sum::<u128>()
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.trace)
    }

    fn push(&mut self, at: u64, key: String, kind: Kind<S>) {
        self.seq += 1;
        let ev = Event {
            at,
            class: kind.class(),
            key,
            seq: self.seq,
            kind,
        };
        self.heap.push(Reverse(ev));
    }

    fn log(&mut self, event: TraceEvent, tag: &TaskTag, detail: String) {
        if self.record_trace {
            self.trace.push(TraceRecord {
                time_ms: self.now,
                event,
                job: tag.job.clone(),
                stage: Some(tag.stage),
                task: Some(tag.task),
                detail,
            });
        }
    }

    /// Records a driver-level event in the trace at the current time.
    pub fn note(&mut self, event: TraceEvent, job: &str, stage: Option<u32>, task: Option<u32>, detail: String) {
        if self.record_trace {
            self.trace.push(TraceRecord {
                time_ms: self.now,
                event,
                job: job.to_string(),
                stage,
                task,
                detail,
            });
        }
    }

    /// Submits an invocation. It starts after the spawn latency if a slot is
    /// free, otherwise it waits in FIFO order for one.
    pub fn invoke(&mut self, tag: TaskTag, payload: P, memory_mb: u32, base_duration_ms: u64) -> InvocationId {
        let id = self.next_id;
        self.next_id += 1;
        let base = base_duration_ms.max(1);
        let failed = self.model.failure_prob > 0.0 && self.rng.gen_bool(self.model.failure_prob);
        let straggler = self.model.straggler_prob > 0.0 && self.rng.gen_bool(self.model.straggler_prob);
        let timeout = self.model.function_timeout_ms();
        let (planned_ms, outcome) = if failed {
            (timeout, Outcome::Failed)
        } else {
            let d = if straggler {
                (base as f64 * self.model.straggler_factor).ceil() as u64
            } else {
                base
            };
            if d > timeout {
                (timeout, Outcome::TimedOut)
            } else if straggler {
                (d, Outcome::Straggling)
            } else {
                (d, Outcome::Ok)
            }
        };
        self.log(TraceEvent::Invoke, &tag, format!("mem_mb={memory_mb} base_ms={base}"));
        let inst = FunctionInstance {
            id,
            tag,
            payload,
            memory_mb,
            submit: self.now,
            start: 0,
            end: 0,
            outcome,
            billed_ms: 0,
        };
        self.pending.insert(id, Pending { inst, planned_ms });
        if self.admitted.len() < self.model.concurrency_limit as usize {
            self.admit(id);
        } else {
            self.waiting.push_back(id);
        }
        id
    }

    fn admit(&mut self, id: InvocationId) {
        let start = self.now + self.model.spawn_latency_ms;
        let p = self.pending.get_mut(&id).expect("admitting unknown invocation");
        p.inst.start = start;
        p.inst.end = start + p.planned_ms;
        let end = p.inst.end;
        let key = format!("{id:020}");
        self.admitted.insert(id, start);
        self.max_admitted = self.max_admitted.max(self.admitted.len() as u32);
        self.push(start, key.clone(), Kind::Start(id));
        self.push(end, key, Kind::Finish(id));
    }

    /// Queues a driver signal at `at` (clamped to now). Signals at the same
    /// instant are delivered in `order_key` order.
    pub fn schedule(&mut self, at: u64, order_key: impl Into<String>, signal: S) {
        let at = at.max(self.now);
        self.push(at, order_key.into(), Kind::Signal(signal));
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.heap.peek().map(|Reverse(e)| e.at)
    }

    pub fn is_idle(&self) -> bool {
        self.heap.is_empty()
    }

    /// Advances to and returns the next finish or signal.
    pub fn next(&mut self) -> Option<SimEvent<P, S>> {
        self.step(None)
    }

    /// Like `next`, but leaves events after `t` queued and advances the
    /// clock to `t` once none remain before it.
    pub fn next_until(&mut self, t: u64) -> Option<SimEvent<P, S>> {
        self.step(Some(t))
    }

    fn step(&mut self, limit: Option<u64>) -> Option<SimEvent<P, S>> {
        loop {
            match (self.peek_time(), limit) {
                (None, None) => return None,
                (None, Some(t)) => {
                    self.now = self.now.max(t);
                    return None;
                }
                (Some(at), Some(t)) if at > t => {
                    self.now = self.now.max(t);
                    return None;
                }
                _ => {}
            }
            let Reverse(ev) = self.heap.pop()?;
            self.now = ev.at;
            match ev.kind {
                Kind::Start(id) => {
                    let p = &self.pending[&id];
                    let (tag, mem) = (p.inst.tag.clone(), p.inst.memory_mb);
                    self.running_mb_since.insert(id, (mem, self.now));
                    self.log(TraceEvent::Start, &tag, format!("mem_mb={mem}"));
                }
                Kind::Finish(id) => {
                    let mut inst = self.pending.remove(&id).expect("finish of unknown invocation").inst;
                    self.admitted.remove(&id);
                    self.running_mb_since.remove(&id);
                    inst.billed_ms = inst.end - inst.start;
                    self.ledger.charge(&inst.tag, inst.mb_ms());
                    let detail = format!(
                        "outcome={} billed_ms={} mem_mb={}",
                        inst.outcome.as_str(),
                        inst.billed_ms,
                        inst.memory_mb
                    );
                    self.log(TraceEvent::Finish, &inst.tag, detail);
                    while self.admitted.len() < self.model.concurrency_limit as usize {
                        match self.waiting.pop_front() {
                            Some(w) => self.admit(w),
                            None => break,
                        }
                    }
                    return Some(SimEvent::Finished(inst));
                }
                Kind::Signal(s) => return Some(SimEvent::Signal(s)),
            }
        }
    }

    /// Processes every event up to `t`, collecting them.
    pub fn run_until(&mut self, t: u64) -> Vec<SimEvent<P, S>> {
        let mut out = Vec::new();
        while let Some(ev) = self.next_until(t) {
            out.push(ev);
        }
        out
    }

    pub fn run_to_quiescence(&mut self) -> Vec<SimEvent<P, S>> {
        let mut out = Vec::new();
        while let Some(ev) = self.next() {
            out.push(ev);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type Sim = FaasSim<(), ()>;

    fn finished(evs: Vec<SimEvent<(), ()>>) -> Vec<FunctionInstance<()>> {
        evs.into_iter()
            .filter_map(|e| match e {
                SimEvent::Finished(i) => Some(i),
                SimEvent::Signal(_) => None,
            })
            .collect()
    }

    #[test]
    fn limit_queues_the_third_invocation() {
        let mut sim = Sim::new(ClusterModel {
            concurrency_limit: 2,
            ..Default::default()
        });
        for t in 0..3 {
            sim.invoke(TaskTag::new("j", 0, t), (), 1024, 10_000);
        }
        assert_eq!((sim.admitted_count(), sim.queued_count()), (2, 1));
        let done = finished(sim.run_to_quiescence());
        assert_eq!(done[0].start, 50);
        assert_eq!(done[0].end, 10_050);
        let third = done.iter().find(|i| i.tag.task == 2).unwrap();
        // hand simulation: a slot frees at 10_050, spawn adds 50
        assert_eq!(third.start, 10_100);
        assert_eq!(third.end, 20_100);
        assert_eq!(sim.max_admitted(), 2);
    }

    #[test]
    fn hundred_parallel_tasks_finish_together() {
        let mut sim = Sim::new(ClusterModel::default());
        for t in 0..100 {
            sim.invoke(TaskTag::new("j", 0, t), (), 1024, 1000);
        }
        let done = finished(sim.run_to_quiescence());
        assert_eq!(done.len(), 100);
        assert_eq!(sim.now(), 1050);
    }

    #[test]
    fn failures_hang_until_timeout_and_bill() {
        let mut sim = Sim::new(ClusterModel {
            failure_prob: 1.0,
            function_timeout_s: 60,
            ..Default::default()
        });
        sim.invoke(TaskTag::new("j", 0, 0), (), 1024, 10);
        let done = finished(sim.run_to_quiescence());
        assert_eq!(done[0].outcome, Outcome::Failed);
        assert_eq!(done[0].end, 60_050);
        assert_eq!(done[0].billed_ms, 60_000);
    }

    #[test]
    fn long_tasks_time_out() {
        let mut sim = Sim::new(ClusterModel::default());
        sim.invoke(TaskTag::new("j", 0, 0), (), 1024, 1_000_000);
        let done = finished(sim.run_to_quiescence());
        assert_eq!(done[0].outcome, Outcome::TimedOut);
        assert_eq!(done[0].end, 50 + 900_000);
    }

    #[test]
    fn cost_formula_additivity_and_straggler_ratio() {
        let rate = 0.5;
        let mut sim = Sim::new(ClusterModel {
            cost_rate: rate,
            ..Default::default()
        });
        sim.invoke(TaskTag::new("a", 0, 0), (), 3008, 10_000);
        sim.run_to_quiescence();
        let single = sim.cost(Some("a"));
        assert!((single - 3008.0 / 1024.0 * 10.0 * rate).abs() < 1e-12);
        sim.invoke(TaskTag::new("b", 0, 0), (), 3008, 10_000);
        sim.invoke(TaskTag::new("b", 0, 1), (), 3008, 10_000);
        sim.run_to_quiescence();
        assert!((sim.cost(Some("b")) - 2.0 * single).abs() < 1e-12);

        let mut slow = Sim::new(ClusterModel {
            cost_rate: rate,
            straggler_prob: 1.0,
            ..Default::default()
        });
        slow.invoke(TaskTag::new("s", 0, 0), (), 3008, 10_000);
        let done = finished(slow.run_to_quiescence());
        assert_eq!(done[0].outcome, Outcome::Straggling);
        assert!((slow.cost(Some("s")) / single - 10.0).abs() < 1e-12);
    }

    #[test]
    fn ledger_conserves_billing() {
        let mut sim = Sim::new(ClusterModel {
            straggler_prob: 0.3,
            failure_prob: 0.1,
            function_timeout_s: 20,
            concurrency_limit: 7,
            rng_seed: 9,
            ..Default::default()
        });
        let mut total = 0u128;
        for t in 0..50 {
            sim.invoke(
                TaskTag::new(&format!("j{}", t % 3), 0, t),
                (),
                512 + t,
                500 + 37 * u64::from(t),
            );
        }
        for inst in finished(sim.run_to_quiescence()) {
            total += inst.mb_ms();
        }
        assert_eq!(total, sim.ledger().total_mb_ms());
        assert_eq!(sim.ledger().jobs().map(|(_, v)| v).sum::<u128>(), total);
        assert!(sim.max_admitted() <= 7);
    }

    #[test]
    fn signals_order_by_time_then_key() {
        let mut sim: FaasSim<(), &str> = FaasSim::new(ClusterModel::default());
        sim.schedule(5, "b", "b5");
        sim.schedule(5, "a", "a5");
        sim.schedule(1, "z", "z1");
        let got: Vec<&str> = sim
            .run_to_quiescence()
            .into_iter()
            .map(|e| match e {
                SimEvent::Signal(s) => s,
                SimEvent::Finished(_) => unreachable!(),
            })
            .collect();
        assert_eq!(got, ["z1", "a5", "b5"]);
        assert!(sim.run_until(100).is_empty());
        assert_eq!(sim.now(), 100);
    }

    #[test]
    fn accrual_is_flat_while_idle() {
        let mut sim = Sim::new(ClusterModel::default());
        sim.invoke(TaskTag::new("j", 0, 0), (), 1024, 1000);
        sim.run_until(550);
        assert_eq!(sim.accrued_mb_ms(), 1024 * 500);
        sim.run_until(5000);
        let a = sim.accrued_mb_ms();
        sim.run_until(9000);
        assert_eq!(sim.accrued_mb_ms(), a);
        assert_eq!(a, 1024 * 1000);
    }
}

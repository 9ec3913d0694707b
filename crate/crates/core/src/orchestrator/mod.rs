//! The controller: fires stages on object writes, dispatches tasks through the
//! scheduler onto the simulator, respawns tasks whose completion never shows
//! up in the log, and supports pause/resume and recovery from the log.

pub mod local;
pub mod plan;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::format::{FormatError, FormatRegistry};
use crate::kernels::{DurationModel, KernelError, KernelRegistry};
use crate::pipeline::{CompiledPipeline, PipelineError, StageKind};
use crate::primitives::PrimitiveError;
use crate::scheduler::{Hold, Scheduler, SchedulerError, SchedulerPolicy, TaskRef};
use crate::sim::trace::{stage_timeline, TraceEvent, TraceRecord};
use crate::sim::{ClusterModel, FaasSim, ModelError, SimEvent, TaskTag};
use crate::store::{LogEntry, LogEvent, ObjectStore, StoreError};

pub use plan::{output_key, parse_output_key, Env, TaskOp, TaskPayload};

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("input object {0} does not exist")]
    InputMissing(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {job} is {state:?}")]
    BadState { job: String, state: JobState },
    #[error("task input of {bytes} bytes exceeds the function disk cap")]
    DiskCapExceeded { bytes: u64 },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Primitive(#[from] PrimitiveError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("corrupt state: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, OrchestratorError>;

/// What a job is sized for.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Goal {
    Deadline {
        seconds: f64,
    },
    #[default]
    BestEffort,
    CostCap {
        amount: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Paused,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub pipeline: CompiledPipeline,
    pub input_key: String,
    #[serde(default)]
    pub goal: Goal,
    /// Higher wins under the priority policy.
    #[serde(default)]
    pub priority: i64,
    /// No stage after this one is invoked until the job is resumed.
    #[serde(default)]
    pub pause_at: Option<u32>,
    /// Split size per sizable stage, as chosen by the provisioner.
    #[serde(default)]
    pub split_overrides: BTreeMap<u32, u64>,
}

impl JobRequest {
    pub fn new(pipeline: CompiledPipeline, input_key: &str) -> Self {
        JobRequest {
            pipeline,
            input_key: input_key.to_string(),
            goal: Goal::BestEffort,
            priority: 0,
            pause_at: None,
            split_overrides: BTreeMap::new(),
        }
    }

    pub fn priority(mut self, priority: i64) -> Self {
        self.priority = priority;
        self
    }

    pub fn goal(mut self, goal: Goal) -> Self {
        self.goal = goal;
        self
    }

    pub fn pause_at(mut self, stage: u32) -> Self {
        self.pause_at = Some(stage);
        self
    }

    pub fn split_override(mut self, stage: u32, split_size: u64) -> Self {
        self.split_overrides.insert(stage, split_size);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub cluster: ClusterModel,
    pub scheduler: SchedulerPolicy,
    pub fault_tolerance: bool,
    pub monitor_interval_ms: u64,
    pub notification_latency_ms: u64,
    /// Invocations per task before the job is declared failed.
    pub max_attempts: u32,
    pub max_skips: Option<u32>,
    pub durations: DurationModel,
    pub record_trace: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            cluster: ClusterModel::default(),
            scheduler: SchedulerPolicy::Fifo,
            fault_tolerance: true,
            monitor_interval_ms: 1000,
            notification_latency_ms: 0,
            max_attempts: 20,
            max_skips: None,
            durations: DurationModel::default(),
            record_trace: true,
        }
    }
}

#[derive(Debug, Clone)]
struct TaskState {
    payload: Arc<TaskPayload>,
    attempts: u32,
    invoked_at: Option<u64>,
    in_flight: u32,
    queued: bool,
    completed: bool,
}

#[derive(Debug, Clone)]
struct StageState {
    tasks: Vec<TaskState>,
    completed: usize,
    fired_next: bool,
}

impl StageState {
    fn is_complete(&self) -> bool {
        self.completed == self.tasks.len()
    }
}

#[derive(Debug, Clone)]
struct JobRecord {
    request: JobRequest,
    state: JobState,
    submitted_at: u64,
    finished_at: Option<u64>,
    stages: Vec<Option<StageState>>,
    /// A stage is waiting for resume.
    blocked: bool,
    in_flight: u32,
    invocations: u32,
    respawns: u32,
    error: Option<String>,
}

impl JobRecord {
    fn new(request: JobRequest, at: u64) -> Self {
        let n = request.pipeline.stage_count();
        JobRecord {
            request,
            state: JobState::Queued,
            submitted_at: at,
            finished_at: None,
            stages: vec![None; n],
            blocked: false,
            in_flight: 0,
            invocations: 0,
            respawns: 0,
            error: None,
        }
    }

    fn stage_allowed(&self, stage: u32) -> bool {
        self.request.pause_at.is_none_or(|p| stage <= p)
    }

    fn has_pending_work(&self) -> bool {
        self.stages.iter().enumerate().any(|(s, st)| {
            st.as_ref()
                .is_some_and(|st| !st.is_complete() && self.stage_allowed(s as u32))
        })
    }
}

/// Progress of one job, as reconstructible from the log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct JobProgress {
    pub state: JobState,
    /// Completed tasks per planned stage.
    pub completed: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: u32,
    pub kind: StageKind,
    pub tasks: usize,
    /// Running functions over time, as (time_ms, count) steps.
    pub lambdas: Vec<(u64, u32)>,
}

/// Per-job report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobSummary {
    pub job_id: String,
    pub state: JobState,
    pub submitted_ms: u64,
    pub makespan_ms: Option<u64>,
    pub tasks: usize,
    pub invocations: u32,
    pub respawns: u32,
    pub cost: f64,
    pub seed: u64,
    pub error: Option<String>,
    pub stages: Vec<StageSummary>,
}

#[derive(Debug, Clone)]
pub struct Invocation {
    pub task: TaskRef,
    pub payload: Arc<TaskPayload>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Signal {
    Notify(String),
    Tick,
}

/// Controller plus simulated platform.
#[derive(Debug)]
pub struct Runtime {
    config: RuntimeConfig,
    sim: FaasSim<Invocation, Signal>,
    store: Arc<ObjectStore>,
    formats: FormatRegistry,
    kernels: KernelRegistry,
    scheduler: Scheduler,
    jobs: BTreeMap<String, JobRecord>,
    next_job: u64,
    executions: BTreeMap<String, u32>,
    tick_pending: bool,
}

fn job_number(id: &str) -> Option<u64> {
    id.strip_prefix("job-")?.parse().ok()
}

impl Runtime {
    pub fn new(config: RuntimeConfig, store: Arc<ObjectStore>) -> Result<Self> {
        Runtime::starting_at(config, store, 0)
    }

    fn starting_at(config: RuntimeConfig, store: Arc<ObjectStore>, now: u64) -> Result<Self> {
        config.cluster.validate()?;
        let mut sim = FaasSim::starting_at(config.cluster.clone(), now);
        sim.set_trace(config.record_trace);
        let mut scheduler = Scheduler::new(config.scheduler);
        if let Some(m) = config.max_skips {
            scheduler = scheduler.with_max_skips(m);
        }
        Ok(Runtime {
            config,
            sim,
            store,
            formats: FormatRegistry::default(),
            kernels: KernelRegistry::default(),
            scheduler,
            jobs: BTreeMap::new(),
            next_job: 0,
            executions: BTreeMap::new(),
            tick_pending: false,
        })
    }

    pub fn with_registries(mut self, formats: FormatRegistry, kernels: KernelRegistry) -> Self {
        self.formats = formats;
        self.kernels = kernels;
        self
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<ObjectStore> {
        &self.store
    }

    pub fn sim(&self) -> &FaasSim<Invocation, Signal> {
        &self.sim
    }

    pub fn now(&self) -> u64 {
        self.sim.now()
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.sim.trace()
    }

    /// Kernel and primitive executions per output key.
    pub fn executions(&self) -> &BTreeMap<String, u32> {
        &self.executions
    }

    pub fn job_ids(&self) -> Vec<String> {
        self.jobs.keys().cloned().collect()
    }

    pub fn job_state(&self, job: &str) -> Option<JobState> {
        self.jobs.get(job).map(|j| j.state)
    }

    fn env(&self) -> Env<'_> {
        Env {
            store: &self.store,
            formats: &self.formats,
            kernels: &self.kernels,
        }
    }

    fn log(&self, entry: LogEntry) -> Result<()> {
        Ok(self.store.append_log(entry)?)
    }

    fn validate_request(&self, req: &JobRequest) -> Result<()> {
        self.formats.get(req.pipeline.input_format())?;
        for spec in &req.pipeline.pipeline.stages {
            if spec.kind == StageKind::Run {
                let app = spec.str_arg("application").unwrap_or_default();
                self.kernels.get(app)?;
            }
        }
        if !self.store.exists(&req.input_key) {
            return Err(OrchestratorError::InputMissing(req.input_key.clone()));
        }
        Ok(())
    }

    /// Queues a job; its first stage is planned immediately and dispatched
    /// on the next `run`/`run_until`.
    pub fn submit(&mut self, request: JobRequest) -> Result<String> {
        self.validate_request(&request)?;
        let id = format!("job-{:04}", self.next_job);
        self.next_job += 1;
        let now = self.now();
        let payload = serde_json::to_value(&request).map_err(|e| OrchestratorError::Corrupt(e.to_string()))?;
        self.log(LogEntry::job_event(&id, LogEvent::Submitted, now, payload))?;
        self.sim.note(
            TraceEvent::JobSubmitted,
            &id,
            None,
            None,
            format!(
                "priority={} pipeline={}",
                request.priority, request.pipeline.pipeline.name
            ),
        );
        self.scheduler.register(&id, request.priority)?;
        self.jobs.insert(id.clone(), JobRecord::new(request, now));
        self.fire_stage(&id, 0)?;
        self.ensure_tick();
        Ok(id)
    }

    /// Stops new invocations for stages after `at_stage`; running tasks finish.
    pub fn pause(&mut self, job: &str, at_stage: u32) -> Result<()> {
        let now = self.now();
        let rec = self
            .jobs
            .get_mut(job)
            .ok_or_else(|| OrchestratorError::UnknownJob(job.to_string()))?;
        if !matches!(rec.state, JobState::Queued | JobState::Running) {
            return Err(OrchestratorError::BadState {
                job: job.to_string(),
                state: rec.state,
            });
        }
        rec.request.pause_at = Some(at_stage);
        rec.state = JobState::Paused;
        self.scheduler.set_hold(job, Hold::AfterStage(at_stage))?;
        self.log(LogEntry::job_event(
            job,
            LogEvent::Paused,
            now,
            json!({"reason": "user", "at_stage": at_stage}),
        ))?;
        self.sim
            .note(TraceEvent::Paused, job, Some(at_stage), None, "reason=user".into());
        Ok(())
    }

    /// Re-triggers a paused job from its input. Stages whose tasks all
    /// completed are not re-run; the first unfinished stage continues.
    pub fn resume(&mut self, job: &str) -> Result<()> {
        let now = self.now();
        let rec = self
            .jobs
            .get_mut(job)
            .ok_or_else(|| OrchestratorError::UnknownJob(job.to_string()))?;
        if rec.state != JobState::Paused {
            return Err(OrchestratorError::BadState {
                job: job.to_string(),
                state: rec.state,
            });
        }
        rec.request.pause_at = None;
        rec.state = JobState::Running;
        rec.blocked = false;
        self.scheduler.set_hold(job, Hold::None)?;
        self.log(LogEntry::job_event(
            job,
            LogEvent::Resumed,
            now,
            json!({"reason": "user"}),
        ))?;
        self.sim
            .note(TraceEvent::Resumed, job, None, None, "reason=user".into());
        let n = self.jobs[job].stages.len();
        for s in 0..n {
            match &self.jobs[job].stages[s] {
                Some(st) if st.is_complete() => continue,
                Some(_) => break,
                None => {
                    self.fire_stage(job, s as u32)?;
                    break;
                }
            }
        }
        self.ensure_tick();
        Ok(())
    }

    fn job_mut(&mut self, job: &str) -> Result<&mut JobRecord> {
        self.jobs
            .get_mut(job)
            .ok_or_else(|| OrchestratorError::UnknownJob(job.to_string()))
    }

    /// Plans and enqueues `stage`, unless the job's pause point blocks it.
    fn fire_stage(&mut self, job: &str, stage: u32) -> Result<()> {
        let now = self.now();
        let rec = self.job_mut(job)?;
        if !rec.stage_allowed(stage) {
            rec.blocked = true;
            if rec.state != JobState::Paused {
                rec.state = JobState::Paused;
                let at_stage = rec.request.pause_at;
                self.scheduler.set_hold(job, Hold::AfterStage(at_stage.unwrap_or(0)))?;
                self.log(LogEntry::job_event(
                    job,
                    LogEvent::Paused,
                    now,
                    json!({"reason": "user", "at_stage": at_stage}),
                ))?;
                self.sim
                    .note(TraceEvent::Paused, job, at_stage, None, "reason=pause_point".into());
            }
            return Ok(());
        }
        let planned = self.plan(job, stage);
        let tasks = match planned {
            Ok(t) => t,
            Err(e) => return self.fail_job(job, &e.to_string()),
        };
        let n = tasks.len() as u32;
        let rec = self.job_mut(job)?;
        rec.stages[stage as usize] = Some(StageState {
            tasks: tasks
                .into_iter()
                .map(|p| TaskState {
                    payload: Arc::new(p),
                    attempts: 0,
                    invoked_at: None,
                    in_flight: 0,
                    queued: true,
                    completed: false,
                })
                .collect(),
            completed: 0,
            fired_next: false,
        });
        self.scheduler.enqueue(job, stage, 0..n)?;
        self.sim
            .note(TraceEvent::StageFired, job, Some(stage), None, format!("tasks={n}"));
        Ok(())
    }

    fn plan(&self, job: &str, stage: u32) -> Result<Vec<TaskPayload>> {
        let rec = &self.jobs[job];
        let inputs = plan::stage_inputs(&self.store, job, stage, &rec.request.input_key);
        let tasks = plan::plan_stage(
            self.env(),
            &rec.request.pipeline,
            job,
            stage,
            &inputs,
            rec.request.split_overrides.get(&stage).copied(),
        )?;
        let cap = self.config.cluster.disk_cap_mb * 1_000_000;
        if let Some(t) = tasks.iter().find(|t| t.input_bytes > cap) {
            return Err(OrchestratorError::DiskCapExceeded { bytes: t.input_bytes });
        }
        Ok(tasks)
    }

    fn fail_job(&mut self, job: &str, reason: &str) -> Result<()> {
        let now = self.now();
        let rec = self.job_mut(job)?;
        if rec.state.is_terminal() {
            return Ok(());
        }
        rec.state = JobState::Failed;
        rec.finished_at = Some(now);
        rec.error = Some(reason.to_string());
        let _ = self.scheduler.finish_job(job);
        self.log(LogEntry::job_event(
            job,
            LogEvent::JobFailed,
            now,
            json!({"reason": reason}),
        ))?;
        self.sim.note(
            TraceEvent::JobFailed,
            job,
            None,
            None,
            reason.replace(char::is_whitespace, "_"),
        );
        Ok(())
    }

    fn job_done(&mut self, job: &str) -> Result<()> {
        let now = self.now();
        let rec = self.job_mut(job)?;
        rec.state = JobState::Done;
        rec.finished_at = Some(now);
        let makespan = now - rec.submitted_at;
        let _ = self.scheduler.finish_job(job);
        self.log(LogEntry::job_event(
            job,
            LogEvent::JobDone,
            now,
            json!({"makespan_ms": makespan}),
        ))?;
        self.sim
            .note(TraceEvent::JobDone, job, None, None, format!("makespan_ms={makespan}"));
        Ok(())
    }

    /// Hands ready tasks to the platform, up to its free concurrency.
    fn dispatch(&mut self) -> Result<()> {
        let budget = self.sim.free_slots() as usize;
        if budget == 0 && self.config.scheduler != SchedulerPolicy::Priority {
            return Ok(());
        }
        let d = self.scheduler.dispatch(budget);
        let now = self.now();
        for job in &d.paused {
            self.log(LogEntry::job_event(
                job,
                LogEvent::Paused,
                now,
                json!({"reason": "priority"}),
            ))?;
            self.sim
                .note(TraceEvent::Paused, job, None, None, "reason=priority".into());
        }
        for job in &d.resumed {
            self.log(LogEntry::job_event(
                job,
                LogEvent::Resumed,
                now,
                json!({"reason": "priority"}),
            ))?;
            self.sim
                .note(TraceEvent::Resumed, job, None, None, "reason=priority".into());
        }
        for t in d.tasks {
            self.invoke(t)?;
        }
        Ok(())
    }

    fn invoke(&mut self, t: TaskRef) -> Result<()> {
        let now = self.now();
        let Some(rec) = self.jobs.get_mut(&t.job) else {
            return Ok(());
        };
        if rec.state.is_terminal() {
            return Ok(());
        }
        let memory = rec.request.pipeline.pipeline.stage_config(t.stage as usize).memory_size;
        let Some(ts) = rec
            .stages
            .get_mut(t.stage as usize)
            .and_then(Option::as_mut)
            .and_then(|st| st.tasks.get_mut(t.task as usize))
        else {
            return Err(OrchestratorError::Corrupt(format!("dispatched unknown task {t:?}")));
        };
        ts.queued = false;
        if ts.completed {
            return Ok(());
        }
        ts.attempts += 1;
        ts.invoked_at = Some(now);
        ts.in_flight += 1;
        let attempt = ts.attempts;
        let payload = ts.payload.clone();
        rec.in_flight += 1;
        rec.invocations += 1;
        if attempt > 1 {
            rec.respawns += 1;
        }
        if rec.state == JobState::Queued {
            rec.state = JobState::Running;
        }
        let event = if attempt == 1 {
            LogEvent::Invoked
        } else {
            LogEvent::Respawned
        };
        self.log(LogEntry::task_event(
            &t.job,
            t.stage,
            t.task,
            event,
            now,
            plan::payload_value(&payload, attempt),
        ))?;
        let duration = payload.duration_ms(&self.config.durations);
        self.sim.invoke(
            TaskTag::new(&t.job, t.stage, t.task),
            Invocation { task: t, payload },
            memory,
            duration,
        );
        Ok(())
    }

    fn on_finished(&mut self, inv: &Invocation, succeeded: bool) -> Result<()> {
        let t = &inv.task;
        let Some(rec) = self.jobs.get_mut(&t.job) else {
            return Ok(());
        };
        rec.in_flight = rec.in_flight.saturating_sub(1);
        if let Some(ts) = rec
            .stages
            .get_mut(t.stage as usize)
            .and_then(Option::as_mut)
            .and_then(|st| st.tasks.get_mut(t.task as usize))
        {
            ts.in_flight = ts.in_flight.saturating_sub(1);
        }
        if !succeeded || rec.state == JobState::Failed {
            return Ok(());
        }
        let key = &inv.payload.output;
        // first writer wins; a later attempt's work is discarded unexecuted
        if self.store.exists(key) {
            return Ok(());
        }
        match plan::execute(self.env(), &inv.payload) {
            Ok(bytes) => {
                let now = self.now();
                let size = bytes.len();
                match self.store.put(key, bytes, now) {
                    Ok(n) => {
                        *self.executions.entry(key.clone()).or_default() += 1;
                        self.sim.note(
                            TraceEvent::Write,
                            &t.job,
                            Some(t.stage),
                            Some(t.task),
                            format!("bytes={size}"),
                        );
                        let at = n.at + self.config.notification_latency_ms;
                        self.sim.schedule(at, n.key.clone(), Signal::Notify(n.key));
                        Ok(())
                    }
                    Err(StoreError::KeyExists(_)) => Ok(()),
                    Err(e) => Err(e.into()),
                }
            }
            Err(e) => self.fail_job(&t.job, &e.to_string()),
        }
    }

    /// Handles a write notification. Unknown keys and repeated deliveries
    /// are ignored.
    pub fn on_object_written(&mut self, key: &str) -> Result<()> {
        let Some((job, stage, ordinal, total)) = parse_output_key(key) else {
            return Ok(());
        };
        let now = self.now();
        let Some(rec) = self.jobs.get_mut(&job) else {
            return Ok(());
        };
        if rec.state.is_terminal() {
            return Ok(());
        }
        let Some(st) = rec.stages.get_mut(stage as usize).and_then(Option::as_mut) else {
            return Ok(());
        };
        if st.tasks.len() != total as usize || !self.store.exists(key) {
            return Ok(());
        }
        let ts = &mut st.tasks[ordinal as usize];
        if ts.completed {
            return Ok(());
        }
        ts.completed = true;
        st.completed += 1;
        let complete = st.is_complete();
        if !self
            .store
            .has_event(&job, Some(stage), Some(ordinal), LogEvent::Completed)
        {
            self.log(LogEntry::task_event(
                &job,
                stage,
                ordinal,
                LogEvent::Completed,
                now,
                json!({"output": key}),
            ))?;
        }
        self.sim
            .note(TraceEvent::Notify, &job, Some(stage), Some(ordinal), String::new());
        if complete {
            self.stage_complete(&job, stage)?;
        }
        Ok(())
    }

    fn stage_complete(&mut self, job: &str, stage: u32) -> Result<()> {
        let rec = self.job_mut(job)?;
        let last = stage as usize + 1 == rec.stages.len();
        let st = rec.stages[stage as usize].as_mut().expect("completed stage is planned");
        if st.fired_next {
            return Ok(());
        }
        st.fired_next = true;
        if last {
            self.job_done(job)
        } else {
            self.fire_stage(job, stage + 1)
        }
    }

    /// Re-enqueues every invoked task whose completion is overdue.
    pub fn monitor_tick(&mut self) -> Result<Vec<TaskRef>> {
        let mut respawn = Vec::new();
        if !self.config.fault_tolerance {
            return Ok(respawn);
        }
        let now = self.now();
        let mut exhausted = Vec::new();
        for (id, rec) in self.jobs.iter_mut() {
            if rec.state.is_terminal() {
                continue;
            }
            for (s, st) in rec.stages.iter_mut().enumerate() {
                let Some(st) = st else { continue };
                let timeout_ms = rec.request.pipeline.pipeline.stage_timeout(s) * 1000;
                for (i, ts) in st.tasks.iter_mut().enumerate() {
                    let overdue = ts.invoked_at.is_some_and(|t| now > t + timeout_ms);
                    if ts.completed || ts.queued || !overdue {
                        continue;
                    }
                    if ts.attempts >= self.config.max_attempts {
                        exhausted.push(id.clone());
                        continue;
                    }
                    ts.queued = true;
                    respawn.push(TaskRef::new(id, s as u32, i as u32));
                }
            }
        }
        for t in &respawn {
            if exhausted.contains(&t.job) {
                continue;
            }
            self.scheduler.enqueue(&t.job, t.stage, [t.task])?;
            self.sim
                .note(TraceEvent::Respawn, &t.job, Some(t.stage), Some(t.task), String::new());
        }
        exhausted.dedup();
        for job in exhausted {
            self.fail_job(&job, "task exceeded max_attempts")?;
        }
        Ok(respawn)
    }

    fn ensure_tick(&mut self) {
        if !self.config.fault_tolerance || self.tick_pending {
            return;
        }
        let active = self
            .jobs
            .values()
            .any(|j| !j.state.is_terminal() && j.has_pending_work());
        if active {
            self.tick_pending = true;
            let at = self.now() + self.config.monitor_interval_ms;
            self.sim.schedule(at, "~monitor", Signal::Tick);
        }
    }

    fn handle(&mut self, ev: SimEvent<Invocation, Signal>) -> Result<()> {
        match ev {
            SimEvent::Finished(inst) => self.on_finished(&inst.payload, inst.outcome.succeeded()),
            SimEvent::Signal(Signal::Notify(key)) => self.on_object_written(&key),
            SimEvent::Signal(Signal::Tick) => {
                self.tick_pending = false;
                self.monitor_tick()?;
                self.ensure_tick();
                Ok(())
            }
        }
    }

    /// Processes events up to virtual time `t`.
    pub fn run_until(&mut self, t: u64) -> Result<()> {
        self.dispatch()?;
        while let Some(ev) = self.sim.next_until(t) {
            self.handle(ev)?;
            self.dispatch()?;
        }
        Ok(())
    }

    /// Runs until no events remain. Jobs that are neither finished nor
    /// paused at that point can make no further progress and are failed.
    pub fn run(&mut self) -> Result<()> {
        self.dispatch()?;
        while let Some(ev) = self.sim.next() {
            self.handle(ev)?;
            self.dispatch()?;
        }
        let stuck: Vec<String> = self
            .jobs
            .iter()
            .filter(|(_, j)| matches!(j.state, JobState::Queued | JobState::Running))
            .map(|(id, _)| id.clone())
            .collect();
        for job in stuck {
            self.fail_job(&job, "stalled: tasks never completed")?;
        }
        Ok(())
    }

    /// Jobs with at least one function in flight.
    pub fn running_jobs(&self) -> usize {
        self.jobs
            .values()
            .filter(|j| !j.state.is_terminal() && j.in_flight > 0)
            .count()
    }

    /// Unfinished jobs with nothing in flight.
    pub fn pending_jobs(&self) -> usize {
        self.jobs
            .values()
            .filter(|j| !j.state.is_terminal() && j.in_flight == 0)
            .count()
    }

    pub fn progress(&self) -> BTreeMap<String, JobProgress> {
        self.jobs
            .iter()
            .map(|(id, j)| {
                (
                    id.clone(),
                    JobProgress {
                        state: j.state,
                        completed: j.stages.iter().map(|s| s.as_ref().map(|s| s.completed)).collect(),
                    },
                )
            })
            .collect()
    }

    /// Output keys of the job's last stage, in ordinal order.
    pub fn final_outputs(&self, job: &str) -> Vec<String> {
        match self.jobs.get(job) {
            Some(j) => self.store.list(&plan::stage_prefix(job, j.stages.len() as u32 - 1)),
            None => Vec::new(),
        }
    }

    pub fn summary(&self, job: &str) -> Option<JobSummary> {
        let j = self.jobs.get(job)?;
        let timeline = stage_timeline(self.sim.trace(), job);
        Some(JobSummary {
            job_id: job.to_string(),
            state: j.state,
            submitted_ms: j.submitted_at,
            makespan_ms: match j.state {
                JobState::Done => j.finished_at.map(|f| f - j.submitted_at),
                _ => None,
            },
            tasks: j.stages.iter().flatten().map(|s| s.tasks.len()).sum(),
            invocations: j.invocations,
            respawns: j.respawns,
            cost: self.sim.cost(Some(job)),
            seed: self.config.cluster.rng_seed,
            error: j.error.clone(),
            stages: j
                .stages
                .iter()
                .enumerate()
                .map(|(s, st)| StageSummary {
                    stage: s as u32,
                    kind: j.request.pipeline.stage(s).kind,
                    tasks: st.as_ref().map_or(0, |st| st.tasks.len()),
                    lambdas: timeline.get(&(s as u32)).cloned().unwrap_or_default(),
                })
                .collect(),
        })
    }

    pub fn summaries(&self) -> Vec<JobSummary> {
        self.jobs.keys().filter_map(|j| self.summary(j)).collect()
    }

    /// Builds a controller from the persisted log of a store whose previous
    /// controller stopped. Tasks in flight at the crash are re-invoked;
    /// outputs written without a logged completion are adopted.
    pub fn recover(config: RuntimeConfig, store: Arc<ObjectStore>) -> Result<Self> {
        let start = store.last_log_time();
        let mut rt = Runtime::starting_at(config, store, start)?;
        rt.restore()?;
        Ok(rt)
    }

    /// Like [`Runtime::recover`], with custom registries.
    pub fn recover_with(
        config: RuntimeConfig,
        store: Arc<ObjectStore>,
        formats: FormatRegistry,
        kernels: KernelRegistry,
    ) -> Result<Self> {
        let start = store.last_log_time();
        let mut rt = Runtime::starting_at(config, store, start)?.with_registries(formats, kernels);
        rt.restore()?;
        Ok(rt)
    }

    fn restore(&mut self) -> Result<()> {
        let log = self.store.log();
        let mut attempts: BTreeMap<(String, u32, u32), (u32, u64)> = BTreeMap::new();
        for e in &log {
            match e.event {
                LogEvent::Submitted => {
                    let req: JobRequest = serde_json::from_value(e.payload.clone())
                        .map_err(|err| OrchestratorError::Corrupt(format!("submission of {}: {err}", e.job)))?;
                    if let Some(n) = job_number(&e.job) {
                        self.next_job = self.next_job.max(n + 1);
                    }
                    self.jobs.insert(e.job.clone(), JobRecord::new(req, e.at));
                }
                LogEvent::Invoked | LogEvent::Respawned => {
                    if let (Some(s), Some(t)) = (e.stage, e.task) {
                        let a = attempts.entry((e.job.clone(), s, t)).or_default();
                        a.0 += 1;
                        a.1 = e.at;
                    }
                    if let Some(j) = self.jobs.get_mut(&e.job) {
                        j.invocations += 1;
                        if e.event == LogEvent::Respawned {
                            j.respawns += 1;
                        }
                        if j.state == JobState::Queued {
                            j.state = JobState::Running;
                        }
                    }
                }
                LogEvent::Paused | LogEvent::Resumed => {
                    let user = e.payload.get("reason").and_then(Value::as_str) == Some("user");
                    if let (true, Some(j)) = (user, self.jobs.get_mut(&e.job)) {
                        if e.event == LogEvent::Paused {
                            j.state = JobState::Paused;
                            j.request.pause_at = e.payload.get("at_stage").and_then(Value::as_u64).map(|s| s as u32);
                        } else {
                            j.state = JobState::Running;
                            j.request.pause_at = None;
                        }
                    }
                }
                LogEvent::JobDone | LogEvent::JobFailed => {
                    if let Some(j) = self.jobs.get_mut(&e.job) {
                        j.state = if e.event == LogEvent::JobDone {
                            JobState::Done
                        } else {
                            JobState::Failed
                        };
                        j.finished_at = Some(e.at);
                        j.error = e.payload.get("reason").and_then(Value::as_str).map(str::to_string);
                    }
                }
                LogEvent::Completed => {}
            }
        }
        let ids: Vec<String> = self.jobs.keys().cloned().collect();
        for id in ids {
            if self.jobs[&id].state.is_terminal() {
                continue;
            }
            let (priority, pause_at) = {
                let j = &self.jobs[&id];
                (j.request.priority, j.request.pause_at)
            };
            self.scheduler.register(&id, priority)?;
            if let Some(p) = pause_at {
                self.scheduler.set_hold(&id, Hold::AfterStage(p))?;
            }
            self.rebuild_job(&id, &attempts)?;
        }
        self.ensure_tick();
        Ok(())
    }

    fn rebuild_job(&mut self, id: &str, attempts: &BTreeMap<(String, u32, u32), (u32, u64)>) -> Result<()> {
        let n = self.jobs[id].stages.len() as u32;
        for s in 0..n {
            if !self.jobs[id].stage_allowed(s) {
                self.job_mut(id)?.blocked = true;
                return Ok(());
            }
            let tasks = match self.plan(id, s) {
                Ok(t) => t,
                Err(e) => return self.fail_job(id, &e.to_string()),
            };
            let mut states = Vec::with_capacity(tasks.len());
            let mut completed = 0;
            for (i, p) in tasks.into_iter().enumerate() {
                let (att, at) = attempts.get(&(id.to_string(), s, i as u32)).copied().unwrap_or((0, 0));
                let logged = self.store.has_event(id, Some(s), Some(i as u32), LogEvent::Completed);
                let written = self.store.exists(&p.output);
                let done = logged || (written && att > 0);
                if written && !logged && att > 0 {
                    let now = self.now();
                    self.log(LogEntry::task_event(
                        id,
                        s,
                        i as u32,
                        LogEvent::Completed,
                        now,
                        json!({"output": p.output, "recovered": true}),
                    ))?;
                }
                completed += usize::from(done);
                states.push(TaskState {
                    payload: Arc::new(p),
                    attempts: att,
                    invoked_at: (att > 0).then_some(at),
                    in_flight: 0,
                    queued: !done,
                    completed: done,
                });
            }
            let pending: Vec<u32> = states
                .iter()
                .enumerate()
                .filter(|(_, t)| !t.completed)
                .map(|(i, _)| i as u32)
                .collect();
            let complete = pending.is_empty();
            self.job_mut(id)?.stages[s as usize] = Some(StageState {
                tasks: states,
                completed,
                fired_next: complete,
            });
            if !complete {
                self.scheduler.enqueue(id, s, pending)?;
                return Ok(());
            }
        }
        self.job_done(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{compile, FunctionConfig, PipelineSpec, StageSpec};

    fn pipeline(stages: Vec<StageSpec>, timeout: u64) -> CompiledPipeline {
        let mut spec = PipelineSpec::new("t", "store://t", "store://l", timeout, FunctionConfig::default())
            .unwrap()
            .input("new_line");
        for s in stages {
            spec = spec.add_stage(s).unwrap();
        }
        compile(&spec).unwrap().0
    }

    fn lines(n: usize) -> Vec<u8> {
        (0..n)
            .flat_map(|i| format!("chr1\t{}\t{}\n", (i * 37) % 101, i).into_bytes())
            .collect()
    }

    fn runtime(config: RuntimeConfig) -> Runtime {
        let store = Arc::new(ObjectStore::memory());
        store.put("in/data", lines(300), 0).unwrap();
        Runtime::new(config, store).unwrap()
    }

    #[test]
    fn three_stage_job_completes() {
        let mut rt = runtime(RuntimeConfig::default());
        let p = pipeline(
            vec![
                StageSpec::split(Some(1000)),
                StageSpec::run("identity"),
                StageSpec::combine(None),
            ],
            60,
        );
        let id = rt.submit(JobRequest::new(p, "in/data")).unwrap();
        rt.run().unwrap();
        assert_eq!(rt.job_state(&id), Some(JobState::Done));
        let out = rt.final_outputs(&id);
        assert_eq!(out.len(), 1);
        assert_eq!(*rt.store().get(&out[0]).unwrap(), lines(300));
        let s = rt.summary(&id).unwrap();
        assert_eq!(s.respawns, 0);
        assert_eq!(s.stages[0].tasks, s.stages[1].tasks);
        assert!(rt.executions().values().all(|c| *c == 1));
        let log = rt.store().query_log(&id, None);
        assert_eq!(log.first().unwrap().event, LogEvent::Submitted);
        assert_eq!(log.last().unwrap().event, LogEvent::JobDone);
    }

    #[test]
    fn missing_input_is_rejected() {
        let mut rt = runtime(RuntimeConfig::default());
        let p = pipeline(vec![StageSpec::run("identity")], 60);
        assert!(matches!(
            rt.submit(JobRequest::new(p, "in/none")),
            Err(OrchestratorError::InputMissing(_))
        ));
    }

    #[test]
    fn barrier_waits_for_every_chunk_and_dedups_notifications() {
        let mut rt = runtime(RuntimeConfig::default());
        let p = pipeline(vec![StageSpec::split(Some(1000)), StageSpec::combine(None)], 60);
        let id = rt.submit(JobRequest::new(p, "in/data")).unwrap();
        let n = rt.jobs[&id].stages[0].as_ref().unwrap().tasks.len();
        assert!(n >= 3);
        // step event by event: the next stage appears only once every chunk is in
        rt.run_until(0).unwrap();
        while rt.jobs[&id].stages[1].is_none() {
            let written = rt.store().list(&plan::stage_prefix(&id, 0)).len();
            assert!(written < n || rt.progress()[&id].completed[0] < Some(n));
            let t = rt.sim.peek_time().unwrap();
            rt.run_until(t).unwrap();
        }
        let keys = rt.store().list(&plan::stage_prefix(&id, 0));
        assert_eq!(keys.len(), n);
        assert_eq!(rt.progress()[&id].completed[0], Some(n));
        assert!(rt.jobs[&id].stages[1].is_some());
        // re-delivery of every key changes nothing
        for k in &keys {
            rt.on_object_written(k).unwrap();
        }
        assert_eq!(rt.scheduler.ready_for(&id), 0);
        rt.run().unwrap();
        assert_eq!(rt.job_state(&id), Some(JobState::Done));
        assert_eq!(rt.summary(&id).unwrap().invocations as usize, n + 1);
    }

    #[test]
    fn failed_task_is_respawned_after_stage_timeout() {
        let mut rt = runtime(RuntimeConfig {
            cluster: ClusterModel {
                failure_prob: 1.0,
                function_timeout_s: 120,
                ..Default::default()
            },
            max_attempts: 3,
            ..Default::default()
        });
        let p = pipeline(vec![StageSpec::run("identity").stage_timeout(60)], 60);
        let id = rt.submit(JobRequest::new(p, "in/data")).unwrap();
        rt.run().unwrap();
        assert_eq!(rt.job_state(&id), Some(JobState::Failed));
        let respawns: Vec<u64> = rt
            .store()
            .query_log(&id, Some(0))
            .into_iter()
            .filter(|e| e.event == LogEvent::Respawned)
            .map(|e| e.at)
            .collect();
        assert_eq!(respawns.len(), 2);
        // the monitor ticks every second; the first check past 60 s fires it
        assert_eq!(respawns[0], 61_000);
    }

    #[test]
    fn pause_blocks_later_stages_until_resume() {
        let mut rt = runtime(RuntimeConfig::default());
        let p = pipeline(
            vec![
                StageSpec::split(Some(1500)),
                StageSpec::run("toy_compress"),
                StageSpec::combine(None),
            ],
            60,
        );
        let id = rt.submit(JobRequest::new(p, "in/data").pause_at(0)).unwrap();
        rt.run().unwrap();
        assert_eq!(rt.job_state(&id), Some(JobState::Paused));
        assert!(rt.jobs[&id].stages[1].is_none());
        let stage0_runs: u32 = rt.executions().values().sum();
        assert!(matches!(rt.pause(&id, 0), Err(OrchestratorError::BadState { .. })));
        let paused_at = rt.now();
        rt.run_until(paused_at + 5000).unwrap();
        rt.resume(&id).unwrap();
        assert!(matches!(rt.resume(&id), Err(OrchestratorError::BadState { .. })));
        rt.run().unwrap();
        assert_eq!(rt.job_state(&id), Some(JobState::Done));
        let stage0_after = rt
            .executions()
            .iter()
            .filter(|(k, _)| k.starts_with(&plan::stage_prefix(&id, 0)))
            .map(|(_, c)| c)
            .sum::<u32>();
        assert_eq!(stage0_after, stage0_runs);
        for e in rt.store().query_log(&id, None) {
            if e.stage.is_some_and(|s| s > 0) {
                assert!(e.at >= paused_at + 5000);
            }
        }
    }

    #[test]
    fn fault_tolerance_off_fails_stuck_jobs() {
        let mut rt = runtime(RuntimeConfig {
            cluster: ClusterModel {
                failure_prob: 1.0,
                function_timeout_s: 30,
                ..Default::default()
            },
            fault_tolerance: false,
            ..Default::default()
        });
        let p = pipeline(vec![StageSpec::run("identity")], 10);
        let id = rt.submit(JobRequest::new(p, "in/data")).unwrap();
        rt.run().unwrap();
        assert_eq!(rt.job_state(&id), Some(JobState::Failed));
        assert_eq!(rt.summary(&id).unwrap().respawns, 0);
    }

    #[test]
    fn unknown_application_rejected_at_submit() {
        let mut rt = runtime(RuntimeConfig::default());
        let p = pipeline(vec![StageSpec::run("nope")], 60);
        assert!(matches!(
            rt.submit(JobRequest::new(p, "in/data")),
            Err(OrchestratorError::Kernel(KernelError::UnknownApplication(_)))
        ));
    }
}

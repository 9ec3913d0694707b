//! Cross-job ordering of ready tasks under the concurrency budget.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerPolicy {
    #[default]
    Fifo,
    RoundRobin,
    Priority,
}

impl SchedulerPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerPolicy::Fifo => "fifo",
            SchedulerPolicy::RoundRobin => "round_robin",
            SchedulerPolicy::Priority => "priority",
        }
    }
}

impl fmt::Display for SchedulerPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchedulerPolicy {
    type Err = SchedulerError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fifo" => Ok(SchedulerPolicy::Fifo),
            "round_robin" | "rr" => Ok(SchedulerPolicy::RoundRobin),
            "priority" => Ok(SchedulerPolicy::Priority),
            other => Err(SchedulerError::UnknownPolicy(other.to_string())),
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {0} is already registered")]
    DuplicateJob(String),
    #[error("unknown scheduler policy {0:?}")]
    UnknownPolicy(String),
}

pub type Result<T> = std::result::Result<T, SchedulerError>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskRef {
    pub job: String,
    pub stage: u32,
    pub task: u32,
}

impl TaskRef {
    pub fn new(job: &str, stage: u32, task: u32) -> Self {
        TaskRef {
            job: job.to_string(),
            stage,
            task,
        }
    }
}

/// Which of a job's tasks may not be dispatched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hold {
    #[default]
    None,
    /// Tasks of stages after the given one.
    AfterStage(u32),
    All,
}

impl Hold {
    fn blocks(self, stage: u32) -> bool {
        match self {
            Hold::None => false,
            Hold::AfterStage(s) => stage > s,
            Hold::All => true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JobQueue {
    seq: u64,
    priority: i64,
    ready: VecDeque<(u64, TaskRef)>,
    hold: Hold,
    /// Paused by the priority policy.
    preempted: bool,
    skips: u32,
}

impl JobQueue {
    fn eligible(&self) -> Option<usize> {
        if self.preempted {
            return None;
        }
        self.ready.iter().position(|(_, t)| !self.hold.blocks(t.stage))
    }

    fn take(&mut self) -> Option<TaskRef> {
        let i = self.eligible()?;
        self.ready.remove(i).map(|(_, t)| t)
    }
}

/// Result of one dispatch round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dispatch {
    pub tasks: Vec<TaskRef>,
    /// Jobs the priority policy paused in this round.
    pub paused: Vec<String>,
    /// Jobs the priority policy resumed in this round.
    pub resumed: Vec<String>,
}

/// Orders ready tasks across jobs. The whole state is serializable so a
/// standby controller can take it over.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scheduler {
    policy: SchedulerPolicy,
    /// With `Some(n)`, a job passed over in `n` consecutive rounds while
    /// eligible is served first in the next one.
    max_skips: Option<u32>,
    jobs: BTreeMap<String, JobQueue>,
    next_job_seq: u64,
    next_payload_seq: u64,
    /// Per priority class, the sequence number of the job served last.
    cursor: BTreeMap<i64, u64>,
}

impl Scheduler {
    pub fn new(policy: SchedulerPolicy) -> Self {
        Scheduler {
            policy,
            max_skips: None,
            jobs: BTreeMap::new(),
            next_job_seq: 0,
            next_payload_seq: 0,
            cursor: BTreeMap::new(),
        }
    }

    pub fn with_max_skips(mut self, max_skips: u32) -> Self {
        self.max_skips = Some(max_skips);
        self
    }

    pub fn policy(&self) -> SchedulerPolicy {
        self.policy
    }

    pub fn register(&mut self, job: &str, priority: i64) -> Result<()> {
        if self.jobs.contains_key(job) {
            return Err(SchedulerError::DuplicateJob(job.to_string()));
        }
        let seq = self.next_job_seq;
        self.next_job_seq += 1;
        self.jobs.insert(
            job.to_string(),
            JobQueue {
                seq,
                priority,
                ready: VecDeque::new(),
                hold: Hold::None,
                preempted: false,
                skips: 0,
            },
        );
        Ok(())
    }

    pub fn is_registered(&self, job: &str) -> bool {
        self.jobs.contains_key(job)
    }

    pub fn enqueue(&mut self, job: &str, stage: u32, tasks: impl IntoIterator<Item = u32>) -> Result<()> {
        let q = self
            .jobs
            .get_mut(job)
            .ok_or_else(|| SchedulerError::UnknownJob(job.to_string()))?;
        for task in tasks {
            q.ready
                .push_back((self.next_payload_seq, TaskRef::new(job, stage, task)));
            self.next_payload_seq += 1;
        }
        Ok(())
    }

    pub fn set_hold(&mut self, job: &str, hold: Hold) -> Result<()> {
        self.jobs
            .get_mut(job)
            .map(|q| q.hold = hold)
            .ok_or_else(|| SchedulerError::UnknownJob(job.to_string()))
    }

    /// Drops a job and its queued tasks.
    pub fn finish_job(&mut self, job: &str) -> Result<()> {
        self.jobs
            .remove(job)
            .map(|_| ())
            .ok_or_else(|| SchedulerError::UnknownJob(job.to_string()))
    }

    pub fn ready_count(&self) -> usize {
        self.jobs.values().map(|q| q.ready.len()).sum()
    }

    pub fn ready_for(&self, job: &str) -> usize {
        self.jobs.get(job).map_or(0, |q| q.ready.len())
    }

    pub fn is_preempted(&self, job: &str) -> bool {
        self.jobs.get(job).is_some_and(|q| q.preempted)
    }

    /// Jobs in submission order.
    fn by_seq(&self) -> Vec<(u64, String)> {
        let mut v: Vec<(u64, String)> = self.jobs.iter().map(|(j, q)| (q.seq, j.clone())).collect();
        v.sort();
        v
    }

    pub fn dispatch(&mut self, budget: usize) -> Dispatch {
        let mut out = Dispatch::default();
        if self.policy == SchedulerPolicy::Priority {
            self.release_preempted(&mut out);
        }
        let eligible_before: BTreeSet<String> = self
            .jobs
            .iter()
            .filter(|(_, q)| q.eligible().is_some())
            .map(|(j, _)| j.clone())
            .collect();
        let mut left = budget;
        if let Some(max) = self.max_skips {
            for (_, job) in self.by_seq() {
                if left == 0 {
                    break;
                }
                let q = self.jobs.get_mut(&job).expect("job listed");
                if q.skips >= max {
                    if let Some(t) = q.take() {
                        out.tasks.push(t);
                        left -= 1;
                    }
                }
            }
        }
        match self.policy {
            SchedulerPolicy::Fifo => {
                for (_, job) in self.by_seq() {
                    let q = self.jobs.get_mut(&job).expect("job listed");
                    while left > 0 {
                        match q.take() {
                            Some(t) => {
                                out.tasks.push(t);
                                left -= 1;
                            }
                            None => break,
                        }
                    }
                }
            }
            SchedulerPolicy::RoundRobin => {
                let jobs: Vec<String> = self.by_seq().into_iter().map(|(_, j)| j).collect();
                self.round_robin(0, &jobs, &mut left, &mut out.tasks);
            }
            SchedulerPolicy::Priority => {
                let mut classes: BTreeMap<i64, Vec<String>> = BTreeMap::new();
                for (_, job) in self.by_seq() {
                    classes.entry(self.jobs[&job].priority).or_default().push(job);
                }
                let mut starved_above: Option<i64> = None;
                for (class, jobs) in classes.iter().rev() {
                    if starved_above.is_some() {
                        break;
                    }
                    self.round_robin(*class, jobs, &mut left, &mut out.tasks);
                    if jobs.iter().any(|j| self.jobs[j].eligible().is_some()) {
                        starved_above = Some(*class);
                    }
                }
                if let Some(top) = starved_above {
                    for (_, job) in self.by_seq() {
                        let q = self.jobs.get_mut(&job).expect("job listed");
                        if q.priority < top && !q.preempted {
                            q.preempted = true;
                            out.paused.push(job);
                        }
                    }
                }
            }
        }
        if budget > 0 {
            let served: BTreeSet<&str> = out.tasks.iter().map(|t| t.job.as_str()).collect();
            for job in eligible_before {
                let q = self.jobs.get_mut(&job).expect("job listed");
                if served.contains(job.as_str()) {
                    q.skips = 0;
                } else if !q.preempted {
                    q.skips += 1;
                }
            }
        }
        out
    }

    /// One task per job per cycle, starting after the job served last in
    /// this class.
    fn round_robin(&mut self, class: i64, jobs: &[String], left: &mut usize, out: &mut Vec<TaskRef>) {
        if jobs.is_empty() {
            return;
        }
        let last = self.cursor.get(&class).copied();
        let start = match last {
            Some(seq) => jobs.iter().position(|j| self.jobs[j].seq > seq).unwrap_or(0),
            None => 0,
        };
        let n = jobs.len();
        let mut idle_streak = 0;
        let mut i = start;
        while *left > 0 && idle_streak < n {
            let job = &jobs[i % n];
            let q = self.jobs.get_mut(job).expect("job listed");
            match q.take() {
                Some(t) => {
                    out.push(t);
                    *left -= 1;
                    idle_streak = 0;
                    self.cursor.insert(class, q.seq);
                }
                None => idle_streak += 1,
            }
            i += 1;
        }
    }

    fn release_preempted(&mut self, out: &mut Dispatch) {
        let priorities: Vec<i64> = self.jobs.values().map(|q| q.priority).collect();
        for (_, job) in self.by_seq() {
            let q = self.jobs.get_mut(&job).expect("job listed");
            if q.preempted && !priorities.iter().any(|p| *p > q.priority) {
                q.preempted = false;
                out.resumed.push(job);
            }
        }
    }
}

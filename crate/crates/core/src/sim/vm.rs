//! VM cluster with threshold autoscaling, the comparison baseline for the
//! serverless platform.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VmBaselineModel {
    pub boot_latency_s: u64,
    /// Average CPU utilization over a period above which VMs are added.
    pub scale_up_threshold: f64,
    /// Average CPU utilization below which an idle VM is removed.
    pub scale_down_threshold: f64,
    pub evaluation_period_s: u64,
    pub vcpus_per_vm: u32,
    pub min_vms: u32,
    pub max_vms: u32,
    pub initial_vms: u32,
    /// VMs added per scale-up decision.
    pub scale_step: u32,
    pub cost_per_vm_hour: f64,
}

impl Default for VmBaselineModel {
    fn default() -> Self {
        VmBaselineModel {
            boot_latency_s: 30,
            scale_up_threshold: 0.70,
            scale_down_threshold: 0.30,
            evaluation_period_s: 300,
            vcpus_per_vm: 4,
            min_vms: 1,
            max_vms: 1000,
            initial_vms: 1,
            scale_step: 1,
            cost_per_vm_hour: 0.192,
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum VmModelError {
    #[error("invalid VM model: {0}")]
    Invalid(String),
}

impl VmBaselineModel {
    /// The same policy evaluated every 10 s.
    pub fn agile() -> Self {
        VmBaselineModel {
            evaluation_period_s: 10,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), VmModelError> {
        let bad = |m: &str| Err(VmModelError::Invalid(m.to_string()));
        let (up, down) = (self.scale_up_threshold, self.scale_down_threshold);
        if !(up > 0.0 && up < 1.0 && down > 0.0 && down < 1.0) {
            return bad("thresholds must lie in (0, 1)");
        }
        if up <= down {
            return bad("scale_up_threshold must exceed scale_down_threshold");
        }
        if self.evaluation_period_s == 0 || self.vcpus_per_vm == 0 || self.scale_step == 0 {
            return bad("period, vcpus_per_vm and scale_step must be > 0");
        }
        if self.min_vms == 0 || self.min_vms > self.max_vms {
            return bad("need 0 < min_vms <= max_vms");
        }
        if self.initial_vms < self.min_vms || self.initial_vms > self.max_vms {
            return bad("initial_vms must lie in [min_vms, max_vms]");
        }
        Ok(())
    }

    fn cost_per_ms(&self) -> f64 {
        self.cost_per_vm_hour / 3_600_000.0
    }
}

/// One job for the VM cluster: `vcpu_ms` of work spread over `width` vCPUs
/// of a single VM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmJob {
    pub id: String,
    pub arrival_ms: u64,
    pub vcpu_ms: u64,
    pub width: u32,
}

impl VmJob {
    pub fn duration_ms(&self) -> u64 {
        self.vcpu_ms.div_ceil(u64::from(self.width.max(1))).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmCompletion {
    pub id: String,
    pub arrival_ms: u64,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmSample {
    pub time_ms: u64,
    pub vms: u32,
    pub booting: u32,
    pub vcpus_in_use: u32,
    pub running_jobs: u32,
    pub pending_jobs: u32,
    pub cumulative_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmRun {
    pub completions: Vec<VmCompletion>,
    pub samples: Vec<VmSample>,
    pub end_ms: u64,
    pub total_cost: f64,
    pub max_vms: u32,
}

impl VmRun {
    pub fn mean_completion_ms(&self) -> f64 {
        if self.completions.is_empty() {
            return 0.0;
        }
        let sum: u64 = self.completions.iter().map(|c| c.end_ms - c.arrival_ms).sum();
        sum as f64 / self.completions.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    JobEnd { vm: usize, job: usize },
    BootDone(usize),
    Arrival(usize),
    Evaluate,
}

#[derive(Debug)]
struct Vm {
    created: u64,
    ready: bool,
    retired: Option<u64>,
    used: u32,
    jobs: u32,
}

struct Cluster<'a> {
    model: &'a VmBaselineModel,
    jobs: &'a [VmJob],
    now: u64,
    vms: Vec<Vm>,
    pending: VecDeque<usize>,
    starts: Vec<Option<u64>>,
    completions: Vec<VmCompletion>,
    heap: BinaryHeap<Reverse<(u64, Ev, u64)>>,
    seq: u64,
    busy_integral: u128,
    capacity_integral: u128,
    last_acc: u64,
    max_vms: u32,
}

impl Cluster<'_> {
    fn push(&mut self, at: u64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Reverse((at, ev, self.seq)));
    }

    fn live(&self) -> impl Iterator<Item = &Vm> {
        self.vms.iter().filter(|v| v.retired.is_none())
    }

    fn accumulate(&mut self, to: u64) {
        let dt = u128::from(to - self.last_acc);
        let (busy, cap) = self.live().filter(|v| v.ready).fold((0u128, 0u128), |(b, c), v| {
            (b + u128::from(v.used), c + u128::from(self.model.vcpus_per_vm))
        });
        self.busy_integral += busy * dt;
        self.capacity_integral += cap * dt;
        self.last_acc = to;
    }

    fn add_vm(&mut self, ready: bool) {
        let idx = self.vms.len();
        self.vms.push(Vm {
            created: self.now,
            ready,
            retired: None,
            used: 0,
            jobs: 0,
        });
        if !ready {
            self.push(self.now + self.model.boot_latency_s * 1000, Ev::BootDone(idx));
        }
        self.max_vms = self.max_vms.max(self.live().count() as u32);
    }

    fn dispatch(&mut self) {
        while let Some(&j) = self.pending.front() {
            let width = self.jobs[j].width.clamp(1, self.model.vcpus_per_vm);
            let cap = self.model.vcpus_per_vm;
            let Some(vm) = self
                .vms
                .iter()
                .position(|v| v.ready && v.retired.is_none() && cap - v.used >= width)
            else {
                break;
            };
            self.pending.pop_front();
            self.vms[vm].used += width;
            self.vms[vm].jobs += 1;
            self.starts[j] = Some(self.now);
            self.push(self.now + self.jobs[j].duration_ms(), Ev::JobEnd { vm, job: j });
        }
    }

    fn evaluate(&mut self) {
        let util = if self.capacity_integral == 0 {
            if self.pending.is_empty() {
                0.0
            } else {
                1.0
            }
        } else {
            self.busy_integral as f64 / self.capacity_integral as f64
        };
        self.busy_integral = 0;
        self.capacity_integral = 0;
        let live = self.live().count() as u32;
        if util > self.model.scale_up_threshold {
            let add = self.model.scale_step.min(self.model.max_vms.saturating_sub(live));
            for _ in 0..add {
                self.add_vm(false);
            }
        } else if util < self.model.scale_down_threshold && live > self.model.min_vms {
            if let Some(idx) = self
                .vms
                .iter()
                .rposition(|v| v.retired.is_none() && v.ready && v.jobs == 0)
            {
                self.vms[idx].retired = Some(self.now);
            }
        }
    }

    fn cost_at(&self, t: u64) -> f64 {
        let ms: u64 = self
            .vms
            .iter()
            .map(|v| v.retired.unwrap_or(t).min(t).saturating_sub(v.created))
            .sum();
        ms as f64 * self.model.cost_per_ms()
    }

    fn sample(&self, t: u64) -> VmSample {
        let live: Vec<&Vm> = self.live().collect();
        VmSample {
            time_ms: t,
            vms: live.iter().filter(|v| v.ready).count() as u32,
            booting: live.iter().filter(|v| !v.ready).count() as u32,
            vcpus_in_use: live.iter().map(|v| v.used).sum(),
            running_jobs: live.iter().map(|v| v.jobs).sum(),
            pending_jobs: self.pending.len() as u32,
            cumulative_cost: self.cost_at(t),
        }
    }

    fn settled(&self, arrived: usize) -> bool {
        arrived == self.jobs.len()
            && self.pending.is_empty()
            && self.live().all(|v| v.ready && v.jobs == 0)
            && self.live().count() as u32 <= self.model.min_vms
    }
}

/// Runs `jobs` on an autoscaled VM cluster, sampling state every
/// `sample_interval_ms` until at least `horizon_ms` and until the cluster has
/// drained to its floor.
pub fn vm_baseline_run(model: &VmBaselineModel, jobs: &[VmJob], sample_interval_ms: u64, horizon_ms: u64) -> VmRun {
    let mut c = Cluster {
        model,
        jobs,
        now: 0,
        vms: Vec::new(),
        pending: VecDeque::new(),
        starts: vec![None; jobs.len()],
        completions: Vec::new(),
        heap: BinaryHeap::new(),
        seq: 0,
        busy_integral: 0,
        capacity_integral: 0,
        last_acc: 0,
        max_vms: 0,
    };
    for _ in 0..model.initial_vms {
        c.add_vm(true);
    }
    for (i, j) in jobs.iter().enumerate() {
        c.push(j.arrival_ms, Ev::Arrival(i));
    }
    let period = model.evaluation_period_s * 1000;
    c.push(period, Ev::Evaluate);
    let interval = sample_interval_ms.max(1);
    let mut samples = Vec::new();
    let mut next_sample = 0u64;
    let mut arrived = 0usize;
    while let Some(Reverse((at, ev, _))) = c.heap.pop() {
        while next_sample < at {
            samples.push(c.sample(next_sample));
            next_sample += interval;
        }
        c.accumulate(at);
        c.now = at;
        match ev {
            Ev::Arrival(j) => {
                arrived += 1;
                c.pending.push_back(j);
            }
            Ev::JobEnd { vm, job } => {
                let width = jobs[job].width.clamp(1, model.vcpus_per_vm);
                c.vms[vm].used -= width;
                c.vms[vm].jobs -= 1;
                c.completions.push(VmCompletion {
                    id: jobs[job].id.clone(),
                    arrival_ms: jobs[job].arrival_ms,
                    start_ms: c.starts[job].unwrap_or(at),
                    end_ms: at,
                });
            }
            Ev::BootDone(vm) => c.vms[vm].ready = true,
            Ev::Evaluate => {
                c.evaluate();
                if !c.settled(arrived) {
                    c.push(at + period, Ev::Evaluate);
                }
            }
        }
        c.dispatch();
    }
    let end_ms = c.now;
    while next_sample <= end_ms.max(horizon_ms) {
        samples.push(c.sample(next_sample));
        next_sample += interval;
    }
    let total_cost = c.cost_at(end_ms.max(horizon_ms));
    let mut completions = c.completions;
    completions.sort_by(|a, b| (a.end_ms, &a.id).cmp(&(b.end_ms, &b.id)));
    VmRun {
        completions,
        samples,
        end_ms,
        total_cost,
        max_vms: c.max_vms,
    }
}

//! Workload runs on the serverless runtime, sampled per interval, with an
//! optional VM-cluster comparison over the same jobs.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use crate::catalog::SampleData;
use crate::config::RunConfig;
use crate::orchestrator::{JobRequest, JobState, JobSummary, OrchestratorError, Runtime};
use crate::pipeline::CompiledPipeline;
use crate::sim::trace::{job_totals, TraceEvent, TraceRecord};
use crate::sim::vm::{vm_baseline_run, VmJob, VmRun};
use crate::store::ObjectStore;
use crate::workload::WorkloadSpec;

/// Stop sampling this long after the last arrival even if jobs remain.
const HORIZON_MS: u64 = 24 * 3600 * 1000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub time_ms: u64,
    pub vcpus_in_use: u32,
    pub running_functions: u32,
    pub running_jobs: u32,
    pub pending_jobs: u32,
    pub cumulative_cost: f64,
    pub accrued_mb_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobRecord {
    pub job_id: String,
    pub arrival_ms: u64,
    pub completion_ms: Option<u64>,
    pub state: JobState,
    pub tasks: usize,
    pub invocations: u32,
    pub respawns: u32,
    pub cost: f64,
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub seed: u64,
    pub samples: Vec<Sample>,
    pub jobs: Vec<JobRecord>,
    pub summaries: Vec<JobSummary>,
    pub trace: Vec<TraceRecord>,
    pub total_cost: f64,
    pub max_running: u32,
    pub vm: Option<VmRun>,
}

impl BenchResult {
    pub fn done(&self) -> usize {
        self.jobs.iter().filter(|j| j.state == JobState::Done).count()
    }

    /// Mean arrival-to-completion time of finished jobs.
    pub fn mean_completion_ms(&self) -> f64 {
        let done: Vec<u64> = self
            .jobs
            .iter()
            .filter_map(|j| j.completion_ms.map(|c| c - j.arrival_ms))
            .collect();
        if done.is_empty() {
            return 0.0;
        }
        done.iter().sum::<u64>() as f64 / done.len() as f64
    }

    /// Per-interval CSV for the serverless run and, if present, the VM run.
    pub fn write_samples_csv(&self, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "system",
            "time_ms",
            "vcpus_in_use",
            "running_jobs",
            "pending_jobs",
            "cumulative_cost",
        ])?;
        for s in &self.samples {
            w.write_record([
                "serverless".to_string(),
                s.time_ms.to_string(),
                s.vcpus_in_use.to_string(),
                s.running_jobs.to_string(),
                s.pending_jobs.to_string(),
                format!("{:.9}", s.cumulative_cost),
            ])?;
        }
        if let Some(vm) = &self.vm {
            for s in &vm.samples {
                w.write_record([
                    "vm".to_string(),
                    s.time_ms.to_string(),
                    s.vcpus_in_use.to_string(),
                    s.running_jobs.to_string(),
                    s.pending_jobs.to_string(),
                    format!("{:.9}", s.cumulative_cost),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_jobs_csv(&self, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for j in &self.jobs {
            w.serialize(j)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Recomputes per-job invocation counts and billed MB·ms from the trace
    /// and compares them with the runtime's own accounting.
    pub fn check_against_trace(&self, mb_ms_of: impl Fn(&str) -> u128) -> Result<(), String> {
        let totals = job_totals(&self.trace);
        for s in &self.summaries {
            let t = totals.get(&s.job_id).cloned().unwrap_or_default();
            if t.invocations != u64::from(s.invocations) {
                return Err(format!(
                    "{}: trace has {} invocations, summary {}",
                    s.job_id, t.invocations, s.invocations
                ));
            }
            if t.billed_mb_ms != mb_ms_of(&s.job_id) {
                return Err(format!(
                    "{}: trace bills {} MB·ms, ledger {}",
                    s.job_id,
                    t.billed_mb_ms,
                    mb_ms_of(&s.job_id)
                ));
            }
        }
        Ok(())
    }
}

/// Supplies input data for the `i`th job.
pub type InputFn<'a> = dyn Fn(usize) -> SampleData + 'a;

/// Runs `workload` with `pipeline`; jobs are submitted at their arrival
/// times, each with its own input object.
pub fn run_bench(
    config: &RunConfig,
    workload: &WorkloadSpec,
    pipeline: &CompiledPipeline,
    inputs: &InputFn<'_>,
    with_vm: bool,
) -> Result<(BenchResult, Runtime), OrchestratorError> {
    let store = Arc::new(ObjectStore::memory());
    let mut rt = Runtime::new(config.runtime(), store.clone())?;
    let arrivals = workload.arrivals.times_ms();
    let interval = config.sample_interval_ms;
    let mut samples = Vec::new();
    let mut arrival_of = BTreeMap::new();
    let mut next = 0usize;
    let mut tick = 0u64;
    let mut side_loaded = false;
    let horizon = arrivals.last().copied().unwrap_or(0) + HORIZON_MS;
    loop {
        let all_in = next == arrivals.len();
        if all_in && rt.sim().is_idle() {
            break;
        }
        if tick > horizon {
            log::warn!("bench horizon reached with work outstanding");
            break;
        }
        if !all_in && arrivals[next] <= tick {
            let t = arrivals[next];
            rt.run_until(t)?;
            while next < arrivals.len() && arrivals[next] == t {
                let data = inputs(next);
                if !side_loaded {
                    for (k, v) in &data.objects {
                        store.put(k, v.clone(), t)?;
                    }
                    side_loaded = true;
                }
                let key = format!("inputs/{next:05}");
                store.put(&key, data.input, t)?;
                let req = JobRequest::new(pipeline.clone(), &key)
                    .goal(workload.template.goal.clone())
                    .priority(workload.template.priority);
                let id = rt.submit(req)?;
                arrival_of.insert(id, t);
                next += 1;
            }
            // sampled before dispatch so arrivals show as pending
            if tick == t {
                samples.push(sample(&rt, tick));
                tick += interval;
            }
            continue;
        }
        rt.run_until(tick)?;
        samples.push(sample(&rt, tick));
        tick += interval;
    }
    rt.run()?;
    let end = rt.now();
    if samples.last().is_none_or(|s| s.time_ms < end) {
        samples.push(sample(&rt, end));
    }
    let trace = rt.trace().to_vec();
    let summaries = rt.summaries();
    let jobs = summaries
        .iter()
        .map(|s| JobRecord {
            job_id: s.job_id.clone(),
            arrival_ms: arrival_of[&s.job_id],
            completion_ms: s.makespan_ms.map(|m| s.submitted_ms + m),
            state: s.state,
            tasks: s.tasks,
            invocations: s.invocations,
            respawns: s.respawns,
            cost: s.cost,
        })
        .collect::<Vec<_>>();
    let vm = with_vm.then(|| {
        let vm_jobs = vm_jobs(
            &trace,
            &jobs,
            config.cluster.vcpus_per_function,
            config.vm_baseline.vcpus_per_vm,
        );
        vm_baseline_run(&config.vm_baseline, &vm_jobs, interval, horizon)
    });
    let result = BenchResult {
        seed: config.effective_seed(),
        total_cost: rt.sim().cost(None),
        max_running: rt.sim().max_admitted(),
        samples,
        jobs,
        summaries,
        trace,
        vm,
    };
    Ok((result, rt))
}

fn sample(rt: &Runtime, t: u64) -> Sample {
    let sim = rt.sim();
    let accrued = sim.accrued_mb_ms();
    Sample {
        time_ms: t,
        vcpus_in_use: sim.running_vcpus(),
        running_functions: sim.running_count(),
        running_jobs: rt.running_jobs() as u32,
        pending_jobs: rt.pending_jobs() as u32,
        cumulative_cost: sim.model().cost_of(accrued),
        accrued_mb_ms: accrued,
    }
}

/// The same jobs for the VM cluster: each needs the vCPU time its functions
/// were billed for, run on one VM.
pub fn vm_jobs(trace: &[TraceRecord], jobs: &[JobRecord], vcpus_per_function: u32, vcpus_per_vm: u32) -> Vec<VmJob> {
    let mut billed: BTreeMap<&str, u64> = BTreeMap::new();
    for r in trace.iter().filter(|r| r.event == TraceEvent::Finish) {
        let ms: u64 = r.detail_field("billed_ms").and_then(|v| v.parse().ok()).unwrap_or(0);
        *billed.entry(r.job.as_str()).or_default() += ms;
    }
    jobs.iter()
        .map(|j| VmJob {
            id: j.job_id.clone(),
            arrival_ms: j.arrival_ms,
            vcpu_ms: billed.get(j.job_id.as_str()).copied().unwrap_or(0) * u64::from(vcpus_per_function),
            width: vcpus_per_vm,
        })
        .collect()
}

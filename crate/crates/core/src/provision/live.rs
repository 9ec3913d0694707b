//! Provisioning real pipelines: canary runs on the simulated runtime over a
//! prefix of the input.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{extrapolate, fingerprint, ledger_cost, median, Choice, Column, PhaseMeasure, Provisioner};
use crate::format::FormatRegistry;
use crate::orchestrator::{Goal, JobRequest, JobState, OrchestratorError, Runtime, RuntimeConfig};
use crate::pipeline::CompiledPipeline;
use crate::primitives::split_ranges;
use crate::store::{LogEvent, ObjectStore};

#[derive(Debug, thiserror::Error)]
pub enum LiveError {
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Provision(#[from] super::ProvisionError),
    #[error("canary run at {column} did not finish: {reason}")]
    CanaryFailed { column: String, reason: String },
}

/// Indices of the stages a column's splits apply to.
pub fn sizable_stages(pipeline: &CompiledPipeline) -> Vec<u32> {
    (0..pipeline.stage_count())
        .filter(|i| pipeline.stage(*i).kind.is_sizable())
        .map(|i| i as u32)
        .collect()
}

/// Split overrides for a job request.
pub fn overrides(pipeline: &CompiledPipeline, column: &Column) -> BTreeMap<u32, u64> {
    sizable_stages(pipeline)
        .into_iter()
        .zip(column.splits.iter().copied().cycle())
        .collect()
}

/// Estimated task count per stage at `column` for `bytes` of input.
fn stage_tasks(pipeline: &CompiledPipeline, column: &Column, bytes: u64) -> Vec<u64> {
    let ov = overrides(pipeline, column);
    let mut prev = 1u64;
    (0..pipeline.stage_count())
        .map(|i| {
            let kind = pipeline.stage(i).kind;
            prev = if let Some(s) = ov.get(&(i as u32)) {
                bytes.div_ceil(*s).max(1)
            } else if kind.is_fan_in() {
                1
            } else {
                prev
            };
            prev
        })
        .collect()
}

/// A canary-sized prefix of `input` that ends on an item boundary.
pub fn canary_prefix<'a>(
    pipeline: &CompiledPipeline,
    formats: &FormatRegistry,
    input: &'a [u8],
    limit: u64,
) -> Result<&'a [u8], OrchestratorError> {
    if input.len() as u64 <= limit {
        return Ok(input);
    }
    let fmt = formats.get(pipeline.input_format())?;
    let ranges = split_ranges(input, fmt.as_ref(), limit)?;
    Ok(&input[..ranges[0].end])
}

/// Measured wall time per stage of one job, from its execution log.
fn stage_measures(rt: &Runtime, job: &str, pipeline: &CompiledPipeline) -> Vec<PhaseMeasure> {
    let store = rt.store();
    (0..pipeline.stage_count())
        .map(|i| {
            let log = store.query_log(job, Some(i as u32));
            let start = log
                .iter()
                .filter(|e| e.event == LogEvent::Invoked)
                .map(|e| e.at)
                .min()
                .unwrap_or(0);
            let end = log
                .iter()
                .filter(|e| e.event == LogEvent::Completed)
                .map(|e| e.at)
                .max()
                .unwrap_or(start);
            let tasks = log.iter().filter(|e| e.event == LogEvent::Invoked).count() as u64;
            // first completion of each task against its latest prior dispatch
            let mut invoked: BTreeMap<u32, u64> = BTreeMap::new();
            let mut task_ms = Vec::new();
            let mut seen = std::collections::BTreeSet::new();
            for e in &log {
                let Some(t) = e.task else { continue };
                match e.event {
                    LogEvent::Invoked => {
                        invoked.insert(t, e.at);
                    }
                    LogEvent::Completed if seen.insert(t) => {
                        if let Some(at) = invoked.get(&t) {
                            task_ms.push(e.at.saturating_sub(*at) as f64);
                        }
                    }
                    _ => {}
                }
            }
            PhaseMeasure {
                duration_s: (end - start) as f64 / 1000.0,
                tasks,
                task_s: median(&mut task_ms) / 1000.0,
                fan_in: pipeline.stage(i).kind.is_fan_in(),
            }
        })
        .collect()
}

/// Runs `pipeline` over `input` at `column` on a fresh runtime.
pub fn trial_run(
    config: &RuntimeConfig,
    pipeline: &CompiledPipeline,
    input: &[u8],
    objects: &[(String, Vec<u8>)],
    column: &Column,
) -> Result<(Runtime, String), OrchestratorError> {
    let store = Arc::new(ObjectStore::memory());
    store.put("canary/input", input.to_vec(), 0)?;
    for (k, v) in objects {
        store.put(k, v.clone(), 0)?;
    }
    let mut rt = Runtime::new(config.clone(), store)?;
    let mut req = JobRequest::new(pipeline.clone(), "canary/input");
    req.split_overrides = overrides(pipeline, column);
    let id = rt.submit(req)?;
    rt.run()?;
    Ok((rt, id))
}

/// Canary runs for a new row, then a choice for `goal`. Returns the choice
/// and the row it was made for.
pub fn provision_job(
    prov: &mut Provisioner,
    config: &RuntimeConfig,
    pipeline: &CompiledPipeline,
    input: &[u8],
    objects: &[(String, Vec<u8>)],
    goal: &Goal,
) -> Result<(Choice, String), LiveError> {
    let full = input.len() as u64;
    let row = fingerprint(&pipeline.pipeline.name, full);
    let phases = sizable_stages(pipeline).len();
    if !prov.table.has_row(&row) {
        let plan = prov.plan_canary(full, phases);
        let prefix = canary_prefix(pipeline, &FormatRegistry::default(), input, plan.canary_bytes)?;
        let ratio = full as f64 / prefix.len().max(1) as f64;
        for column in &plan.configs {
            let (rt, job) = trial_run(config, pipeline, prefix, objects, column)?;
            if rt.job_state(&job) != Some(JobState::Done) {
                return Err(LiveError::CanaryFailed {
                    column: column.to_string(),
                    reason: rt.summary(&job).and_then(|s| s.error).unwrap_or_default(),
                });
            }
            let measures = stage_measures(&rt, &job, pipeline);
            let est = extrapolate(&measures, &stage_tasks(pipeline, column, full), ratio, prov.max_lambdas);
            prov.record(&row, column, est.max(1e-3))?;
        }
    }
    let memory = pipeline.pipeline.stage_config(0).memory_size;
    let cols = prov.columns(full, phases);
    let choice = prov.choose(&row, &cols, goal, |c, t| {
        ledger_cost(&config.cluster, memory, t, stage_tasks(pipeline, c, full).iter().sum())
    })?;
    Ok((choice, row))
}

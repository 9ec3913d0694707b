//! Serial, in-process execution of a pipeline for debugging kernels. Uses the
//! same planner and executor as the simulated runtime, without timing,
//! failures or cost.

use super::plan::{self, Env};
use super::{OrchestratorError, Result};
use crate::format::FormatRegistry;
use crate::kernels::KernelRegistry;
use crate::pipeline::CompiledPipeline;
use crate::store::ObjectStore;

pub const LOCAL_JOB: &str = "local";
pub const LOCAL_INPUT_KEY: &str = "local/input";

#[derive(Debug, Clone, PartialEq)]
pub struct LocalRun {
    /// Task count per stage.
    pub tasks: Vec<usize>,
    /// Final stage outputs as (key, bytes), in ordinal order.
    pub outputs: Vec<(String, Vec<u8>)>,
}

impl LocalRun {
    /// All final outputs concatenated.
    pub fn joined(&self) -> Vec<u8> {
        self.outputs.iter().flat_map(|(_, b)| b.iter().copied()).collect()
    }
}

/// Runs `pipeline` over `input`. `objects` are preloaded into the scratch
/// store, e.g. the table a map stage reads.
pub fn run_local(
    pipeline: &CompiledPipeline,
    input: Vec<u8>,
    objects: &[(String, Vec<u8>)],
    formats: &FormatRegistry,
    kernels: &KernelRegistry,
) -> Result<LocalRun> {
    let store = ObjectStore::memory();
    store.put(LOCAL_INPUT_KEY, input, 0)?;
    for (k, v) in objects {
        store.put(k, v.clone(), 0)?;
    }
    let env = Env {
        store: &store,
        formats,
        kernels,
    };
    formats.get(pipeline.input_format())?;
    let mut tasks = Vec::new();
    for stage in 0..pipeline.stage_count() as u32 {
        let inputs = plan::stage_inputs(&store, LOCAL_JOB, stage, LOCAL_INPUT_KEY);
        let payloads = plan::plan_stage(env, pipeline, LOCAL_JOB, stage, &inputs, None)?;
        tasks.push(payloads.len());
        for p in &payloads {
            let bytes = plan::execute(env, p)?;
            store.put(&p.output, bytes, 0)?;
        }
    }
    let last = pipeline.stage_count() as u32 - 1;
    let mut outputs = Vec::new();
    for key in store.list(&plan::stage_prefix(LOCAL_JOB, last)) {
        let bytes = store.get(&key)?.to_vec();
        outputs.push((key, bytes));
    }
    if outputs.is_empty() {
        return Err(OrchestratorError::Corrupt("final stage produced no outputs".into()));
    }
    Ok(LocalRun { tasks, outputs })
}

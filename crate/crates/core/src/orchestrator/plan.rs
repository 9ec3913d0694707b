//! Turning a stage and its input objects into task payloads, and executing
//! a payload. Both are deterministic functions of the store contents, which
//! lets a restarted controller re-plan a stage and get the same tasks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{OrchestratorError, Result};
use crate::format::{extract_keys, Format, FormatRegistry, SortKey};
use crate::kernels::{DurationModel, KernelInput, KernelRegistry, Params};
use crate::pipeline::{CompiledPipeline, FindRule, StageKind};
use crate::primitives::{self, Binding, Chunk};
use crate::store::ObjectStore;

/// Key of output `ordinal` of `total` for a job stage.
pub fn output_key(job: &str, stage: u32, ordinal: u32, total: u32) -> String {
    format!("{job}/{stage:02}/{ordinal:05}-{total:05}/out")
}

/// Prefix under which a stage's outputs live.
pub fn stage_prefix(job: &str, stage: u32) -> String {
    format!("{job}/{stage:02}/")
}

/// Inverse of [`output_key`]: `(job, stage, ordinal, total)`.
pub fn parse_output_key(key: &str) -> Option<(String, u32, u32, u32)> {
    let mut parts = key.rsplitn(4, '/');
    if parts.next()? != "out" {
        return None;
    }
    let (ord, total) = parts.next()?.split_once('-')?;
    let stage = parts.next()?;
    let job = parts.next()?;
    if job.is_empty() || stage.len() < 2 || ord.len() < 5 || total.len() < 5 {
        return None;
    }
    let (stage, ordinal, total) = (stage.parse().ok()?, ord.parse().ok()?, total.parse().ok()?);
    (ordinal < total).then(|| (job.to_string(), stage, ordinal, total))
}

/// What a task does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TaskOp {
    SplitRange {
        input: String,
        start: u64,
        end: u64,
    },
    SortRange {
        inputs: Vec<String>,
        identifier: String,
        pivots: Vec<SortKey>,
        index: u32,
    },
    Combine {
        inputs: Vec<String>,
        identifier: Option<String>,
    },
    Top {
        inputs: Vec<String>,
        identifier: String,
        number: u64,
    },
    Match {
        inputs: Vec<String>,
        identifier: String,
        find: FindRule,
    },
    Partition {
        inputs: Vec<String>,
        identifier: String,
        n: u32,
    },
    MapBind {
        binding: Binding,
    },
    Run {
        input: String,
        /// The input is a binding document written by a `map` stage.
        bound: bool,
        application: String,
        params: Params,
    },
}

/// Everything needed to (re-)execute one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPayload {
    pub op: TaskOp,
    pub format: String,
    pub output: String,
    /// Name whose coefficients price this task in the duration model.
    pub cost_name: String,
    pub work_units: u64,
    pub input_bytes: u64,
}

impl TaskPayload {
    pub fn duration_ms(&self, model: &DurationModel) -> u64 {
        model.duration_ms(&self.cost_name, self.work_units)
    }
}

/// Read-only view used for planning and execution.
#[derive(Clone, Copy)]
pub struct Env<'a> {
    pub store: &'a ObjectStore,
    pub formats: &'a FormatRegistry,
    pub kernels: &'a KernelRegistry,
}

impl Env<'_> {
    fn read(&self, key: &str) -> Result<Vec<u8>> {
        Ok(self.store.get(key)?.to_vec())
    }

    fn read_all(&self, keys: &[String]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for k in keys {
            out.extend_from_slice(&self.store.get(k)?);
        }
        Ok(out)
    }

    fn size_of(&self, keys: &[String]) -> Result<u64> {
        keys.iter()
            .map(|k| self.store.size(k).map(|s| s as u64).map_err(Into::into))
            .sum()
    }

    fn format(&self, name: &str) -> Result<std::sync::Arc<dyn Format>> {
        Ok(self.formats.get(name)?)
    }

    fn kernel_input(&self, input: &str, bound: bool) -> Result<KernelInput> {
        if !bound {
            return Ok(KernelInput::Blob(self.read(input)?));
        }
        let doc = self.read(input)?;
        let binding: Binding =
            serde_json::from_slice(&doc).map_err(|e| OrchestratorError::Corrupt(format!("binding {input}: {e}")))?;
        let mut objects = BTreeMap::new();
        for (name, key) in binding {
            objects.insert(name, self.read(&key)?);
        }
        Ok(KernelInput::Bound(objects))
    }
}

/// Input objects of `stage`: the job input for stage 0, else every output
/// of the previous stage in ordinal order.
pub fn stage_inputs(store: &ObjectStore, job: &str, stage: u32, input_key: &str) -> Vec<String> {
    if stage == 0 {
        vec![input_key.to_string()]
    } else {
        store.list(&stage_prefix(job, stage - 1))
    }
}

fn str_arg(pipeline: &CompiledPipeline, stage: usize, name: &str) -> Result<String> {
    pipeline
        .stage(stage)
        .str_arg(name)
        .map(str::to_string)
        .ok_or_else(|| OrchestratorError::Corrupt(format!("stage {stage} lacks {name}")))
}

/// Plans the tasks of `stage`. Task `i` writes output ordinal `i`.
pub fn plan_stage(
    env: Env<'_>,
    pipeline: &CompiledPipeline,
    job: &str,
    stage: u32,
    inputs: &[String],
    split_override: Option<u64>,
) -> Result<Vec<TaskPayload>> {
    let idx = stage as usize;
    let spec = pipeline.stage(idx);
    let format_name = pipeline.input_format().to_string();
    let fmt = env.format(&format_name)?;
    let split_size = split_override.unwrap_or_else(|| spec.split_size());
    let kind = spec.kind;
    let mut ops: Vec<(TaskOp, u64, u64)> = Vec::new();
    match kind {
        StageKind::Split => {
            for input in inputs {
                let data = env.read(input)?;
                for r in primitives::split_ranges(&data, fmt.as_ref(), split_size)? {
                    let len = (r.end - r.start) as u64;
                    ops.push((
                        TaskOp::SplitRange {
                            input: input.clone(),
                            start: r.start as u64,
                            end: r.end as u64,
                        },
                        len,
                        len,
                    ));
                }
            }
        }
        StageKind::Sort => {
            let identifier = str_arg(pipeline, idx, "identifier")?;
            let data = env.read_all(inputs)?;
            let items = fmt.items(&data)?;
            let keys = extract_keys(fmt.as_ref(), &items, &identifier)?;
            let n = primitives::sort_chunk_count(data.len(), split_size);
            let pivots = primitives::sort_pivots(&keys, n);
            let mut range_bytes = vec![0u64; n];
            for (item, key) in items.iter().zip(&keys) {
                range_bytes[primitives::route(key, &pivots)] += item.len() as u64;
            }
            for (i, bytes) in range_bytes.into_iter().enumerate() {
                ops.push((
                    TaskOp::SortRange {
                        inputs: inputs.to_vec(),
                        identifier: identifier.clone(),
                        pivots: pivots.clone(),
                        index: i as u32,
                    },
                    bytes,
                    data.len() as u64,
                ));
            }
        }
        StageKind::Combine => {
            let bytes = env.size_of(inputs)?;
            let identifier = spec.str_arg("identifier").map(str::to_string);
            ops.push((
                TaskOp::Combine {
                    inputs: inputs.to_vec(),
                    identifier,
                },
                bytes,
                bytes,
            ));
        }
        StageKind::Top => {
            let bytes = env.size_of(inputs)?;
            let number = spec
                .u64_arg("number")
                .ok_or_else(|| OrchestratorError::Corrupt("top lacks number".into()))?;
            ops.push((
                TaskOp::Top {
                    inputs: inputs.to_vec(),
                    identifier: str_arg(pipeline, idx, "identifier")?,
                    number,
                },
                bytes,
                bytes,
            ));
        }
        StageKind::Match => {
            let bytes = env.size_of(inputs)?;
            let find = spec
                .find_rule()
                .ok_or_else(|| OrchestratorError::Corrupt("match lacks find".into()))?;
            ops.push((
                TaskOp::Match {
                    inputs: inputs.to_vec(),
                    identifier: str_arg(pipeline, idx, "identifier")?,
                    find,
                },
                bytes,
                bytes,
            ));
        }
        StageKind::Partition => {
            let bytes = env.size_of(inputs)?;
            ops.push((
                TaskOp::Partition {
                    inputs: inputs.to_vec(),
                    identifier: str_arg(pipeline, idx, "identifier")?,
                    n: inputs.len().max(1) as u32,
                },
                bytes,
                bytes,
            ));
        }
        StageKind::Map => {
            let table_prefix = str_arg(pipeline, idx, "map_table")?;
            let listing = env.store.list(&table_prefix);
            let table = if spec.bool_arg("directories").unwrap_or(false) {
                primitives::directories(&listing, &table_prefix)
            } else {
                listing
            };
            let bindings = primitives::map(
                inputs,
                &table,
                &str_arg(pipeline, idx, "input_key")?,
                &str_arg(pipeline, idx, "table_key")?,
            )?;
            for b in bindings {
                ops.push((TaskOp::MapBind { binding: b }, 0, 0));
            }
        }
        StageKind::Run => {
            let application = str_arg(pipeline, idx, "application")?;
            let kernel = env.kernels.get(&application)?;
            let bound = idx > 0 && pipeline.stage(idx - 1).kind == StageKind::Map;
            for input in inputs {
                let ki = env.kernel_input(input, bound)?;
                let units = kernel.work_units(&ki, &spec.params);
                ops.push((
                    TaskOp::Run {
                        input: input.clone(),
                        bound,
                        application: application.clone(),
                        params: spec.params.clone(),
                    },
                    units,
                    ki.total_bytes() as u64,
                ));
            }
        }
    }
    let total = ops.len() as u32;
    Ok(ops
        .into_iter()
        .enumerate()
        .map(|(i, (op, work_units, input_bytes))| {
            let cost_name = match &op {
                TaskOp::Run { application, .. } => application.clone(),
                _ => kind.as_str().to_string(),
            };
            TaskPayload {
                op,
                format: format_name.clone(),
                output: output_key(job, stage, i as u32, total),
                cost_name,
                work_units,
                input_bytes,
            }
        })
        .collect())
}

/// Runs a task's primitive or kernel and returns its output bytes.
pub fn execute(env: Env<'_>, payload: &TaskPayload) -> Result<Vec<u8>> {
    let fmt = env.format(&payload.format)?;
    let fmt = fmt.as_ref();
    Ok(match &payload.op {
        TaskOp::SplitRange { input, start, end } => {
            let data = env.store.get(input)?;
            data.get(*start as usize..*end as usize)
                .ok_or_else(|| OrchestratorError::Corrupt(format!("range {start}..{end} outside {input}")))?
                .to_vec()
        }
        TaskOp::SortRange {
            inputs,
            identifier,
            pivots,
            index,
        } => {
            let data = env.read_all(inputs)?;
            let items = fmt.items(&data)?;
            let keys = extract_keys(fmt, &items, identifier)?;
            primitives::sort_range(fmt, &items, &keys, pivots, *index as usize)
        }
        TaskOp::Combine { inputs, identifier } => {
            let total = inputs.len() as u32;
            let chunks = inputs
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    Ok(Chunk {
                        ordinal: i as u32,
                        total,
                        data: env.read(k)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            primitives::combine(&chunks, fmt, identifier.as_deref())?
        }
        TaskOp::Top {
            inputs,
            identifier,
            number,
        } => primitives::top(&env.read_all(inputs)?, fmt, identifier, *number)?,
        TaskOp::Match {
            inputs,
            identifier,
            find,
        } => {
            let blobs = inputs
                .iter()
                .map(|k| Ok((k.as_str(), env.read(k)?)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<(&str, &[u8])> = blobs.iter().map(|(k, d)| (*k, d.as_slice())).collect();
            let winner = primitives::match_chunks(&refs, fmt, identifier, *find)?;
            env.read(&winner)?
        }
        TaskOp::Partition { inputs, identifier, n } => {
            let ranges = primitives::partition(&env.read_all(inputs)?, fmt, identifier, *n as usize)?;
            serde_json::to_vec(&ranges).map_err(|e| OrchestratorError::Corrupt(e.to_string()))?
        }
        TaskOp::MapBind { binding } => {
            serde_json::to_vec(binding).map_err(|e| OrchestratorError::Corrupt(e.to_string()))?
        }
        TaskOp::Run {
            input,
            bound,
            application,
            params,
        } => {
            let kernel = env.kernels.get(application)?;
            kernel.run(&env.kernel_input(input, *bound)?, params)?
        }
    })
}

/// Payload as stored in the execution log.
pub fn payload_value(payload: &TaskPayload, attempt: u32) -> Value {
    let mut v = serde_json::to_value(payload).unwrap_or(Value::Null);
    if let Value::Object(m) = &mut v {
        m.insert("attempt".into(), Value::from(attempt));
    }
    v
}

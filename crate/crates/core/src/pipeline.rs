//! Declarative pipeline construction, validation and compilation.
//!
//! A [`PipelineSpec`] is a linear chain of [`StageSpec`]s. Compiling it
//! produces a [`CompiledPipeline`] together with its canonical JSON bytes
//! (sorted keys, no insignificant whitespace, `schema_version = 1`), and
//! [`load`] reads such bytes back.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Current compiled-document schema.
pub const SCHEMA_VERSION: u32 = 1;

/// Split size used when a stage does not give one (bytes).
pub const DEFAULT_SPLIT_SIZE: u64 = 1_000_000;

pub const MIN_MEMORY_MB: u32 = 128;
pub const MAX_MEMORY_MB: u32 = 3008;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum PipelineError {
    #[error("invalid uri: {0}")]
    InvalidUri(String),
    #[error("timeout must be positive")]
    InvalidTimeout,
    #[error("invalid pipeline name: {0:?}")]
    InvalidName(String),
    #[error("invalid function config: {0}")]
    InvalidConfig(String),
    #[error("unknown stage kind: {0}")]
    UnknownKind(String),
    #[error("missing parameter: {0}")]
    MissingParam(String),
    #[error("unknown parameter: {0}")]
    UnknownParam(String),
    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: String, reason: String },
    #[error("pipeline has no stages")]
    EmptyPipeline,
    #[error("pipeline has no input format")]
    NoInputFormat,
    #[error("schema mismatch: expected version {expected}, found {found}")]
    SchemaMismatch { expected: u32, found: u64 },
    #[error("malformed pipeline document: {0}")]
    Malformed(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Resources for the functions a pipeline launches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionConfig {
    pub memory_size: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
}

impl FunctionConfig {
    pub fn with_memory(memory_size: u32) -> Self {
        FunctionConfig {
            memory_size,
            region: None,
            role: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_MEMORY_MB..=MAX_MEMORY_MB).contains(&self.memory_size) {
            return Err(PipelineError::InvalidConfig(format!(
                "memory_size {} outside [{MIN_MEMORY_MB}, {MAX_MEMORY_MB}]",
                self.memory_size
            )));
        }
        check_opaque("region", &self.region)?;
        check_opaque("role", &self.role)
    }
}

impl Default for FunctionConfig {
    fn default() -> Self {
        FunctionConfig::with_memory(1024)
    }
}

/// Per-stage partial override of the pipeline's [`FunctionConfig`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
}

impl ConfigOverride {
    pub fn apply(&self, base: &FunctionConfig) -> FunctionConfig {
        FunctionConfig {
            memory_size: self.memory_size.unwrap_or(base.memory_size),
            region: self.region.clone().or_else(|| base.region.clone()),
            role: self.role.clone().or_else(|| base.role.clone()),
        }
    }

    fn validate(&self, base: &FunctionConfig) -> Result<()> {
        self.apply(base).validate()?;
        check_opaque("region", &self.region)?;
        check_opaque("role", &self.role)
    }
}

fn check_opaque(field: &str, value: &Option<String>) -> Result<()> {
    match value {
        Some(v) if v.trim().is_empty() => Err(PipelineError::InvalidConfig(format!(
            "{field} must be non-empty when set"
        ))),
        _ => Ok(()),
    }
}

/// The eight stage primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Split,
    Combine,
    Top,
    Match,
    Map,
    Sort,
    Partition,
    Run,
}

impl StageKind {
    pub const ALL: [StageKind; 8] = [
        StageKind::Split,
        StageKind::Combine,
        StageKind::Top,
        StageKind::Match,
        StageKind::Map,
        StageKind::Sort,
        StageKind::Partition,
        StageKind::Run,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Split => "split",
            StageKind::Combine => "combine",
            StageKind::Top => "top",
            StageKind::Match => "match",
            StageKind::Map => "map",
            StageKind::Sort => "sort",
            StageKind::Partition => "partition",
            StageKind::Run => "run",
        }
    }

    /// Required and optional arguments accepted by this kind.
    pub fn schema(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            StageKind::Split => (&[], &["split_size"]),
            StageKind::Combine => (&[], &["identifier"]),
            StageKind::Top => (&["identifier", "number"], &[]),
            StageKind::Match => (&["find", "identifier"], &[]),
            StageKind::Map => (&["input_key", "map_table", "table_key"], &["directories"]),
            StageKind::Sort => (&["identifier"], &["split_size"]),
            StageKind::Partition => (&["identifier"], &[]),
            StageKind::Run => (&["application"], &["output_format"]),
        }
    }

    /// Stages whose degree of parallelism is set by a split size.
    pub fn is_sizable(self) -> bool {
        matches!(self, StageKind::Split | StageKind::Sort)
    }

    /// Stages that aggregate every input into a single task.
    pub fn is_fan_in(self) -> bool {
        matches!(
            self,
            StageKind::Combine | StageKind::Top | StageKind::Match | StageKind::Partition
        )
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageKind {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        StageKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| PipelineError::UnknownKind(s.to_string()))
    }
}

/// Property looked for by a `match` stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindRule {
    HighestSum,
    LowestSum,
}

impl FromStr for FindRule {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highest_sum" => Ok(FindRule::HighestSum),
            "lowest_sum" => Ok(FindRule::LowestSum),
            other => Err(PipelineError::InvalidParam {
                name: "find".into(),
                reason: format!("unsupported find rule {other:?}"),
            }),
        }
    }
}

/// One step of a pipeline.
///
/// `args` holds the primitive's own arguments. `params` holds free-form
/// application parameters and is only meaningful for `run`; for other kinds
/// the only accepted entry is `split_size`, which normalization lifts into
/// `args`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub kind: StageKind,
    #[serde(default)]
    pub args: BTreeMap<String, Value>,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ConfigOverride>,
    /// Log timeout for this stage's tasks, seconds. Defaults to the pipeline timeout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout: Option<u64>,
}

impl StageSpec {
    pub fn new(kind: StageKind) -> Self {
        StageSpec {
            kind,
            args: BTreeMap::new(),
            params: BTreeMap::new(),
            config: None,
            timeout: None,
        }
    }

    pub fn arg(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.args.insert(name.to_string(), value.into());
        self
    }

    pub fn param(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.params.insert(name.to_string(), value.into());
        self
    }

    pub fn memory(mut self, memory_size: u32) -> Self {
        self.config.get_or_insert_with(Default::default).memory_size = Some(memory_size);
        self
    }

    pub fn stage_timeout(mut self, seconds: u64) -> Self {
        self.timeout = Some(seconds);
        self
    }

    pub fn split(split_size: Option<u64>) -> Self {
        let s = StageSpec::new(StageKind::Split);
        match split_size {
            Some(n) => s.arg("split_size", n),
            None => s,
        }
    }

    pub fn sort(identifier: &str, split_size: Option<u64>) -> Self {
        let s = StageSpec::new(StageKind::Sort).arg("identifier", identifier);
        match split_size {
            Some(n) => s.arg("split_size", n),
            None => s,
        }
    }

    pub fn combine(identifier: Option<&str>) -> Self {
        let s = StageSpec::new(StageKind::Combine);
        match identifier {
            Some(id) => s.arg("identifier", id),
            None => s,
        }
    }

    pub fn top(identifier: &str, number: u64) -> Self {
        StageSpec::new(StageKind::Top)
            .arg("identifier", identifier)
            .arg("number", number)
    }

    pub fn matching(identifier: &str, find: &str) -> Self {
        StageSpec::new(StageKind::Match)
            .arg("identifier", identifier)
            .arg("find", find)
    }

    pub fn map(map_table: &str, input_key: &str, table_key: &str) -> Self {
        StageSpec::new(StageKind::Map)
            .arg("map_table", map_table)
            .arg("input_key", input_key)
            .arg("table_key", table_key)
    }

    pub fn partition(identifier: &str) -> Self {
        StageSpec::new(StageKind::Partition).arg("identifier", identifier)
    }

    pub fn run(application: &str) -> Self {
        StageSpec::new(StageKind::Run).arg("application", application)
    }

    /// Returns the normalized form of this stage, or the first validation error.
    pub fn normalized(&self) -> Result<StageSpec> {
        let mut out = self.clone();
        if self.kind != StageKind::Run {
            for (name, value) in &self.params {
                if name == "split_size" && self.kind.schema().1.contains(&"split_size") {
                    if out.args.contains_key("split_size") {
                        return Err(PipelineError::InvalidParam {
                            name: name.clone(),
                            reason: "given both as argument and parameter".into(),
                        });
                    }
                    out.args.insert(name.clone(), value.clone());
                } else {
                    return Err(PipelineError::UnknownParam(name.clone()));
                }
            }
            out.params.clear();
        }
        let (required, optional) = self.kind.schema();
        for name in required {
            if !out.args.contains_key(*name) {
                return Err(PipelineError::MissingParam((*name).to_string()));
            }
        }
        for name in out.args.keys() {
            if !required.contains(&name.as_str()) && !optional.contains(&name.as_str()) {
                return Err(PipelineError::UnknownParam(name.clone()));
            }
        }
        let normalized: BTreeMap<String, Value> = out
            .args
            .iter()
            .map(|(k, v)| normalize_arg(k, v).map(|v| (k.clone(), v)))
            .collect::<Result<_>>()?;
        out.args = normalized;
        if out.timeout == Some(0) {
            return Err(PipelineError::InvalidTimeout);
        }
        Ok(out)
    }

    pub fn str_arg(&self, name: &str) -> Option<&str> {
        self.args.get(name).and_then(Value::as_str)
    }

    pub fn u64_arg(&self, name: &str) -> Option<u64> {
        self.args.get(name).and_then(Value::as_u64)
    }

    pub fn bool_arg(&self, name: &str) -> Option<bool> {
        self.args.get(name).and_then(Value::as_bool)
    }

    pub fn split_size(&self) -> u64 {
        self.u64_arg("split_size").unwrap_or(DEFAULT_SPLIT_SIZE)
    }

    pub fn find_rule(&self) -> Option<FindRule> {
        self.str_arg("find").and_then(|s| s.parse().ok())
    }
}

fn bad(name: &str, reason: &str) -> PipelineError {
    PipelineError::InvalidParam {
        name: name.to_string(),
        reason: reason.to_string(),
    }
}

fn normalize_arg(name: &str, value: &Value) -> Result<Value> {
    match name {
        "split_size" | "number" => {
            let n = positive_integer(value).ok_or_else(|| bad(name, "must be a positive integer"))?;
            Ok(Value::from(n))
        }
        "directories" => match value {
            Value::Bool(_) => Ok(value.clone()),
            _ => Err(bad(name, "must be a boolean")),
        },
        "find" => {
            let s = value.as_str().ok_or_else(|| bad(name, "must be a string"))?;
            s.parse::<FindRule>()?;
            Ok(value.clone())
        }
        "identifier" => match value {
            Value::String(s) if !s.is_empty() => Ok(value.clone()),
            // column indices may be written as bare numbers
            Value::Number(n) if n.is_u64() => Ok(Value::String(n.to_string())),
            _ => Err(bad(name, "must be a non-empty string or column index")),
        },
        _ => match value {
            Value::String(s) if !s.is_empty() => Ok(value.clone()),
            _ => Err(bad(name, "must be a non-empty string")),
        },
    }
}

fn positive_integer(value: &Value) -> Option<u64> {
    if let Some(n) = value.as_u64() {
        return (n > 0).then_some(n);
    }
    let f = value.as_f64()?;
    (f >= 1.0 && f.fract() == 0.0 && f < u64::MAX as f64).then_some(f as u64)
}

/// The declarative job graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub name: String,
    pub table: String,
    pub log: String,
    /// Seconds.
    pub timeout: u64,
    pub default_config: FunctionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_format: Option<String>,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
}

/// Creates an empty pipeline.
pub fn new_pipeline(
    name: &str,
    table: &str,
    log: &str,
    timeout: u64,
    default_config: FunctionConfig,
) -> Result<PipelineSpec> {
    let spec = PipelineSpec {
        name: name.to_string(),
        table: table.to_string(),
        log: log.to_string(),
        timeout,
        default_config,
        input_format: None,
        stages: Vec::new(),
    };
    spec.validate_header()?;
    Ok(spec)
}

/// Appends a validated stage, returning the updated spec.
pub fn add_stage(spec: PipelineSpec, stage: StageSpec) -> Result<PipelineSpec> {
    spec.add_stage(stage)
}

impl PipelineSpec {
    pub fn new(name: &str, table: &str, log: &str, timeout: u64, default_config: FunctionConfig) -> Result<Self> {
        new_pipeline(name, table, log, timeout, default_config)
    }

    /// Declares the input format.
    pub fn input(mut self, format: &str) -> Self {
        self.input_format = Some(format.to_string());
        self
    }

    pub fn add_stage(mut self, stage: StageSpec) -> Result<Self> {
        let stage = stage.normalized()?;
        if let Some(cfg) = &stage.config {
            cfg.validate(&self.default_config)?;
        }
        self.stages.push(stage);
        Ok(self)
    }

    fn validate_header(&self) -> Result<()> {
        let name_ok = !self.name.is_empty()
            && self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !name_ok {
            return Err(PipelineError::InvalidName(self.name.clone()));
        }
        check_uri(&self.table)?;
        check_uri(&self.log)?;
        if self.table == self.log {
            return Err(PipelineError::InvalidUri(format!(
                "table and log must differ ({})",
                self.table
            )));
        }
        if self.timeout == 0 {
            return Err(PipelineError::InvalidTimeout);
        }
        self.default_config.validate()
    }

    /// Effective function config of stage `idx`.
    pub fn stage_config(&self, idx: usize) -> FunctionConfig {
        match self.stages.get(idx).and_then(|s| s.config.as_ref()) {
            Some(o) => o.apply(&self.default_config),
            None => self.default_config.clone(),
        }
    }

    /// Log timeout of stage `idx`, seconds.
    pub fn stage_timeout(&self, idx: usize) -> u64 {
        self.stages.get(idx).and_then(|s| s.timeout).unwrap_or(self.timeout)
    }
}

fn check_uri(uri: &str) -> Result<()> {
    let invalid = || PipelineError::InvalidUri(uri.to_string());
    let (scheme, rest) = uri.split_once("://").ok_or_else(invalid)?;
    let scheme_ok = scheme.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
        && scheme
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '+' | '-' | '.'));
    if !scheme_ok || rest.is_empty() || rest.chars().any(char::is_whitespace) {
        return Err(invalid());
    }
    Ok(())
}

/// Validates a spec and returns its normalized form.
pub fn normalize(spec: &PipelineSpec) -> Result<PipelineSpec> {
    spec.validate_header()?;
    let mut out = spec.clone();
    out.stages = spec
        .stages
        .iter()
        .map(|s| {
            let s = s.normalized()?;
            if let Some(cfg) = &s.config {
                cfg.validate(&spec.default_config)?;
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(out)
}

/// What fires a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    Input,
    Stage(u32),
}

impl Serialize for Trigger {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Trigger::Input => s.serialize_str("input"),
            Trigger::Stage(id) => s.serialize_u32(*id),
        }
    }
}

impl<'de> Deserialize<'de> for Trigger {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::String(s) if s == "input" => Ok(Trigger::Input),
            Value::Number(n) => n
                .as_u64()
                .and_then(|n| u32::try_from(n).ok())
                .map(Trigger::Stage)
                .ok_or_else(|| de::Error::custom("stage trigger must be a u32")),
            other => Err(de::Error::custom(format!("invalid trigger {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageLink {
    pub id: u32,
    pub trigger: Trigger,
}

/// A validated, normalized pipeline with its stage chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompiledPipeline {
    pub schema_version: u32,
    pub pipeline: PipelineSpec,
    pub stages: Vec<StageLink>,
}

impl CompiledPipeline {
    pub fn stage_count(&self) -> usize {
        self.pipeline.stages.len()
    }

    pub fn stage(&self, id: usize) -> &StageSpec {
        &self.pipeline.stages[id]
    }

    pub fn input_format(&self) -> &str {
        self.pipeline.input_format.as_deref().unwrap_or("new_line")
    }

    /// Canonical JSON encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        canonical_json(self)
    }
}

/// Serializes `value` with sorted keys and no insignificant whitespace.
pub fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    // serde_json::Value keeps object keys in a BTreeMap, so a round-trip
    // through it yields sorted keys at every level.
    let v = serde_json::to_value(value).expect("pipeline values are always serializable");
    serde_json::to_vec(&v).expect("Value serialization is infallible")
}

fn chain(n: usize) -> Vec<StageLink> {
    (0..n as u32)
        .map(|id| StageLink {
            id,
            trigger: if id == 0 {
                Trigger::Input
            } else {
                Trigger::Stage(id - 1)
            },
        })
        .collect()
}

/// Compiles a spec into its canonical document.
pub fn compile(spec: &PipelineSpec) -> Result<(CompiledPipeline, Vec<u8>)> {
    let pipeline = normalize(spec)?;
    if pipeline.stages.is_empty() {
        return Err(PipelineError::EmptyPipeline);
    }
    if pipeline.input_format.as_deref().is_none_or(str::is_empty) {
        return Err(PipelineError::NoInputFormat);
    }
    let compiled = CompiledPipeline {
        schema_version: SCHEMA_VERSION,
        stages: chain(pipeline.stages.len()),
        pipeline,
    };
    let bytes = compiled.to_bytes();
    Ok((compiled, bytes))
}

/// Reads a compiled document.
pub fn load(bytes: &[u8]) -> Result<CompiledPipeline> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| PipelineError::Malformed(e.to_string()))?;
    let version = value
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| PipelineError::Malformed("missing schema_version".into()))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(PipelineError::SchemaMismatch {
            expected: SCHEMA_VERSION,
            found: version,
        });
    }
    let doc: CompiledPipeline = serde_json::from_value(value).map_err(|e| PipelineError::Malformed(e.to_string()))?;
    let pipeline = normalize(&doc.pipeline)?;
    if pipeline != doc.pipeline {
        return Err(PipelineError::Malformed("pipeline is not in normal form".into()));
    }
    if pipeline.stages.is_empty() {
        return Err(PipelineError::EmptyPipeline);
    }
    if pipeline.input_format.is_none() {
        return Err(PipelineError::NoInputFormat);
    }
    if doc.stages != chain(pipeline.stages.len()) {
        return Err(PipelineError::Malformed("stage triggers do not form a chain".into()));
    }
    Ok(doc)
}

/// Front-end builder document: a flat JSON mirror of the fluent builder.
///
/// ```json
/// {"name": "compression", "table": "s3://my-bucket", "log": "s3://my-log",
///  "timeout": 600, "config": {"memory_size": 2240},
///  "input": {"format": "new_line"},
///  "stages": [{"kind": "sort", "identifier": "start_position",
///              "params": {"split_size": 500000000}, "config": {"memory_size": 3008}}]}
/// ```
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuilderDoc {
    pub name: String,
    pub table: String,
    pub log: String,
    pub timeout: u64,
    #[serde(default)]
    pub config: Option<FunctionConfig>,
    #[serde(default)]
    pub input: Option<BuilderInput>,
    #[serde(default)]
    pub stages: Vec<BTreeMap<String, Value>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuilderInput {
    pub format: String,
}

impl BuilderDoc {
    pub fn into_spec(self) -> Result<PipelineSpec> {
        let mut spec = new_pipeline(
            &self.name,
            &self.table,
            &self.log,
            self.timeout,
            self.config.unwrap_or_default(),
        )?;
        if let Some(input) = self.input {
            spec = spec.input(&input.format);
        }
        for raw in self.stages {
            spec = spec.add_stage(stage_from_builder(raw)?)?;
        }
        Ok(spec)
    }
}

fn stage_from_builder(mut raw: BTreeMap<String, Value>) -> Result<StageSpec> {
    let kind = match raw.remove("kind") {
        Some(Value::String(k)) => k.parse::<StageKind>()?,
        Some(other) => return Err(PipelineError::UnknownKind(other.to_string())),
        None => return Err(PipelineError::MissingParam("kind".into())),
    };
    let mut stage = StageSpec::new(kind);
    if let Some(params) = raw.remove("params") {
        let Value::Object(map) = params else {
            return Err(bad("params", "must be an object"));
        };
        stage.params = map.into_iter().collect();
    }
    if let Some(cfg) = raw.remove("config") {
        stage.config = Some(serde_json::from_value(cfg).map_err(|e| bad("config", &e.to_string()))?);
    }
    if let Some(t) = raw.remove("timeout") {
        stage.timeout = Some(t.as_u64().ok_or(PipelineError::InvalidTimeout)?);
    }
    stage.args = raw;
    Ok(stage)
}

/// Parses either a builder document or an already compiled document.
pub fn spec_from_json(bytes: &[u8]) -> Result<PipelineSpec> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| PipelineError::Malformed(e.to_string()))?;
    if value.get("schema_version").is_some() {
        return Ok(load(bytes)?.pipeline);
    }
    let doc: BuilderDoc = serde_json::from_value(value).map_err(|e| PipelineError::Malformed(e.to_string()))?;
    doc.into_spec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn listing() -> PipelineSpec {
        let config = FunctionConfig {
            memory_size: 2240,
            region: Some("us-west-2".into()),
            role: Some("aws-role".into()),
        };
        PipelineSpec::new("compression", "s3://my-bucket", "s3://my-log", 600, config)
            .unwrap()
            .input("new_line")
            .add_stage(
                StageSpec::new(StageKind::Sort)
                    .arg("identifier", "start_position")
                    .param("split_size", 500 * 1000 * 1000)
                    .memory(3008),
            )
            .unwrap()
            .add_stage(StageSpec::run("compress_methyl").param("pbucket", "s3://my-program"))
            .unwrap()
    }

    #[test]
    fn new_pipeline_starts_empty() {
        let spec = new_pipeline(
            "compression",
            "store://bucket",
            "store://log",
            600,
            FunctionConfig::with_memory(2240),
        )
        .unwrap();
        assert!(spec.stages.is_empty());
        assert!(spec.input_format.is_none());
    }

    #[test]
    fn header_errors() {
        let cfg = FunctionConfig::with_memory(2240);
        assert_eq!(
            new_pipeline("c", "store://b", "store://l", 0, cfg.clone()).unwrap_err(),
            PipelineError::InvalidTimeout
        );
        assert!(matches!(
            new_pipeline("c", "store://b", "store://b", 10, cfg.clone()),
            Err(PipelineError::InvalidUri(_))
        ));
        assert!(matches!(
            new_pipeline("c", "bucket", "store://l", 10, cfg.clone()),
            Err(PipelineError::InvalidUri(_))
        ));
        assert!(matches!(
            new_pipeline("c", "store://b", "store://l", 10, FunctionConfig::with_memory(64)),
            Err(PipelineError::InvalidConfig(_))
        ));
        let blank_region = FunctionConfig {
            region: Some(" ".into()),
            ..cfg
        };
        assert!(matches!(
            new_pipeline("c", "store://b", "store://l", 10, blank_region),
            Err(PipelineError::InvalidConfig(_))
        ));
    }

    #[test]
    fn stage_param_validation() {
        let base = listing();
        assert_eq!(
            base.clone()
                .add_stage(StageSpec::new(StageKind::Top).arg("identifier", "1"))
                .unwrap_err(),
            PipelineError::MissingParam("number".into())
        );
        assert_eq!(
            base.clone()
                .add_stage(StageSpec::run("x").arg("colour", "red"))
                .unwrap_err(),
            PipelineError::UnknownParam("colour".into())
        );
        assert_eq!(
            base.clone()
                .add_stage(StageSpec::split(None).param("pbucket", "x"))
                .unwrap_err(),
            PipelineError::UnknownParam("pbucket".into())
        );
        assert!(matches!(
            base.clone().add_stage(StageSpec::split(Some(0))),
            Err(PipelineError::InvalidParam { .. })
        ));
        assert!(matches!(
            base.clone().add_stage(StageSpec::matching("1", "median")),
            Err(PipelineError::InvalidParam { .. })
        ));
        assert_eq!(
            "shuffle".parse::<StageKind>().unwrap_err(),
            PipelineError::UnknownKind("shuffle".into())
        );
        let ok = base.add_stage(StageSpec::run("compress_methyl")).unwrap();
        assert_eq!(ok.stages.len(), 3);
    }

    #[test]
    fn every_kind_accepts_exactly_its_documented_arguments() {
        let value_for = |name: &str| -> Value {
            match name {
                "split_size" | "number" => json!(7),
                "directories" => json!(true),
                "find" => json!("highest_sum"),
                _ => json!("x"),
            }
        };
        for kind in StageKind::ALL {
            let (required, optional) = kind.schema();
            let mut full = StageSpec::new(kind);
            for name in required.iter().chain(optional) {
                full = full.arg(name, value_for(name));
            }
            assert!(full.normalized().is_ok(), "{kind}");
            for missing in required {
                let mut s = full.clone();
                s.args.remove(*missing);
                assert_eq!(
                    s.normalized().unwrap_err(),
                    PipelineError::MissingParam((*missing).into())
                );
            }
        }
    }

    #[test]
    fn compile_listing_chain() {
        let (compiled, bytes) = compile(&listing()).unwrap();
        assert_eq!(compiled.schema_version, 1);
        assert_eq!(compiled.stages.len(), 2);
        assert_eq!(compiled.stages[0].trigger, Trigger::Input);
        assert_eq!(compiled.stages[1].trigger, Trigger::Stage(0));
        // split_size is lifted out of params
        assert_eq!(compiled.stage(0).u64_arg("split_size"), Some(500_000_000));
        assert!(compiled.stage(0).params.is_empty());
        assert_eq!(compiled.stage(1).params["pbucket"], json!("s3://my-program"));
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("{\"pipeline\":"));
        assert!(!text.contains("\": "));
        assert!(!text.contains('\n'));
        assert_eq!(compile(&listing()).unwrap().1, bytes);
    }

    #[test]
    fn compile_errors() {
        let empty = PipelineSpec::new("e", "store://b", "store://l", 10, FunctionConfig::default())
            .unwrap()
            .input("new_line");
        assert_eq!(compile(&empty).unwrap_err(), PipelineError::EmptyPipeline);
        let mut no_format = listing();
        no_format.input_format = None;
        assert_eq!(compile(&no_format).unwrap_err(), PipelineError::NoInputFormat);
    }

    #[test]
    fn load_round_trip_and_errors() {
        let spec = listing();
        let (_, bytes) = compile(&spec).unwrap();
        let loaded = load(&bytes).unwrap();
        assert_eq!(loaded.pipeline, normalize(&spec).unwrap());
        assert_eq!(loaded.to_bytes(), bytes);

        assert!(matches!(
            load(&bytes[..bytes.len() / 2]),
            Err(PipelineError::Malformed(_))
        ));
        let mut v: Value = serde_json::from_slice(&bytes).unwrap();
        v["schema_version"] = json!(2);
        assert_eq!(
            load(&serde_json::to_vec(&v).unwrap()).unwrap_err(),
            PipelineError::SchemaMismatch { expected: 1, found: 2 }
        );
    }

    #[test]
    fn builder_doc_matches_fluent_builder() {
        let doc = json!({
            "name": "compression",
            "table": "s3://my-bucket",
            "log": "s3://my-log",
            "timeout": 600,
            "config": {"region": "us-west-2", "role": "aws-role", "memory_size": 2240},
            "input": {"format": "new_line"},
            "stages": [
                {"kind": "sort", "identifier": "start_position",
                 "params": {"split_size": 500000000}, "config": {"memory_size": 3008}},
                {"kind": "run", "application": "compress_methyl",
                 "params": {"pbucket": "s3://my-program"}}
            ]
        });
        let spec = spec_from_json(&serde_json::to_vec(&doc).unwrap()).unwrap();
        assert_eq!(compile(&spec).unwrap().1, compile(&listing()).unwrap().1);
        let bad_kind = json!({"name": "x", "table": "s3://a", "log": "s3://b", "timeout": 1,
                               "stages": [{"kind": "shuffle"}]});
        assert_eq!(
            spec_from_json(&serde_json::to_vec(&bad_kind).unwrap()).unwrap_err(),
            PipelineError::UnknownKind("shuffle".into())
        );
    }

    #[test]
    fn stage_config_and_timeout_resolution() {
        let spec = listing();
        assert_eq!(spec.stage_config(0).memory_size, 3008);
        assert_eq!(spec.stage_config(0).region.as_deref(), Some("us-west-2"));
        assert_eq!(spec.stage_config(1).memory_size, 2240);
        assert_eq!(spec.stage_timeout(1), 600);
    }
}

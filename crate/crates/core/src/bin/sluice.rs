use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sluice::bench::run_bench;
use sluice::catalog::{self, SampleData};
use sluice::config::RunConfig;
use sluice::format::FormatRegistry;
use sluice::kernels::{KernelError, KernelRegistry};
use sluice::orchestrator::local::run_local;
use sluice::orchestrator::{Goal, JobRequest, JobState, OrchestratorError, Runtime};
use sluice::pipeline::{canonical_json, compile, spec_from_json, CompiledPipeline, PipelineError};
use sluice::provision::live::{overrides, provision_job};
use sluice::provision::{ProfileTable, Provisioner};
use sluice::scheduler::SchedulerPolicy;
use sluice::sim::trace::{job_totals, max_running, read_csv, stage_timeline, write_csv};
use sluice::store::ObjectStore;

#[derive(Parser)]
#[command(
    name = "sluice",
    version,
    about = "Serverless dataflow pipelines on a simulated function platform"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a pipeline document to its canonical JSON form.
    Compile {
        spec: PathBuf,
        /// Output file; defaults to <output dir>/<pipeline name>.json.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, env = "SLUICE_OUT_DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Run one job on the simulator and write its trace and summary.
    Run {
        #[command(flatten)]
        job: JobArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Profile table CSV; when given the job is provisioned from it.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Deadline in seconds for provisioning.
        #[arg(long, conflicts_with = "cost_cap")]
        deadline: Option<f64>,
        /// Cost cap for provisioning.
        #[arg(long)]
        cost_cap: Option<f64>,
    },
    /// Run the configured workload and write per-interval samples.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        /// Also simulate a comparison cluster; only `vm` is supported.
        #[arg(long, value_parser = ["vm"])]
        baseline: Option<String>,
    },
    /// Run a pipeline serially in-process and write its final outputs.
    TestLocal {
        #[command(flatten)]
        job: JobArgs,
        #[arg(long, env = "SLUICE_OUT_DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Summarize a trace CSV.
    Report {
        trace: PathBuf,
        /// Only this job.
        #[arg(long)]
        job: Option<String>,
    },
}

#[derive(Args)]
struct JobArgs {
    /// Pipeline document path or shipped pipeline name.
    pipeline: String,
    /// Input file; omit with --sample.
    input: Option<PathBuf>,
    /// Generate shipped sample data of about this many bytes instead.
    #[arg(long)]
    sample: Option<usize>,
    /// Extra store object as KEY=PATH, e.g. a map stage's table.
    #[arg(long = "object", value_name = "KEY=PATH")]
    objects: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scheduler: Option<SchedulerPolicy>,
    #[arg(long)]
    no_fault_tolerance: bool,
    #[arg(long, env = "SLUICE_OUT_DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error("{0}")]
    Other(String),
    #[error("job {0} failed: {1}")]
    JobFailed(String, String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Pipeline(_) => 2,
            CliError::Orchestrator(OrchestratorError::Kernel(KernelError::UnknownApplication(_)))
            | CliError::Orchestrator(OrchestratorError::Pipeline(_)) => 2,
            CliError::JobFailed(..) => 3,
            _ => 1,
        }
    }
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compile { spec, output, out_dir } => cmd_compile(&spec, output, out_dir),
        Command::Run {
            job,
            run,
            table,
            deadline,
            cost_cap,
        } => cmd_run(&job, &run, table, deadline, cost_cap),
        Command::Bench { run, baseline } => cmd_bench(&run, baseline.is_some()),
        Command::TestLocal { job, out_dir } => cmd_test_local(&job, out_dir),
        Command::Report { trace, job } => cmd_report(&trace, job.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Pipeline(p) => eprintln!("error: {}: {p}", variant(p)),
                _ => eprintln!("error: {e}"),
            }
            ExitCode::from(e.code())
        }
    }
}

/// Name of an error variant, for messages scripts can match on.
fn variant(e: &PipelineError) -> String {
    let dbg = format!("{e:?}");
    dbg.split(|c: char| !c.is_alphanumeric())
        .next()
        .unwrap_or_default()
        .to_string()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| other(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| other(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn out_dir(flag: Option<PathBuf>, config: Option<&RunConfig>) -> PathBuf {
    flag.or_else(|| config.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| RunConfig::default().output_dir())
}

fn cmd_compile(spec: &Path, output: Option<PathBuf>, dir: Option<PathBuf>) -> Result<(), CliError> {
    let bytes = read_file(spec)?;
    let (compiled, json) = compile(&spec_from_json(&bytes)?)?;
    let path = output.unwrap_or_else(|| out_dir(dir, None).join(format!("{}.json", compiled.pipeline.name)));
    write_file(&path, &json)?;
    println!("{}", path.display());
    Ok(())
}

fn load_pipeline(arg: &str) -> Result<CompiledPipeline, CliError> {
    let path = Path::new(arg);
    if path.exists() {
        let bytes = read_file(path)?;
        return Ok(compile(&spec_from_json(&bytes)?)?.0);
    }
    if catalog::source(arg).is_some() {
        return Ok(catalog::compiled(arg)?);
    }
    Err(CliError::Usage(format!("{arg}: no such file or shipped pipeline")))
}

fn load_job_data(job: &JobArgs, seed: u64) -> Result<SampleData, CliError> {
    let mut data = match (&job.input, job.sample) {
        (Some(path), None) => SampleData {
            input: read_file(path)?,
            objects: Vec::new(),
        },
        (None, Some(bytes)) => catalog::sample(&job.pipeline, seed, bytes)
            .ok_or_else(|| CliError::Usage(format!("no sample data for {}", job.pipeline)))?,
        _ => return Err(CliError::Usage("give exactly one of INPUT or --sample".into())),
    };
    for spec in &job.objects {
        let (key, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--object {spec}: expected KEY=PATH")))?;
        data.objects.push((key.to_string(), read_file(Path::new(path))?));
    }
    Ok(data)
}

fn load_config(run: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = run.seed {
        cfg.seed = Some(s);
    }
    if let Some(p) = run.scheduler {
        cfg.scheduler = p;
    }
    if run.no_fault_tolerance {
        cfg.fault_tolerance = false;
    }
    Ok(cfg)
}

fn cmd_run(
    job: &JobArgs,
    run: &RunArgs,
    table: Option<PathBuf>,
    deadline: Option<f64>,
    cost_cap: Option<f64>,
) -> Result<(), CliError> {
    let cfg = load_config(run)?;
    let dir = out_dir(run.out_dir.clone(), Some(&cfg));
    let pipeline = load_pipeline(&job.pipeline)?;
    let data = load_job_data(job, cfg.data_seed)?;
    let goal = match (deadline, cost_cap) {
        (Some(s), _) => Goal::Deadline { seconds: s },
        (_, Some(a)) => Goal::CostCap { amount: a },
        _ => Goal::BestEffort,
    };
    let rt_cfg = cfg.runtime();
    let mut request_overrides = Default::default();
    let mut provisioned = None;
    if let Some(path) = &table {
        let loaded = ProfileTable::load_or_default(path).map_err(other)?;
        let mut prov = Provisioner::new(loaded, u64::from(cfg.cluster.concurrency_limit));
        let (choice, row) =
            provision_job(&mut prov, &rt_cfg, &pipeline, &data.input, &data.objects, &goal).map_err(other)?;
        request_overrides = overrides(&pipeline, &choice.column);
        provisioned = Some((prov, choice, row));
    }

    let store = Arc::new(ObjectStore::memory());
    store.put("input", data.input, 0).map_err(other)?;
    for (k, v) in &data.objects {
        store.put(k, v.clone(), 0).map_err(other)?;
    }
    let mut rt = Runtime::new(rt_cfg, store.clone())?;
    let mut req = JobRequest::new(pipeline, "input").goal(goal);
    req.split_overrides = request_overrides;
    let id = rt.submit(req)?;
    rt.run()?;
    let summary = rt.summary(&id).expect("submitted job has a summary");

    let mut report = serde_json::to_value(&summary).map_err(other)?;
    if let Some((mut prov, choice, row)) = provisioned {
        if let Some(ms) = summary.makespan_ms {
            let deviation = prov
                .observe(&row, &choice.column, (ms as f64 / 1000.0).max(1e-3))
                .map_err(other)?;
            report["provisioning"] = json!({
                "row": row,
                "column": choice.column.to_string(),
                "predicted_runtime_s": choice.predicted_runtime_s,
                "predicted_cost": choice.predicted_cost,
                "infeasible": choice.infeasible,
                "deviation": deviation,
            });
        }
        prov.table.save(table.as_deref().expect("table given")).map_err(other)?;
    }
    let mut trace = Vec::new();
    write_csv(rt.trace(), &mut trace).map_err(other)?;
    write_file(&dir.join("trace.csv"), &trace)?;
    write_file(&dir.join("summary.json"), &canonical_json(&report))?;
    for key in rt.final_outputs(&id) {
        let bytes = store.get(&key).map_err(other)?;
        write_file(&dir.join("outputs").join(key.replace('/', "_")), &bytes)?;
    }
    println!(
        "{id}: {:?} makespan_ms={} tasks={} respawns={} cost={:.6} seed={}",
        summary.state,
        summary.makespan_ms.map_or("-".into(), |m| m.to_string()),
        summary.tasks,
        summary.respawns,
        summary.cost,
        summary.seed
    );
    if summary.state != JobState::Done {
        return Err(CliError::JobFailed(id, summary.error.unwrap_or_default()));
    }
    Ok(())
}

fn cmd_bench(run: &RunArgs, with_vm: bool) -> Result<(), CliError> {
    let cfg = load_config(run)?;
    let dir = out_dir(run.out_dir.clone(), Some(&cfg));
    let workload = cfg
        .workload
        .clone()
        .ok_or_else(|| CliError::Usage("bench needs a config with a workload".into()))?;
    let pipeline = load_pipeline(&workload.template.pipeline)?;
    let name = workload.template.pipeline.clone();
    let size = workload.template.input_bytes;
    let base = cfg.data_seed;
    let inputs = move |i: usize| {
        catalog::sample(&name, base + i as u64, size).unwrap_or_else(|| SampleData {
            input: sluice::samples::genomic_lines(base + i as u64, size),
            objects: Vec::new(),
        })
    };
    let (result, rt) = run_bench(&cfg, &workload, &pipeline, &inputs, with_vm)?;
    result
        .check_against_trace(|j| rt.sim().ledger().job_mb_ms(j))
        .map_err(|e| other(format!("trace re-aggregation mismatch: {e}")))?;

    let mut samples = Vec::new();
    result.write_samples_csv(&mut samples).map_err(other)?;
    write_file(&dir.join("samples.csv"), &samples)?;
    let mut jobs = Vec::new();
    result.write_jobs_csv(&mut jobs).map_err(other)?;
    write_file(&dir.join("jobs.csv"), &jobs)?;
    let mut trace = Vec::new();
    write_csv(&result.trace, &mut trace).map_err(other)?;
    write_file(&dir.join("trace.csv"), &trace)?;
    let aggregates = json!({
        "seed": result.seed,
        "jobs": result.jobs.len(),
        "done": result.done(),
        "mean_completion_ms": result.mean_completion_ms(),
        "total_cost": result.total_cost,
        "max_running_functions": result.max_running,
        "concurrency_limit": cfg.cluster.concurrency_limit,
        "vm": result.vm.as_ref().map(|v| json!({
            "mean_completion_ms": v.mean_completion_ms(),
            "total_cost": v.total_cost,
            "max_vms": v.max_vms,
            "done": v.completions.len(),
        })),
    });
    write_file(&dir.join("aggregates.json"), &canonical_json(&aggregates))?;
    println!("{}", serde_json::to_string_pretty(&aggregates).map_err(other)?);
    Ok(())
}

fn cmd_test_local(job: &JobArgs, dir: Option<PathBuf>) -> Result<(), CliError> {
    let pipeline = load_pipeline(&job.pipeline)?;
    let data = load_job_data(job, 0)?;
    let kernels = KernelRegistry::default();
    for spec in &pipeline.pipeline.stages {
        if let Some(app) = spec.str_arg("application") {
            kernels.get(app).map_err(OrchestratorError::from)?;
        }
    }
    let run = run_local(
        &pipeline,
        data.input,
        &data.objects,
        &FormatRegistry::default(),
        &kernels,
    )?;
    let dir = out_dir(dir, None).join("local");
    for (key, bytes) in &run.outputs {
        let path = dir.join(key.replace('/', "_"));
        write_file(&path, bytes)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_report(trace: &Path, job: Option<&str>) -> Result<(), CliError> {
    let records = read_csv(fs::File::open(trace).map_err(|e| CliError::Usage(format!("{}: {e}", trace.display())))?)
        .map_err(other)?;
    let totals = job_totals(&records);
    let mut jobs = serde_json::Map::new();
    for (id, t) in &totals {
        if id.is_empty() || job.is_some_and(|j| j != id) {
            continue;
        }
        let stages: serde_json::Map<String, serde_json::Value> = stage_timeline(&records, id)
            .into_iter()
            .map(|(s, steps)| (s.to_string(), json!(steps)))
            .collect();
        jobs.insert(
            id.clone(),
            json!({
                "invocations": t.invocations,
                "respawns": t.respawns,
                "billed_mb_ms": t.billed_mb_ms.to_string(),
                "makespan_ms": t.first_ms.zip(t.done_ms).map(|(a, b)| b - a),
                "stages": stages,
            }),
        );
    }
    let report = json!({"max_running_functions": max_running(&records), "jobs": jobs});
    println!("{}", serde_json::to_string_pretty(&report).map_err(other)?);
    Ok(())
}

//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its own PASS/FAIL line; exits non-zero if any fails.

use std::collections::BTreeMap;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sluice::bench::run_bench;
use sluice::catalog::{self, SampleData};
use sluice::config::RunConfig;
use sluice::format::{Format, FormatRegistry, LineFormat};
use sluice::kernels::KernelRegistry;
use sluice::orchestrator::local::run_local;
use sluice::orchestrator::{Goal, JobRequest, JobState, Runtime, RuntimeConfig};
use sluice::pipeline::{compile, new_pipeline, spec_from_json, CompiledPipeline, FunctionConfig, StageSpec};
use sluice::primitives::{combine, split};
use sluice::provision::scenario::{PhaseKind, PhaseModel, Scenario};
use sluice::provision::{fingerprint, Column, ProfileTable, Provisioner, DEFAULT_SPLIT};
use sluice::scheduler::SchedulerPolicy;
use sluice::sim::trace::{TraceEvent, TraceRecord};
use sluice::sim::ClusterModel;
use sluice::store::{LogEvent, ObjectStore};
use sluice::workload::{Arrivals, JobTemplate, WorkloadSpec};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("sort pipeline equals sequential sort", sort_oracle),
        ("split/combine round trip", split_combine_round_trip),
        ("fault tolerance under 10% failures", fault_tolerance),
        ("concurrency cap holds in bench traces", concurrency_cap),
        ("provisioning prediction accuracy", provisioning_accuracy),
        ("provisioning choice optimality and cost", provisioning_optimality),
        ("scheduler ordering, spread and priority", scheduler_properties),
        ("elasticity versus VM cluster", elasticity),
        ("crash recovery from the log", crash_recovery),
        ("local mode equals simulated run", cross_mode),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| *f == n.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn quiet() -> RuntimeConfig {
    RuntimeConfig {
        record_trace: false,
        ..Default::default()
    }
}

fn memory_store(objects: &[(&str, Vec<u8>)]) -> Arc<ObjectStore> {
    let store = Arc::new(ObjectStore::memory());
    for (k, v) in objects {
        store.put(k, v.clone(), 0).unwrap();
    }
    store
}

fn final_bytes(rt: &Runtime, job: &str) -> Vec<Vec<u8>> {
    rt.final_outputs(job)
        .iter()
        .map(|k| rt.store().get(k).unwrap().to_vec())
        .collect()
}

/// A pipeline document with one split stage and the given tail, in the
/// shipped builder format.
fn builder(name: &str, format: &str, split_size: u64, tail: &str) -> CompiledPipeline {
    let doc = format!(
        r#"{{"name": "{name}", "table": "store://sluice", "log": "store://sluice-log", "timeout": 60,
            "config": {{"memory_size": 1024}}, "input": {{"format": "{format}"}},
            "stages": [{{"kind": "split", "params": {{"split_size": {split_size}}}}}{tail}]}}"#
    );
    compile(&spec_from_json(doc.as_bytes()).unwrap()).unwrap().0
}

// 1 ---------------------------------------------------------------------

fn sort_oracle() -> Check {
    let spec = new_pipeline(
        "radix",
        "store://sluice",
        "store://sluice-log",
        60,
        FunctionConfig::with_memory(1024),
    )
    .unwrap()
    .input("new_line")
    .add_stage(StageSpec::sort("0", Some(DEFAULT_SPLIT)))
    .unwrap();
    let pipeline = compile(&spec).unwrap().0;
    let start = Instant::now();
    let mut largest = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // log-uniform sizes so small and large inputs both occur
        let items = (10f64.powf(rng.gen_range(0.0..5.0)).round() as usize).clamp(1, 100_000);
        let key_range = *[10u64, 1000, 1_000_000_000].choose(&mut rng).unwrap();
        let lines: Vec<String> = (0..items)
            .map(|i| {
                format!(
                    "{} r{seed}-{i} {}\n",
                    rng.gen_range(0..key_range),
                    rng.gen_range(0..1000)
                )
            })
            .collect();
        let input = lines.concat().into_bytes();
        let n = *[1u64, 2, 4, 8].choose(&mut rng).unwrap();
        let split_size = (input.len() as u64).div_ceil(n).max(1);

        let mut expected = lines.clone();
        expected.sort_by_key(|l| l.split(' ').next().unwrap().parse::<u64>().unwrap());
        let expected = expected.concat().into_bytes();

        let mut rt = Runtime::new(quiet(), memory_store(&[("in", input)])).unwrap();
        let id = rt
            .submit(JobRequest::new(pipeline.clone(), "in").split_override(0, split_size))
            .unwrap();
        rt.run().unwrap();
        if rt.job_state(&id) != Some(JobState::Done) {
            return Err(format!("seed {seed}: job did not finish"));
        }
        let parts = final_bytes(&rt, &id);
        if parts.concat() != expected {
            return Err(format!(
                "seed {seed}: {items} items in {n} partitions differ from the oracle"
            ));
        }
        largest = largest.max(items);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        secs < 60.0,
        format!("200 inputs up to {largest} items byte-identical, {secs:.1}s (limit 60s)"),
    )
}

// 2 ---------------------------------------------------------------------

fn split_combine_round_trip() -> Check {
    let formats: Vec<Arc<dyn Format>> = vec![Arc::new(LineFormat::new_line()), Arc::new(LineFormat::tsv())];
    let mut runner = TestRunner::new_with_rng(
        PropConfig {
            cases: 500,
            failure_persistence: None,
            ..PropConfig::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    let blob = prop::collection::vec(prop_oneof![4 => any::<u8>(), 1 => Just(b'\n')], 0..4000);
    let strategy = (blob, 1u64..5000, 0usize..2, any::<u64>());
    let cases = std::cell::Cell::new(0);
    runner
        .run(&strategy, |(blob, split_size, f, shuffle_seed)| {
            cases.set(cases.get() + 1);
            let fmt = formats[f].as_ref();
            let mut chunks = split(&blob, fmt, split_size).unwrap();
            // arrival order must not matter
            chunks.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
            prop_assert_eq!(combine(&chunks, fmt, None).unwrap(), blob);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let cases = cases.get();
    ensure(
        cases >= 500,
        format!("{cases} random blobs and split sizes restored exactly"),
    )
}

// 3 ---------------------------------------------------------------------

fn compression_batch(
    seed: u64,
    fault_tolerance: bool,
) -> (Vec<sluice::orchestrator::JobSummary>, Vec<TraceRecord>, u64) {
    let pipeline = catalog::compiled("compression").unwrap();
    let store = Arc::new(ObjectStore::memory());
    for j in 0..20u64 {
        store
            .put(
                &format!("in/{j:02}"),
                sluice::samples::genomic_lines(1000 + j, 1_000_000),
                0,
            )
            .unwrap();
    }
    let config = RuntimeConfig {
        cluster: ClusterModel {
            failure_prob: 0.10,
            rng_seed: seed,
            ..Default::default()
        },
        fault_tolerance,
        ..Default::default()
    };
    let budget = config.cluster.function_timeout_s * 1000;
    let mut rt = Runtime::new(config, store).unwrap();
    for j in 0..20 {
        rt.submit(JobRequest::new(pipeline.clone(), &format!("in/{j:02}")).split_override(0, 200_000))
            .unwrap();
    }
    rt.run().unwrap();
    (rt.summaries(), rt.trace().to_vec(), budget)
}

fn fault_tolerance() -> Check {
    let mut off_done = Vec::new();
    let mut worst = 0;
    let mut respawns = 0;
    for seed in 0..10 {
        let (on, trace, budget) = compression_batch(seed, true);
        let (again, trace_again, _) = compression_batch(seed, true);
        if trace != trace_again || on != again {
            return Err(format!("seed {seed}: two runs differ"));
        }
        let done = on.iter().filter(|s| s.state == JobState::Done).count();
        if done != 20 {
            return Err(format!(
                "seed {seed}: only {done}/20 jobs completed with fault tolerance"
            ));
        }
        for s in &on {
            let m = s.makespan_ms.unwrap();
            if m > budget {
                return Err(format!(
                    "seed {seed}: {} took {m} ms, over the {budget} ms budget",
                    s.job_id
                ));
            }
            worst = worst.max(m);
            respawns += s.respawns;
        }
        let (off, _, _) = compression_batch(seed, false);
        let done_off = off.iter().filter(|s| s.state == JobState::Done).count();
        if done_off >= 20 {
            return Err(format!("seed {seed}: all jobs completed without fault tolerance"));
        }
        off_done.push(done_off);
    }
    Ok(format!(
        "10 seeds: 20/20 with respawn ({respawns} respawns, slowest {worst} ms), without respawn completed {off_done:?}"
    ))
}

// 4 ---------------------------------------------------------------------

/// Peak concurrency from start/finish records, finishes before starts at
/// equal times.
fn peak_running(trace: &[TraceRecord]) -> u32 {
    let mut edges: Vec<(u64, i32)> = trace
        .iter()
        .filter_map(|r| match r.event {
            TraceEvent::Start => Some((r.time_ms, 1)),
            TraceEvent::Finish => Some((r.time_ms, -1)),
            _ => None,
        })
        .collect();
    edges.sort();
    let mut cur = 0i32;
    let mut peak = 0i32;
    for (_, d) in edges {
        cur += d;
        peak = peak.max(cur);
    }
    peak as u32
}

fn concurrency_cap() -> Check {
    let pipeline = builder(
        "proteomics-fine",
        "tsv",
        20_000,
        r#", {"kind": "run", "application": "toy_score"}, {"kind": "combine", "identifier": "1"}"#,
    );
    let template = JobTemplate {
        pipeline: "proteomics".into(),
        input_bytes: 200_000,
        goal: Goal::BestEffort,
        priority: 0,
    };
    let workloads = [
        (
            "uniform",
            Arrivals::Uniform {
                interval_s: 1.0,
                duration_s: 30.0,
            },
        ),
        (
            "bursty",
            Arrivals::Bursty {
                interval_s: 10.0,
                duration_s: 60.0,
                burst_size: 30,
                burst_period_s: 30.0,
                burst_offset_s: Some(15.0),
            },
        ),
        (
            "diurnal",
            Arrivals::Diurnal {
                period_s: 60.0,
                peak_jobs_per_interval: 8,
                interval_s: 5.0,
                duration_s: 60.0,
            },
        ),
    ];
    let inputs = |i: usize| SampleData {
        input: sluice::samples::spectra(i as u64, 200_000),
        objects: Vec::new(),
    };
    let mut notes = Vec::new();
    for limit in [10u32, 25] {
        for (name, arrivals) in &workloads {
            let config = RunConfig {
                cluster: ClusterModel {
                    concurrency_limit: limit,
                    ..Default::default()
                },
                ..Default::default()
            };
            let w = WorkloadSpec {
                arrivals: arrivals.clone(),
                template: template.clone(),
            };
            let (r, _) = run_bench(&config, &w, &pipeline, &inputs, false).map_err(|e| e.to_string())?;
            let peak = peak_running(&r.trace);
            if peak > limit || r.max_running > limit {
                return Err(format!("{name} at limit {limit}: {peak} functions ran at once"));
            }
            if r.done() != r.jobs.len() {
                return Err(format!(
                    "{name} at limit {limit}: {}/{} jobs done",
                    r.done(),
                    r.jobs.len()
                ));
            }
            notes.push(format!("{name}/{limit}: peak {peak}"));
        }
    }
    Ok(notes.join(", "))
}

// 5 ---------------------------------------------------------------------

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn provisioning_accuracy() -> Check {
    const MAX_LAMBDAS: u64 = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // true runtime = app factor × size factor × shape(split)
    let shape = |split: u64| {
        let x = (split as f64 / 4e6).log2();
        1.0 + 0.15 * x * x
    };
    let apps: Vec<(String, f64)> = (0..3).map(|i| (format!("app{i}"), rng.gen_range(20.0..80.0))).collect();
    let sizes = [2_000_000_000u64, 4_000_000_000, 8_000_000_000];
    let truth = |app: f64, size: u64, c: &Column| app * (size as f64 / 2e9) * shape(c.splits[0]);

    let mut prov = Provisioner::new(ProfileTable::new(), MAX_LAMBDAS);
    let mut errors = Vec::new();
    for _ in 0..20 {
        let (name, a) = apps.choose(&mut rng).unwrap().clone();
        let size = *sizes.choose(&mut rng).unwrap();
        let row = fingerprint(&name, size);
        if !prov.table.has_row(&row) {
            // canary estimates carry extrapolation noise
            for c in prov.plan_canary(size, 1).configs {
                let noisy = truth(a, size, &c) * rng.gen_range(0.8..1.2);
                prov.record(&row, &c, noisy).unwrap();
            }
        }
        let cols = prov.columns(size, 1);
        let choice = prov.choose(&row, &cols, &Goal::BestEffort, |_, t| t).unwrap();
        let actual = truth(a, size, &choice.column);
        errors.push((choice.predicted_runtime_s - actual).abs() / actual);
        let measured = actual * rng.gen_range(0.97..1.03);
        prov.observe(&row, &choice.column, measured).unwrap();
    }
    let all = median(&mut errors.clone());
    let first = median(&mut errors[..10].to_vec());
    let last = median(&mut errors[10..].to_vec());
    ensure(
        all < 0.15 && last < first,
        format!(
            "median error {:.1}% (limit 15%), first 10 jobs {:.1}%, last 10 jobs {:.1}%",
            all * 100.0,
            first * 100.0,
            last * 100.0
        ),
    )
}

// 6 ---------------------------------------------------------------------

/// Single-phase job at `bytes` with per-task overhead `a_ms` and compute
/// `b_ms_per_mb`. Tasks straggle 3× at 1%, are respawned after 60 s and
/// share 100 concurrent functions, so small splits queue behind per-task
/// overhead and large splits pay for timeouts and straggler tails.
fn scenario(name: &str, bytes: u64, a_ms: f64, b_ms_per_mb: f64) -> Scenario {
    Scenario {
        name: name.into(),
        input_bytes: bytes,
        phases: vec![PhaseModel {
            kind: PhaseKind::Parallel,
            a_ms,
            b_ms_per_mb,
            c_ms_per_input: 0.0,
        }],
        cluster: ClusterModel {
            concurrency_limit: 100,
            straggler_prob: 0.03,
            straggler_factor: 3.0,
            ..Default::default()
        },
        memory_mb: 1024,
        stage_timeout_s: 60,
        monitor_interval_ms: 1000,
        max_attempts: 5,
    }
}

/// Expected runtime over a fixed set of seeds; straggler tails make any
/// single run a noisy oracle.
fn true_runtime(s: &Scenario, c: &Column) -> f64 {
    let runs: Vec<f64> = (0..8)
        .map(|seed| s.simulate(c, s.input_bytes, 50_000 + seed))
        .map(|r| {
            if r.failed {
                f64::INFINITY
            } else {
                r.makespan_ms as f64 / 1000.0
            }
        })
        .collect();
    runs.iter().sum::<f64>() / runs.len() as f64
}

fn measured_runtime(s: &Scenario, c: &Column, seed: u64) -> f64 {
    s.simulate(c, s.input_bytes, seed).makespan_ms as f64 / 1000.0
}

fn provisioning_optimality() -> Check {
    const GB: u64 = 1_000_000_000;
    let engineered = scenario("engineered", 3_200_000_000, 1000.0, 2800.0);
    let family = [
        engineered.clone(),
        scenario("engineered", 1_600_000_000, 1000.0, 2800.0),
        scenario("light", 3_200_000_000, 600.0, 2000.0),
        scenario("light", 1_600_000_000, 600.0, 2000.0),
        scenario("heavy", 3_200_000_000, 1500.0, 3500.0),
        scenario("heavy", 1_600_000_000, 1500.0, 3500.0),
    ];
    // earlier jobs already profiled at every column
    let mut prov = Provisioner::new(ProfileTable::new(), 100);
    for s in [
        scenario("ref-a", 2 * GB, 800.0, 2400.0),
        scenario("ref-b", 3_200_000_000, 1200.0, 3000.0),
        scenario("ref-c", 1_600_000_000, 700.0, 2600.0),
    ]
    .iter()
    {
        for c in s.columns() {
            prov.record(&s.row(), &c, true_runtime(s, &c)).unwrap();
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut hits = 0;
    let mut misses = Vec::new();
    for trial in 0..50u64 {
        let s = family.choose(&mut rng).unwrap();
        let choice = s
            .provision(&mut prov, &Goal::BestEffort, trial)
            .map_err(|e| e.to_string())?;
        let cols = s.columns();
        if cols.len() > 12 {
            return Err(format!("{} has {} columns", s.row(), cols.len()));
        }
        let best = cols.iter().map(|c| true_runtime(s, c)).fold(f64::INFINITY, f64::min);
        if true_runtime(s, &choice.column) <= best * 1.15 {
            hits += 1;
        } else {
            misses.push(format!("{}#{trial}:{}", s.row(), choice.column));
        }
        // the job's own run is what gets recorded
        prov.observe(&s.row(), &choice.column, measured_runtime(s, &choice.column, trial))
            .unwrap();
    }

    // cost over a few seeds of the engineered job at the settled choice
    let choice = engineered
        .provision(&mut prov, &Goal::BestEffort, 99)
        .map_err(|e| e.to_string())?;
    let far = Column::single(sluice::provision::max_concurrency_split(engineered.input_bytes, 100));
    let cost = |c: &Column| -> f64 {
        (100..110)
            .map(|seed| engineered.simulate(c, engineered.input_bytes, seed).cost)
            .sum()
    };
    let (chosen, default, max) = (cost(&choice.column), cost(&Column::single(DEFAULT_SPLIT)), cost(&far));
    let detail = format!(
        "{hits}/50 trials within 15% of optimal (need 40){}; engineered job at split {} costs {chosen:.4} vs 1MB {default:.4} vs max concurrency {max:.4}",
        if misses.is_empty() { String::new() } else { format!(", misses {}", misses.join(" ")) },
        choice.column,
    );
    ensure(hits >= 40 && chosen <= default && chosen <= max, detail)
}

// 7 ---------------------------------------------------------------------

fn proteomics_jobs(rt_config: RuntimeConfig, bytes: usize, k: usize) -> (Runtime, Vec<String>, CompiledPipeline) {
    let pipeline = builder(
        "proteomics-fine",
        "tsv",
        10_000,
        r#", {"kind": "run", "application": "toy_score"}, {"kind": "combine", "identifier": "1"}"#,
    );
    let objects: Vec<(String, Vec<u8>)> = (0..k)
        .map(|i| (format!("in/{i}"), sluice::samples::spectra(i as u64, bytes)))
        .collect();
    let store = Arc::new(ObjectStore::memory());
    for (key, v) in &objects {
        store.put(key, v.clone(), 0).unwrap();
    }
    let mut rt = Runtime::new(rt_config, store).unwrap();
    let ids = (0..k)
        .map(|i| {
            rt.submit(JobRequest::new(pipeline.clone(), &format!("in/{i}")))
                .unwrap()
        })
        .collect();
    (rt, ids, pipeline)
}

fn completion_times(rt: &Runtime, ids: &[String]) -> Vec<u64> {
    ids.iter()
        .map(|id| {
            let s = rt.summary(id).unwrap();
            s.submitted_ms + s.makespan_ms.expect("job finished")
        })
        .collect()
}

fn with_policy(policy: SchedulerPolicy, limit: u32) -> RuntimeConfig {
    RuntimeConfig {
        cluster: ClusterModel {
            concurrency_limit: limit,
            ..Default::default()
        },
        scheduler: policy,
        ..Default::default()
    }
}

fn scheduler_properties() -> Check {
    // FIFO on one slot finishes jobs in submission order
    let (mut rt, ids, _) = proteomics_jobs(with_policy(SchedulerPolicy::Fifo, 1), 30_000, 5);
    rt.run().map_err(|e| e.to_string())?;
    let fifo_single = completion_times(&rt, &ids);
    if !fifo_single.windows(2).all(|w| w[0] < w[1]) {
        return Err(format!("single-slot FIFO completions out of order: {fifo_single:?}"));
    }

    let spread = |policy| -> Result<u64, String> {
        let (mut rt, ids, _) = proteomics_jobs(with_policy(policy, 4), 100_000, 5);
        rt.run().map_err(|e| e.to_string())?;
        let t = completion_times(&rt, &ids);
        Ok(t.iter().max().unwrap() - t.iter().min().unwrap())
    };
    let (fifo_spread, rr_spread) = (spread(SchedulerPolicy::Fifo)?, spread(SchedulerPolicy::RoundRobin)?);
    if rr_spread > fifo_spread {
        return Err(format!(
            "round-robin spread {rr_spread} ms > FIFO spread {fifo_spread} ms"
        ));
    }

    // a high-priority job alone, then arriving behind background load
    let priority_cfg = with_policy(SchedulerPolicy::Priority, 8);
    let tick = priority_cfg.monitor_interval_ms;
    let urgent_input = sluice::samples::spectra(99, 60_000);
    let urgent_makespan = |background: usize| -> Result<(u64, Runtime, Vec<String>), String> {
        let (mut rt, ids, pipeline) = proteomics_jobs(priority_cfg.clone(), 200_000, background);
        rt.run_until(1500).map_err(|e| e.to_string())?;
        rt.store().put("in/urgent", urgent_input.clone(), rt.now()).unwrap();
        let id = rt
            .submit(JobRequest::new(pipeline, "in/urgent").priority(10))
            .map_err(|e| e.to_string())?;
        rt.run().map_err(|e| e.to_string())?;
        let m = rt
            .summary(&id)
            .and_then(|s| s.makespan_ms)
            .ok_or("urgent job did not finish")?;
        Ok((m, rt, ids))
    };
    let (alone, _, _) = urgent_makespan(0)?;
    let (loaded, rt, background) = urgent_makespan(4)?;
    let log = rt.store().log();
    let has = |ev| {
        background
            .iter()
            .any(|b| log.iter().any(|e| e.job == *b && e.event == ev))
    };
    let (paused, resumed) = (has(LogEvent::Paused), has(LogEvent::Resumed));
    ensure(
        loaded.abs_diff(alone) <= tick && paused && resumed,
        format!(
            "single-slot FIFO order kept; spread RR {rr_spread} ms vs FIFO {fifo_spread} ms; \
             priority makespan {loaded} ms loaded vs {alone} ms alone (tick {tick} ms); paused logged {paused}, resumed logged {resumed}"
        ),
    )
}

// 8 ---------------------------------------------------------------------

/// Intervals during which at least one function ran.
fn busy_intervals(trace: &[TraceRecord]) -> Vec<(u64, u64)> {
    let mut edges: Vec<(u64, i32)> = trace
        .iter()
        .filter_map(|r| match r.event {
            TraceEvent::Start => Some((r.time_ms, 1)),
            TraceEvent::Finish => Some((r.time_ms, -1)),
            _ => None,
        })
        .collect();
    edges.sort();
    let mut out = Vec::new();
    let mut cur = 0;
    let mut open = 0;
    for (t, d) in edges {
        if cur == 0 && d > 0 {
            open = t;
        }
        cur += d;
        if cur == 0 {
            out.push((open, t));
        }
    }
    out
}

fn elasticity() -> Check {
    let config = RunConfig::default();
    let w = WorkloadSpec {
        arrivals: Arrivals::Bursty {
            interval_s: 60.0,
            duration_s: 1800.0,
            burst_size: 100,
            burst_period_s: 1800.0,
            burst_offset_s: Some(600.0),
        },
        template: JobTemplate {
            pipeline: "compression".into(),
            input_bytes: 300_000,
            goal: Goal::BestEffort,
            priority: 0,
        },
    };
    let pipeline = catalog::compiled("compression").unwrap();
    let inputs = |i: usize| catalog::sample("compression", i as u64, 300_000).unwrap();
    let (r, _) = run_bench(&config, &w, &pipeline, &inputs, true).map_err(|e| e.to_string())?;
    let vm = r.vm.as_ref().ok_or("no VM run")?;
    if vm.completions.len() != r.jobs.len() || r.done() != r.jobs.len() {
        return Err(format!(
            "{} serverless and {} VM jobs of {} finished",
            r.done(),
            vm.completions.len(),
            r.jobs.len()
        ));
    }
    let (sls, vms) = (r.mean_completion_ms(), vm.mean_completion_ms());
    if sls >= vms {
        return Err(format!(
            "serverless mean completion {sls:.0} ms not below VM {vms:.0} ms"
        ));
    }

    let busy = busy_intervals(&r.trace);
    let overlaps = |a: u64, b: u64| busy.iter().any(|(s, e)| *s < b && a < *e);
    let (mut idle, mut active) = (0, 0);
    for pair in r.samples.windows(2) {
        let (x, y) = (&pair[0], &pair[1]);
        if overlaps(x.time_ms, y.time_ms) {
            active += 1;
            if y.accrued_mb_ms <= x.accrued_mb_ms {
                return Err(format!("no accrual in busy interval {}..{}", x.time_ms, y.time_ms));
            }
        } else {
            idle += 1;
            if y.cumulative_cost != x.cumulative_cost || y.accrued_mb_ms != x.accrued_mb_ms {
                return Err(format!("cost rose while idle in {}..{}", x.time_ms, y.time_ms));
            }
        }
    }
    let final_cost = r.samples.last().unwrap().cumulative_cost;
    ensure(
        idle > 0 && (final_cost - r.total_cost).abs() <= 1e-12 * r.total_cost.max(1.0),
        format!(
            "{} jobs: mean completion serverless {sls:.0} ms vs VM {vms:.0} ms; cost flat in all {idle} idle intervals, rising in {active} busy ones",
            r.jobs.len()
        ),
    )
}

// 9 ---------------------------------------------------------------------

fn crash_recovery() -> Check {
    let pipeline = builder(
        "proteomics-fine",
        "tsv",
        20_000,
        r#", {"kind": "run", "application": "toy_score"}, {"kind": "combine", "identifier": "1"}"#,
    );
    let input = sluice::samples::spectra(9, 400_000);
    let reference = {
        let mut rt = Runtime::new(RuntimeConfig::default(), memory_store(&[("in", input.clone())])).unwrap();
        let id = rt.submit(JobRequest::new(pipeline.clone(), "in")).unwrap();
        rt.run().unwrap();
        (final_bytes(&rt, &id), rt.now())
    };
    let config = RuntimeConfig {
        cluster: ClusterModel {
            concurrency_limit: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut crash_points = Vec::new();
    for fraction in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let dir = tempfile::tempdir().unwrap();
        let mut executions: BTreeMap<String, u32> = BTreeMap::new();
        let (id, crash_at) = {
            let store = Arc::new(ObjectStore::open_disk(dir.path()).unwrap());
            store.put("in", input.clone(), 0).unwrap();
            let mut rt = Runtime::new(config.clone(), store).unwrap();
            let id = rt.submit(JobRequest::new(pipeline.clone(), "in")).unwrap();
            // how long the job runs uninterrupted under this config
            let full = {
                let mut probe = Runtime::new(config.clone(), memory_store(&[("in", input.clone())])).unwrap();
                probe.submit(JobRequest::new(pipeline.clone(), "in")).unwrap();
                probe.run().unwrap();
                probe.now()
            };
            let crash_at = (full as f64 * fraction) as u64;
            rt.run_until(crash_at).map_err(|e| e.to_string())?;
            for (k, c) in rt.executions() {
                *executions.entry(k.clone()).or_default() += c;
            }
            (id, crash_at)
            // the runtime and its in-flight functions are dropped here
        };
        let store = Arc::new(ObjectStore::open_disk(dir.path()).unwrap());
        let mut rt = Runtime::recover(config.clone(), store).map_err(|e| e.to_string())?;
        rt.run().map_err(|e| e.to_string())?;
        if rt.job_state(&id) != Some(JobState::Done) {
            return Err(format!("crash at {crash_at} ms: job not done after recovery"));
        }
        for (k, c) in rt.executions() {
            *executions.entry(k.clone()).or_default() += c;
        }
        if let Some((k, c)) = executions.iter().find(|(_, c)| **c > 1) {
            return Err(format!("crash at {crash_at} ms: {k} executed {c} times"));
        }
        if final_bytes(&rt, &id) != reference.0 {
            return Err(format!(
                "crash at {crash_at} ms: output differs from an uninterrupted run"
            ));
        }
        crash_points.push(crash_at);
    }
    Ok(format!(
        "crashes at {crash_points:?} ms all recovered from the disk log, outputs match, every output key executed once"
    ))
}

// 10 --------------------------------------------------------------------

fn cross_mode() -> Check {
    let formats = FormatRegistry::default();
    let kernels = KernelRegistry::default();
    let sizes = [("compression", 2_500_000), ("proteomics", 2_500_000), ("knn", 600_000)];
    let mut notes = Vec::new();
    for (name, bytes) in sizes {
        let pipeline = catalog::compiled(name).unwrap();
        let data = catalog::sample(name, 0, bytes).unwrap();
        let local =
            run_local(&pipeline, data.input.clone(), &data.objects, &formats, &kernels).map_err(|e| e.to_string())?;
        let store = Arc::new(ObjectStore::memory());
        store.put("input", data.input.clone(), 0).unwrap();
        for (k, v) in &data.objects {
            store.put(k, v.clone(), 0).unwrap();
        }
        let mut rt = Runtime::new(RuntimeConfig::default(), store).unwrap();
        let id = rt.submit(JobRequest::new(pipeline, "input")).unwrap();
        rt.run().unwrap();
        let sim: Vec<Vec<u8>> = final_bytes(&rt, &id);
        let loc: Vec<Vec<u8>> = local.outputs.iter().map(|(_, b)| b.clone()).collect();
        if sim != loc {
            return Err(format!("{name}: library local run differs from the simulated run"));
        }
        let tasks: usize = local.tasks.iter().sum();
        notes.push(format!("{name} ({} objects, {tasks} tasks)", loc.len()));
    }

    // the same through the command line
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_sluice");
    for (name, bytes) in sizes {
        let sample = bytes.to_string();
        for (cmd, out) in [("test-local", "local"), ("run", "sim")] {
            let status = Command::new(bin)
                .args([cmd, name, "--sample", &sample, "--out-dir", out])
                .current_dir(dir.path())
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Err(format!("{cmd} {name}: {}", String::from_utf8_lossy(&status.stderr)));
            }
        }
        let read = |sub: &str| -> Vec<Vec<u8>> {
            let mut paths: Vec<_> = std::fs::read_dir(dir.path().join(sub))
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            paths.sort();
            paths.iter().map(|p| std::fs::read(p).unwrap()).collect()
        };
        if read("local/local") != read("sim/outputs") {
            return Err(format!("{name}: test-local output files differ from run outputs"));
        }
        std::fs::remove_dir_all(dir.path().join("local")).unwrap();
        std::fs::remove_dir_all(dir.path().join("sim")).unwrap();
    }
    Ok(format!("byte-equal in library and CLI for {}", notes.join(", ")))
}

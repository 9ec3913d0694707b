//! Phase-model jobs simulated on the function simulator without real data,
//! cheap enough to run every candidate configuration for comparison.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{extrapolate, fingerprint, median, Column, PhaseMeasure, Provisioner, Result};
use crate::orchestrator::Goal;
use crate::sim::{ClusterModel, FaasSim, SimEvent, TaskTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    /// Fans out over the input at the column's split size.
    Parallel,
    /// One task over everything the previous phase wrote.
    FanIn,
}

/// Task duration model of one phase: `a + b·MB` per task, plus `c` per input
/// object for fan-in phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseModel {
    pub kind: PhaseKind,
    pub a_ms: f64,
    pub b_ms_per_mb: f64,
    #[serde(default)]
    pub c_ms_per_input: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub input_bytes: u64,
    pub phases: Vec<PhaseModel>,
    pub cluster: ClusterModel,
    pub memory_mb: u32,
    pub stage_timeout_s: u64,
    pub monitor_interval_ms: u64,
    pub max_attempts: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    pub makespan_ms: u64,
    pub cost: f64,
    pub tasks: u64,
    pub respawns: u64,
    pub phases: Vec<PhaseMeasure>,
    /// Some task ran out of attempts.
    pub failed: bool,
}

#[derive(Debug)]
struct Slot {
    invoked_at: Option<u64>,
    attempts: u32,
    queued: bool,
    done: bool,
}

impl Scenario {
    pub fn parallel_phases(&self) -> usize {
        self.phases
            .iter()
            .filter(|p| p.kind == PhaseKind::Parallel)
            .count()
            .max(1)
    }

    pub fn max_lambdas(&self) -> u64 {
        self.cluster.concurrency_limit as u64
    }

    pub fn columns(&self) -> Vec<Column> {
        super::columns(self.input_bytes, self.parallel_phases(), self.max_lambdas())
    }

    pub fn row(&self) -> String {
        fingerprint(&self.name, self.input_bytes)
    }

    /// Total function count at `column` on the full input.
    pub fn tasks(&self, column: &Column) -> u64 {
        self.phase_tasks(column, self.input_bytes).iter().sum()
    }

    fn phase_tasks(&self, column: &Column, bytes: u64) -> Vec<u64> {
        let mut next_split = column.splits.iter().cycle();
        self.phases
            .iter()
            .map(|p| match p.kind {
                PhaseKind::Parallel => bytes.div_ceil(*next_split.next().expect("cycle")).max(1),
                PhaseKind::FanIn => 1,
            })
            .collect()
    }

    /// Runs the job over `bytes` of input at `column` with the cluster's
    /// failure and straggler model seeded by `seed`. Tasks are respawned
    /// when not done within the stage timeout.
    pub fn simulate(&self, column: &Column, bytes: u64, seed: u64) -> ScenarioRun {
        let model = ClusterModel {
            rng_seed: seed,
            ..self.cluster.clone()
        };
        let mut sim: FaasSim<(usize, usize), ()> = FaasSim::new(model);
        sim.set_trace(false);
        let counts = self.phase_tasks(column, bytes);
        let timeout_ms = self.stage_timeout_s * 1000;
        let mut phases = Vec::new();
        let mut respawns = 0;
        let mut failed = false;
        let mut prev_outputs = 1u64;
        'phases: for (pi, p) in self.phases.iter().enumerate() {
            let n = counts[pi] as usize;
            let mb = bytes as f64 / 1e6 / n as f64;
            let extra = if p.kind == PhaseKind::FanIn {
                p.c_ms_per_input * prev_outputs as f64
            } else {
                0.0
            };
            let base = (p.a_ms + p.b_ms_per_mb * mb + extra).ceil().max(1.0) as u64;
            let start = sim.now();
            let mut slots: Vec<Slot> = (0..n)
                .map(|_| Slot {
                    invoked_at: None,
                    attempts: 0,
                    queued: true,
                    done: false,
                })
                .collect();
            // like the runtime, tasks wait in a queue until a function slot is
            // free, so the timeout clock starts at dispatch
            let mut pending: VecDeque<usize> = (0..n).collect();
            let mut remaining = n;
            let mut task_ms = Vec::with_capacity(n);
            let mut next_tick = start + self.monitor_interval_ms;
            sim.schedule(next_tick, "~tick", ());
            while remaining > 0 {
                while sim.free_slots() > 0 {
                    let Some(t) = pending.pop_front() else { break };
                    let s = &mut slots[t];
                    s.queued = false;
                    if s.done {
                        continue;
                    }
                    s.attempts += 1;
                    s.invoked_at = Some(sim.now());
                    sim.invoke(
                        TaskTag::new("scenario", pi as u32, t as u32),
                        (pi, t),
                        self.memory_mb,
                        base,
                    );
                }
                let Some(ev) = sim.next() else { break };
                match ev {
                    SimEvent::Finished(inst) => {
                        let (ph, t) = inst.payload;
                        if ph == pi && inst.outcome.succeeded() && !slots[t].done {
                            slots[t].done = true;
                            remaining -= 1;
                            task_ms.push((inst.end - inst.submit) as f64);
                        }
                    }
                    SimEvent::Signal(()) => {
                        let now = sim.now();
                        if now != next_tick {
                            continue;
                        }
                        for (t, s) in slots.iter_mut().enumerate() {
                            let overdue = s.invoked_at.is_some_and(|at| now > at + timeout_ms);
                            if s.done || s.queued || !overdue {
                                continue;
                            }
                            if s.attempts >= self.max_attempts {
                                failed = true;
                                break 'phases;
                            }
                            s.queued = true;
                            respawns += 1;
                            pending.push_back(t);
                        }
                        next_tick = now + self.monitor_interval_ms;
                        sim.schedule(next_tick, "~tick", ());
                    }
                }
            }
            phases.push(PhaseMeasure {
                duration_s: (sim.now() - start) as f64 / 1000.0,
                tasks: n as u64,
                task_s: median(&mut task_ms) / 1000.0,
                fan_in: p.kind == PhaseKind::FanIn,
            });
            prev_outputs = n as u64;
        }
        let makespan_ms = sim.now();
        // stale duplicates still run to completion and are billed
        while let Some(ev) = sim.next() {
            if let SimEvent::Signal(()) = ev {
                continue;
            }
        }
        ScenarioRun {
            makespan_ms,
            cost: sim.cost(None),
            tasks: counts.iter().sum(),
            respawns,
            phases,
            failed,
        }
    }

    /// Canary estimate of the full-input runtime at `column`, in seconds.
    pub fn canary_estimate(&self, column: &Column, canary_bytes: u64, seed: u64) -> f64 {
        let run = self.simulate(column, canary_bytes, seed);
        let full = self.phase_tasks(column, self.input_bytes);
        extrapolate(
            &run.phases,
            &full,
            self.input_bytes as f64 / canary_bytes.max(1) as f64,
            self.max_lambdas(),
        )
    }

    /// Canary runs if the row is new, then a choice for `goal`.
    pub fn provision(&self, prov: &mut Provisioner, goal: &Goal, seed: u64) -> Result<super::Choice> {
        let row = self.row();
        if !prov.table.has_row(&row) {
            let plan = prov.plan_canary(self.input_bytes, self.parallel_phases());
            for c in &plan.configs {
                let est = self.canary_estimate(c, plan.canary_bytes, seed);
                prov.record(&row, c, est)?;
            }
        }
        let cols = self.columns();
        prov.choose(&row, &cols, goal, |c, t| {
            super::ledger_cost(&self.cluster, self.memory_mb, t, self.tasks(c))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provision::{ProfileTable, DEFAULT_SPLIT};

    fn scenario() -> Scenario {
        Scenario {
            name: "s".into(),
            input_bytes: 400_000_000,
            phases: vec![
                PhaseModel {
                    kind: PhaseKind::Parallel,
                    a_ms: 200.0,
                    b_ms_per_mb: 100.0,
                    c_ms_per_input: 0.0,
                },
                PhaseModel {
                    kind: PhaseKind::FanIn,
                    a_ms: 100.0,
                    b_ms_per_mb: 1.0,
                    c_ms_per_input: 5.0,
                },
            ],
            cluster: ClusterModel {
                concurrency_limit: 50,
                ..Default::default()
            },
            memory_mb: 1024,
            stage_timeout_s: 60,
            monitor_interval_ms: 1000,
            max_attempts: 10,
        }
    }

    #[test]
    fn fault_free_runtime_matches_wave_arithmetic() {
        let s = scenario();
        let run = s.simulate(&Column::single(DEFAULT_SPLIT), s.input_bytes, 0);
        // 400 tasks of 300 ms in 8 waves with 50 ms spawn each, then a fan-in
        // of 100 + 400 + 5*400 ms
        let parallel = 8 * (50 + 300);
        let fan_in = 50 + 2500;
        assert_eq!(run.makespan_ms, parallel + fan_in);
        assert_eq!(run.tasks, 401);
        assert_eq!(run.respawns, 0);
    }

    #[test]
    fn canary_extrapolation_exact_without_faults() {
        let s = scenario();
        let c = Column::single(DEFAULT_SPLIT);
        let truth = s.simulate(&c, s.input_bytes, 0).phases[0].duration_s;
        let est = s.canary_estimate(&Column::single(DEFAULT_SPLIT), 20_000_000, 0);
        let run = s.simulate(&c, 20_000_000, 0);
        assert!((est - (truth + run.phases[1].duration_s * 20.0)).abs() < 1e-9);
    }

    #[test]
    fn stragglers_trigger_respawns_and_extra_cost() {
        let mut s = scenario();
        let clean = s.simulate(&Column::single(DEFAULT_SPLIT), s.input_bytes, 1);
        s.cluster.straggler_prob = 0.2;
        s.stage_timeout_s = 1;
        let slow = s.simulate(&Column::single(DEFAULT_SPLIT), s.input_bytes, 1);
        assert!(slow.respawns > 0);
        assert!(slow.cost > clean.cost);
        assert!(!slow.failed);
    }

    #[test]
    fn provision_records_canaries_once() {
        let s = scenario();
        let mut p = Provisioner::new(ProfileTable::new(), s.max_lambdas());
        let c = s.provision(&mut p, &Goal::BestEffort, 0).unwrap();
        assert!(s.columns().contains(&c.column));
        assert_eq!(p.table.observed_count(), 2);
        s.provision(&mut p, &Goal::BestEffort, 1).unwrap();
        assert_eq!(p.table.observed_count(), 2);
    }
}

//! Choosing split sizes per job from canary runs and a profile table of
//! past runtimes, completed by low-rank SGD.

pub mod live;
pub mod scenario;
pub mod sgd;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::orchestrator::Goal;
use crate::sim::ClusterModel;
pub use sgd::SgdParams;

/// The split size every row is profiled at.
pub const DEFAULT_SPLIT: u64 = 1_000_000;
/// Canary inputs are at most this many bytes of the job's input.
pub const CANARY_LIMIT: u64 = 20_000_000;
pub const MAX_COLUMNS: usize = 12;
/// Measured runtimes further than this from the prediction count as deviations.
pub const DEVIATION: f64 = 0.20;

#[derive(Debug, thiserror::Error)]
pub enum ProvisionError {
    #[error("profile table has no observation for row {0}")]
    Underdetermined(String),
    #[error("no candidate configurations")]
    NoCandidates,
    #[error("runtime must be positive, got {0}")]
    BadRuntime(f64),
    #[error("bad column id {0:?}")]
    BadColumn(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ProvisionError>;

/// One configuration: a split size per sizable phase.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Column {
    pub splits: Vec<u64>,
}

impl Column {
    pub fn single(split: u64) -> Self {
        Column { splits: vec![split] }
    }

    pub fn uniform(split: u64, phases: usize) -> Self {
        Column {
            splits: vec![split; phases.max(1)],
        }
    }

    pub fn is_default(&self) -> bool {
        self.splits.iter().all(|s| *s == DEFAULT_SPLIT)
    }

    /// Position on the log2 split axis, used to interpolate across columns.
    pub fn coordinate(&self) -> f64 {
        self.splits.iter().map(|s| (*s as f64).log2()).sum::<f64>() / self.splits.len() as f64
    }

    /// Task count of each phase for `input_bytes`.
    pub fn tasks(&self, input_bytes: u64) -> Vec<u64> {
        self.splits.iter().map(|s| input_bytes.div_ceil(*s).max(1)).collect()
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.splits.iter().map(u64::to_string).collect();
        f.write_str(&parts.join(":"))
    }
}

impl FromStr for Column {
    type Err = ProvisionError;

    fn from_str(s: &str) -> Result<Self> {
        let splits = s
            .split(':')
            .map(|p| p.parse::<u64>().ok().filter(|v| *v > 0))
            .collect::<Option<Vec<u64>>>()
            .ok_or_else(|| ProvisionError::BadColumn(s.to_string()))?;
        Ok(Column { splits })
    }
}

/// Row key: pipeline name and log2 input-size bucket.
pub fn fingerprint(pipeline: &str, input_bytes: u64) -> String {
    format!("{pipeline}@{}", input_bytes.max(1).ilog2())
}

/// Split size at which the job runs with `max_lambdas` functions.
pub fn max_concurrency_split(input_bytes: u64, max_lambdas: u64) -> u64 {
    input_bytes.div_ceil(max_lambdas.max(1)).max(1)
}

/// Geometric split grid between the default split and the max-concurrency
/// split, both included, at most `cap` values.
pub fn split_grid(input_bytes: u64, max_lambdas: u64, cap: usize) -> Vec<u64> {
    let far = max_concurrency_split(input_bytes, max_lambdas);
    let (lo, hi) = (DEFAULT_SPLIT.min(far), DEFAULT_SPLIT.max(far));
    let mut grid = vec![lo];
    let mut s = lo;
    while s.saturating_mul(2) < hi {
        s *= 2;
        grid.push(s);
    }
    if hi != lo {
        grid.push(hi);
    }
    thin(grid, cap.max(2))
}

/// Keeps `cap` evenly spaced entries, including both ends.
fn thin(v: Vec<u64>, cap: usize) -> Vec<u64> {
    if v.len() <= cap {
        return v;
    }
    let last = v.len() - 1;
    let mut out: Vec<u64> = (0..cap).map(|i| v[i * last / (cap - 1)]).collect();
    out.dedup();
    out
}

/// Candidate configurations for a job with `phases` sizable phases.
pub fn columns(input_bytes: u64, phases: usize, max_lambdas: u64) -> Vec<Column> {
    let phases = phases.max(1);
    if phases == 1 {
        return split_grid(input_bytes, max_lambdas, MAX_COLUMNS)
            .into_iter()
            .map(Column::single)
            .collect();
    }
    let per_phase = (MAX_COLUMNS as f64).powf(1.0 / phases as f64).floor() as usize;
    let mut out = BTreeSet::new();
    if per_phase >= 2 {
        let grid = split_grid(input_bytes, max_lambdas, per_phase);
        let mut combos: Vec<Vec<u64>> = vec![Vec::new()];
        for _ in 0..phases {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    grid.iter().map(move |s| {
                        let mut c = c.clone();
                        c.push(*s);
                        c
                    })
                })
                .collect();
        }
        out.extend(combos.into_iter().map(|splits| Column { splits }));
    } else {
        for c in canary_configs(input_bytes, phases, max_lambdas) {
            out.insert(c);
        }
        for s in split_grid(input_bytes, max_lambdas, MAX_COLUMNS) {
            if out.len() >= MAX_COLUMNS {
                break;
            }
            out.insert(Column::uniform(s, phases));
        }
    }
    out.into_iter().collect()
}

fn canary_configs(input_bytes: u64, phases: usize, max_lambdas: u64) -> Vec<Column> {
    let far = max_concurrency_split(input_bytes, max_lambdas);
    let mut configs = vec![Column::uniform(DEFAULT_SPLIT, phases), Column::uniform(far, phases)];
    if phases > 1 {
        let mut a = vec![far; phases];
        a[0] = DEFAULT_SPLIT;
        let mut b = vec![DEFAULT_SPLIT; phases];
        b[0] = far;
        configs.push(Column { splits: a });
        configs.push(Column { splits: b });
    }
    let mut seen = BTreeSet::new();
    configs.retain(|c| seen.insert(c.clone()));
    configs
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanaryPlan {
    /// Length of the input prefix to run on.
    pub canary_bytes: u64,
    pub configs: Vec<Column>,
}

/// Two configurations for a single-phase job, four for a multi-phase one,
/// run over the first `min(20MB, input)` bytes.
pub fn plan_canary(input_bytes: u64, phases: usize, max_lambdas: u64) -> CanaryPlan {
    CanaryPlan {
        canary_bytes: input_bytes.min(CANARY_LIMIT),
        configs: canary_configs(input_bytes, phases.max(1), max_lambdas),
    }
}

/// Timing of one phase of a canary run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseMeasure {
    pub duration_s: f64,
    pub tasks: u64,
    /// Median dispatch-to-finish time of one task; 0 when unknown.
    pub task_s: f64,
    pub fan_in: bool,
}

/// Median of `xs`, or 0 for an empty slice.
pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len().is_multiple_of(2) {
        (xs[m - 1] + xs[m]) / 2.0
    } else {
        xs[m]
    }
}

/// Scales a canary run to the full input. Parallel phases take waves of
/// typical tasks, scaled by per-task input size, plus the canary's tail
/// beyond its typical waves once; fan-in phases scale linearly with input
/// size.
pub fn extrapolate(phases: &[PhaseMeasure], full_tasks: &[u64], bytes_ratio: f64, max_lambdas: u64) -> f64 {
    let waves = |n: u64| n.div_ceil(max_lambdas.max(1)).max(1) as f64;
    phases
        .iter()
        .zip(full_tasks)
        .map(|(p, &full)| {
            if p.fan_in {
                p.duration_s * bytes_ratio
            } else {
                let per_task = bytes_ratio * p.tasks.max(1) as f64 / full.max(1) as f64;
                let typical = if p.task_s > 0.0 {
                    p.task_s.min(p.duration_s / waves(p.tasks))
                } else {
                    p.duration_s / waves(p.tasks)
                };
                let tail = (p.duration_s - typical * waves(p.tasks)).max(0.0);
                typical * waves(full) * per_task.max(1.0) + tail
            }
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: f64,
    pub observed: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    row: String,
    column: String,
    value: f64,
    observed: bool,
}

/// Jobs × configurations matrix of runtimes in seconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProfileTable {
    cells: BTreeMap<String, BTreeMap<Column, Cell>>,
}

impl ProfileTable {
    pub fn new() -> Self {
        ProfileTable::default()
    }

    /// Sets an observed cell; later records overwrite earlier ones.
    pub fn record(&mut self, row: &str, column: &Column, runtime_s: f64) -> Result<()> {
        if !(runtime_s > 0.0 && runtime_s.is_finite()) {
            return Err(ProvisionError::BadRuntime(runtime_s));
        }
        self.cells.entry(row.to_string()).or_default().insert(
            column.clone(),
            Cell {
                value: runtime_s,
                observed: true,
            },
        );
        Ok(())
    }

    pub fn get(&self, row: &str, column: &Column) -> Option<Cell> {
        self.cells.get(row)?.get(column).copied()
    }

    pub fn has_row(&self, row: &str) -> bool {
        self.cells.get(row).is_some_and(|r| r.values().any(|c| c.observed))
    }

    pub fn rows(&self) -> impl Iterator<Item = &str> {
        self.cells.keys().map(String::as_str)
    }

    pub fn observed_count(&self) -> usize {
        self.cells
            .values()
            .flat_map(|r| r.values())
            .filter(|c| c.observed)
            .count()
    }

    fn observed(&self) -> impl Iterator<Item = (&str, &Column, f64)> {
        self.cells.iter().flat_map(|(r, cols)| {
            cols.iter()
                .filter(|(_, c)| c.observed)
                .map(move |(col, c)| (r.as_str(), col, c.value))
        })
    }

    /// Predicts every empty cell of the given columns for all rows and
    /// stores the predictions unflagged.
    pub fn complete(&mut self, extra_columns: &[Column], params: &SgdParams) -> Result<()> {
        let model = Completion::fit(self, extra_columns, params)?;
        for (row, cols) in self.cells.iter_mut() {
            for col in model.cols.iter() {
                let observed = cols.get(col).is_some_and(|c| c.observed);
                if !observed {
                    if let Some(v) = model.predict(row, col) {
                        cols.insert(
                            col.clone(),
                            Cell {
                                value: v,
                                observed: false,
                            },
                        );
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for (row, cols) in &self.cells {
            for (col, c) in cols {
                out.serialize(CsvRow {
                    row: row.clone(),
                    column: col.to_string(),
                    value: c.value,
                    observed: c.observed,
                })?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl std::io::Read) -> Result<Self> {
        let mut table = ProfileTable::new();
        for rec in csv::Reader::from_reader(r).deserialize() {
            let rec: CsvRow = rec?;
            let col: Column = rec.column.parse()?;
            table.cells.entry(rec.row).or_default().insert(
                col,
                Cell {
                    value: rec.value,
                    observed: rec.observed,
                },
            );
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Loads a table, or an empty one when the file does not exist.
    pub fn load_or_default(path: &Path) -> Result<Self> {
        match std::fs::File::open(path) {
            Ok(f) => ProfileTable::read_csv(std::io::BufReader::new(f)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(ProfileTable::new()),
            Err(e) => Err(e.into()),
        }
    }
}

/// Fitted model: rows are scaled by their default-column runtime, columns
/// carry the mean scaled runtime as a baseline, and SGD factors the
/// residuals.
#[derive(Debug, Clone)]
pub struct Completion {
    rows: BTreeMap<String, (usize, f64)>,
    cols: Vec<Column>,
    baseline: Vec<f64>,
    factors: sgd::Factors,
    observed: BTreeMap<(String, Column), f64>,
}

impl Completion {
    pub fn fit(table: &ProfileTable, extra_columns: &[Column], params: &SgdParams) -> Result<Self> {
        let observed: BTreeMap<(String, Column), f64> = table
            .observed()
            .map(|(r, c, v)| ((r.to_string(), c.clone()), v))
            .collect();
        if observed.is_empty() {
            return Err(ProvisionError::Underdetermined("<all>".into()));
        }
        let mut cols: BTreeSet<Column> = observed.keys().map(|(_, c)| c.clone()).collect();
        cols.extend(extra_columns.iter().cloned());
        let cols: Vec<Column> = cols.into_iter().collect();
        let col_index: BTreeMap<&Column, usize> = cols.iter().enumerate().map(|(i, c)| (c, i)).collect();

        // scale by the default column where observed
        let mut scale: BTreeMap<String, f64> = BTreeMap::new();
        for ((r, c), v) in &observed {
            if c.is_default() {
                scale.insert(r.clone(), *v);
            }
        }
        let mut sums = vec![(0.0, 0usize); cols.len()];
        for ((r, c), v) in &observed {
            if let Some(s) = scale.get(r) {
                let e = &mut sums[col_index[c]];
                e.0 += v / s;
                e.1 += 1;
            }
        }
        let known: Vec<Option<f64>> = sums.iter().map(|(s, n)| (*n > 0).then(|| s / *n as f64)).collect();
        // rows without a default observation: ratio against known baselines
        let row_names: BTreeSet<&String> = observed.keys().map(|(r, _)| r).collect();
        for r in &row_names {
            if scale.contains_key(*r) {
                continue;
            }
            let mut ratios: Vec<f64> = observed
                .iter()
                .filter(|((rr, _), _)| rr == *r)
                .filter_map(|((_, c), v)| known[col_index[c]].map(|b| v / b))
                .collect();
            if ratios.is_empty() {
                ratios = observed
                    .iter()
                    .filter(|((rr, _), _)| rr == *r)
                    .map(|(_, v)| *v)
                    .collect();
            }
            ratios.sort_by(f64::total_cmp);
            scale.insert((*r).clone(), ratios[ratios.len() / 2]);
        }
        let baseline = interpolate(&cols, &known);

        let rows: BTreeMap<String, (usize, f64)> = row_names
            .iter()
            .enumerate()
            .map(|(i, r)| ((*r).clone(), (i, scale[*r])))
            .collect();
        let cells: Vec<(usize, usize, f64)> = observed
            .iter()
            .map(|((r, c), v)| {
                let (ri, s) = rows[r];
                let ci = col_index[c];
                (ri, ci, v / s - baseline[ci])
            })
            .collect();
        let factors = sgd::factorize(rows.len(), cols.len(), &cells, params);
        Ok(Completion {
            rows,
            cols,
            baseline,
            factors,
            observed,
        })
    }

    /// Model estimate, ignoring any observation for the cell.
    pub fn estimate(&self, row: &str, col: &Column) -> Option<f64> {
        let ci = self.cols.iter().position(|c| c == col)?;
        let (ri, scale) = *self.rows.get(row)?;
        let v = scale * (self.baseline[ci] + self.factors.predict(ri, ci));
        Some(v.max(scale * 1e-3).max(1e-9))
    }

    /// The observation where there is one, else the model estimate.
    pub fn predict(&self, row: &str, col: &Column) -> Option<f64> {
        match self.observed.get(&(row.to_string(), col.clone())) {
            Some(v) => Some(*v),
            None => self.estimate(row, col),
        }
    }
}

/// Fills unknown column baselines by linear interpolation on the log2 split
/// axis, flat beyond the outermost known columns.
fn interpolate(cols: &[Column], known: &[Option<f64>]) -> Vec<f64> {
    let points: Vec<(f64, f64)> = cols
        .iter()
        .zip(known)
        .filter_map(|(c, k)| k.map(|v| (c.coordinate(), v)))
        .collect();
    cols.iter()
        .zip(known)
        .map(|(c, k)| {
            if let Some(v) = k {
                return *v;
            }
            let x = c.coordinate();
            let below = points.iter().filter(|p| p.0 <= x).max_by(|a, b| a.0.total_cmp(&b.0));
            let above = points.iter().filter(|p| p.0 >= x).min_by(|a, b| a.0.total_cmp(&b.0));
            match (below, above) {
                (Some(a), Some(b)) if b.0 > a.0 => a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0),
                (Some(a), _) => a.1,
                (None, Some(b)) => b.1,
                (None, None) => 1.0,
            }
        })
        .collect()
}

/// Cost of running `tasks` functions of `memory_mb` for `runtime_s` each.
pub fn ledger_cost(cluster: &ClusterModel, memory_mb: u32, runtime_s: f64, tasks: u64) -> f64 {
    let mb_ms = memory_mb as f64 * runtime_s * 1000.0 * tasks as f64;
    cluster.cost_of(mb_ms.round() as u128)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub column: Column,
    pub predicted_runtime_s: f64,
    pub predicted_cost: f64,
    /// The goal could not be met; the best-effort column was chosen.
    pub infeasible: bool,
}

#[derive(Debug, Clone)]
pub struct Provisioner {
    pub table: ProfileTable,
    pub params: SgdParams,
    pub max_lambdas: u64,
}

impl Provisioner {
    pub fn new(table: ProfileTable, max_lambdas: u64) -> Self {
        Provisioner {
            table,
            params: SgdParams::default(),
            max_lambdas,
        }
    }

    pub fn plan_canary(&self, input_bytes: u64, phases: usize) -> CanaryPlan {
        plan_canary(input_bytes, phases, self.max_lambdas)
    }

    pub fn columns(&self, input_bytes: u64, phases: usize) -> Vec<Column> {
        columns(input_bytes, phases, self.max_lambdas)
    }

    pub fn record(&mut self, row: &str, column: &Column, runtime_s: f64) -> Result<()> {
        self.table.record(row, column, runtime_s)
    }

    /// Records a measured runtime and returns its relative deviation from
    /// what was predicted before, if there was a prediction.
    pub fn observe(&mut self, row: &str, column: &Column, runtime_s: f64) -> Result<Option<f64>> {
        let before = Completion::fit(&self.table, std::slice::from_ref(column), &self.params)
            .ok()
            .and_then(|m| m.predict(row, column));
        self.table.record(row, column, runtime_s)?;
        Ok(before.map(|p| (runtime_s - p).abs() / p))
    }

    /// Predicted runtimes for `candidates` in row `row`.
    pub fn predictions(&self, row: &str, candidates: &[Column]) -> Result<Vec<(Column, f64)>> {
        if !self.table.has_row(row) {
            return Err(ProvisionError::Underdetermined(row.to_string()));
        }
        let model = Completion::fit(&self.table, candidates, &self.params)?;
        Ok(candidates
            .iter()
            .filter_map(|c| model.predict(row, c).map(|v| (c.clone(), v)))
            .collect())
    }

    /// Picks a configuration for `goal`. `cost` maps a column and predicted
    /// runtime to a predicted cost.
    pub fn choose(
        &self,
        row: &str,
        candidates: &[Column],
        goal: &Goal,
        cost: impl Fn(&Column, f64) -> f64,
    ) -> Result<Choice> {
        let preds = self.predictions(row, candidates)?;
        let scored: Vec<Choice> = preds
            .into_iter()
            .map(|(c, t)| Choice {
                predicted_cost: cost(&c, t),
                column: c,
                predicted_runtime_s: t,
                infeasible: false,
            })
            .collect();
        let fastest = |it: &mut dyn Iterator<Item = &Choice>| -> Option<Choice> {
            it.min_by(|a, b| {
                a.predicted_runtime_s
                    .total_cmp(&b.predicted_runtime_s)
                    .then(a.predicted_cost.total_cmp(&b.predicted_cost))
            })
            .cloned()
        };
        let best_effort = fastest(&mut scored.iter()).ok_or(ProvisionError::NoCandidates)?;
        let picked = match goal {
            Goal::BestEffort => Some(best_effort.clone()),
            Goal::Deadline { seconds } => scored
                .iter()
                .filter(|c| c.predicted_runtime_s <= *seconds)
                .min_by(|a, b| {
                    a.predicted_cost
                        .total_cmp(&b.predicted_cost)
                        .then(a.predicted_runtime_s.total_cmp(&b.predicted_runtime_s))
                })
                .cloned(),
            Goal::CostCap { amount } => fastest(&mut scored.iter().filter(|c| c.predicted_cost <= *amount)),
        };
        Ok(picked.unwrap_or_else(|| {
            log::warn!("goal {goal:?} infeasible for {row}; falling back to best effort");
            Choice {
                infeasible: true,
                ..best_effort
            }
        }))
    }
}

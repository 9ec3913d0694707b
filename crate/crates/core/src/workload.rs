//! Job arrival patterns for benchmarks.

use serde::{Deserialize, Serialize};

use crate::orchestrator::Goal;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
#[error("invalid workload: {0}")]
pub struct WorkloadError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arrivals {
    /// One job at time zero.
    Single,
    /// A job every `interval_s` over `duration_s`.
    Uniform { interval_s: f64, duration_s: f64 },
    /// A job every `interval_s`, plus `burst_size` jobs at once every
    /// `burst_period_s`, starting at `burst_offset_s`.
    Bursty {
        interval_s: f64,
        duration_s: f64,
        burst_size: u32,
        burst_period_s: f64,
        #[serde(default)]
        burst_offset_s: Option<f64>,
    },
    /// Per `interval_s`, a count rising from zero to `peak_jobs_per_interval`
    /// and back over each `period_s`, spread evenly inside the interval.
    Diurnal {
        period_s: f64,
        peak_jobs_per_interval: u32,
        interval_s: f64,
        duration_s: f64,
    },
}

/// What every submitted job looks like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobTemplate {
    /// Shipped pipeline name or path to a pipeline document.
    pub pipeline: String,
    pub input_bytes: usize,
    #[serde(default)]
    pub goal: Goal,
    #[serde(default)]
    pub priority: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub arrivals: Arrivals,
    pub template: JobTemplate,
}

fn ms(s: f64) -> u64 {
    (s * 1000.0).round() as u64
}

impl Arrivals {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(WorkloadError(format!("{name} must be > 0")))
            }
        };
        match self {
            Arrivals::Single => Ok(()),
            Arrivals::Uniform { interval_s, duration_s } => {
                pos("interval_s", *interval_s)?;
                pos("duration_s", *duration_s)
            }
            Arrivals::Bursty {
                interval_s,
                duration_s,
                burst_size,
                burst_period_s,
                burst_offset_s,
            } => {
                pos("interval_s", *interval_s)?;
                pos("duration_s", *duration_s)?;
                pos("burst_period_s", *burst_period_s)?;
                if let Some(o) = burst_offset_s {
                    if !(*o >= 0.0) {
                        return Err(WorkloadError("burst_offset_s must be >= 0".into()));
                    }
                }
                if *burst_size == 0 {
                    return Err(WorkloadError("burst_size must be >= 1".into()));
                }
                Ok(())
            }
            Arrivals::Diurnal {
                period_s,
                interval_s,
                duration_s,
                ..
            } => {
                pos("period_s", *period_s)?;
                pos("interval_s", *interval_s)?;
                pos("duration_s", *duration_s)
            }
        }
    }

    /// Arrival times in ms, non-decreasing.
    pub fn times_ms(&self) -> Vec<u64> {
        let mut out = Vec::new();
        match *self {
            Arrivals::Single => out.push(0),
            Arrivals::Uniform { interval_s, duration_s } => {
                let mut t = 0;
                while t < ms(duration_s) {
                    out.push(t);
                    t += ms(interval_s);
                }
            }
            Arrivals::Bursty {
                interval_s,
                duration_s,
                burst_size,
                burst_period_s,
                burst_offset_s,
            } => {
                let end = ms(duration_s);
                let mut t = 0;
                while t < end {
                    out.push(t);
                    t += ms(interval_s);
                }
                let mut b = ms(burst_offset_s.unwrap_or(burst_period_s));
                while b < end {
                    out.extend(std::iter::repeat_n(b, burst_size as usize));
                    b += ms(burst_period_s);
                }
            }
            Arrivals::Diurnal {
                period_s,
                peak_jobs_per_interval,
                interval_s,
                duration_s,
            } => {
                let step = ms(interval_s);
                let mut t = 0;
                while t < ms(duration_s) {
                    let n = diurnal_count(t, period_s, peak_jobs_per_interval);
                    for j in 0..n {
                        out.push(t + step * u64::from(j) / u64::from(n));
                    }
                    t += step;
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Jobs in the interval starting at `t_ms`: `peak·(1 − cos 2πt/period)/2`.
pub fn diurnal_count(t_ms: u64, period_s: f64, peak: u32) -> u32 {
    let phase = 2.0 * std::f64::consts::PI * (t_ms as f64 / 1000.0) / period_s;
    (f64::from(peak) * (1.0 - phase.cos()) / 2.0).round() as u32
}

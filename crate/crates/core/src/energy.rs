//! Power sampling and trapezoidal energy integration.
//!
//! `E = sum_i (P[i-1] + P[i]) / 2 * (t[i] - t[i-1])` over the actual sample
//! timestamps. No idle baseline is subtracted; the first sampled power is
//! reported so callers can adjust afterwards.

use std::fmt;
use std::io::Write;
use std::process::Command;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::counterfactual::CounterfactualPair;
use crate::pipeline::{run_batch_sequential_with, BatchReport, PipelineConfig, PipelineError};
use crate::tabular::FeatureSchema;

pub const DEFAULT_INTERVAL: Duration = Duration::from_millis(200);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergyError {
    #[error("integration needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("timestamps must be strictly increasing (sample {index})")]
    NonMonotone { index: usize },
    #[error("sample {index} has invalid time or power")]
    InvalidSample { index: usize },
    #[error("sampling interval must be positive")]
    InvalidInterval,
    #[error("power source failed on {failures} of {polls} polls; last error: {last_error}")]
    SourceFailed {
        polls: usize,
        failures: usize,
        last_error: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerSample {
    /// Seconds since the start of profiling.
    pub t: f64,
    /// Watts.
    pub p: f64,
}

/// A poll that failed; the trace keeps going without it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleGap {
    pub t: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerTrace {
    pub samples: Vec<PowerSample>,
    pub source: String,
    pub gaps: Vec<SampleGap>,
}

impl PowerTrace {
    pub fn new(samples: Vec<PowerSample>, source: impl Into<String>) -> Result<Self, EnergyError> {
        validate(&samples)?;
        Ok(Self {
            samples,
            source: source.into(),
            gaps: Vec::new(),
        })
    }

    /// Samples `f` at the given times.
    pub fn from_fn(times: &[f64], f: impl Fn(f64) -> f64) -> Result<Self, EnergyError> {
        Self::new(times.iter().map(|&t| PowerSample { t, p: f(t) }).collect(), "synthetic")
    }

    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// CSV with header `t,watts`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "watts"])?;
        for s in &self.samples {
            w.write_record([s.t.to_string(), s.p.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn validate(samples: &[PowerSample]) -> Result<(), EnergyError> {
    for (index, s) in samples.iter().enumerate() {
        if !(s.t >= 0.0 && s.t.is_finite() && s.p >= 0.0 && s.p.is_finite()) {
            return Err(EnergyError::InvalidSample { index });
        }
        if index > 0 && s.t <= samples[index - 1].t {
            return Err(EnergyError::NonMonotone { index });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyReport {
    pub joules: f64,
    /// `t_n - t_0`, seconds.
    pub duration: f64,
    pub mean_power: f64,
    pub sample_count: usize,
    /// Power at the first sample, for optional idle-baseline adjustment.
    pub first_power: f64,
}

/// Trapezoidal energy of a trace.
pub fn integrate(trace: &PowerTrace) -> Result<EnergyReport, EnergyError> {
    integrate_samples(&trace.samples)
}

pub fn integrate_samples(samples: &[PowerSample]) -> Result<EnergyReport, EnergyError> {
    if samples.len() < 2 {
        return Err(EnergyError::TooFewSamples(samples.len()));
    }
    validate(samples)?;
    let joules: f64 = samples
        .windows(2)
        .map(|w| (w[0].p + w[1].p) / 2.0 * (w[1].t - w[0].t))
        .sum();
    let duration = samples[samples.len() - 1].t - samples[0].t;
    Ok(EnergyReport {
        joules,
        duration,
        mean_power: joules / duration,
        sample_count: samples.len(),
        first_power: samples[0].p,
    })
}

/// Something that reports instantaneous power in watts.
pub trait PowerSource: Send + Sync {
    fn describe(&self) -> String;
    /// Reads power at `t` seconds since profiling started.
    fn read(&self, t: f64) -> Result<f64, String>;
}

/// Runs an external command and sums the numbers it prints, one per line
/// (e.g. one per GPU).
#[derive(Debug, Clone, PartialEq)]
pub struct CommandSource {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandSource {
    pub fn new(program: impl Into<String>, args: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            program: program.into(),
            args: args.into_iter().map(Into::into).collect(),
        }
    }

    /// `nvidia-smi --query-gpu=power.draw --format=csv,noheader,nounits`.
    pub fn nvidia_smi() -> Self {
        Self::new("nvidia-smi", ["--query-gpu=power.draw", "--format=csv,noheader,nounits"])
    }
}

/// Sums one number per non-empty line.
pub fn parse_watts(output: &str) -> Result<f64, String> {
    let mut total = 0.0;
    let mut seen = false;
    for line in output.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let token = line.split_whitespace().next().unwrap_or(line);
        let w: f64 = token.parse().map_err(|_| format!("cannot parse power reading {line:?}"))?;
        if !(w >= 0.0 && w.is_finite()) {
            return Err(format!("invalid power reading {line:?}"));
        }
        total += w;
        seen = true;
    }
    if seen {
        Ok(total)
    } else {
        Err("power command printed nothing".into())
    }
}

impl PowerSource for CommandSource {
    fn describe(&self) -> String {
        format!("command:{} {}", self.program, self.args.join(" "))
    }

    fn read(&self, _t: f64) -> Result<f64, String> {
        let out = Command::new(&self.program)
            .args(&self.args)
            .output()
            .map_err(|e| format!("cannot run {}: {e}", self.program))?;
        if !out.status.success() {
            return Err(format!("{} exited with {}", self.program, out.status));
        }
        parse_watts(&String::from_utf8_lossy(&out.stdout))
    }
}

type PowerFn = Box<dyn Fn(f64) -> Result<f64, String> + Send + Sync>;

/// Evaluates a function of time.
pub struct SyntheticSource {
    name: String,
    f: PowerFn,
}

impl fmt::Debug for SyntheticSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SyntheticSource").field("name", &self.name).finish()
    }
}

impl SyntheticSource {
    pub fn new(name: impl Into<String>, f: impl Fn(f64) -> Result<f64, String> + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            f: Box::new(f),
        }
    }

    pub fn constant(watts: f64) -> Self {
        Self::new(format!("constant {watts} W"), move |_| Ok(watts))
    }
}

impl PowerSource for SyntheticSource {
    fn describe(&self) -> String {
        format!("synthetic:{}", self.name)
    }

    fn read(&self, t: f64) -> Result<f64, String> {
        (self.f)(t)
    }
}

/// Polls `source` every `interval` while `action` runs, plus once at the
/// start and once after it finishes. Timestamps are the actual poll times.
pub fn sample_during<T>(
    source: &dyn PowerSource,
    interval: Duration,
    action: impl FnOnce() -> T,
) -> (T, Result<PowerTrace, EnergyError>) {
    if interval.is_zero() {
        return (action(), Err(EnergyError::InvalidInterval));
    }
    let start = Instant::now();
    let (stop_tx, stop_rx) = mpsc::channel::<()>();
    let (result, polls) = std::thread::scope(|s| {
        let sampler = s.spawn(move || {
            let mut polls: Vec<(f64, Result<f64, String>)> = Vec::new();
            let poll = |polls: &mut Vec<_>| {
                let t = start.elapsed().as_secs_f64();
                polls.push((t, source.read(t)));
            };
            poll(&mut polls);
            loop {
                match stop_rx.recv_timeout(interval) {
                    Err(mpsc::RecvTimeoutError::Timeout) => poll(&mut polls),
                    _ => break,
                }
            }
            poll(&mut polls);
            polls
        });
        let result = action();
        let _ = stop_tx.send(());
        let polls = sampler.join().unwrap_or_else(|p| std::panic::resume_unwind(p));
        (result, polls)
    });
    (result, assemble_trace(source.describe(), polls))
}

fn assemble_trace(source: String, polls: Vec<(f64, Result<f64, String>)>) -> Result<PowerTrace, EnergyError> {
    let n = polls.len();
    let mut samples: Vec<PowerSample> = Vec::new();
    let mut gaps = Vec::new();
    for (t, r) in polls {
        match r {
            Ok(p) if p >= 0.0 && p.is_finite() => {
                if samples.last().map_or(true, |l| t > l.t) {
                    samples.push(PowerSample { t, p });
                }
            }
            Ok(p) => gaps.push(SampleGap {
                t,
                error: format!("invalid reading {p}"),
            }),
            Err(error) => gaps.push(SampleGap { t, error }),
        }
    }
    if samples.len() < 2 {
        return Err(EnergyError::SourceFailed {
            polls: n,
            failures: gaps.len(),
            last_error: gaps.last().map_or_else(|| "too few samples".to_string(), |g| g.error.clone()),
        });
    }
    Ok(PowerTrace { samples, source, gaps })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }

    /// `"mean ± std"` with `decimals` digits after the point.
    pub fn display(&self, decimals: usize) -> String {
        format!("{:.*} ± {:.*}", decimals, self.mean, decimals, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordEnergy {
    pub index: usize,
    pub pair_id: String,
    pub energy: EnergyReport,
    #[serde(skip)]
    pub trace: PowerTrace,
}

#[derive(Debug)]
pub struct ProfileReport {
    pub batch: BatchReport,
    pub per_record: Vec<RecordEnergy>,
    /// Pairs whose trace could not be integrated.
    pub trace_failures: Vec<(usize, EnergyError)>,
    pub source: String,
    pub interval: Duration,
}

impl ProfileReport {
    pub fn energy(&self) -> Option<MeanStd> {
        MeanStd::of(&self.per_record.iter().map(|r| r.energy.joules).collect::<Vec<_>>())
    }

    pub fn time(&self) -> Option<MeanStd> {
        MeanStd::of(&self.per_record.iter().map(|r| r.energy.duration).collect::<Vec<_>>())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let (e, t) = (self.energy(), self.time());
        json!({
            "scope": "narrative generation only (drafts and refinement); counterfactual search is not measured",
            "source": self.source,
            "interval_secs": self.interval.as_secs_f64(),
            "n_records": self.per_record.len(),
            "energy_joules": e.map(|m| m.display(1)),
            "time_seconds": t.map(|m| m.display(2)),
            "energy": e,
            "time": t,
            "per_record": self.per_record,
            "trace_failures": self.trace_failures.iter().map(|(i, e)| json!({"index": i, "error": e.to_string()})).collect::<Vec<_>>(),
            "pipeline_failures": self.batch.failures_json(),
        })
    }
}

/// Runs the pipeline one pair at a time, each under its own power trace.
pub fn profile_pipeline(
    config: &PipelineConfig,
    pairs: &[CounterfactualPair],
    schema: &FeatureSchema,
    source: &dyn PowerSource,
    interval: Duration,
) -> Result<ProfileReport, PipelineError> {
    let mut per_record = Vec::new();
    let mut trace_failures = Vec::new();
    let batch = run_batch_sequential_with(config, pairs, schema, |i, run| {
        let (result, trace) = sample_during(source, interval, run);
        match trace.and_then(|t| integrate(&t).map(|e| (t, e))) {
            Ok((trace, energy)) if result.is_ok() => per_record.push(RecordEnergy {
                index: i,
                pair_id: pairs[i].id.clone(),
                energy,
                trace,
            }),
            Ok(_) => {}
            Err(e) => trace_failures.push((i, e)),
        }
        result
    })?;
    Ok(ProfileReport {
        batch,
        per_record,
        trace_failures,
        source: source.describe(),
        interval,
    })
}

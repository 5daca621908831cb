//! Trapezoidal energy from sampled power, then a profiled pipeline run.
//!
//! Uses a synthetic power source by default. Set `MNR_POWER=nvidia-smi` to
//! poll the GPU instead.
//!
//!     cargo run --example energy_profile

use std::sync::Arc;
use std::time::Duration;

use mnr::counterfactual::{CounterfactualPair, DistanceConfig};
use mnr::energy::{integrate, profile_pipeline, sample_during, CommandSource, PowerSource, PowerTrace, SyntheticSource};
use mnr::gateway::{mirror_responder, ChatRequest, Gateway, RetryPolicy, ScriptedBackend};
use mnr::pipeline::PipelineConfig;
use mnr::tabular::presets;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let times: Vec<f64> = (0..=10).map(f64::from).collect();
    let constant = integrate(&PowerTrace::from_fn(&times, |_| 100.0)?)?;
    let ramp = integrate(&PowerTrace::from_fn(&[0.0, 1.5, 4.0, 10.0], |t| 10.0 * t)?)?;
    println!("100 W for 10 s: {} J; 0-100 W ramp: {} J", constant.joules, ramp.joules);

    let source: Box<dyn PowerSource> = match std::env::var("MNR_POWER").as_deref() {
        Ok("nvidia-smi") => Box::new(CommandSource::nvidia_smi()),
        _ => Box::new(SyntheticSource::new("sine", |t| Ok(150.0 + 60.0 * (3.0 * t).sin()))),
    };
    let (_, trace) = sample_during(source.as_ref(), Duration::from_millis(200), || std::thread::sleep(Duration::from_secs(1)));
    let trace = trace?;
    let e = integrate(&trace)?;
    println!(
        "{}: {} samples over {:.3} s, {:.1} J, mean {:.1} W, first sample {:.1} W",
        source.describe(),
        e.sample_count,
        e.duration,
        e.joules,
        e.mean_power,
        e.first_power
    );

    let schema = Arc::new(presets::adult());
    let config = DistanceConfig::from_schema(&schema);
    let pairs: Vec<CounterfactualPair> = (0..5)
        .map(|i| {
            let age = (30 + 3 * i).to_string();
            let x = schema.parse_instance(&[&age, "Private", "School", "Divorced", "Blue-Collar", "White", "Male", "35"])?;
            let xp = schema.parse_instance(&[&age, "Private", "School", "Married", "White-Collar", "Other", "Male", "35"])?;
            Ok(CounterfactualPair::new(format!("e{i}"), x, xp, 0, 1, &schema, &config)?)
        })
        .collect::<Result<_, Box<dyn std::error::Error>>>()?;
    let slow = |ms: u64| -> Arc<dyn Fn(&ChatRequest) -> String + Send + Sync> {
        Arc::new(move |r: &ChatRequest| {
            std::thread::sleep(Duration::from_millis(ms * (1 + r.id.ordinal as u64)));
            "A short draft.".to_string()
        })
    };
    let gw = |b: ScriptedBackend, cap| Arc::new(Gateway::new(Arc::new(b), RetryPolicy::no_backoff(0), cap));
    let pipeline = PipelineConfig::new(
        gw(ScriptedBackend::new("drafter").with_responder(slow(60)), 3),
        gw(ScriptedBackend::new("refiner").with_responder(mirror_responder(schema.clone())), 1),
    );
    let report = profile_pipeline(&pipeline, &pairs, &schema, source.as_ref(), Duration::from_millis(20))?;
    for r in &report.per_record {
        println!("{}: {:.2} J over {:.3} s", r.pair_id, r.energy.joules, r.energy.duration);
    }
    let json = report.to_json();
    println!("energy (J): {}", json["energy_joules"]);
    println!("time (s):   {}", json["time_seconds"]);
    Ok(())
}

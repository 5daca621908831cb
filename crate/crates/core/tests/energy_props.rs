mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use mnr::energy::{
    integrate, integrate_samples, profile_pipeline, sample_during, EnergyError, MeanStd, PowerSample, PowerTrace,
    ProfileReport, RecordEnergy, SyntheticSource,
};
use mnr::gateway::{ChatRequest, ScriptedBackend};
use mnr::pipeline::{BatchReport, PipelineConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{adult, faithful_reply, gateway, table_pairs};

/// Midpoint sum with `per_interval` sub-steps inside every gap of `times`.
fn fine_oracle(times: &[f64], per_interval: usize, f: &dyn Fn(f64) -> f64) -> f64 {
    let mut total = 0.0;
    for w in times.windows(2) {
        let h = (w[1] - w[0]) / per_interval as f64;
        for k in 0..per_interval {
            total += f(w[0] + (k as f64 + 0.5) * h) * h;
        }
    }
    total
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Sum of a few low-frequency sinusoids over a positive floor.
fn smooth_fn(rng: &mut ChaCha8Rng) -> impl Fn(f64) -> f64 {
    let base = rng.gen_range(50.0..400.0);
    let terms: Vec<(f64, f64, f64)> = (0..rng.gen_range(1..=4))
        .map(|_| (rng.gen_range(0.0..base / 8.0), rng.gen_range(0.05..1.5), rng.gen_range(0.0..6.3)))
        .collect();
    move |t: f64| base + terms.iter().map(|(a, w, phi)| a * (w * t + phi).sin()).sum::<f64>()
}

#[test]
fn constant_trace_is_exact() {
    let times: Vec<f64> = (0..=10).map(f64::from).collect();
    let r = integrate(&PowerTrace::from_fn(&times, |_| 100.0).unwrap()).unwrap();
    assert_eq!(r.joules, 1000.0);
    assert_eq!(r.duration, 10.0);
    assert_eq!(r.mean_power, 100.0);
    assert_eq!(r.sample_count, 11);
    assert_eq!(r.first_power, 100.0);
}

#[test]
fn affine_ramp_is_exact_on_any_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let mut times = vec![0.0];
        while *times.last().unwrap() < 10.0 {
            let next: f64 = times.last().unwrap() + rng.gen_range(0.01..1.5);
            times.push(next.min(10.0));
        }
        let r = integrate(&PowerTrace::from_fn(&times, |t| 10.0 * t).unwrap()).unwrap();
        assert!((r.joules - 500.0).abs() <= 500.0 * 8.0 * f64::EPSILON, "{}", r.joules);
    }
}

#[test]
fn smooth_traces_match_fine_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let f = smooth_fn(&mut rng);
        let span = rng.gen_range(2.0..60.0);
        let mut times = vec![0.0];
        while *times.last().unwrap() < span {
            times.push(times.last().unwrap() + rng.gen_range(0.15..0.25));
        }
        let approx = integrate(&PowerTrace::from_fn(&times, &f).unwrap()).unwrap().joules;
        let exact = fine_oracle(&times, 1000, &f);
        worst = worst.max(rel_err(approx, exact));
    }
    assert!(worst < 0.005, "worst relative error {worst}");
}

#[test]
fn forced_gaps_use_actual_timestamps() {
    // Nominal 0.2 s grid where every fourth poll lands late, leaving a 0.3 s gap.
    let mut times = vec![0.0];
    for i in 1..=60 {
        let step = if i % 4 == 0 { 0.3 } else { 0.2 };
        times.push(times.last().unwrap() + step);
    }
    let f = |t: f64| 150.0 + 40.0 * (0.8 * t).sin();
    let actual = integrate(&PowerTrace::from_fn(&times, f).unwrap()).unwrap().joules;
    let oracle = fine_oracle(&times, 1000, &f);
    assert!(rel_err(actual, oracle) < 0.01, "{actual} vs {oracle}");

    // Using nominal multiples of the interval instead would be visibly wrong.
    let nominal: Vec<PowerSample> = times
        .iter()
        .enumerate()
        .map(|(i, &t)| PowerSample { t: i as f64 * 0.2, p: f(t) })
        .collect();
    let wrong = integrate_samples(&nominal).unwrap().joules;
    assert!(rel_err(wrong, oracle) > 0.05);
}

#[test]
fn jittered_sampler_matches_fine_grid() {
    let f = |t: f64| 120.0 + 20.0 * t.sin();
    let polls = Arc::new(AtomicUsize::new(0));
    let counter = polls.clone();
    let src = SyntheticSource::new("jittered", move |t| {
        if counter.fetch_add(1, Ordering::SeqCst) % 3 == 2 {
            std::thread::sleep(Duration::from_millis(100));
        }
        Ok(f(t))
    });
    let (_, trace) = sample_during(&src, Duration::from_millis(200), || std::thread::sleep(Duration::from_millis(1600)));
    let trace = trace.unwrap();
    let times: Vec<f64> = trace.samples.iter().map(|s| s.t).collect();
    let longest = times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    assert!(longest >= 0.28, "no late poll observed: {times:?}");
    let joules = integrate(&trace).unwrap().joules;
    let oracle = fine_oracle(&times, 1000, &f);
    assert!(rel_err(joules, oracle) < 0.01, "{joules} vs {oracle}");
}

/// Times on a 1/8 s lattice and whole-watt powers: every trapezoid and every
/// partial sum is representable, so the identities below hold bit for bit.
fn dyadic_trace() -> impl Strategy<Value = Vec<PowerSample>> {
    prop::collection::vec((1u32..=16, 0u32..=400), 3..120).prop_map(|steps| {
        let mut t = 0.0;
        steps
            .into_iter()
            .map(|(dt, p)| {
                let s = PowerSample { t, p: p as f64 };
                t += dt as f64 / 8.0;
                s
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn split_at_interior_sample_is_additive(samples in dyadic_trace(), at in any::<prop::sample::Index>()) {
        let m = 1 + at.index(samples.len() - 2);
        let whole = integrate_samples(&samples).unwrap().joules;
        let left = integrate_samples(&samples[..=m]).unwrap().joules;
        let right = integrate_samples(&samples[m..]).unwrap().joules;
        prop_assert_eq!(left + right, whole);
    }

    #[test]
    fn scaling_power_scales_energy(samples in dyadic_trace(), c in 0u32..=8) {
        let c = c as f64;
        let scaled: Vec<PowerSample> = samples.iter().map(|s| PowerSample { t: s.t, p: s.p * c }).collect();
        prop_assert_eq!(integrate_samples(&scaled).unwrap().joules, c * integrate_samples(&samples).unwrap().joules);
    }

    #[test]
    fn non_negative_power_gives_non_negative_energy(
        parts in prop::collection::vec((1e-6f64..5.0, 0.0f64..1e4), 2..80),
    ) {
        let mut t = 0.0;
        let samples: Vec<PowerSample> = parts.iter().map(|&(dt, p)| { t += dt; PowerSample { t, p } }).collect();
        let r = integrate_samples(&samples).unwrap();
        prop_assert!(r.joules >= 0.0);
        prop_assert_eq!(r.duration, samples.last().unwrap().t - samples[0].t);
    }
}

#[test]
fn integration_errors() {
    assert_eq!(integrate_samples(&[]), Err(EnergyError::TooFewSamples(0)));
    let back = [PowerSample { t: 2.0, p: 1.0 }, PowerSample { t: 1.0, p: 1.0 }];
    assert_eq!(integrate_samples(&back), Err(EnergyError::NonMonotone { index: 1 }));
}

#[test]
fn constant_source_over_one_second() {
    let (out, trace) = sample_during(&SyntheticSource::constant(80.0), Duration::from_millis(200), || {
        std::thread::sleep(Duration::from_secs(1));
        "done"
    });
    assert_eq!(out, "done");
    let trace = trace.unwrap();
    assert!(trace.samples.len() >= 4);
    assert!(trace.gaps.is_empty());
    let r = integrate(&trace).unwrap();
    assert!((r.joules - 80.0 * r.duration).abs() < 1e-9);
}

#[test]
fn failing_source_reports_after_action() {
    let src = SyntheticSource::new("absent", |_| Err("device not found".into()));
    let (out, trace) = sample_during(&src, Duration::from_millis(10), || 3);
    assert_eq!(out, 3);
    match trace {
        Err(EnergyError::SourceFailed { failures, polls, last_error }) => {
            assert_eq!(failures, polls);
            assert_eq!(last_error, "device not found");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn intermittent_failures_become_gaps() {
    let n = AtomicUsize::new(0);
    let src = SyntheticSource::new("flaky", move |_| {
        if n.fetch_add(1, Ordering::SeqCst) % 2 == 1 {
            Err("busy".into())
        } else {
            Ok(10.0)
        }
    });
    let (_, trace) = sample_during(&src, Duration::from_millis(20), || std::thread::sleep(Duration::from_millis(200)));
    let trace = trace.unwrap();
    assert!(!trace.gaps.is_empty());
    assert!(trace.gaps.iter().all(|g| g.error == "busy"));
    assert!(trace.samples.len() >= 2);
}

#[test]
fn profiled_pipeline_at_constant_power() {
    let schema = adult();
    let pairs = table_pairs(3);
    let (_, drafter) = gateway(
        ScriptedBackend::new("drafter").with_responder(Arc::new(|req: &ChatRequest| {
            std::thread::sleep(Duration::from_millis(40));
            format!("draft {}", req.id)
        })),
        3,
    );
    let refiner_pairs = pairs.clone();
    let refiner_schema = schema.clone();
    let (_, refiner) = gateway(
        ScriptedBackend::new("refiner").with_responder(Arc::new(move |req: &ChatRequest| {
            let id = req.id.session.split('/').next().unwrap();
            faithful_reply(refiner_pairs.iter().find(|p| p.id == id).unwrap(), &refiner_schema)
        })),
        1,
    );
    let config = PipelineConfig::new(drafter, refiner);
    let report = profile_pipeline(
        &config,
        &pairs,
        &schema,
        &SyntheticSource::constant(50.0),
        Duration::from_millis(10),
    )
    .unwrap();
    assert_eq!(report.batch.records.len(), 3);
    assert_eq!(report.per_record.len(), 3);
    assert!(report.trace_failures.is_empty());
    for (i, r) in report.per_record.iter().enumerate() {
        assert_eq!(r.index, i);
        assert_eq!(r.pair_id, pairs[i].id);
        assert!(r.energy.duration >= 0.04);
        assert!((r.energy.joules - 50.0 * r.energy.duration).abs() < 1e-9);
    }
    let json = report.to_json();
    assert!(json["energy_joules"].as_str().unwrap().contains(" ± "));
    assert_eq!(json["n_records"], 3);
}

fn record(index: usize, watts: f64, seconds: u32) -> RecordEnergy {
    let times: Vec<f64> = (0..=seconds).map(f64::from).collect();
    let trace = PowerTrace::from_fn(&times, |_| watts).unwrap();
    RecordEnergy {
        index,
        pair_id: format!("p{index}"),
        energy: integrate(&trace).unwrap(),
        trace,
    }
}

#[test]
fn two_record_aggregate_by_hand() {
    // 250 W for 4 s and 500 W for 6 s: 1000 J and 3000 J.
    let report = ProfileReport {
        batch: BatchReport::default(),
        per_record: vec![record(0, 250.0, 4), record(1, 500.0, 6)],
        trace_failures: Vec::new(),
        source: "synthetic".into(),
        interval: Duration::from_millis(200),
    };
    let e = report.energy().unwrap();
    assert_eq!((e.mean, e.std, e.n), (2000.0, 1000.0, 2));
    let t = report.time().unwrap();
    assert_eq!((t.mean, t.std), (5.0, 1.0));
    let json = report.to_json();
    assert_eq!(json["energy_joules"], "2000.0 ± 1000.0");
    assert_eq!(json["time_seconds"], "5.00 ± 1.00");
}

fn is_mean_std(s: &str, decimals: usize) -> bool {
    let number = |x: &str| match x.split_once('.') {
        Some((int, frac)) => {
            !int.is_empty() && int.bytes().all(|b| b.is_ascii_digit()) && frac.len() == decimals && frac.bytes().all(|b| b.is_ascii_digit())
        }
        None => false,
    };
    matches!(s.split_once(" ± "), Some((m, sd)) if number(m) && number(sd))
}

#[test]
fn mean_std_layout() {
    for (mean, std, text) in [(7613.6, 1536.5, "7613.6 ± 1536.5"), (2867.2, 548.4, "2867.2 ± 548.4"), (215.5, 53.3, "215.5 ± 53.3")] {
        let rendered = MeanStd { mean, std, n: 2 }.display(1);
        assert_eq!(rendered, text);
        assert!(is_mean_std(&rendered, 1));
    }
    assert_eq!(MeanStd { mean: 1.23, std: 0.29, n: 2 }.display(2), "1.23 ± 0.29");
    assert!(!is_mean_std("2867.2 +- 548.4", 1));
    assert!(!is_mean_std("2867 ± 548.4", 1));
}

#[test]
fn mean_std_is_population() {
    let m = MeanStd::of(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
    assert_eq!((m.mean, m.std), (5.0, 2.0));
    assert!(MeanStd::of(&[]).is_none());
    assert_eq!(MeanStd::of(&[3.5]).unwrap().std, 0.0);
}

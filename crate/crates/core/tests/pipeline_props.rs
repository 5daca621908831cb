mod common;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use mnr::gateway::{ChatRequest, Fixture, ScriptedBackend};
use mnr::pipeline::{run_batch, run_instance, PipelineConfig};
use mnr::prompt::Stage;

use common::{adult, faithful_reply, gateway, table_pair, table_pairs, TABLE_DRAFT_1};

type Log = Arc<Mutex<Vec<String>>>;

fn draft_text(req: &ChatRequest) -> String {
    format!("Draft {} for {}", req.id.ordinal, req.id.session)
}

/// Drafter and refiner that log every request and sleep a pair-dependent
/// amount so completions interleave.
fn logged_config(log: &Log, cap: usize) -> (Arc<ScriptedBackend>, Arc<ScriptedBackend>, PipelineConfig) {
    let schema = adult();
    let dlog = log.clone();
    let (drafter, dgw) = gateway(
        ScriptedBackend::new("drafter").with_responder(Arc::new(move |req: &ChatRequest| {
            let n: u64 = req.id.session.trim_start_matches('p').split('/').next().unwrap().parse().unwrap();
            std::thread::sleep(Duration::from_millis((7 - n % 7) * 2 + req.id.ordinal as u64));
            dlog.lock().unwrap().push(req.id.to_string());
            draft_text(req)
        })),
        3,
    );
    let rlog = log.clone();
    let pairs = table_pairs(8);
    let (refiner, rgw) = gateway(
        ScriptedBackend::new("refiner").with_responder(Arc::new(move |req: &ChatRequest| {
            rlog.lock().unwrap().push(req.id.to_string());
            let id = req.id.session.split('/').next().unwrap();
            let pair = pairs.iter().find(|p| p.id == id).unwrap();
            faithful_reply(pair, &schema)
        })),
        2,
    );
    let mut config = PipelineConfig::new(dgw, rgw);
    config.in_flight_cap = cap;
    (drafter, refiner, config)
}

#[test]
fn three_drafts_then_one_refinement_per_pair() {
    let log: Log = Arc::default();
    let (drafter, refiner, config) = logged_config(&log, 4);
    let pairs = table_pairs(8);
    let report = run_batch(&config, &pairs, &adult()).unwrap();
    assert_eq!(report.records.len(), 8);
    assert!(report.failures.is_empty());

    let drafts = drafter.calls();
    let refines = refiner.calls();
    assert_eq!(drafts.len(), 3 * pairs.len());
    assert_eq!(refines.len(), pairs.len());
    let events = log.lock().unwrap().clone();
    for p in &pairs {
        let mut ordinals: Vec<usize> = drafts
            .iter()
            .filter(|c| c.id.session == format!("{}/draft", p.id))
            .map(|c| c.id.ordinal)
            .collect();
        ordinals.sort();
        assert_eq!(ordinals, vec![0, 1, 2]);
        let r: Vec<_> = refines.iter().filter(|c| c.id.session == format!("{}/refiner", p.id)).collect();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].id.ordinal, 0);
        // The refinement request follows every draft of its pair.
        let at = |id: String| events.iter().position(|e| *e == id).unwrap();
        let refine_at = at(format!("{}/refiner#0", p.id));
        for o in 0..3 {
            assert!(at(format!("{}/draft#{o}", p.id)) < refine_at);
        }
        // All three drafts appear verbatim, in request order.
        let prompt = &r[0].user;
        let positions: Vec<usize> = (0..3)
            .map(|o| prompt.find(&format!("Draft {o} for {}/draft", p.id)).expect("draft embedded"))
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }
    // Input order survives out-of-order completion.
    let ids: Vec<&str> = report.records.iter().map(|r| r.pair_id()).collect();
    assert_eq!(ids, pairs.iter().map(|p| p.id.as_str()).collect::<Vec<_>>());
    assert!(report.records.iter().all(|r| r.extraction.is_ok()));
    assert!(config.drafter.peak_in_flight() <= 3);
    assert!(config.refiner.peak_in_flight() <= 2);
}

#[test]
fn refiner_failure_on_one_pair_does_not_halt_batch() {
    let pairs = table_pairs(5);
    let (_, dgw) = gateway(ScriptedBackend::new("d").with_responder(Arc::new(draft_text)), 4);
    let (_, rgw) = gateway(
        ScriptedBackend::new("r")
            .with_responder(Arc::new(|_: &ChatRequest| "R".to_string()))
            .with_fixture("p3/refiner", 0, Fixture::text("R").failing(vec![400])),
        4,
    );
    let mut config = PipelineConfig::new(dgw, rgw);
    config.in_flight_cap = 3;
    let report = run_batch(&config, &pairs, &adult()).unwrap();
    assert_eq!(report.records.len(), 4);
    assert_eq!(report.failures.len(), 1);
    let f = &report.failures[0];
    assert_eq!((f.index, f.pair_id.as_str(), f.stage), (3, "p3", Some(Stage::Refiner)));
    let mut covered: Vec<usize> = report.records.iter().map(|r| r.index).chain([f.index]).collect();
    covered.sort();
    assert_eq!(covered, vec![0, 1, 2, 3, 4]);
}

#[test]
fn merging_phase_reply_is_cleaned_and_extracted() {
    let schema = adult();
    let pair = table_pair("t4");
    let answer = format!(
        "The individual's marital status changes from Divorced to Married, their occupation from Blue-Collar to \
         White-Collar and their race from White to Other.\n{}",
        faithful_reply(&pair, &schema).split_once("Narrative.\n").unwrap().1
    );
    let raw = format!("<think>\nMerging Phase: Draft 1 mentions {TABLE_DRAFT_1}\n</think>\n\n{answer}");
    let (_, dgw) = gateway(ScriptedBackend::sequence("d", [TABLE_DRAFT_1, "second", "third"]), 3);
    let (_, rgw) = gateway(ScriptedBackend::sequence("r", [raw.clone()]), 1);
    let record = run_instance(&PipelineConfig::new(dgw, rgw), &pair, &schema).unwrap();
    assert_eq!(record.refined_raw, raw);
    assert_eq!(record.refined_clean, answer.trim());
    let e = record.extraction.unwrap();
    let changed: Vec<&str> = schema
        .features
        .iter()
        .enumerate()
        .filter(|(j, _)| e.f_fact[*j] != e.f_cf[*j])
        .map(|(_, f)| f.name.as_str())
        .collect();
    assert_eq!(changed, vec!["marital_status", "occupation", "race"]);
}

#[test]
fn batch_output_is_byte_identical_across_runs() {
    let run = || {
        let log: Log = Arc::default();
        let (_, _, config) = logged_config(&log, 4);
        run_batch(&config, &table_pairs(8), &adult()).unwrap().to_jsonl(&adult())
    };
    assert_eq!(run(), run());
}

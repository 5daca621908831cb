use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use mnr::gateway::{
    strip_reasoning, strip_reasoning_flagged, AttemptError, AttemptReply, Backend, ChatRequest, FinishReason, Gateway,
    GatewayError, HttpBackend, ModelEndpoint, RequestId, RetryPolicy, SamplingParams, ScriptedBackend,
};
use proptest::prelude::*;

fn request(session: &str, ordinal: usize) -> ChatRequest {
    ChatRequest {
        id: RequestId::new(session, ordinal),
        system: String::new(),
        user: "explain".into(),
    }
}

#[test]
fn recommended_sampling_settings() {
    let cases = [
        ("Qwen/Qwen2.5-0.5B-Instruct", 0.6, 0.8),
        ("Qwen/Qwen2.5-3B-Instruct", 0.6, 0.8),
        ("deepseek-ai/DeepSeek-R1-Distill-Qwen-1.5B", 0.6, 0.7),
        ("deepseek-ai/DeepSeek-R1-Distill-Qwen-7B", 0.6, 0.7),
        ("deepseek-ai/DeepSeek-R1-Distill-Qwen-32B", 0.7, 0.7),
    ];
    for (model, temperature, top_p) in cases {
        let expected = SamplingParams {
            temperature,
            top_k: 10,
            top_p,
            max_tokens: 8192,
            repetition_penalty: 1.05,
        };
        assert_eq!(SamplingParams::for_model(model), Some(expected), "{model}");
    }
}

#[test]
fn drafter_request_body_carries_preset() {
    let backend = HttpBackend::new(ModelEndpoint::new("http://127.0.0.1:9", "Qwen2.5-0.5B-Instruct")).unwrap();
    let body = backend.request_body(&request("p/draft", 0));
    assert_eq!(body["temperature"], 0.6);
    assert_eq!(body["top_k"], 10);
    assert_eq!(body["top_p"], 0.8);
    assert_eq!(body["max_tokens"], 8192);
    assert_eq!(body["repetition_penalty"], 1.05);
}

#[test]
fn scripted_replay_is_deterministic() {
    let run = || {
        let gw = Gateway::new(
            Arc::new(ScriptedBackend::sequence("s", ["a", "b", "c"])),
            RetryPolicy::no_backoff(0),
            2,
        );
        (0..3)
            .map(|i| gw.complete(&request("x", i)).unwrap())
            .collect::<Vec<_>>()
    };
    let first = run();
    assert_eq!(first, run());
    assert_eq!(first[1].raw_text, "b");
    assert_eq!(first[0].finish_reason, FinishReason::Stop);
}

/// A server that accepts connections and never answers.
#[test]
fn complete_is_bounded_by_timeouts_and_retries() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hold = std::thread::spawn(move || {
        let mut open = Vec::new();
        for s in listener.incoming().take(2) {
            open.push(s);
        }
        std::thread::sleep(Duration::from_secs(2));
    });
    let mut endpoint = ModelEndpoint::new(&format!("http://{addr}"), "m");
    endpoint.timeout_secs = 0.3;
    let gw = Gateway::new(Arc::new(HttpBackend::new(endpoint).unwrap()), RetryPolicy::no_backoff(1), 1);
    let started = Instant::now();
    let err = gw.complete(&request("t", 0)).unwrap_err();
    let elapsed = started.elapsed().as_secs_f64();
    assert!(matches!(err, GatewayError::Timeout { attempts: 2, .. }), "{err:?}");
    assert!(elapsed < 0.3 * 2.0 + 0.5, "took {elapsed}");
    drop(hold);
}

struct Slow {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl Backend for Slow {
    fn identity(&self) -> String {
        "slow".into()
    }

    fn attempt(&self, _: &ChatRequest) -> Result<AttemptReply, AttemptError> {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(15));
        self.current.fetch_sub(1, Ordering::SeqCst);
        Ok(AttemptReply {
            text: "ok".into(),
            finish_reason: FinishReason::Stop,
            latency: None,
        })
    }
}

#[test]
fn in_flight_cap_holds_under_contention() {
    let backend = Arc::new(Slow {
        current: AtomicUsize::new(0),
        peak: AtomicUsize::new(0),
    });
    let gw = Gateway::new(backend.clone(), RetryPolicy::no_backoff(0), 3);
    std::thread::scope(|s| {
        for i in 0..12 {
            let gw = &gw;
            s.spawn(move || gw.complete(&request("c", i)).unwrap());
        }
    });
    assert_eq!(backend.peak.load(Ordering::SeqCst), 3);
    assert_eq!(gw.peak_in_flight(), 3);
}

#[derive(Debug, Clone)]
enum Piece {
    Text(String),
    Span(String, Vec<Piece>),
}

fn piece() -> impl Strategy<Value = Piece> {
    let text = "[a-z {}\n.]{0,6}".prop_map(Piece::Text);
    text.prop_recursive(3, 24, 4, |inner| {
        (
            prop::sample::select(vec!["think", "THINK", "Thinking", "reasoning"]),
            prop::collection::vec(inner, 0..4),
        )
            .prop_map(|(tag, body)| Piece::Span(tag.to_string(), body))
    })
}

fn render(pieces: &[Piece], out: &mut String) {
    for p in pieces {
        match p {
            Piece::Text(t) => out.push_str(t),
            Piece::Span(tag, body) => {
                out.push_str(&format!("<{tag}>"));
                render(body, out);
                out.push_str(&format!("</{tag}>"));
            }
        }
    }
}

/// The top-level text segments, which is what stripping must leave.
fn reference(pieces: &[Piece]) -> (String, bool) {
    let mut kept = String::new();
    let mut any_span = false;
    for p in pieces {
        match p {
            Piece::Text(t) => kept.push_str(t),
            Piece::Span(..) => any_span = true,
        }
    }
    (kept, any_span)
}

fn token_soup() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec![
            "<think>", "</think>", "<THINKING>", "</thinking>", "<reasoning>", "</Reasoning>", "<thi", "nk>", "<", ">", "/",
            "a", " ", "\n", "{}", "</", "think",
        ]),
        0..30,
    )
    .prop_map(|v| v.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn well_formed_spans_leave_top_level_text(pieces in prop::collection::vec(piece(), 0..6)) {
        let mut raw = String::new();
        render(&pieces, &mut raw);
        let (kept, any_span) = reference(&pieces);
        let expected = if any_span { kept.trim().to_string() } else { raw.clone() };
        let out = strip_reasoning_flagged(&raw);
        prop_assert_eq!(out.text, expected);
        prop_assert!(!out.unclosed);
    }

    #[test]
    fn stripping_is_idempotent(raw in token_soup()) {
        let once = strip_reasoning(&raw);
        prop_assert_eq!(strip_reasoning(&once), once);
    }

    #[test]
    fn untagged_text_is_unchanged(raw in "[a-zA-Z0-9 \n{}<>/.]{0,40}") {
        prop_assume!(!raw.to_lowercase().contains("think") && !raw.to_lowercase().contains("reasoning"));
        prop_assert_eq!(strip_reasoning(&raw), raw);
    }
}

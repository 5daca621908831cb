#![allow(dead_code)]

pub mod corpus;

use std::sync::Arc;

use mnr::counterfactual::{CounterfactualPair, DistanceConfig};
use mnr::gateway::{Gateway, RetryPolicy, ScriptedBackend};
use mnr::metrics::parse::ExtractedNarrative;
use mnr::metrics::{GroundTruth, Scored};
use mnr::oracle::{DecisionTree, TreeNode, TreeParams};
use mnr::tabular::{presets, FeatureKind, FeatureSchema, FeatureSpec, FeatureValue, Instance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TABLE_FACTUAL: [&str; 8] = ["33", "Private", "School", "Divorced", "Blue-Collar", "White", "Male", "35"];
pub const TABLE_COUNTERFACTUAL: [&str; 8] = ["33", "Private", "School", "Married", "White-Collar", "Other", "Male", "35"];

pub const TABLE_DRAFT_1: &str = "The individual's income would rise above 50K because several attributes \
change together: marital status, occupation, and race. Being married and holding a white-collar job \
are both associated with higher earnings in the census data.";

pub fn adult() -> Arc<FeatureSchema> {
    Arc::new(presets::adult())
}

pub fn table_pair(id: &str) -> CounterfactualPair {
    let schema = presets::adult();
    let x = schema.parse_instance(&TABLE_FACTUAL).unwrap();
    let xp = schema.parse_instance(&TABLE_COUNTERFACTUAL).unwrap();
    CounterfactualPair::new(id, x, xp, 0, 1, &schema, &DistanceConfig::from_schema(&schema)).unwrap()
}

/// Copies of the reference pair with ids `p0..pn`, the age varied so each pair is distinct.
pub fn table_pairs(n: usize) -> Vec<CounterfactualPair> {
    let schema = presets::adult();
    (0..n)
        .map(|i| {
            let age = (30 + i).to_string();
            let mut f = TABLE_FACTUAL;
            let mut c = TABLE_COUNTERFACTUAL;
            f[0] = &age;
            c[0] = &age;
            let x = schema.parse_instance(&f).unwrap();
            let xp = schema.parse_instance(&c).unwrap();
            CounterfactualPair::new(format!("p{i}"), x, xp, 0, 1, &schema, &DistanceConfig::from_schema(&schema)).unwrap()
        })
        .collect()
}

/// A reply whose structured block restates `pair` faithfully.
pub fn faithful_reply(pair: &CounterfactualPair, schema: &FeatureSchema) -> String {
    let block = serde_json::json!({
        "factual": schema.instance_to_json(&pair.factual),
        "counterfactual": schema.instance_to_json(&pair.counterfactual),
        "factual_outcome": pair.y_fact,
        "counterfactual_outcome": pair.y_cf,
        "narrative": "restated",
    });
    format!("<think>checking</think>Narrative.\n```json\n{block}\n```\n")
}

pub fn gateway(backend: ScriptedBackend, cap: usize) -> (Arc<ScriptedBackend>, Arc<Gateway>) {
    let backend = Arc::new(backend);
    let gw = Arc::new(Gateway::new(backend.clone(), RetryPolicy::no_backoff(0), cap));
    (backend, gw)
}

// ---------------------------------------------------------------- random trees

/// A small random schema, tree, factual instance and distance config. Numeric
/// features are integer-valued with at most six values so the whole instance
/// space can be enumerated.
pub struct RandomCase {
    pub oracle: DecisionTree,
    pub x: Instance,
    pub config: DistanceConfig,
}

pub fn random_case(seed: u64) -> RandomCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..=5);
    let features: Vec<FeatureSpec> = (0..k)
        .map(|j| {
            let n_values = rng.gen_range(2..=6);
            let spec = if rng.gen_bool(0.5) {
                FeatureSpec::categorical(&format!("c{j}"), (0..n_values).map(|v| format!("v{v}")))
            } else {
                let min = rng.gen_range(-3..=3) as f64;
                FeatureSpec::numeric(&format!("n{j}"), min, min + (n_values - 1) as f64, true)
            };
            if rng.gen_bool(0.15) {
                spec.immutable()
            } else {
                spec
            }
        })
        .collect();
    let schema = Arc::new(FeatureSchema::new(features, "y", ["0", "1"]).unwrap());
    let depth = if rng.gen_bool(0.1) { 0 } else { rng.gen_range(1..=3) };
    let root = random_node(&mut rng, &schema, depth);
    let oracle = DecisionTree::from_root(root, schema.clone(), TreeParams::default());
    let x = Instance::new(schema.features.iter().map(|f| random_value(&mut rng, f)).collect());
    let normalizers = schema
        .features
        .iter()
        .map(|f| match f.kind {
            FeatureKind::Numeric { min, max, .. } => (max - min) * rng.gen_range(0.5..2.0),
            FeatureKind::Categorical { .. } => 1.0,
        })
        .collect();
    let weights = (0..k).map(|_| rng.gen_range(0.25..2.0)).collect();
    RandomCase {
        oracle,
        x,
        config: DistanceConfig { normalizers, weights },
    }
}

fn random_node(rng: &mut ChaCha8Rng, schema: &FeatureSchema, depth: usize) -> TreeNode {
    if depth == 0 || rng.gen_bool(0.1) {
        return if rng.gen_bool(0.5) { TreeNode::leaf([1, 0]) } else { TreeNode::leaf([0, 1]) };
    }
    let feature = rng.gen_range(0..schema.len());
    let values = domain(&schema.features[feature]);
    let encoded: Vec<f64> = values.iter().map(|v| schema.features[feature].encode(v)).collect();
    let i = rng.gen_range(0..encoded.len() - 1);
    let threshold = (encoded[i] + encoded[i + 1]) / 2.0;
    TreeNode::Split {
        feature,
        threshold,
        counts: [1, 1],
        left: Box::new(random_node(rng, schema, depth - 1)),
        right: Box::new(random_node(rng, schema, depth - 1)),
    }
}

fn random_value(rng: &mut ChaCha8Rng, spec: &FeatureSpec) -> FeatureValue {
    let d = domain(spec);
    d[rng.gen_range(0..d.len())].clone()
}

/// Every admissible value of a feature (integer numerics only).
pub fn domain(spec: &FeatureSpec) -> Vec<FeatureValue> {
    match &spec.kind {
        FeatureKind::Categorical { values } => values.iter().cloned().map(FeatureValue::Categorical).collect(),
        FeatureKind::Numeric { min, max, .. } => {
            let (lo, hi) = (min.ceil() as i64, max.floor() as i64);
            (lo..=hi).map(|v| FeatureValue::Numeric(v as f64)).collect()
        }
    }
}

/// Weighted mean of per-feature terms, written out independently.
pub fn reference_distance(a: &Instance, b: &Instance, config: &DistanceConfig) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..a.values.len() {
        let term = match (&a.values[j], &b.values[j]) {
            (FeatureValue::Numeric(p), FeatureValue::Numeric(q)) => (p - q).abs() / config.normalizers[j],
            (p, q) => {
                if p == q {
                    0.0
                } else {
                    1.0
                }
            }
        };
        num += config.weights[j] * term;
        den += config.weights[j];
    }
    num / den
}

/// Minimum distance over the full instance space (mutable features only), or
/// `None` when no instance flips the prediction.
pub fn exhaustive_minimum(case: &RandomCase) -> Option<f64> {
    let schema = &case.oracle.schema;
    let choices: Vec<Vec<FeatureValue>> = schema
        .features
        .iter()
        .zip(&case.x.values)
        .map(|(f, v)| if f.mutable { domain(f) } else { vec![v.clone()] })
        .collect();
    let y = case.oracle.predict(&case.x);
    let mut best: Option<f64> = None;
    let mut idx = vec![0usize; choices.len()];
    loop {
        let candidate = Instance::new(idx.iter().enumerate().map(|(j, &i)| choices[j][i].clone()).collect());
        if case.oracle.predict(&candidate) != y {
            let d = reference_distance(&case.x, &candidate, &case.config);
            best = Some(best.map_or(d, |b: f64| b.min(d)));
        }
        let mut j = 0;
        loop {
            if j == idx.len() {
                return best;
            }
            idx[j] += 1;
            if idx[j] < choices[j].len() {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

// ------------------------------------------------------------- naive metrics

pub fn scored(items: &[(Option<ExtractedNarrative>, GroundTruth)]) -> Vec<Scored<'_>> {
    items
        .iter()
        .map(|(e, t)| Scored {
            extraction: e.as_ref(),
            truth: t,
        })
        .collect()
}

pub fn truth(fact: &[&str], cf: &[&str], y: (usize, usize)) -> GroundTruth {
    GroundTruth {
        f_fact: fact.iter().map(|s| s.to_string()).collect(),
        f_cf: cf.iter().map(|s| s.to_string()).collect(),
        y_fact: y.0,
        y_cf: y.1,
    }
}

pub fn claim(fact: &[&str], cf: &[&str], y: (usize, usize)) -> ExtractedNarrative {
    ExtractedNarrative {
        f_fact: fact.iter().map(|s| Some(s.to_string())).collect(),
        f_cf: cf.iter().map(|s| Some(s.to_string())).collect(),
        y_fact_claimed: y.0,
        y_cf_claimed: y.1,
        narrative_text: String::new(),
    }
}

/// Two narratives, k = 4: one matches 3 features on both sides, one all 4.
pub fn hand_fixture() -> Vec<(Option<ExtractedNarrative>, GroundTruth)> {
    let t = truth(&["33", "Private", "Divorced", "White"], &["33", "Private", "Married", "Other"], (0, 1));
    vec![
        (Some(claim(&["33", "Private", "Divorced", "White"], &["33", "Private", "Married", "White"], (0, 1))), t.clone()),
        (Some(claim(&["33.0", "private", " Divorced ", "White"], &["33", "Private", "MARRIED", "Other"], (0, 1))), t),
    ]
}


fn naive_equal(truth: &str, claimed: &Option<String>) -> bool {
    let Some(c) = claimed else { return false };
    match truth.trim().parse::<f64>() {
        Ok(t) if t.is_finite() => c.trim().parse::<f64>().map(|v| v == t).unwrap_or(false),
        _ => truth.trim().to_lowercase() == c.trim().to_lowercase(),
    }
}

/// (avg_ff, pff, tf) by a plain double loop.
pub fn naive_metrics(items: &[(Option<ExtractedNarrative>, GroundTruth)]) -> (f64, f64, f64) {
    let n = items.len();
    let k = items[0].1.f_fact.len();
    let mut matched = 0.0;
    let mut perfect = 0.0;
    let mut targets = 0.0;
    for (e, t) in items {
        let Some(e) = e else { continue };
        let mut all = true;
        for j in 0..k {
            if naive_equal(&t.f_fact[j], &e.f_fact[j]) && naive_equal(&t.f_cf[j], &e.f_cf[j]) {
                matched += 1.0;
            } else {
                all = false;
            }
        }
        if all {
            perfect += 1.0;
        }
        if e.y_fact_claimed == t.y_fact && e.y_cf_claimed == t.y_cf {
            targets += 1.0;
        }
    }
    (matched / (n * k) as f64, perfect / n as f64, targets / n as f64)
}

/// A random record set of `n` narratives over `k` features.
pub fn random_record_set(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<(Option<ExtractedNarrative>, GroundTruth)> {
    const WORDS: [&str; 5] = ["Married", "Private", "White-Collar", "School", "Male"];
    let value = |rng: &mut ChaCha8Rng| -> String {
        if rng.gen_bool(0.5) {
            WORDS[rng.gen_range(0..WORDS.len())].to_string()
        } else {
            rng.gen_range(0..60).to_string()
        }
    };
    let claim = |rng: &mut ChaCha8Rng, truth: &str| -> Option<String> {
        match rng.gen_range(0..10) {
            0 => None,
            1 => Some(format!("  {} ", truth.to_uppercase())),
            2 => Some(match truth.parse::<i64>() {
                Ok(v) => format!("{v}.0"),
                Err(_) => truth.to_lowercase(),
            }),
            3 => Some(format!("{truth}x")),
            _ => Some(truth.to_string()),
        }
    };
    (0..n)
        .map(|_| {
            let truth = GroundTruth {
                f_fact: (0..k).map(|_| value(rng)).collect(),
                f_cf: (0..k).map(|_| value(rng)).collect(),
                y_fact: rng.gen_range(0..2),
                y_cf: rng.gen_range(0..2),
            };
            let extraction = (!rng.gen_bool(0.1)).then(|| ExtractedNarrative {
                f_fact: truth.f_fact.iter().map(|t| claim(rng, t)).collect(),
                f_cf: truth.f_cf.iter().map(|t| claim(rng, t)).collect(),
                y_fact_claimed: if rng.gen_bool(0.85) { truth.y_fact } else { 1 - truth.y_fact },
                y_cf_claimed: if rng.gen_bool(0.85) { truth.y_cf } else { 1 - truth.y_cf },
                narrative_text: String::new(),
            });
            (extraction, truth)
        })
        .collect()
}

// ------------------------------------------------------------ loopback server

/// A minimal chat-completions server on 127.0.0.1 answering every
/// `POST /chat/completions` with `responder` applied to the user message.
/// Returns the base URL; the server thread lives until the process exits.
pub fn chat_stub(responder: mnr::gateway::Responder) -> String {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let responder = responder.clone();
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let line = line.trim_end().to_ascii_lowercase();
                    if line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                let body: serde_json::Value = serde_json::from_slice(&buf).unwrap_or_default();
                let message = |role: &str| {
                    body["messages"]
                        .as_array()
                        .and_then(|m| m.iter().find(|m| m["role"] == role))
                        .and_then(|m| m["content"].as_str())
                        .unwrap_or_default()
                        .to_string()
                };
                let request = mnr::gateway::ChatRequest {
                    id: mnr::gateway::RequestId::new("stub", 0),
                    system: message("system"),
                    user: message("user"),
                };
                let reply = serde_json::json!({
                    "model": body["model"],
                    "choices": [{"index": 0, "message": {"role": "assistant", "content": responder(&request)}, "finish_reason": "stop"}],
                })
                .to_string();
                let mut stream = stream;
                let _ = write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                );
            });
        }
    });
    url
}

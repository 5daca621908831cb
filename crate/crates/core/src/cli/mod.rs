//! Command layer behind the `mnr` binary. Every command validates its whole
//! configuration, loads its inputs and builds its backends before it touches
//! the output directory.

mod config;

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};
use thiserror::Error;

pub use config::{
    BackendConfig, BackendsConfig, CounterfactualConfig, DatasetConfig, KdSection, Normalizer, OracleConfig,
    OutputSection, PipelineSection, ProfileSection, RunConfig, SearchConfig, SplitChoice,
};

use crate::counterfactual::{generate_pairs, CounterfactualPair, DistanceConfig, SearchError};
use crate::energy::profile_pipeline;
use crate::kd::{build_draft_dataset, build_refiner_dataset, write_jsonl, KdError, KdOptions};
use crate::metrics::{score_batch, truths_from_records, GroundTruth, MetricsError};
use crate::oracle::{DecisionTree, OracleError};
use crate::pipeline::{read_records, run_batch, write_records, PipelineConfig, PipelineError};
use crate::prompt::{PromptError, Stage};
use crate::tabular::{load_csv, FeatureSchema, LabeledDataset, TabularError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] TabularError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Kd(#[from] KdError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Validation(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Oracle(_) => "oracle",
            CliError::Search(_) => "search",
            CliError::Prompt(_) => "prompt",
            CliError::Pipeline(_) => "pipeline",
            CliError::Kd(_) => "kd",
            CliError::Metrics(_) => "metrics",
            CliError::Validation(_) => "validation",
            CliError::Io { .. } => "io",
        }
    }

    /// Process exit status: 2 for bad configuration, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        json!({"error": {"kind": self.kind(), "message": self.to_string()}})
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    TrainOracle,
    GenCf,
    /// Re-validates a pairs file against the oracle.
    CheckCf,
    Run,
    BuildKd { stage: Stage },
    Profile,
    /// Scores a narratives file; defaults to `narratives.jsonl` in the output directory.
    Score { narratives: Option<PathBuf> },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainOracle => "train-oracle",
            Command::GenCf => "gen-cf",
            Command::CheckCf => "check-cf",
            Command::Run => "run",
            Command::BuildKd { .. } => "build-kd",
            Command::Profile => "profile",
            Command::Score { .. } => "score",
        }
    }

    /// File name of the command's manifest.
    pub fn manifest_name(&self) -> String {
        match self {
            Command::BuildKd { stage } => format!("manifest_build_kd_{stage}.json"),
            other => format!("manifest_{}.json", other.name().replace('-', "_")),
        }
    }
}

/// Loads the config at `path`, applies overrides and runs `command`.
/// Returns a JSON summary of what was written.
pub fn execute(path: &Path, seed: Option<u64>, out: Option<PathBuf>, command: &Command) -> Result<Value, CliError> {
    let mut config = RunConfig::from_file(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(out) = out {
        config.output_dir = out;
    }
    execute_config(&config, command)
}

pub fn execute_config(config: &RunConfig, command: &Command) -> Result<Value, CliError> {
    config.validate()?;
    let ctx = Context::new(config, command)?;
    match command {
        Command::TrainOracle => train_oracle(ctx),
        Command::GenCf => gen_cf(ctx),
        Command::CheckCf => check_cf(ctx),
        Command::Run => run(ctx),
        Command::BuildKd { stage } => build_kd(ctx, *stage),
        Command::Profile => profile(ctx),
        Command::Score { narratives } => score(ctx, narratives.as_deref()),
    }
}

struct Context<'a> {
    config: &'a RunConfig,
    command: &'a Command,
    schema: Arc<FeatureSchema>,
    inputs: serde_json::Map<String, Value>,
}

impl<'a> Context<'a> {
    fn new(config: &'a RunConfig, command: &'a Command) -> Result<Self, CliError> {
        Ok(Self {
            config,
            command,
            schema: config.schema()?,
            inputs: serde_json::Map::new(),
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn created_at(&self) -> Option<String> {
        self.config
            .output
            .timestamps
            .then(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
    }

    fn splits(&self) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset), CliError> {
        let data = load_csv(&self.config.dataset.csv, Arc::clone(&self.schema))?;
        if data.is_empty() {
            return Err(CliError::Validation(format!(
                "dataset {} has no rows",
                self.config.dataset.csv.display()
            )));
        }
        let (train, test) = data.split(self.config.dataset.test_fraction, self.config.seed);
        Ok((data, train, test))
    }

    /// The saved tree when one exists, else a fresh one trained on the train split.
    fn oracle(&self, train: &LabeledDataset) -> Result<(DecisionTree, bool), CliError> {
        let path = self.config.tree_path();
        if path.exists() {
            Ok((DecisionTree::load(&path, Arc::clone(&self.schema))?, false))
        } else if self.config.oracle.tree.is_some() {
            Err(CliError::Config(format!("tree file {} does not exist", path.display())))
        } else {
            Ok((DecisionTree::train(train, self.config.tree_params())?, true))
        }
    }

    fn pairs(&self, limit: Option<usize>) -> Result<Vec<CounterfactualPair>, CliError> {
        let path = self.config.pairs_path();
        let mut pairs = read_pairs(&path, &self.schema)?;
        if let Some(n) = limit {
            pairs.truncate(n);
        }
        if pairs.is_empty() {
            return Err(CliError::Validation(format!("no pairs in {}", path.display())));
        }
        Ok(pairs)
    }

    fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        let (draft_template, refiner_template) = self.config.templates()?;
        let config = PipelineConfig {
            drafter: self.config.gateway("drafter", &self.schema)?,
            refiner: self.config.gateway("refiner", &self.schema)?,
            n_drafts: self.config.pipeline.n_drafts,
            draft_template,
            refiner_template,
            in_flight_cap: self.config.pipeline.in_flight_cap,
        };
        config.validate()?;
        Ok(config)
    }

    fn prepare_output(&self) -> Result<(), CliError> {
        let dir = &self.config.output_dir;
        std::fs::create_dir_all(dir).map_err(io_err(dir))
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.out(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        std::fs::write(&path, contents).map_err(io_err(&path))?;
        Ok(path)
    }

    fn write_json(&self, name: &str, value: &Value) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        self.write(name, text)
    }

    fn input(&mut self, key: &str, path: &Path) {
        self.inputs.insert(key.into(), json!(path.display().to_string()));
    }

    /// Writes `manifest_<command>.json` naming inputs, seed, config and outputs.
    fn manifest(&self, outputs: &[&Path], extra: Value) -> Result<PathBuf, CliError> {
        let mut m = json!({
            "command": self.command.name(),
            "crate": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.config.seed,
            "inputs": self.inputs,
            "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "config": serde_json::to_value(self.config).expect("serializable"),
        });
        if let (Value::Object(m), Value::Object(extra)) = (&mut m, extra) {
            m.extend(extra);
            if let Some(t) = self.created_at() {
                m.insert("created_at".into(), json!(t));
            }
        }
        self.write_json(&self.command.manifest_name(), &m)
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// One pair per line, as produced by `gen-cf`.
pub fn pairs_to_jsonl(pairs: &[CounterfactualPair], schema: &FeatureSchema) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&p.to_json(schema).to_string());
        out.push('\n');
    }
    out
}

pub fn read_pairs(path: &Path, schema: &FeatureSchema) -> Result<Vec<CounterfactualPair>, CliError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| CliError::Validation(format!("{} line {}: {m}", path.display(), i + 1));
        let value: Value = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        pairs.push(CounterfactualPair::from_json(&value, schema).map_err(|e| bad(e.to_string()))?);
    }
    Ok(pairs)
}

fn distance_config(ctx: &Context<'_>, train: &LabeledDataset) -> Result<DistanceConfig, CliError> {
    let base = match ctx.config.search.normalizer {
        Normalizer::Dataset => DistanceConfig::from_dataset(train),
        Normalizer::Schema => DistanceConfig::from_schema(&ctx.schema),
    };
    let config = match &ctx.config.search.weights {
        Some(w) => base.with_weights(w.clone())?,
        None => base,
    };
    config.validate(ctx.schema.len())?;
    Ok(config)
}

fn train_oracle(mut ctx: Context<'_>) -> Result<Value, CliError> {
    ctx.input("dataset", &ctx.config.dataset.csv.clone());
    let (data, train, test) = ctx.splits()?;
    let tree = DecisionTree::train(&train, ctx.config.tree_params())?;
    let summary = json!({
        "dataset": ctx.schema.name,
        "n_rows": data.len(),
        "n_train": train.len(),
        "n_test": test.len(),
        "train_accuracy": tree.accuracy(&train)?,
        "test_accuracy": if test.is_empty() { Value::Null } else { json!(tree.accuracy(&test)?) },
        "depth": tree.depth(),
        "max_depth": ctx.config.oracle.max_depth,
        "min_samples_split": ctx.config.oracle.min_samples_split,
        "seed": ctx.config.seed,
    });
    ctx.prepare_output()?;
    let tree_path = ctx.out("tree.txt");
    tree.save(&tree_path)?;
    let summary_path = ctx.write_json("oracle_summary.json", &summary)?;
    ctx.manifest(&[&tree_path, &summary_path], json!({}))?;
    Ok(summary)
}

fn gen_cf(mut ctx: Context<'_>) -> Result<Value, CliError> {
    ctx.input("dataset", &ctx.config.dataset.csv.clone());
    let (data, train, test) = ctx.splits()?;
    let (oracle, trained) = ctx.oracle(&train)?;
    if !trained {
        ctx.input("tree", &ctx.config.tree_path());
    }
    let distance = distance_config(&ctx, &train)?;
    let mut rows = match ctx.config.counterfactuals.split {
        SplitChoice::Train => train,
        SplitChoice::Test => test,
        SplitChoice::All => data,
    };
    if let Some(n) = ctx.config.counterfactuals.limit {
        let keep: Vec<usize> = (0..rows.len().min(n)).collect();
        rows = rows.subset(&keep);
    }
    if rows.is_empty() {
        return Err(CliError::Validation("no rows selected for counterfactual search".into()));
    }
    let report = generate_pairs(&oracle, &rows, &distance, ctx.config.search.budget())?;
    let summary = json!({
        "n_rows": rows.len(),
        "n_pairs": report.pairs.len(),
        "not_found_rows": report.not_found,
        "budget_exhausted_rows": report.exhausted,
        "split": ctx.config.counterfactuals.split,
        "normalizers": distance.normalizers,
        "weights": distance.weights,
    });
    ctx.prepare_output()?;
    let mut outputs = Vec::new();
    if trained {
        let tree_path = ctx.out("tree.txt");
        oracle.save(&tree_path)?;
        outputs.push(tree_path);
    }
    outputs.push(ctx.write("pairs.jsonl", pairs_to_jsonl(&report.pairs, &ctx.schema))?);
    outputs.push(ctx.write_json("cf_report.json", &summary)?);
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    ctx.manifest(&refs, json!({"oracle_trained": trained}))?;
    Ok(summary)
}

fn check_cf(ctx: Context<'_>) -> Result<Value, CliError> {
    let (_, train, _) = ctx.splits()?;
    let (oracle, _) = ctx.oracle(&train)?;
    let pairs = ctx.pairs(None)?;
    let invalid: Vec<&str> = pairs
        .iter()
        .filter(|p| !p.is_valid_for(&oracle))
        .map(|p| p.id.as_str())
        .collect();
    let summary = json!({"n_pairs": pairs.len(), "n_valid": pairs.len() - invalid.len(), "invalid": invalid});
    if invalid.is_empty() {
        Ok(summary)
    } else {
        Err(CliError::Validation(format!(
            "{} of {} pairs are not valid for the oracle: {}",
            invalid.len(),
            pairs.len(),
            invalid.join(", ")
        )))
    }
}

fn run(mut ctx: Context<'_>) -> Result<Value, CliError> {
    let pairs = ctx.pairs(ctx.config.pipeline.limit)?;
    ctx.input("pairs", &ctx.config.pairs_path());
    let pipeline = ctx.pipeline()?;
    ctx.prepare_output()?;
    let report = run_batch(&pipeline, &pairs, &ctx.schema)?;
    let narratives = ctx.out("narratives.jsonl");
    write_records(&narratives, &report, &ctx.schema)?;
    let failures = ctx.write_json("failures.json", &report.failures_json())?;
    let mut outputs = vec![narratives, failures];
    let metrics = if report.records.is_empty() {
        Value::Null
    } else {
        let truths: HashMap<String, GroundTruth> = pairs.iter().map(|p| (p.id.clone(), GroundTruth::from_pair(p))).collect();
        let m = score_batch(&report.records, &truths)?;
        outputs.push(ctx.write_json("metrics.json", &m.to_json())?);
        outputs.push(ctx.write("metrics.csv", m.summary_csv())?);
        m.summary_json()
    };
    let summary = json!({
        "n_pairs": pairs.len(),
        "n_records": report.records.len(),
        "n_failures": report.failures.len(),
        "metrics": metrics,
    });
    log::info!(
        "peak in-flight requests: drafter {}, refiner {}",
        pipeline.drafter.peak_in_flight(),
        pipeline.refiner.peak_in_flight()
    );
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    ctx.manifest(
        &refs,
        json!({
            "drafter": pipeline.drafter.identity(),
            "refiner": pipeline.refiner.identity(),
            "summary": summary,
        }),
    )?;
    Ok(summary)
}

fn build_kd(mut ctx: Context<'_>, stage: Stage) -> Result<Value, CliError> {
    let pairs = ctx.pairs(ctx.config.pipeline.limit)?;
    ctx.input("pairs", &ctx.config.pairs_path());
    let (draft_t, refiner_t) = ctx.config.templates()?;
    let teacher = ctx.config.gateway("teacher", &ctx.schema)?;
    let drafter = match stage {
        Stage::Draft => None,
        Stage::Refiner => Some(ctx.config.gateway("drafter", &ctx.schema)?),
    };
    let options = KdOptions {
        train_on_raw: ctx.config.kd.train_on_raw,
        in_flight_cap: ctx.config.pipeline.in_flight_cap,
        drafter_selection: ctx.config.kd.drafter_selection.clone(),
        created_at: ctx.created_at(),
    };
    ctx.prepare_output()?;
    let dataset = match &drafter {
        None => build_draft_dataset(&teacher, &pairs, &draft_t, &ctx.schema, &options)?,
        Some(d) => build_refiner_dataset(
            &teacher,
            d,
            &pairs,
            &draft_t,
            &refiner_t,
            &ctx.schema,
            ctx.config.pipeline.n_drafts,
            &options,
        )?,
    };
    let path = ctx.out(&format!("kd_{stage}.jsonl"));
    write_jsonl(&dataset, &path)?;
    let summary = json!({
        "stage": stage,
        "n_pairs": dataset.manifest.n_pairs,
        "n_examples": dataset.manifest.n_examples,
        "n_skipped": dataset.manifest.skipped.len(),
        "path": path.display().to_string(),
    });
    ctx.manifest(&[&path], json!({"summary": summary}))?;
    Ok(summary)
}

fn profile(mut ctx: Context<'_>) -> Result<Value, CliError> {
    let pairs = ctx.pairs(ctx.config.pipeline.limit)?;
    ctx.input("pairs", &ctx.config.pairs_path());
    let pipeline = ctx.pipeline()?;
    let source = ctx.config.power_source();
    ctx.prepare_output()?;
    let report = profile_pipeline(&pipeline, &pairs, &ctx.schema, source.as_ref(), ctx.config.interval())?;
    let mut outputs = Vec::new();
    for r in &report.per_record {
        let mut buf = Vec::new();
        r.trace
            .write_csv(&mut buf)
            .map_err(|e| CliError::Validation(format!("trace for {}: {e}", r.pair_id)))?;
        outputs.push(ctx.write(&format!("traces/{}.csv", r.pair_id), buf)?);
    }
    let narratives = ctx.out("profile_narratives.jsonl");
    write_records(&narratives, &report.batch, &ctx.schema)?;
    outputs.push(narratives);
    let energy = report.to_json();
    outputs.push(ctx.write_json("energy.json", &energy)?);
    let summary = json!({
        "source": report.source,
        "n_records": report.per_record.len(),
        "energy_joules": energy["energy_joules"],
        "time_seconds": energy["time_seconds"],
        "n_pipeline_failures": report.batch.failures.len(),
        "n_trace_failures": report.trace_failures.len(),
    });
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    ctx.manifest(&refs, json!({"summary": summary}))?;
    Ok(summary)
}

fn score(mut ctx: Context<'_>, narratives: Option<&Path>) -> Result<Value, CliError> {
    let path = narratives.map(Path::to_path_buf).unwrap_or_else(|| ctx.out("narratives.jsonl"));
    let records = read_records(&path, &ctx.schema)?;
    ctx.input("narratives", &path);
    let pairs_path = ctx.config.pairs_path();
    let truths = if pairs_path.exists() {
        ctx.input("pairs", &pairs_path);
        read_pairs(&pairs_path, &ctx.schema)?
            .iter()
            .map(|p| (p.id.clone(), GroundTruth::from_pair(p)))
            .collect()
    } else {
        truths_from_records(&records)
    };
    let report = score_batch(&records, &truths)?;
    ctx.prepare_output()?;
    let json_path = ctx.write_json("metrics.json", &report.to_json())?;
    let csv_path = ctx.write("metrics.csv", report.summary_csv())?;
    ctx.manifest(&[&json_path, &csv_path], json!({}))?;
    Ok(report.summary_json())
}

//! Run configuration: one TOML file, with relative paths resolved against
//! the file's directory. API keys are never read from here, only the name of
//! the environment variable that holds them.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::counterfactual::SearchBudget;
use crate::energy::{CommandSource, PowerSource, SyntheticSource};
use crate::gateway::{mirror_responder, Gateway, HttpBackend, ModelEndpoint, RetryPolicy, SamplingParams, ScriptedBackend};
use crate::oracle::TreeParams;
use crate::prompt::{PromptTemplate, Stage};
use crate::tabular::{presets, FeatureSchema};

fn default_seed() -> u64 {
    42
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_max_depth() -> usize {
    4
}
fn default_min_samples_split() -> usize {
    2
}
fn default_max_expansions() -> usize {
    200_000
}
fn default_n_drafts() -> usize {
    3
}
fn default_cap() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_interval_ms() -> u64 {
    200
}
fn default_backoff() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub counterfactuals: CounterfactualConfig,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub kd: KdSection,
    #[serde(default)]
    pub profile: ProfileSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub csv: PathBuf,
    /// Built-in schema name ("adult" or "titanic").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Schema TOML file; takes precedence over `preset`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_max_depth")]
    pub max_depth: usize,
    #[serde(default = "default_min_samples_split")]
    pub min_samples_split: usize,
    /// Existing tree file; by default `tree.txt` in the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<PathBuf>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            max_depth: default_max_depth(),
            min_samples_split: default_min_samples_split(),
            tree: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    /// Observed ranges of the training split.
    Dataset,
    /// Declared schema bounds.
    Schema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "default_max_expansions")]
    pub max_expansions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_changed_features: Option<usize>,
    #[serde(default = "default_normalizer")]
    pub normalizer: Normalizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

fn default_normalizer() -> Normalizer {
    Normalizer::Dataset
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            max_expansions: default_max_expansions(),
            max_changed_features: None,
            normalizer: Normalizer::Dataset,
            weights: None,
        }
    }
}

impl SearchConfig {
    pub fn budget(&self) -> SearchBudget {
        SearchBudget {
            max_expansions: self.max_expansions,
            max_changed_features: self.max_changed_features,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualConfig {
    /// Rows whose counterfactuals are searched.
    #[serde(default = "default_split")]
    pub split: SplitChoice,
    /// Only the first `limit` rows of that split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    /// Existing pairs file; by default `pairs.jsonl` in the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PathBuf>,
}

fn default_split() -> SplitChoice {
    SplitChoice::Test
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        Self {
            split: SplitChoice::Test,
            limit: None,
            pairs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    #[serde(default = "default_n_drafts")]
    pub n_drafts: usize,
    /// Pairs processed concurrently.
    #[serde(default = "default_cap")]
    pub in_flight_cap: usize,
    /// Plain-text template bodies; defaults are built in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft_template: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refiner_template: Option<PathBuf>,
    /// Only the first `limit` pairs are explained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            n_drafts: default_n_drafts(),
            in_flight_cap: default_cap(),
            draft_template: None,
            refiner_template: None,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendConfig {
    Http {
        base_url: String,
        model_name: String,
        /// Name of the environment variable holding the API key.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        auth_env: Option<String>,
        /// Defaults to the recommended preset for `model_name`, if any.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sampling: Option<SamplingParams>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_secs: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_retries: Option<u32>,
        #[serde(default = "default_backoff")]
        backoff_base_secs: f64,
        #[serde(default)]
        omit_extended_sampling: bool,
        #[serde(default = "default_cap")]
        in_flight_cap: usize,
    },
    Scripted {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        /// JSONL fixtures keyed by session and ordinal.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fixtures: Option<PathBuf>,
        /// Fallback for requests without a fixture; only "mirror" is available.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        responder: Option<String>,
        #[serde(default)]
        max_retries: u32,
        #[serde(default = "default_cap")]
        in_flight_cap: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drafter: Option<BackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refiner: Option<BackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<BackendConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdSection {
    /// Recorded in the refiner dataset manifest, e.g. "weakest".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drafter_selection: Option<String>,
    #[serde(default)]
    pub train_on_raw: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    #[serde(default = "default_interval_ms")]
    pub interval_ms: u64,
    /// Command printing watts, one number per line; defaults to nvidia-smi.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_command: Option<Vec<String>>,
    /// Constant synthetic power instead of a command, for dry runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_watts: Option<f64>,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            interval_ms: default_interval_ms(),
            power_command: None,
            synthetic_watts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Write creation timestamps into manifests. Disable for byte-identical reruns.
    #[serde(default = "default_true")]
    pub timestamps: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { timestamps: true }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

fn must_exist(p: &Path, what: &str) -> Result<(), CliError> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", p.display())))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.resolve_paths(base_dir);
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output_dir);
        resolve(base, &mut self.dataset.csv);
        resolve_opt(base, &mut self.dataset.schema);
        resolve_opt(base, &mut self.oracle.tree);
        resolve_opt(base, &mut self.counterfactuals.pairs);
        resolve_opt(base, &mut self.pipeline.draft_template);
        resolve_opt(base, &mut self.pipeline.refiner_template);
        for b in [&mut self.backends.drafter, &mut self.backends.refiner, &mut self.backends.teacher]
            .into_iter()
            .flatten()
        {
            if let BackendConfig::Scripted { fixtures, .. } = b {
                resolve_opt(base, fixtures);
            }
        }
    }

    /// Checks everything common to all commands, including that referenced files exist.
    pub fn validate(&self) -> Result<(), CliError> {
        must_exist(&self.dataset.csv, "dataset csv")?;
        if let Some(s) = &self.dataset.schema {
            must_exist(s, "schema file")?;
        } else {
            match &self.dataset.preset {
                Some(p) if presets::by_name(p).is_some() => {}
                Some(p) => return Err(CliError::Config(format!("unknown schema preset {p:?}"))),
                None => return Err(CliError::Config("dataset needs a schema file or a preset".into())),
            }
        }
        if !(self.dataset.test_fraction > 0.0 && self.dataset.test_fraction < 1.0) {
            return Err(CliError::Config("test_fraction must be in (0, 1)".into()));
        }
        self.tree_params()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(t) = &self.oracle.tree {
            must_exist(t, "tree file")?;
        }
        if let Some(p) = &self.counterfactuals.pairs {
            must_exist(p, "pairs file")?;
        }
        if self.search.max_expansions == 0 {
            return Err(CliError::Config("max_expansions must be positive".into()));
        }
        if let Some(p) = &self.pipeline.draft_template {
            must_exist(p, "draft template")?;
        }
        if let Some(p) = &self.pipeline.refiner_template {
            must_exist(p, "refiner template")?;
        }
        if self.pipeline.n_drafts == 0 {
            return Err(CliError::Config("n_drafts must be at least 1".into()));
        }
        if self.pipeline.in_flight_cap == 0 {
            return Err(CliError::Config("pipeline in_flight_cap must be at least 1".into()));
        }
        for (role, b) in self.backend_list() {
            validate_backend(role, b)?;
        }
        if self.profile.interval_ms == 0 {
            return Err(CliError::Config("profile interval_ms must be positive".into()));
        }
        Ok(())
    }

    fn backend_list(&self) -> Vec<(&'static str, &BackendConfig)> {
        [
            ("drafter", &self.backends.drafter),
            ("refiner", &self.backends.refiner),
            ("teacher", &self.backends.teacher),
        ]
        .into_iter()
        .filter_map(|(r, b)| b.as_ref().map(|b| (r, b)))
        .collect()
    }

    pub fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.oracle.max_depth,
            min_samples_split: self.oracle.min_samples_split,
        }
    }

    pub fn schema(&self) -> Result<Arc<FeatureSchema>, CliError> {
        let schema = match (&self.dataset.schema, &self.dataset.preset) {
            (Some(path), _) => FeatureSchema::from_toml_file(path)?,
            (None, Some(name)) => presets::by_name(name)
                .ok_or_else(|| CliError::Config(format!("unknown schema preset {name:?}")))?,
            (None, None) => return Err(CliError::Config("dataset needs a schema file or a preset".into())),
        };
        Ok(Arc::new(schema))
    }

    pub fn tree_path(&self) -> PathBuf {
        self.oracle.tree.clone().unwrap_or_else(|| self.output_dir.join("tree.txt"))
    }

    pub fn pairs_path(&self) -> PathBuf {
        self.counterfactuals
            .pairs
            .clone()
            .unwrap_or_else(|| self.output_dir.join("pairs.jsonl"))
    }

    pub fn templates(&self) -> Result<(PromptTemplate, PromptTemplate), CliError> {
        let draft = match &self.pipeline.draft_template {
            Some(p) => PromptTemplate::from_body_file(Stage::Draft, p)?,
            None => PromptTemplate::default_draft(),
        };
        let refiner = match &self.pipeline.refiner_template {
            Some(p) => PromptTemplate::from_body_file(Stage::Refiner, p)?,
            None => PromptTemplate::default_refiner(self.pipeline.n_drafts),
        };
        if refiner.n_drafts() != self.pipeline.n_drafts {
            return Err(CliError::Config(format!(
                "refiner template has {} draft slots but n_drafts is {}",
                refiner.n_drafts(),
                self.pipeline.n_drafts
            )));
        }
        Ok((draft, refiner))
    }

    /// Builds the gateway for `role`, failing when it is not configured.
    pub fn gateway(&self, role: &str, schema: &Arc<FeatureSchema>) -> Result<Arc<Gateway>, CliError> {
        let config = match role {
            "drafter" => &self.backends.drafter,
            "refiner" => &self.backends.refiner,
            "teacher" => &self.backends.teacher,
            _ => &None,
        }
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("no [backends.{role}] configured")))?;
        build_gateway(role, config, schema)
    }

    pub fn power_source(&self) -> Box<dyn PowerSource> {
        match (&self.profile.synthetic_watts, &self.profile.power_command) {
            (Some(w), _) => Box::new(SyntheticSource::constant(*w)),
            (None, Some(cmd)) if !cmd.is_empty() => Box::new(CommandSource::new(cmd[0].clone(), cmd[1..].to_vec())),
            _ => Box::new(CommandSource::nvidia_smi()),
        }
    }

    pub fn interval(&self) -> Duration {
        Duration::from_millis(self.profile.interval_ms)
    }
}

fn validate_backend(role: &str, b: &BackendConfig) -> Result<(), CliError> {
    let err = |m: String| CliError::Config(format!("[backends.{role}]: {m}"));
    match b {
        BackendConfig::Http {
            base_url,
            model_name,
            sampling,
            timeout_secs,
            backoff_base_secs,
            in_flight_cap,
            ..
        } => {
            let endpoint = endpoint_for(base_url, model_name, sampling, timeout_secs, &None, &None, false);
            endpoint.validate().map_err(|e| err(e.to_string()))?;
            if !(*backoff_base_secs >= 0.0) {
                return Err(err("backoff_base_secs must be >= 0".into()));
            }
            if *in_flight_cap == 0 {
                return Err(err("in_flight_cap must be at least 1".into()));
            }
        }
        BackendConfig::Scripted {
            fixtures,
            responder,
            in_flight_cap,
            ..
        } => {
            if let Some(f) = fixtures {
                must_exist(f, "fixtures file")?;
            }
            if let Some(r) = responder {
                if r != "mirror" {
                    return Err(err(format!("unknown responder {r:?}")));
                }
            }
            if fixtures.is_none() && responder.is_none() {
                return Err(err("scripted backend needs fixtures or a responder".into()));
            }
            if *in_flight_cap == 0 {
                return Err(err("in_flight_cap must be at least 1".into()));
            }
        }
    }
    Ok(())
}

fn endpoint_for(
    base_url: &str,
    model_name: &str,
    sampling: &Option<SamplingParams>,
    timeout_secs: &Option<f64>,
    max_retries: &Option<u32>,
    auth_env: &Option<String>,
    omit: bool,
) -> ModelEndpoint {
    let mut e = ModelEndpoint::new(base_url, model_name);
    if let Some(s) = sampling {
        e.sampling = *s;
    }
    if let Some(t) = timeout_secs {
        e.timeout_secs = *t;
    }
    if let Some(r) = max_retries {
        e.max_retries = *r;
    }
    e.auth_env = auth_env.clone();
    e.omit_extended_sampling = omit;
    e
}

fn build_gateway(role: &str, config: &BackendConfig, schema: &Arc<FeatureSchema>) -> Result<Arc<Gateway>, CliError> {
    let gateway = match config {
        BackendConfig::Http {
            base_url,
            model_name,
            auth_env,
            sampling,
            timeout_secs,
            max_retries,
            backoff_base_secs,
            omit_extended_sampling,
            in_flight_cap,
        } => {
            let endpoint = endpoint_for(
                base_url,
                model_name,
                sampling,
                timeout_secs,
                max_retries,
                auth_env,
                *omit_extended_sampling,
            );
            let policy = RetryPolicy {
                max_retries: endpoint.max_retries,
                backoff_base: Duration::from_secs_f64(*backoff_base_secs),
                jitter: true,
            };
            let backend = HttpBackend::new(endpoint).map_err(|e| CliError::Config(format!("[backends.{role}]: {e}")))?;
            Gateway::new(Arc::new(backend), policy, *in_flight_cap)
        }
        BackendConfig::Scripted {
            name,
            fixtures,
            responder,
            max_retries,
            in_flight_cap,
        } => {
            let name = name.clone().unwrap_or_else(|| role.to_string());
            let mut backend = match fixtures {
                Some(path) => ScriptedBackend::from_jsonl_file(name, path).map_err(CliError::Config)?,
                None => ScriptedBackend::new(name),
            };
            if responder.as_deref() == Some("mirror") {
                backend = backend.with_responder(mirror_responder(Arc::clone(schema)));
            }
            Gateway::new(Arc::new(backend), RetryPolicy::no_backoff(*max_retries), *in_flight_cap)
        }
    };
    Ok(Arc::new(gateway))
}

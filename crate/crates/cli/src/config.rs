//! Config file schema, command-line overrides, resolution to a concrete
//! run plan, and the unknown-key report.
//!
//! The file format is JSON with every field optional; `resolve` fills in
//! defaults and cross-checks the combination, so `validate` can echo the
//! exact plan a `run` would execute.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use bcl_core::data::{Protocol, SurrogateConfig, ToyConfig, ToyKind, SPLIT_PAIRS};
use bcl_core::filter::{ChangepointScenario, GaussianBelief};
use bcl_core::hmc::HmcConfig;
use bcl_core::nn::{Activation, Head, MlpSpec};
use bcl_core::protocl::ProtoConfig;
use bcl_core::seqbayes::SeqConfig;
use bcl_core::vcl::{HeadMode, VclConfig};

/// Failure classes; `main` maps these onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad config or arguments: exit 2, no artifacts written.
    Validation(String),
    /// Failure during a run: exit 3, partial artifacts plus a marker.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid config: {m}"),
            CliError::Runtime(m) => write!(f, "run failed: {m}"),
        }
    }
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Scalar conjugate filtering through a changepoint stream.
    Filter,
    /// Sequential posterior sampling with mixture-prior propagation.
    HmcCl,
    /// Conjugate class prototypes over a learned embedding.
    Protocl,
    /// Variational continual learning baselines.
    Vcl,
    /// Sampler health check against a known Gaussian target.
    Diagnostics,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ExperimentKind::Filter => "filter",
            ExperimentKind::HmcCl => "hmc-cl",
            ExperimentKind::Protocl => "protocl",
            ExperimentKind::Vcl => "vcl",
            ExperimentKind::Diagnostics => "diagnostics",
        };
        f.write_str(name)
    }
}

/// Seed specification: a count (seeds 0..n) or an explicit list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedsSpec {
    Count(usize),
    List(Vec<u64>),
}

impl Default for SeedsSpec {
    fn default() -> Self {
        SeedsSpec::Count(3)
    }
}

impl SeedsSpec {
    pub fn resolve(&self) -> Vec<u64> {
        match self {
            SeedsSpec::Count(n) => (0..*n as u64).collect(),
            SeedsSpec::List(v) => v.clone(),
        }
    }

    /// `--seeds 10` means ten seeds starting at 0; `--seeds 3,7,11` is an
    /// explicit list.
    pub fn parse_flag(text: &str) -> CliResult<Self> {
        let text = text.trim();
        if text.is_empty() {
            return Err(CliError::validation("--seeds needs a count or a comma-separated list"));
        }
        if text.contains(',') {
            let list = text
                .split(',')
                .map(|p| {
                    p.trim().parse::<u64>().map_err(|_| {
                        CliError::validation(format!("--seeds entry {:?} is not an integer", p.trim()))
                    })
                })
                .collect::<CliResult<Vec<u64>>>()?;
            Ok(SeedsSpec::List(list))
        } else {
            let n = text
                .parse::<usize>()
                .map_err(|_| CliError::validation(format!("--seeds {text:?} is not an integer")))?;
            Ok(SeedsSpec::Count(n))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// 110 observations per regime at means -1 / +1.
    #[default]
    Balanced,
    /// 20 observations at -1, then 200 at +1.
    Imbalanced,
}

/// Changepoint-stream settings; unset fields take the preset values of
/// the chosen scenario.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSection {
    pub scenario: ScenarioKind,
    pub n1: Option<usize>,
    pub mean1: Option<f64>,
    pub n2: Option<usize>,
    pub mean2: Option<f64>,
    pub obs_var: Option<f64>,
    pub prior_mean: Option<f64>,
    pub prior_var: Option<f64>,
}

impl FilterSection {
    pub fn scenario_for_seed(&self, seed: u64) -> CliResult<ChangepointScenario> {
        let mut sc = match self.scenario {
            ScenarioKind::Balanced => ChangepointScenario::balanced(seed),
            ScenarioKind::Imbalanced => ChangepointScenario::imbalanced(seed),
        };
        if let Some(n1) = self.n1 {
            sc.n1 = n1;
        }
        if let Some(m1) = self.mean1 {
            sc.mean1 = m1;
        }
        if let Some(n2) = self.n2 {
            sc.n2 = n2;
        }
        if let Some(m2) = self.mean2 {
            sc.mean2 = m2;
        }
        if let Some(v) = self.obs_var {
            if !(v > 0.0) {
                return Err(CliError::validation(format!("filter.obs_var {v} must be positive")));
            }
            sc.obs_var = v;
        }
        let mean = self.prior_mean.unwrap_or(sc.prior.mean);
        let var = self.prior_var.unwrap_or(sc.prior.var);
        sc.prior = GaussianBelief::new(mean, var)
            .map_err(|e| CliError::validation(format!("filter prior: {e}")))?;
        if sc.n1 + sc.n2 == 0 {
            return Err(CliError::validation("filter scenario has zero observations"));
        }
        Ok(sc)
    }
}

/// Variational baseline settings: head layout plus the trainer config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VclSection {
    pub head_mode: HeadMode,
    #[serde(flatten)]
    pub config: VclConfig,
}

impl Default for VclSection {
    fn default() -> Self {
        Self { head_mode: HeadMode::Single, config: VclConfig::default() }
    }
}

/// Sampler health check: chains against an isotropic Gaussian with known
/// moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsSection {
    pub dim: usize,
    pub precision: f64,
    pub hmc: HmcConfig,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            dim: 10,
            precision: 1.0,
            hmc: HmcConfig {
                step_size: 0.2,
                n_leapfrog: 8,
                n_burn_in: 200,
                n_samples: 1000,
                n_chains: 4,
                ..HmcConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    /// Five two-blob binary tasks in the plane.
    Toy,
    /// Two-class tasks carved from labeled images (or the synthetic
    /// stand-in when no image files are found).
    #[serde(alias = "split-mnist", alias = "split-fmnist")]
    Split,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    /// Unset: picked per experiment (images for protocl and vcl, toy
    /// blobs otherwise).
    pub kind: Option<DataKind>,
    /// Directory with the four IDX files; unset falls back to the
    /// environment override, ./data/mnist, then the synthetic stand-in.
    pub path: Option<PathBuf>,
    /// Unset: picked per experiment and head layout.
    pub protocol: Option<Protocol>,
    pub toy: ToyConfig,
    pub surrogate: SurrogateConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// Full layer widths, input first; unset uses the per-experiment
    /// default architecture.
    pub layers: Option<Vec<usize>>,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { layers: None, activation: Activation::Tanh }
    }
}

/// The config file: everything optional, resolved by `resolve`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub experiment: Option<ExperimentKind>,
    pub dataset: DatasetSection,
    pub seeds: SeedsSpec,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub model: ModelSection,
    pub filter: FilterSection,
    pub hmc_cl: SeqConfig,
    pub vcl: VclSection,
    pub protocl: ProtoConfig,
    pub diagnostics: DiagnosticsSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            experiment: None,
            dataset: DatasetSection::default(),
            seeds: SeedsSpec::default(),
            out: None,
            threads: None,
            model: ModelSection::default(),
            filter: FilterSection::default(),
            // Desk-scale sampling budget: the flagship settings (20
            // chains x 10k draws) need hours per task; override via the
            // hmc_cl section to reproduce them.
            hmc_cl: SeqConfig::desk(0),
            vcl: VclSection::default(),
            protocl: ProtoConfig::default(),
            diagnostics: DiagnosticsSection::default(),
        }
    }
}

impl Config {
    /// Read and parse a config file; `None` means all defaults. Returns
    /// the config plus unknown-key warnings.
    pub fn load(path: Option<&Path>) -> CliResult<(Config, Vec<String>)> {
        let Some(path) = path else {
            return Ok((Config::default(), Vec::new()));
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("cannot parse {}: {e}", path.display())))?;
        let schema = serde_json::to_value(Config::default())
            .expect("default config always serializes");
        // A partial section keeps the documented defaults for whatever it
        // does not mention, rather than falling back to the bare type
        // defaults (which for the sequential pipeline are the full-scale
        // sampler settings).
        let mut merged = schema.clone();
        deep_merge(&mut merged, &value);
        let config: Config = serde_json::from_value(merged)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        let mut warnings = Vec::new();
        unknown_key_walk(&value, &schema, "", &mut warnings);
        Ok((config, warnings))
    }
}

/// Flag-level overrides collected by the argument parser; applied on top
/// of the config file.
#[derive(Debug, Default)]
pub struct CliOverrides {
    pub experiment: Option<ExperimentKind>,
    pub seeds: Option<SeedsSpec>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub scenario: Option<ScenarioKind>,
    pub dataset: Option<String>,
    pub data_dir: Option<PathBuf>,
}

fn apply_overrides(cfg: &mut Config, cli: &CliOverrides) -> CliResult<()> {
    if let Some(e) = cli.experiment {
        cfg.experiment = Some(e);
    }
    if let Some(s) = &cli.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(s) = cli.scenario {
        cfg.filter.scenario = s;
    }
    if let Some(d) = &cli.dataset {
        match d.as_str() {
            "toy" => cfg.dataset.kind = Some(DataKind::Toy),
            "toy-gaussians" => {
                cfg.dataset.kind = Some(DataKind::Toy);
                cfg.dataset.toy.kind = ToyKind::Gaussians;
            }
            "toy-strip-bands" => {
                cfg.dataset.kind = Some(DataKind::Toy);
                cfg.dataset.toy.kind = ToyKind::StripBands;
            }
            "split" | "split-mnist" | "split-fmnist" => {
                cfg.dataset.kind = Some(DataKind::Split)
            }
            other => {
                return Err(CliError::validation(format!(
                    "--dataset {other:?} is not one of toy, toy-gaussians, toy-strip-bands, split, split-mnist, split-fmnist"
                )))
            }
        }
    }
    if let Some(p) = &cli.data_dir {
        cfg.dataset.path = Some(p.clone());
    }
    Ok(())
}

/// Dataset plan with every choice made.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedDataset {
    pub kind: DataKind,
    pub path: Option<PathBuf>,
    pub protocol: Protocol,
    pub toy: ToyConfig,
    pub surrogate: SurrogateConfig,
}

/// Filter plan: the named preset plus the concrete stream it expands to
/// (seed shown as 0; each run seed replaces it).
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedFilter {
    pub scenario: ScenarioKind,
    pub stream: ChangepointScenario,
}

/// A fully-resolved run plan. Serializing this is the `validate` report:
/// every default the run will use appears here.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub experiment: ExperimentKind,
    pub dataset: ResolvedDataset,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Worker threads for the seed fan-out; null uses one per core.
    pub threads: Option<usize>,
    /// Network run by the experiment; null when none is involved.
    pub model: Option<MlpSpec>,
    pub filter: ResolvedFilter,
    pub hmc_cl: SeqConfig,
    pub vcl: VclSection,
    pub protocl: ProtoConfig,
    pub diagnostics: DiagnosticsSection,
}

impl Resolved {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("resolved config always serializes")
    }
}

/// Total classes covered by the canonical two-class split.
fn split_n_classes() -> usize {
    1 + SPLIT_PAIRS.iter().map(|&(a, b)| a.max(b)).max().expect("non-empty")
}

pub fn resolve(mut cfg: Config, cli: &CliOverrides) -> CliResult<Resolved> {
    apply_overrides(&mut cfg, cli)?;

    let experiment = cfg.experiment.ok_or_else(|| {
        CliError::validation(
            "no experiment selected; pass one of filter, hmc-cl, protocl, vcl, diagnostics \
             or set \"experiment\" in the config",
        )
    })?;

    let seeds = cfg.seeds.resolve();
    if seeds.is_empty() {
        return Err(CliError::validation("seed list is empty"));
    }
    if cfg.threads == Some(0) {
        return Err(CliError::validation("threads must be at least 1"));
    }

    // Dataset choices.
    let kind = cfg.dataset.kind.unwrap_or(match experiment {
        ExperimentKind::Protocl | ExperimentKind::Vcl => DataKind::Split,
        _ => DataKind::Toy,
    });
    if kind == DataKind::Toy && cfg.dataset.path.is_some() {
        return Err(CliError::validation(
            "dataset.path is only meaningful for the split dataset",
        ));
    }
    if let Some(p) = &cfg.dataset.path {
        if !p.join("train-images-idx3-ubyte").exists() {
            return Err(CliError::validation(format!(
                "dataset path {} does not contain train-images-idx3-ubyte",
                p.display()
            )));
        }
    }
    let protocol = match (kind, cfg.dataset.protocol) {
        (DataKind::Toy, Some(Protocol::ClassIncremental)) => {
            return Err(CliError::validation(
                "the toy stream is a sequence of fresh binary problems; it has no \
                 class-incremental form",
            ))
        }
        (DataKind::Toy, _) => Protocol::DomainIncremental,
        (DataKind::Split, Some(p)) => p,
        (DataKind::Split, None) => match experiment {
            ExperimentKind::Protocl => Protocol::ClassIncremental,
            ExperimentKind::Vcl => match cfg.vcl.head_mode {
                HeadMode::Single => Protocol::ClassIncremental,
                HeadMode::Multi => Protocol::DomainIncremental,
            },
            _ => Protocol::DomainIncremental,
        },
    };
    if cfg.dataset.toy.n_train_per_class < 10 || cfg.dataset.toy.n_test_per_class < 10 {
        return Err(CliError::validation(
            "toy tasks need at least 10 train and 10 test points per class",
        ));
    }

    // Experiment-specific cross-checks.
    match experiment {
        ExperimentKind::Protocl => {
            if kind == DataKind::Toy {
                return Err(CliError::validation(
                    "the prototype experiment needs class-labeled image tasks; use the split dataset",
                ));
            }
            if protocol == Protocol::DomainIncremental {
                return Err(CliError::validation(
                    "the prototype experiment keeps one posterior over all classes; \
                     it needs class-incremental labels",
                ));
            }
        }
        ExperimentKind::Vcl => {
            if cfg.vcl.head_mode == HeadMode::Multi && protocol == Protocol::ClassIncremental {
                return Err(CliError::validation(
                    "multi-head training gives each task a private binary head; use the \
                     domain-incremental protocol (or drop the protocol field)",
                ));
            }
            if cfg.vcl.head_mode == HeadMode::Multi && cfg.vcl.config.coreset_size.is_some() {
                return Err(CliError::validation(
                    "coreset fine-tuning is only defined for the shared-head variant",
                ));
            }
        }
        _ => {}
    }

    // Model resolution.
    let model = match experiment {
        ExperimentKind::Filter | ExperimentKind::Diagnostics => None,
        ExperimentKind::HmcCl | ExperimentKind::Vcl => {
            let head = match protocol {
                Protocol::DomainIncremental => Head::Bernoulli,
                Protocol::ClassIncremental => Head::Categorical,
            };
            let layers = cfg.model.layers.clone().unwrap_or_else(|| match (kind, protocol) {
                (DataKind::Toy, _) => vec![2, 10, 10, 1],
                (DataKind::Split, Protocol::DomainIncremental) => vec![784, 100, 100, 1],
                (DataKind::Split, Protocol::ClassIncremental) => {
                    vec![784, 100, 100, split_n_classes()]
                }
            });
            if kind == DataKind::Toy && layers.first() != Some(&2) {
                return Err(CliError::validation(
                    "toy inputs are 2-dimensional; model.layers must start with 2",
                ));
            }
            if protocol == Protocol::ClassIncremental
                && layers.last() != Some(&split_n_classes())
            {
                return Err(CliError::validation(format!(
                    "class-incremental output layer must have width {}",
                    split_n_classes()
                )));
            }
            Some(
                MlpSpec::new(layers, cfg.model.activation, head)
                    .map_err(|e| CliError::validation(e.to_string()))?,
            )
        }
        ExperimentKind::Protocl => {
            let layers = cfg
                .model
                .layers
                .clone()
                .unwrap_or_else(|| vec![784, 200, 200, cfg.protocl.embed_dim]);
            if layers.last() != Some(&cfg.protocl.embed_dim) {
                return Err(CliError::validation(format!(
                    "embedder output layer must have width protocl.embed_dim = {}",
                    cfg.protocl.embed_dim
                )));
            }
            Some(
                MlpSpec::new(layers, cfg.model.activation, Head::Embedding)
                    .map_err(|e| CliError::validation(e.to_string()))?,
            )
        }
    };

    let filter = ResolvedFilter {
        scenario: cfg.filter.scenario,
        stream: cfg.filter.scenario_for_seed(0)?,
    };

    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{experiment}")));

    Ok(Resolved {
        experiment,
        dataset: ResolvedDataset {
            kind,
            path: cfg.dataset.path.clone(),
            protocol,
            toy: cfg.dataset.toy.clone(),
            surrogate: cfg.dataset.surrogate.clone(),
        },
        seeds,
        out,
        threads: cfg.threads,
        model,
        filter,
        hmc_cl: cfg.hmc_cl.clone(),
        vcl: cfg.vcl.clone(),
        protocl: cfg.protocl.clone(),
        diagnostics: cfg.diagnostics.clone(),
    })
}

/// Compare the user's JSON against the serialized default config and
/// warn about keys that exist nowhere in the schema, naming the nearest
/// valid key at that level.
/// Overlay `user` onto `base`: objects merge key-by-key, everything else
/// (scalars, arrays, nulls) replaces the base value outright.
fn deep_merge(base: &mut Value, user: &Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn unknown_key_walk(user: &Value, schema: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(u), Value::Object(s)) = (user, schema) else {
        return;
    };
    for (key, val) in u {
        match s.get(key) {
            Some(sv) => {
                let nested = format!("{prefix}{key}.");
                unknown_key_walk(val, sv, &nested, out);
            }
            None => {
                let nearest = s
                    .keys()
                    .min_by_key(|k| edit_distance(key, k))
                    .cloned()
                    .unwrap_or_default();
                out.push(format!(
                    "unknown key `{prefix}{key}` (did you mean `{prefix}{nearest}`?)"
                ));
            }
        }
    }
}

/// Plain Levenshtein distance over characters.
fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

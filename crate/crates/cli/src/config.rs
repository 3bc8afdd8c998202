//! Declarative run configuration, read from TOML.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use poi_icl::dataset::{FormatDescriptor, SplitPolicy};
use poi_icl::llm_gateway::{BackendConfig, BackendKind, MockPolicy};
use poi_icl::prompting::{DemoOrder, PromptTemplate};
use poi_icl::selection::{trial_seed, StrategyKind, StrategySpec};
use poi_icl::similarity::{EmbeddingProvider, HashEmbeddingProvider, RemoteEmbeddingProvider, HASH_EMBEDDING_DIM};
use poi_icl::synthetic::SyntheticConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Run directory; holds the dataset archive, records and reports.
    pub out: PathBuf,
    pub template: String,
    pub demo_order: DemoOrder,
    /// Trials for the random strategy; other strategies are deterministic.
    pub trials: u32,
    /// Largest current check-in count with its own accuracy bucket.
    pub breakdown_cap: usize,
    pub dataset: DatasetConfig,
    pub grid: GridConfig,
    pub backend: BackendConfig,
    pub embedding: EmbeddingConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out: PathBuf::from("runs/default"),
            template: "fewshot@1".into(),
            demo_order: DemoOrder::Ranked,
            trials: 5,
            breakdown_cap: 10,
            dataset: DatasetConfig::default(),
            grid: GridConfig::default(),
            backend: BackendConfig::default(),
            embedding: EmbeddingConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub name: String,
    /// Raw check-in file. Ignored when `synthetic` is set.
    pub path: Option<PathBuf>,
    /// Prepared archive; defaults to `<out>/dataset.jsonl`.
    pub archive: Option<PathBuf>,
    pub format: FormatDescriptor,
    pub gap_hours: f64,
    pub train_ratio: f64,
    /// Offset from UTC used when rendering clock times, in minutes.
    pub render_offset_minutes: i32,
    /// Use at most this many test tasks (lowest ids first).
    pub max_tasks: Option<usize>,
    pub synthetic: Option<SyntheticConfig>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: "dataset".into(),
            path: None,
            archive: None,
            format: FormatDescriptor::default(),
            gap_hours: 24.0,
            train_ratio: SplitPolicy::default().train_ratio,
            render_offset_minutes: 0,
            max_tasks: None,
            synthetic: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Strategy names, with `+user` for the user-filtered pool: `lcs`,
    /// `lcs+user`, `time+user`, ...
    pub methods: Vec<String>,
    pub k: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        let methods = [
            "random", "embsim", "dtw", "jaccard", "lcs", "random+user", "embsim+user", "dtw+user", "jaccard+user",
            "lcs+user", "time+user",
        ];
        Self {
            methods: methods.map(String::from).to_vec(),
            k: vec![5, 15, 30],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingProviderKind {
    Hash,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub provider: EmbeddingProviderKind,
    pub dim: usize,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    /// Cost charged per uncached encode by the hash provider when benchmarking.
    pub simulated_cost_ms: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: EmbeddingProviderKind::Hash,
            dim: HASH_EMBEDDING_DIM,
            endpoint: None,
            model: None,
            api_key_env: None,
            timeout_secs: 60,
            simulated_cost_ms: 0.0,
        }
    }
}

impl EmbeddingConfig {
    pub fn provider(&self) -> Result<Arc<dyn EmbeddingProvider>> {
        Ok(match self.provider {
            EmbeddingProviderKind::Hash => Arc::new(
                HashEmbeddingProvider::new(self.dim).with_simulated_cost(Duration::from_secs_f64(self.simulated_cost_ms.max(0.0) / 1e3)),
            ),
            EmbeddingProviderKind::Remote => {
                let (Some(endpoint), Some(model)) = (&self.endpoint, &self.model) else {
                    bail!("remote embedding provider needs `embedding.endpoint` and `embedding.model`");
                };
                let key = match &self.api_key_env {
                    Some(var) => Some(std::env::var(var).with_context(|| format!("environment variable {var} is not set"))?),
                    None => None,
                };
                Arc::new(RemoteEmbeddingProvider::new(
                    endpoint.clone(),
                    model.clone(),
                    self.dim,
                    key,
                    Duration::from_secs(self.timeout_secs),
                ))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub repetitions: usize,
    pub warmup: usize,
    pub max_tasks: usize,
    /// Benchmark on a generated pool instead of the prepared dataset.
    pub synthetic_pool: Option<SyntheticPool>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: 3,
            warmup: 1,
            max_tasks: 20,
            synthetic_pool: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticPool {
    pub size: usize,
    pub mean_len: usize,
    pub users: usize,
}

impl Default for SyntheticPool {
    fn default() -> Self {
        Self {
            size: 5_000,
            mean_len: 64,
            users: 500,
        }
    }
}

/// Parses `name` or `name+user`.
pub fn parse_method(method: &str, k: usize) -> Result<StrategySpec> {
    let lower = method.trim().to_ascii_lowercase();
    let (name, user_filter) = match lower.strip_suffix("+user") {
        Some(name) => (name, true),
        None => (lower.as_str(), false),
    };
    let kind = StrategyKind::from_str(name)?;
    StrategySpec::new(kind, user_filter, k).with_context(|| format!("grid method {method:?}"))
}

/// One cell of the experiment grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub spec: StrategySpec,
    pub trial: u32,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        PromptTemplate::by_id(&self.template)?;
        if self.grid.methods.is_empty() || self.grid.k.is_empty() {
            bail!("grid needs at least one method and one k");
        }
        if self.trials == 0 {
            bail!("trials must be at least 1");
        }
        if !(self.dataset.gap_hours > 0.0) {
            bail!("dataset.gap_hours must be positive");
        }
        SplitPolicy {
            train_ratio: self.dataset.train_ratio,
        }
        .validate()?;
        self.cells()?;
        self.backend.validate()?;
        Ok(())
    }

    /// Grid cells in execution order: strategy-major, then k, then trial.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let mut cells = Vec::new();
        for method in &self.grid.methods {
            for &k in &self.grid.k {
                let spec = parse_method(method, k)?;
                if spec.kind.is_random() {
                    for trial in 0..self.trials {
                        let kind = StrategyKind::Random {
                            seed: trial_seed(self.seed, trial),
                        };
                        cells.push(Cell {
                            spec: StrategySpec { kind, ..spec },
                            trial,
                        });
                    }
                } else {
                    cells.push(Cell { spec, trial: 0 });
                }
            }
        }
        Ok(cells)
    }

    pub fn dataset_archive(&self) -> PathBuf {
        self.dataset
            .archive
            .clone()
            .unwrap_or_else(|| self.out.join("dataset.jsonl"))
    }

    /// SHA-256 over the canonical JSON form, with the output directory left
    /// out so a moved run directory keeps its digest.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        format!("{:x}", Sha256::digest(bytes))
    }

    pub fn template_version(&self) -> String {
        PromptTemplate::by_id(&self.template)
            .map(|t| t.version_id())
            .unwrap_or_else(|_| self.template.clone())
    }

    /// Applies `--backend`: `mock`, `mock:<policy>` or `remote`.
    pub fn set_backend(&mut self, value: &str) -> Result<()> {
        match value.split_once(':') {
            Some(("mock", policy)) => {
                self.backend.kind = BackendKind::Mock;
                self.backend.mock_policy = MockPolicy::from_str(policy).map_err(anyhow::Error::msg)?;
            }
            None if value == "mock" => self.backend.kind = BackendKind::Mock,
            None if value == "remote" => self.backend.kind = BackendKind::Remote,
            _ => bail!("--backend expects mock, mock:<policy> or remote, got {value:?}"),
        }
        Ok(())
    }
}

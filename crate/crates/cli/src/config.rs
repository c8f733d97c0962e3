use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use kinject_core::checkpoint::fnv1a64;
use kinject_core::graph_embed::WalkParams;
use kinject_core::synth::DatasetManifest;
use kinject_core::trainer::TrainPlan;
use kinject_core::ScaleMask;
use serde::{Deserialize, Serialize};

/// Precomputed KIEMB files; a missing entry is computed from the dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingPaths {
    pub text: Option<PathBuf>,
    pub relation: Option<PathBuf>,
    pub wide: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of a generated dataset.
    pub dataset: Option<PathBuf>,
    /// Defaults to `<dataset>/knowledge`.
    pub knowledge: Option<PathBuf>,
    /// Defaults to `<dataset>/external_graph.tsv`.
    pub external_graph: Option<PathBuf>,
    pub embeddings: EmbeddingPaths,
    /// Checkpoint read by `train` (as a pretrained model), `eval` and `explain`.
    pub model: Option<PathBuf>,
    pub manifest: DatasetManifest,
    pub walk: WalkParams,
    pub plan: TrainPlan,
    pub backbone: String,
    pub text_dim: usize,
    pub scales: ScaleMask,
    pub seed: u64,
    pub out: PathBuf,
    pub deterministic: bool,
    pub threads: usize,
    /// Split used by `eval` and `explain`.
    pub split: String,
    /// Images written by `explain gradcam` and `explain hidden`.
    pub limit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            knowledge: None,
            external_graph: None,
            embeddings: EmbeddingPaths::default(),
            model: None,
            manifest: DatasetManifest::default(),
            walk: WalkParams::default(),
            plan: TrainPlan::default(),
            backbone: "tiny".into(),
            text_dim: 128,
            scales: ScaleMask::ALL,
            seed: 0,
            out: PathBuf::from("runs"),
            deterministic: false,
            threads: 1,
            split: "val".into(),
            limit: 16,
        }
    }
}

/// Problems with the configuration itself; reported with exit code 1.
#[derive(Debug)]
pub struct ConfigInvalid(pub String);

impl std::fmt::Display for ConfigInvalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigInvalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ConfigInvalid(msg.into()).into()
}

/// Flag values that override the config file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub scales: Option<ScaleMask>,
    pub deterministic: bool,
    pub threads: Option<usize>,
    pub dataset: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))
    }

    /// Applies flags, then makes the single seed authoritative everywhere.
    pub fn resolve(mut self, o: Overrides) -> Self {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = o.out {
            self.out = out;
        }
        if let Some(m) = o.scales {
            self.scales = m;
        }
        if let Some(t) = o.threads {
            self.threads = t;
        }
        if o.dataset.is_some() {
            self.dataset = o.dataset;
        }
        if o.model.is_some() {
            self.model = o.model;
        }
        self.deterministic |= o.deterministic;
        self.plan.seed = self.seed;
        self.plan.scales = self.scales;
        self.walk.seed = self.seed;
        self.manifest.seed = self.seed;
        self.walk.threads = if self.deterministic { 1 } else { self.threads };
        self
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let exists = |field: &str, p: &Option<PathBuf>| match p {
            Some(p) if !p.exists() => Err(invalid(format!("field `{field}`: {} does not exist", p.display()))),
            _ => Ok(()),
        };
        exists("dataset", &self.dataset)?;
        exists("knowledge", &self.knowledge)?;
        exists("external_graph", &self.external_graph)?;
        exists("embeddings.text", &self.embeddings.text)?;
        exists("embeddings.relation", &self.embeddings.relation)?;
        exists("embeddings.wide", &self.embeddings.wide)?;
        exists("model", &self.model)?;
        if self.threads == 0 {
            return Err(invalid("field `threads` must be at least 1"));
        }
        if self.text_dim < 2 {
            return Err(invalid("field `text_dim` must be at least 2"));
        }
        if self.split != "train" && self.split != "val" {
            return Err(invalid(format!("field `split`: expected train or val, got {:?}", self.split)));
        }
        kinject_core::net::BackboneConfig::preset(&self.backbone, 64).map_err(|e| invalid(format!("field `backbone`: {e}")))?;
        self.plan.validate().map_err(|e| invalid(format!("field `plan`: {e}")))?;
        self.walk.validate().map_err(|e| invalid(format!("field `walk`: {e}")))?;
        self.manifest.validate().map_err(|e| invalid(format!("field `manifest`: {e}")))?;
        Ok(())
    }

    pub fn require_dataset(&self) -> anyhow::Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| invalid("field `dataset` is required for this command"))
    }

    pub fn require_model(&self) -> anyhow::Result<&Path> {
        self.model
            .as_deref()
            .ok_or_else(|| invalid("field `model` is required for this command"))
    }

    pub fn knowledge_dir(&self) -> anyhow::Result<PathBuf> {
        match &self.knowledge {
            Some(k) => Ok(k.clone()),
            None => Ok(self.require_dataset()?.join("knowledge")),
        }
    }

    pub fn external_graph_path(&self) -> anyhow::Result<PathBuf> {
        match &self.external_graph {
            Some(p) => Ok(p.clone()),
            None => Ok(self.require_dataset()?.join("external_graph.tsv")),
        }
    }

    /// `<command>-<hash>`, stable for a given command and effective config
    /// regardless of the output directory.
    pub fn run_id(&self, command: &str) -> String {
        let mut keyed = self.clone();
        keyed.out = PathBuf::new();
        let json = serde_json::to_vec(&keyed).expect("config serializes");
        format!("{command}-{:016x}", fnv1a64(&json))
    }

    /// Creates `<out>/<run-id>/` and writes `run.json` into it.
    pub fn start_run(&self, command: &str) -> anyhow::Result<PathBuf> {
        let dir = self.out.join(self.run_id(command));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let json = serde_json::to_string_pretty(self)?;
        fs::write(dir.join("run.json"), json + "\n").with_context(|| format!("writing run.json in {}", dir.display()))?;
        Ok(dir)
    }
}

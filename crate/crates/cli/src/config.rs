use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dprobe_core::corpus::{FilterConfig, PruneConfig, SplitSizes};
use dprobe_core::mdsviz::TraceConfig;
use dprobe_core::metrics::{ScoreConfig, TiePolicy};
use dprobe_core::probe::{AdamConfig, PlateauConfig, TrainConfig};
use dprobe_core::templates::TemplateConfig;
use dprobe_core::Category;

use crate::invalid;

pub const OUTPUT_DIR_ENV: &str = "DPROBE_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Worker threads; the command-line flag wins.
    #[serde(default)]
    pub workers: Option<usize>,
    pub paths: Paths,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub report: ReportSection,
    #[serde(default)]
    pub agreement: AgreementSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub treebank: Option<PathBuf>,
    /// Hidden states for every prepared sentence, keyed by sentence id.
    #[serde(default)]
    pub bundle: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let s = SplitSizes::default();
        SplitConfig { train: s.train, dev: s.dev, test: s.test, seed: 0 }
    }
}

impl SplitConfig {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes { train: self.train, dev: self.dev, test: self.test }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub scheduler: PlateauConfig,
    pub rank: Option<usize>,
    /// Highest layer to probe; defaults to the bundle's last layer.
    pub max_layer: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: t.adam,
            scheduler: t.scheduler,
            rank: t.rank,
            max_layer: None,
        }
    }
}

impl TrainSection {
    pub fn for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: self.adam,
            scheduler: self.scheduler,
            seed,
            rank: self.rank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub score: ScoreConfig,
    /// Restrict the expected-layer table to these categories.
    pub categories: Option<Vec<Category>>,
    /// Write predicted edge lists per seed.
    pub edge_lists: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub svg: bool,
    /// Test sentence ids to trace.
    pub traces: Vec<String>,
    pub trace: TraceConfig,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { svg: true, traces: Vec::new(), trace: TraceConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgreementSection {
    pub templates: TemplateConfig,
    /// Directory with the six word lists; the built-in lists otherwise.
    pub lexicon_dir: Option<PathBuf>,
    /// Item manifest; defaults to `<output_dir>/agreement/items.json`.
    pub items: Option<PathBuf>,
    /// Hidden states of the grammatical variants, keyed by item id.
    pub bundle: Option<PathBuf>,
    pub tie_policy: TiePolicy,
    /// Traces written per partition.
    pub traces_per_partition: usize,
}

impl Default for AgreementSection {
    fn default() -> Self {
        AgreementSection {
            templates: TemplateConfig::default(),
            lexicon_dir: None,
            items: None,
            bundle: None,
            tie_policy: TiePolicy::default(),
            traces_per_partition: 2,
        }
    }
}

impl RunConfig {
    /// Parses a TOML file, resolves relative paths against its directory and
    /// applies the output-directory environment override.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.output_dir);
        cfg.paths.treebank.as_mut().map(resolve);
        cfg.paths.bundle.as_mut().map(resolve);
        cfg.agreement.lexicon_dir.as_mut().map(resolve);
        cfg.agreement.items.as_mut().map(resolve);
        cfg.agreement.bundle.as_mut().map(resolve);
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
            cfg.paths.output_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds must list at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(invalid("seeds must be distinct"));
        }
        if self.workers == Some(0) {
            return Err(invalid("workers must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.prune.threshold) {
            return Err(invalid(format!("prune.threshold {} must lie in [0, 1)", self.prune.threshold)));
        }
        if self.split.train == 0 {
            return Err(invalid("split.train must be at least 1"));
        }
        self.train.for_seed(0).validate().map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    pub fn output_dir(&self) -> &Path {
        &self.paths.output_dir
    }

    pub fn require_file(&self, what: &str, path: Option<&PathBuf>) -> anyhow::Result<PathBuf> {
        let p = path.ok_or_else(|| invalid(format!("config must set {what}")))?;
        if !p.is_file() {
            return Err(invalid(format!("{what} {} does not exist", p.display())));
        }
        Ok(p.clone())
    }

    /// Hash of everything that affects results; the output location and
    /// worker count are excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        v["paths"].as_object_mut().unwrap().remove("output_dir");
        v.as_object_mut().unwrap().remove("workers");
        digest(&v)
    }

    /// Hash of the settings a trained probe depends on (besides its seed and
    /// layer, which the checkpoint records). `inputs` identifies the data.
    pub fn train_hash(&self, inputs: &serde_json::Value) -> String {
        digest(&serde_json::json!({ "train": self.train, "inputs": inputs }))
    }
}

/// SHA-256 of canonical JSON (object keys sorted).
pub fn digest(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("json value serialises")))
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{BackendConfig, BackendKind, Capabilities, Capability};
use crate::baselines::ScParams;
use crate::datasets::Task;
use crate::evaluation::MatchMode;
use crate::refine::{FeedbackStrategy, GenerationLimits};

fn default_rounds() -> usize {
    3
}

fn default_true() -> bool {
    true
}

fn default_parallelism() -> usize {
    1
}

fn default_max_failure_rate() -> f64 {
    0.1
}

fn default_max_n() -> usize {
    9
}

/// One experiment: a dataset, a backend and the methods to compare.
///
/// Relative paths resolve against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Name used in reports; defaults to the task name.
    #[serde(default)]
    pub dataset_name: Option<String>,
    pub dataset: PathBuf,
    pub interventions: PathBuf,
    /// Refinement rounds `K`.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub strategies: Vec<FeedbackStrategy>,
    /// Report the initial explanation as its own method.
    #[serde(default = "default_true")]
    pub init_baseline: bool,
    /// Self-consistency baseline; off when absent.
    #[serde(default)]
    pub sc: Option<ScParams>,
    #[serde(default)]
    pub match_mode: MatchMode,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Above this share of failed work units the run exits with status 2.
    #[serde(default = "default_max_failure_rate")]
    pub max_failure_rate: f64,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub limits: GenerationLimits,
    /// Largest `n` for the top-n diagnostics.
    #[serde(default = "default_max_n")]
    pub diagnostics_max_n: usize,
    pub backend: BackendConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("reading {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        config.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(format!("config: {e}")))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.base_dir.join(path)
    }

    pub fn dataset_label(&self) -> String {
        self.dataset_name
            .clone()
            .unwrap_or_else(|| self.task.as_str().to_string())
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn cache_path(&self) -> Option<PathBuf> {
        self.cache_dir.as_deref().map(|d| self.resolve(d))
    }

    /// Checks that need no backend.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        for (what, p) in [("dataset", &self.dataset), ("interventions", &self.interventions)] {
            if !self.resolve(p).is_file() {
                return err(format!("{what} file {} does not exist", self.resolve(p).display()));
            }
        }
        if let Some(t) = &self.templates_dir {
            if !self.resolve(t).is_dir() {
                return err(format!("templates_dir {} does not exist", self.resolve(t).display()));
            }
        }
        if self.backend.kind == BackendKind::Mock {
            if let Some(f) = &self.backend.fixture {
                if !self.resolve(f).is_file() {
                    return err(format!("mock fixture {} does not exist", self.resolve(f).display()));
                }
            }
        }
        if self.parallelism == 0 {
            return err("parallelism must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return err("max_failure_rate must lie in [0, 1]".into());
        }
        if !self.init_baseline && self.sc.is_none() && self.strategies.is_empty() {
            return err("no method to run".into());
        }
        let mut kinds = BTreeSet::new();
        for s in &self.strategies {
            if !kinds.insert(s.kind.as_str()) {
                return err(format!("strategy {} listed twice", s.kind));
            }
        }
        if let Some(sc) = &self.sc {
            if sc.n == 0 || !(sc.temperature > 0.0 && sc.temperature.is_finite()) {
                return err("sc needs n >= 1 and a positive temperature".into());
            }
        }
        let l = &self.limits;
        if l.answer == 0 || l.explanation == 0 || l.feedback == 0 {
            return err("generation limits must be positive".into());
        }
        Ok(())
    }

    pub fn required_capabilities(&self) -> Capabilities {
        let mut caps = Capabilities::from([Capability::Generate]);
        for s in &self.strategies {
            caps.extend(s.required_capabilities());
        }
        if self.sc.is_some() {
            caps.insert(Capability::Embed);
        }
        caps
    }

    /// Check the methods against what the backend offers.
    pub fn check_capabilities(&self, offered: &Capabilities) -> Result<(), ConfigError> {
        for s in &self.strategies {
            s.validate(offered).map_err(ConfigError)?;
        }
        if self.sc.is_some() && !offered.contains(&Capability::Embed) {
            return Err(ConfigError("the SC-NLE baseline needs the `embed` capability".into()));
        }
        Ok(())
    }

    /// Hash of every setting that can change results.
    ///
    /// Output and cache locations and the worker count are left out.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("serializable config");
        if let Some(obj) = v.as_object_mut() {
            for k in ["output_dir", "cache_dir", "parallelism"] {
                obj.remove(k);
            }
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

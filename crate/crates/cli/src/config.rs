//! Experiment configuration: one TOML document drives every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wbn_core::experiment::{BenchmarkSpec, ModelSpec, COMPARE_METHODS};
use wbn_core::train::TrainConfig;
use wbn_core::{Error, NormMode};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "WBN_OUTPUT_ROOT";
pub const RESOLVED_CONFIG: &str = "resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: NormMode,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Domain left out of training; defaults to the last one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_out: Option<usize>,
    pub loss: LossSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub compare: CompareSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory written by `gen`; overrides `benchmark`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Keep source domain labels for training.
    #[serde(default = "yes")]
    pub domain_labels: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkSpec>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: None,
            domain_labels: true,
            benchmark: None,
        }
    }
}

/// Training settings; unset fields come from `profile`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub profile: Profile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_drop_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_drop_at_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratify: Option<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Rates calibrated for from-scratch trunks.
    #[default]
    Desk,
    /// Rates of the fine-tuning setup (0.001 trunk, 0.01 head).
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    #[serde(default = "default_methods")]
    pub methods: Vec<NormMode>,
    /// Defaults to the top-level seed alone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub merge_sources: bool,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            methods: default_methods(),
            seeds: None,
            merge_sources: false,
        }
    }
}

fn default_mode() -> NormMode {
    NormMode::WbnSoftSupervised
}

fn default_output() -> PathBuf {
    PathBuf::from("wbn-out")
}

fn default_methods() -> Vec<NormMode> {
    COMPARE_METHODS.to_vec()
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        // Data paths are relative to the config file, so resolved copies stay valid elsewhere.
        if let Some(data) = cfg.data.path.as_mut().filter(|p| p.is_relative()) {
            let base = path.parent().unwrap_or(Path::new("."));
            *data = std::path::absolute(base.join(&*data))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.train_config().validate()?;
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(Error::Config("model.hidden needs at least one positive width".into()));
        }
        self.model.branch.validate()?;
        if self.data.path.is_some() && self.data.benchmark.is_some() {
            return Err(Error::Config("set either data.path or data.benchmark, not both".into()));
        }
        if let Some(spec) = &self.data.benchmark {
            spec.validate()?;
        }
        if let Some(h) = self.held_out {
            let domains = self.benchmark().domains.len();
            if self.data.path.is_none() && h >= domains {
                return Err(Error::Config(format!(
                    "held_out {h} out of range for {domains} domains"
                )));
            }
        }
        if self.compare.methods.is_empty() {
            return Err(Error::Config("compare.methods is empty".into()));
        }
        if self.compare.seeds.as_ref().is_some_and(Vec::is_empty) {
            return Err(Error::Config("compare.seeds is empty".into()));
        }
        Ok(())
    }

    pub fn benchmark(&self) -> BenchmarkSpec {
        self.data.benchmark.clone().unwrap_or_else(BenchmarkSpec::default_desk)
    }

    pub fn held_out_of(&self, domains: usize) -> usize {
        self.held_out.unwrap_or(domains - 1)
    }

    pub fn train_config(&self) -> TrainConfig {
        let base = match self.train.profile {
            Profile::Desk => TrainConfig::desk(self.seed),
            Profile::Reference => TrainConfig::reference(self.seed),
        };
        let t = &self.train;
        TrainConfig {
            iterations: t.iterations.unwrap_or(base.iterations),
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            base_lr: t.base_lr.unwrap_or(base.base_lr),
            head_lr: t.head_lr.unwrap_or(base.head_lr),
            weight_decay: t.weight_decay.unwrap_or(base.weight_decay),
            lr_drop_factor: t.lr_drop_factor.unwrap_or(base.lr_drop_factor),
            lr_drop_at_fraction: t.lr_drop_at_fraction.unwrap_or(base.lr_drop_at_fraction),
            lambda: self.loss.lambda,
            momentum: t.momentum.unwrap_or(base.momentum),
            seed: self.seed,
            stratify: t.stratify.unwrap_or(base.stratify),
        }
    }

    pub fn compare_seeds(&self) -> Vec<u64> {
        self.compare.seeds.clone().unwrap_or_else(|| vec![self.seed])
    }

    /// Output directory after applying [`OUTPUT_ROOT_ENV`] to relative paths.
    pub fn output_dir(&self) -> PathBuf {
        with_output_root(&self.output_dir)
    }

    /// Every default spelled out, so the document reproduces the run on its own.
    pub fn resolved(&self) -> ExperimentConfig {
        let t = self.train_config();
        let mut r = self.clone();
        r.train = TrainSection {
            profile: self.train.profile,
            iterations: Some(t.iterations),
            batch_size: Some(t.batch_size),
            base_lr: Some(t.base_lr),
            head_lr: Some(t.head_lr),
            weight_decay: Some(t.weight_decay),
            lr_drop_factor: Some(t.lr_drop_factor),
            lr_drop_at_fraction: Some(t.lr_drop_at_fraction),
            momentum: Some(t.momentum),
            stratify: Some(t.stratify),
        };
        r.compare.seeds = Some(self.compare_seeds());
        if r.data.path.is_none() {
            r.data.benchmark = Some(self.benchmark());
            r.held_out = Some(self.held_out_of(self.benchmark().domains.len()));
        }
        r
    }

    pub fn to_toml(&self) -> Result<String, Error> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, Error> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.resolved().to_toml()?)?;
        Ok(path)
    }
}

pub fn with_output_root(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

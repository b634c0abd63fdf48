// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline configuration file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablate::{default_relaxation, AblationConfig, ControlScreening};
use crate::error::{Error, Result};
use crate::featviz::FzConfig;
use crate::netgraph::BlockAddress;
use crate::report::GridLayout;
use crate::scalecrit::CriteriaThresholds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: Option<PathBuf>,
    pub subset_fraction: f64,
    pub split_seed: u64,
    pub batch_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: None,
            subset_fraction: 0.1,
            split_seed: 0,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreenConfig {
    pub blocks: Vec<BlockAddress>,
    pub thresholds: CriteriaThresholds,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        Self {
            blocks: ["1.1", "2.0", "2.1", "3.1"].iter().map(|s| s.parse().expect("valid address")).collect(),
            thresholds: CriteriaThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub blocks: Vec<BlockAddress>,
    pub trials: usize,
    pub percentages: Vec<u32>,
    pub seed: u64,
    pub budget: usize,
    /// Per-block accuracy slack; blocks not listed use the built-in default.
    pub relaxation: BTreeMap<BlockAddress, f64>,
    pub preload: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            blocks: vec![BlockAddress::new(2, 1), BlockAddress::new(3, 1)],
            trials: 10,
            percentages: vec![10, 20, 30, 40, 50],
            seed: 0,
            budget: 200,
            relaxation: BTreeMap::new(),
            preload: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub layout: GridLayout,
    pub trial_scatter: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            layout: GridLayout::default(),
            trial_scatter: true,
        }
    }
}

/// Everything the pipeline stages read, in one TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub weights_id: String,
    pub output_root: PathBuf,
    /// Activation cache directory; `<output_root>/cache` when unset.
    pub cache_root: Option<PathBuf>,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub dataset: DatasetConfig,
    pub fz: FzConfig,
    pub screen: ScreenConfig,
    pub ablate: AblateConfig,
    pub report: ReportConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            weights_id: "resnet18-imagenet-v1".into(),
            output_root: PathBuf::from("out"),
            cache_root: None,
            workers: 0,
            dataset: DatasetConfig::default(),
            fz: FzConfig::default(),
            screen: ScreenConfig::default(),
            ablate: AblateConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

fn short_hash(value: &impl Serialize) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))[..12].to_string()
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights_id.is_empty() {
            return Err(Error::Config("weights_id is empty".into()));
        }
        let f = self.dataset.subset_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("subset_fraction {f} outside (0, 1]")));
        }
        if self.dataset.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.fz.validate()?;
        let t = &self.screen.thresholds;
        if t.ratio_lower.partial_cmp(&t.ratio_upper) != Some(std::cmp::Ordering::Less) {
            return Err(Error::Config("ratio_lower must be below ratio_upper".into()));
        }
        if self.ablate.trials == 0 {
            return Err(Error::Config("ablate.trials must be at least 1".into()));
        }
        if self.ablate.percentages.iter().any(|&p| p == 0 || p >= 100) {
            return Err(Error::Config("ablate.percentages must lie in 1..=99".into()));
        }
        Ok(())
    }

    /// Short content hash of the effective configuration.
    pub fn hash(&self) -> String {
        short_hash(self)
    }

    /// Hash of the settings a feature visualization depends on.
    pub fn fz_hash(&self) -> String {
        short_hash(&(&self.weights_id, &self.fz))
    }

    /// Hash of the settings a block's screening verdicts depend on.
    pub fn screen_hash(&self) -> String {
        short_hash(&(self.fz_hash(), &self.screen.thresholds))
    }

    /// Hash of the settings one block's ablation report depends on.
    pub fn ablate_hash(&self, addr: BlockAddress) -> String {
        let d = &self.dataset;
        let a = &self.ablate;
        short_hash(&(
            self.screen_hash(),
            (&d.root, d.subset_fraction, d.split_seed),
            (addr, a.trials, &a.percentages, a.seed, a.budget, self.relaxation_for(addr)),
        ))
    }

    pub fn relaxation_for(&self, addr: BlockAddress) -> f64 {
        self.ablate.relaxation.get(&addr).copied().unwrap_or_else(|| default_relaxation(addr))
    }

    pub fn ablation_config(&self, addr: BlockAddress) -> AblationConfig {
        AblationConfig {
            trials: self.ablate.trials,
            percentages: self.ablate.percentages.clone(),
            seed: self.ablate.seed,
            screening: ControlScreening {
                relaxation: self.relaxation_for(addr),
                budget: self.ablate.budget,
            },
            batch_size: self.dataset.batch_size,
            preload: self.ablate.preload,
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        crate::datahub::cache_root(self.cache_root.clone().unwrap_or_else(|| self.output_root.join("cache")))
    }
}

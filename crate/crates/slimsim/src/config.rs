//! Experiment configuration: one TOML document with a section per module,
//! shipped presets, and a content hash stamped into every output artifact.

use crate::accuracy::AccuracyTable;
use crate::device::{DeviceSpec, ModelProfile};
use crate::ppo::{ExplorationSchedule, PpoConfig, PpoError, RewardWeights, Trainer};
use crate::sim::{Horizon, SimError, WorkloadSpec};
use crate::types::SchedulerKnobs;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// The machines and the model they serve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub devices: Vec<DeviceSpec>,
    pub profile: ModelProfile,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            devices: vec![
                DeviceSpec { name: "fast-0".into(), ..DeviceSpec::fast_default() },
                DeviceSpec { name: "fast-1".into(), ..DeviceSpec::fast_default() },
                DeviceSpec::slow_default(),
            ],
            profile: ModelProfile::default(),
        }
    }
}

/// Policy sizing, the grouping menu, and the update schedule on top of the
/// optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoSection {
    pub clip: f64,
    pub value_weight: f64,
    pub entropy_weight: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    /// Optimization epochs per update.
    pub epochs: usize,
    /// Transitions collected per update.
    pub window: usize,
    /// Hidden layer width of the policy trunk.
    pub hidden: usize,
    /// Menu of per-decision group sizes the router may pick from.
    pub group_sizes: Vec<usize>,
    /// Collect-and-update cycles a training run performs.
    pub updates: usize,
}

impl Default for PpoSection {
    fn default() -> Self {
        let opt = PpoConfig::default();
        PpoSection {
            clip: opt.clip,
            value_weight: opt.value_weight,
            entropy_weight: opt.entropy_weight,
            lr: opt.lr,
            max_grad_norm: opt.max_grad_norm,
            epochs: opt.epochs,
            window: opt.window,
            hidden: 64,
            group_sizes: vec![1, 2, 4, 8],
            updates: 200,
        }
    }
}

impl PpoSection {
    pub fn optimizer(&self) -> PpoConfig {
        PpoConfig {
            clip: self.clip,
            value_weight: self.value_weight,
            entropy_weight: self.entropy_weight,
            lr: self.lr,
            max_grad_norm: self.max_grad_norm,
            epochs: self.epochs,
            window: self.window,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.optimizer().validate()?;
        if self.hidden == 0 {
            return Err("hidden must be >= 1".into());
        }
        if self.group_sizes.is_empty() {
            return Err("group_sizes must be non-empty".into());
        }
        if self.group_sizes.windows(2).any(|p| p[0] >= p[1]) || self.group_sizes[0] == 0 {
            return Err("group_sizes must be positive and strictly increasing".into());
        }
        Ok(())
    }
}

/// Everything one run needs, in the shape of the config file.
///
/// Every field has a documented default and may be omitted from the file;
/// an empty document is the default experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stream of a run derives from it and it overrides
    /// `workload.seed` in all subcommands.
    pub seed: u64,
    pub cluster: ClusterConfig,
    pub knobs: SchedulerKnobs,
    pub workload: WorkloadSpec,
    pub reward: RewardWeights,
    pub exploration: ExplorationSchedule,
    pub ppo: PpoSection,
    /// Override for the mean accuracy prior the reward centers on; omitted
    /// means the mean over the emulation table.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_mean: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            cluster: ClusterConfig::default(),
            knobs: SchedulerKnobs::default(),
            workload: WorkloadSpec::default(),
            reward: RewardWeights::default(),
            exploration: ExplorationSchedule::default(),
            ppo: PpoSection::default(),
            prior_mean: None,
        }
    }
}

pub const PRESET_NAMES: [&str; 3] = ["default", "overfit", "balanced"];

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// A config file path, or one of the shipped preset names.
    pub fn resolve(arg: &str) -> Result<Self, ConfigError> {
        let path = Path::new(arg);
        if path.exists() {
            return Self::load(path);
        }
        Self::preset(arg).ok_or_else(|| {
            ConfigError::Invalid(format!(
                "{arg}: no such file, and not a preset ({})",
                PRESET_NAMES.join("|")
            ))
        })
    }

    /// Shipped configurations. `default` is the plain experiment. The other
    /// two run short episodes under a load where only narrow widths keep
    /// the cluster stable, with model loads free and instances resident for
    /// the whole run: `overfit` weights latency and energy so heavily that
    /// the policy collapses onto the narrowest width; `balanced` asks for a
    /// narrow-skewed workload but pays mostly for accuracy, so the policy
    /// widens traffic instead.
    pub fn preset(name: &str) -> Option<Self> {
        let mut cfg = ExperimentConfig::default();
        match name {
            "default" => {}
            "overfit" => {
                cfg.reward = RewardWeights {
                    accuracy: 0.0,
                    latency: 8.0,
                    energy: 0.05,
                    imbalance: 0.0,
                    bonus: 0.0,
                    center_prior: true,
                };
                cfg.workload.rate_per_s = 1000.0;
                cfg.workload.horizon = Horizon::Seconds(2.0);
                cfg.ppo.window = 4096;
                cfg.ppo.value_weight = 1.0;
                cfg.ppo.entropy_weight = 0.003;
                cfg.ppo.updates = 400;
                cfg.knobs.load_time_s = 0.0;
                cfg.knobs.idle_unload_s = 3600.0;
            }
            "balanced" => {
                cfg.reward = RewardWeights {
                    accuracy: 6.0,
                    latency: 1.0,
                    energy: 0.005,
                    imbalance: 0.5,
                    bonus: 0.0,
                    center_prior: true,
                };
                cfg.workload.rate_per_s = 250.0;
                cfg.workload.horizon = Horizon::Seconds(8.0);
                cfg.workload.width_demand = vec![0.55, 0.25, 0.15, 0.05];
                cfg.ppo.window = 4096;
                cfg.ppo.value_weight = 1.0;
                cfg.ppo.updates = 300;
                cfg.knobs.load_time_s = 0.0;
                cfg.knobs.idle_unload_s = 3600.0;
            }
            _ => return None,
        }
        Some(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.cluster.devices.is_empty() {
            return fail("cluster.devices: must list at least one device".into());
        }
        for (i, d) in self.cluster.devices.iter().enumerate() {
            if let Err(e) = d.validate() {
                return fail(format!("cluster.devices[{i}]: {e}"));
            }
            if self.knobs.vram_budget_bytes > d.vram_total_bytes {
                return fail(format!(
                    "knobs.vram_budget_bytes ({}) exceeds cluster.devices[{i}].vram_total_bytes ({})",
                    self.knobs.vram_budget_bytes, d.vram_total_bytes
                ));
            }
        }
        if let Err(e) = self.cluster.profile.validate() {
            return fail(format!("cluster.profile: {e}"));
        }
        if let Err(e) = self.knobs.validate() {
            return fail(format!("knobs.{e}"));
        }
        if let Err(SimError::BadConfig(e)) = self.workload.validate(self.knobs.widths.len()) {
            return fail(e);
        }
        if let Err(e) = self.reward.validate() {
            return fail(format!("reward: {e}"));
        }
        if let Err(e) = self.exploration.validate() {
            return fail(format!("exploration: {e}"));
        }
        if let Err(e) = self.ppo.validate() {
            return fail(format!("ppo: {e}"));
        }
        if let Some(p) = self.prior_mean {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("prior_mean: must be in [0, 1], got {p}"));
            }
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical serialization;
    /// stamped with the seed into every CSV this config produces.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// The accuracy prior mean the reward centers on.
    pub fn resolved_prior_mean(&self) -> f64 {
        self.prior_mean.unwrap_or_else(|| AccuracyTable::published().mean_accuracy())
    }

    /// A trainer owning policy and optimizer state, seeded from the master
    /// seed.
    pub fn trainer(&self) -> Result<Trainer, PpoError> {
        let mut workload = self.workload.clone();
        workload.seed = self.seed;
        Trainer::new(
            self.cluster.devices.clone(),
            self.cluster.profile.clone(),
            self.knobs.clone(),
            workload,
            self.ppo.group_sizes.clone(),
            self.reward,
            self.exploration,
            self.ppo.optimizer(),
            self.ppo.hidden,
            self.resolved_prior_mean(),
            self.seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn empty_document_is_the_default_experiment() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.seed, 1);
        assert_eq!(cfg.cluster.devices.len(), 3);
        assert_eq!(cfg.ppo.hidden, 64);
        assert_eq!(cfg.ppo.updates, 200);
    }

    #[test]
    fn partial_document_overrides_only_named_fields() {
        let cfg = ExperimentConfig::from_toml_str(
            "seed = 9\n[knobs]\nbatch_max = 4\n[ppo]\nhidden = 16\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.knobs.batch_max, 4);
        assert_eq!(cfg.ppo.hidden, 16);
        assert_eq!(cfg.workload, WorkloadSpec::default());
    }

    #[test]
    fn presets_validate_and_differ_in_weights() {
        for name in PRESET_NAMES {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
        }
        let overfit = ExperimentConfig::preset("overfit").unwrap();
        let balanced = ExperimentConfig::preset("balanced").unwrap();
        assert!(overfit.reward.latency > balanced.reward.latency);
        assert!(overfit.reward.energy > balanced.reward.energy);
        assert!(balanced.reward.accuracy > overfit.reward.accuracy);
        assert_eq!(ExperimentConfig::preset("nope"), None);
    }

    #[test]
    fn invalid_fields_report_their_path() {
        let mut cfg = ExperimentConfig::default();
        cfg.knobs.util_block = 1.5;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("knobs.util_block"), "{msg}");

        let mut cfg = ExperimentConfig::default();
        cfg.cluster.devices[0].kappa = 0.0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("cluster.devices[0]"), "{msg}");

        let mut cfg = ExperimentConfig::default();
        cfg.workload.width_demand = vec![1.0];
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("workload.width_demand"), "{msg}");

        let mut cfg = ExperimentConfig::default();
        cfg.prior_mean = Some(1.5);
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("prior_mean"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected_at_parse() {
        let err = ExperimentConfig::from_toml_str("sede = 3\n").unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
    }

    #[test]
    fn vram_budget_is_checked_against_every_device() {
        let mut cfg = ExperimentConfig::default();
        cfg.knobs.vram_budget_bytes = 8 * (1 << 30);
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("vram_budget_bytes"), "{msg}");
        assert!(msg.contains("cluster.devices[2]"), "{msg}");
    }

    #[test]
    fn content_hash_tracks_config_identity() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::default();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash().len(), 16);

        let mut c = ExperimentConfig::default();
        c.seed = 2;
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn resolve_prefers_files_and_falls_back_to_presets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "seed = 77\n").unwrap();
        let cfg = ExperimentConfig::resolve(path.to_str().unwrap()).unwrap();
        assert_eq!(cfg.seed, 77);

        let cfg = ExperimentConfig::resolve("overfit").unwrap();
        assert!(cfg.reward.latency > 1.0);

        let err = ExperimentConfig::resolve("no-such-config").unwrap_err();
        assert!(err.to_string().contains("no-such-config"), "{err}");
    }

    #[test]
    fn group_size_menu_must_increase() {
        let mut cfg = ExperimentConfig::default();
        cfg.ppo.group_sizes = vec![2, 2, 4];
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("group_sizes"), "{msg}");
    }

    #[test]
    fn prior_mean_defaults_to_table_mean() {
        let cfg = ExperimentConfig::default();
        let table_mean = AccuracyTable::published().mean_accuracy();
        assert_eq!(cfg.resolved_prior_mean(), table_mean);
        let mut cfg = ExperimentConfig::default();
        cfg.prior_mean = Some(0.5);
        assert_eq!(cfg.resolved_prior_mean(), 0.5);
    }
}

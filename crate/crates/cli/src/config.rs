//! Run configuration: one TOML file with a section per pipeline stage.
//! Parsing is strict (unknown keys are rejected) and every run writes its
//! fully-resolved configuration next to its outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stcl::augment::AugmentConfig;
use stcl::contrast::ContrastConfig;
use stcl::data::{ClassGenerator, SynthSpec};
use stcl::encoder::EncoderConfig;
use stcl::error::{Error, Result};
use stcl::evaluate::ProbeConfig;
use stcl::train::TrainConfig;

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub contrast: ContrastSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset manifest path, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
    /// Synthetic corpus description for `gen-synth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub name: String,
    pub n_segments: usize,
    pub segment_len: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub segments_per_recording: usize,
    #[serde(default = "default_run_length_mean")]
    pub run_length_mean: f64,
    /// Process per class, e.g. `"ar1(0.5,1)"` or `"random_walk(1)"`.
    pub classes: Vec<String>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default = "default_true")]
    pub stratify: bool,
}

fn default_channels() -> usize {
    1
}
fn default_run_length_mean() -> f64 {
    5.0
}
fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}
fn default_true() -> bool {
    true
}

impl SynthSection {
    pub fn to_spec(&self, seed: u64) -> Result<SynthSpec> {
        let classes: Vec<ClassGenerator> = self
            .classes
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_>>()?;
        Ok(SynthSpec {
            name: self.name.clone(),
            n_segments: self.n_segments,
            segment_len: self.segment_len,
            channels: self.channels,
            segments_per_recording: self.segments_per_recording,
            run_length_mean: self.run_length_mean,
            classes,
            seed,
            split_proportions: (self.split[0], self.split[1], self.split[2]),
            stratify: self.stratify,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub jitter_sigma_weak: f64,
    pub jitter_sigma_strong: f64,
    pub scale_sigma: f64,
    pub max_segments: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = AugmentConfig::default();
        AugmentSection {
            jitter_sigma_weak: d.jitter_sigma_weak,
            jitter_sigma_strong: d.jitter_sigma_strong,
            scale_sigma: d.scale_sigma,
            max_segments: d.max_segments,
        }
    }
}

impl AugmentSection {
    pub fn to_config(&self) -> AugmentConfig {
        AugmentConfig {
            jitter_sigma_weak: self.jitter_sigma_weak,
            jitter_sigma_strong: self.jitter_sigma_strong,
            scale_sigma: self.scale_sigma,
            max_segments: self.max_segments,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub channels: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub paddings: Vec<usize>,
    pub pool_windows: Vec<usize>,
    pub output_dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::with_in_channels(1);
        EncoderSection {
            channels: d.channels,
            kernel_sizes: d.kernel_sizes,
            paddings: d.paddings,
            pool_windows: d.pool_windows,
            output_dim: d.output_dim,
        }
    }
}

impl EncoderSection {
    pub fn to_config(&self, in_channels: usize) -> EncoderConfig {
        EncoderConfig {
            in_channels,
            channels: self.channels.clone(),
            kernel_sizes: self.kernel_sizes.clone(),
            paddings: self.paddings.clone(),
            pool_windows: self.pool_windows.clone(),
            output_dim: self.output_dim,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastSection {
    pub tau: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    /// 0 = use the longest recording of the dataset.
    pub horizon: usize,
    pub include_positive_in_denominator: bool,
    pub literal_equation_mode: bool,
    /// Stationarity assessment settings used when building pairs.
    pub adf_threshold: f64,
    /// 0 = Schwert rule.
    pub adf_lag: usize,
}

impl Default for ContrastSection {
    fn default() -> Self {
        let d = ContrastConfig::<f64>::default();
        ContrastSection {
            tau: d.tau,
            lambda: d.lambda,
            alpha: d.alpha,
            beta: d.beta,
            horizon: 0,
            include_positive_in_denominator: d.include_positive_in_denominator,
            literal_equation_mode: d.literal_equation_mode,
            adf_threshold: 0.01,
            adf_lag: 0,
        }
    }
}

impl ContrastSection {
    pub fn to_config(&self, fallback_horizon: usize) -> ContrastConfig<f64> {
        ContrastConfig {
            tau: self.tau,
            lambda: self.lambda,
            alpha: self.alpha,
            beta: self.beta,
            horizon: if self.horizon == 0 {
                fallback_horizon.max(1)
            } else {
                self.horizon
            },
            include_positive_in_denominator: self.include_positive_in_denominator,
            literal_equation_mode: self.literal_equation_mode,
        }
    }

    pub fn adf_lag_option(&self) -> Option<usize> {
        if self.adf_lag == 0 {
            None
        } else {
            Some(self.adf_lag)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub checkpoint_every: usize,
    pub shuffle: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            batch_size: d.batch_size,
            epochs: d.epochs,
            lr: d.lr,
            weight_decay: d.weight_decay,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            checkpoint_every: d.checkpoint_every,
            shuffle: d.shuffle,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            seed,
            checkpoint_every: self.checkpoint_every,
            shuffle: self.shuffle,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub probe_lr: f64,
    pub probe_epochs: usize,
    pub probe_weight_decay: f64,
    pub probe_batch_size: usize,
    pub fractions: Vec<f64>,
    pub beta_grid: Vec<f64>,
    pub adf_threshold_grid: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = ProbeConfig::default();
        EvalSection {
            probe_lr: d.lr,
            probe_epochs: d.epochs,
            probe_weight_decay: d.weight_decay,
            probe_batch_size: d.batch_size,
            fractions: vec![1.0, 0.75, 0.5, 0.25, 0.1],
            beta_grid: vec![8.0, 16.0, 24.0, 32.0],
            adf_threshold_grid: vec![0.0001, 0.001, 0.01, 0.05],
        }
    }
}

impl EvalSection {
    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            lr: self.probe_lr,
            epochs: self.probe_epochs,
            weight_decay: self.probe_weight_decay,
            batch_size: self.probe_batch_size,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: default_seed(),
            data: DataSection::default(),
            augment: AugmentSection::default(),
            encoder: EncoderSection::default(),
            contrast: ContrastSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        if !path.exists() {
            return Err(Error::config(format!(
                "config file not found: {}",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        if let Some(s) = seed_override {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::format("config", e.to_string()))
    }

    /// Short content hash of the resolved configuration; names run
    /// directories.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.to_toml()?.as_bytes());
        let digest = h.finalize();
        Ok(digest
            .iter()
            .take(4)
            .map(|b| format!("{:02x}", b))
            .collect())
    }

    pub fn run_dir_name(&self) -> Result<String> {
        Ok(format!("{}-s{}", self.hash()?, self.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_config() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.train.epochs, 150);
        assert_eq!(cfg.train.lr, 3e-4);
        assert_eq!(cfg.contrast.tau, 0.2);
        assert_eq!(cfg.contrast.adf_threshold, 0.01);
        assert_eq!(cfg.encoder.channels, vec![32, 64, 128]);
        assert_eq!(cfg.eval.beta_grid, vec![8.0, 16.0, 24.0, 32.0]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nbogus_key = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("top_level_bogus = 1\n").is_err());
    }

    #[test]
    fn hash_is_stable_and_seed_sensitive() {
        let a: RunConfig = toml::from_str("").unwrap();
        let b: RunConfig = toml::from_str("").unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let mut c = a.clone();
        c.train.epochs = 3;
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{BackboneConfig, ConditioningMode};
use crate::sampling::Sampler;
use crate::schedule::{make_schedule, parse_keep_indices, subset_schedule, Schedule};
use crate::tensor::Activation;
use crate::training::{LossNorm, TrainConfig};

/// Environment variable that replaces the configured root seed.
pub const SEED_ENV: &str = "DYFFUSE_SEED";

/// Flat experiment configuration. Every key is optional in the file; unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,

    pub mesh_rows: usize,
    pub mesh_cols: usize,
    pub mass: f64,
    pub spring_constant: f64,
    pub rest_length: f64,
    pub dt: f64,
    pub stride: usize,
    /// Snapshots per trajectory, including the initial state.
    pub trajectory_len: usize,
    pub init_sigma: f64,
    pub train_trajectories: usize,
    pub val_trajectories: usize,
    pub test_trajectories: usize,

    pub horizon: usize,
    pub aux_steps_k: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub activation: Activation,
    pub interpolator_width: usize,
    pub forecaster_width: usize,
    pub barebone_width: usize,
    pub interpolator_dropout: f64,
    pub forecaster_dropout: f64,
    pub barebone_dropout: f64,
    pub conditioning: ConditioningMode,

    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub interpolator_epochs: usize,
    pub forecaster_epochs: usize,
    pub barebone_epochs: usize,
    /// 0 disables clipping.
    pub clip_norm: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub loss_norm: LossNorm,
    pub barebone_loss_norm: LossNorm,
    pub val_crps_members: usize,
    pub val_crps_windows: usize,
    pub val_crps_every: usize,

    pub members: usize,
    pub sampler: Sampler,
    pub refine: bool,
    pub interpolator_inference_dropout: bool,
    /// Comma-separated schedule positions kept at inference; empty keeps all.
    pub inference_keep_indices: String,
    pub eval_windows: usize,
    pub perturbation_sigma: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            mesh_rows: 4,
            mesh_cols: 4,
            mass: 1.0,
            spring_constant: 1.0,
            rest_length: 1.0,
            dt: 0.01,
            stride: 20,
            trajectory_len: 64,
            init_sigma: 0.3,
            train_trajectories: 8,
            val_trajectories: 2,
            test_trajectories: 2,
            horizon: 8,
            aux_steps_k: 0,
            depth: 3,
            time_dim: 16,
            activation: Activation::Gelu,
            interpolator_width: 64,
            forecaster_width: 64,
            barebone_width: 64,
            interpolator_dropout: 0.15,
            forecaster_dropout: 0.0,
            barebone_dropout: 0.15,
            conditioning: ConditioningMode::Clean,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            interpolator_epochs: 100,
            forecaster_epochs: 100,
            barebone_epochs: 100,
            clip_norm: 1.0,
            lambda1: 0.5,
            lambda2: 0.5,
            loss_norm: LossNorm::L1,
            barebone_loss_norm: LossNorm::L2,
            val_crps_members: 0,
            val_crps_windows: 8,
            val_crps_every: 10,
            members: 10,
            sampler: Sampler::Cold,
            refine: false,
            interpolator_inference_dropout: true,
            inference_keep_indices: String::new(),
            eval_windows: 8,
            perturbation_sigma: 0.05,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a file and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingInput(path.to_path_buf()))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides through the same schema as the file.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            let value = match toml::from_str::<toml::Table>(&format!("x = {v}")) {
                Ok(mut t) => t.remove("x").expect("parsed key"),
                Err(_) => toml::Value::String(v.clone()),
            };
            table.insert(k.clone(), value);
        }
        Self::from_toml(&toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?)
    }

    /// Checks only what simulating a trajectory needs.
    pub fn validate_system(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.mesh_rows == 0 || self.mesh_cols == 0 {
            return fail("mesh_rows and mesh_cols must be positive");
        }
        if self.stride == 0 || self.trajectory_len < 2 {
            return fail("stride must be positive and trajectory_len at least 2");
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        self.validate_system()?;
        if self.train_trajectories == 0 || self.val_trajectories == 0 || self.test_trajectories == 0 {
            return fail("every split needs at least one trajectory");
        }
        if self.horizon < 2 || self.trajectory_len <= self.horizon {
            return fail("horizon must be at least 2 and shorter than trajectory_len");
        }
        if self.members == 0 || self.eval_windows == 0 {
            return fail("members and eval_windows must be positive");
        }
        if self.clip_norm < 0.0 {
            return fail("clip_norm must be non-negative");
        }
        self.schedule()?;
        self.inference_schedule()?;
        Ok(())
    }

    pub fn backbone(&self, width: usize) -> BackboneConfig {
        BackboneConfig { width, depth: self.depth, time_dim: self.time_dim, activation: self.activation }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        make_schedule(self.horizon, self.aux_steps_k)
    }

    pub fn keep_indices(&self) -> Result<Option<Vec<usize>>> {
        if self.inference_keep_indices.trim().is_empty() {
            return Ok(None);
        }
        parse_keep_indices(&self.inference_keep_indices).map(Some)
    }

    /// Schedule used at inference: the training schedule, or its subset.
    pub fn inference_schedule(&self) -> Result<Schedule> {
        let s = self.schedule()?;
        match self.keep_indices()? {
            Some(keep) => subset_schedule(&s, &keep),
            None => Ok(s),
        }
    }

    fn train_config(&self, epochs: usize, norm: LossNorm, stream: &str) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            horizon: self.horizon,
            schedule: self.schedule()?,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            loss_norm: norm,
            seed: crate::rng::derive_seed(self.seed, stream),
            val_crps_members: self.val_crps_members,
            val_crps_windows: self.val_crps_windows,
            val_crps_every: self.val_crps_every.max(1),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn interpolator_training(&self) -> Result<TrainConfig> {
        self.train_config(self.interpolator_epochs, self.loss_norm, "train-interpolator")
    }

    pub fn forecaster_training(&self) -> Result<TrainConfig> {
        self.train_config(self.forecaster_epochs, self.loss_norm, "train-forecaster")
    }

    pub fn barebone_training(&self) -> Result<TrainConfig> {
        let mut c = self.train_config(self.barebone_epochs, self.barebone_loss_norm, "train-barebone")?;
        c.val_crps_members = 0;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = Config { inference_keep_indices: "0,2,4".into(), seed: 17, ..Config::default() };
        let text = cfg.to_toml().unwrap();
        let back = Config::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = Config::from_toml("horizon = 8\nhorizn = 4\n").unwrap_err();
        assert!(err.to_string().contains("horizn"), "{err}");
    }

    #[test]
    fn partial_files_use_defaults() {
        let cfg = Config::from_toml("horizon = 4\naux_steps_k = 3\nsampler = \"naive\"\n").unwrap();
        assert_eq!(cfg.horizon, 4);
        assert_eq!(cfg.schedule().unwrap().len(), 7);
        assert_eq!(cfg.sampler, Sampler::Naive);
        assert_eq!(cfg.members, Config::default().members);
    }

    #[test]
    fn overrides() {
        let cfg = Config::default()
            .with_overrides(&[("horizon".into(), "6".into()), ("conditioning".into(), "none".into())])
            .unwrap();
        assert_eq!(cfg.horizon, 6);
        assert_eq!(cfg.conditioning, ConditioningMode::None);
        assert!(Config::default().with_overrides(&[("nope".into(), "1".into())]).is_err());
    }

    #[test]
    fn keep_indices_select_inference_schedule() {
        let cfg = Config { aux_steps_k: 8, inference_keep_indices: "0,9,10,11,12,13,14,15".into(), ..Config::default() };
        let s = cfg.inference_schedule().unwrap();
        assert_eq!(s.steps(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let bad = Config { inference_keep_indices: "1,2".into(), ..Config::default() };
        assert!(bad.validate().is_err());
    }
}

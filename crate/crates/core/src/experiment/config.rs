use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{check_lambda, check_tau, validate_rank};
use crate::backbone::BackboneConfig;
use crate::data::{SplitSizes, SuiteConfig};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig};
use crate::optim::AdamConfig;
use crate::train::TrainConfig;

/// Everything one run depends on besides its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub seq_len: usize,
    pub rank: usize,
    /// Task count in multitask mode; single-task mode always has one.
    pub num_tasks: usize,
    pub pool_size: usize,
    pub lambda: f64,
    pub noise: f64,
    /// Also corrupt validation and test inputs at the same ratio.
    pub eval_noise: bool,
    pub tau: f64,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gate_lr: Option<f64>,
    pub grad_clip: Option<f64>,
    pub adapter_bias: bool,
    pub single_insertion_layer: bool,
    pub hard_retrain: bool,
    pub retrain_epochs: usize,
    /// Also train the gates-off and gates-on reference variants.
    pub baselines: bool,
    pub backbone_seed: u64,
    pub signal_set_size: usize,
    pub signal_density: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Concurrent sweep cells; 0 uses every available core.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sizes = SplitSizes::default();
        Self {
            mode: Mode::SingleTask,
            vocab_size: 200,
            model_dim: 16,
            num_layers: 2,
            seq_len: 16,
            rank: 4,
            num_tasks: 2,
            pool_size: 2,
            lambda: 0.1,
            noise: 0.0,
            eval_noise: true,
            tau: 0.5,
            seeds: vec![0, 1, 2],
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            gate_lr: None,
            grad_clip: None,
            adapter_bias: true,
            single_insertion_layer: false,
            hard_retrain: false,
            retrain_epochs: 5,
            baselines: true,
            backbone_seed: 0,
            signal_set_size: 8,
            signal_density: 0.25,
            train_size: sizes.train,
            val_size: sizes.val,
            test_size: sizes.test,
            workers: 0,
        }
    }
}

fn field(name: &str, err: Error) -> Error {
    let msg = match err {
        Error::Config(m) | Error::Spec(m) => m,
        other => other.to_string(),
    };
    Error::Config(format!("{name}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Applies `key=value` overrides; values use TOML syntax, and bare words
    /// are taken as strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let key = key.trim();
            let raw = raw.trim();
            let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            table.insert(key.to_string(), value);
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn task_count(&self) -> usize {
        match self.mode {
            Mode::SingleTask => 1,
            Mode::Multitask => self.num_tasks,
        }
    }

    pub fn suite(&self, seed: u64) -> SuiteConfig {
        SuiteConfig {
            num_tasks: self.task_count(),
            vocab_size: self.vocab_size,
            seq_len: self.seq_len,
            signal_set_size: self.signal_set_size,
            base_density: self.signal_density,
            sizes: SplitSizes {
                train: self.train_size,
                val: self.val_size,
                test: self.test_size,
            },
            seed,
        }
    }

    pub fn model(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                vocab_size: self.vocab_size,
                model_dim: self.model_dim,
                num_layers: self.num_layers,
                seq_len: self.seq_len,
                task_classes: (0..self.task_count()).map(SuiteConfig::classes_for).collect(),
                seed: self.backbone_seed,
            },
            mode: self.mode,
            rank: self.rank,
            pool_size: self.pool_size,
            adapter_bias: self.adapter_bias,
            single_insertion_layer: self.single_insertion_layer,
            seed: seed ^ 0x5EED_ADA9_7E55_0001,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            gate_lr: self.gate_lr,
            clip_norm: self.grad_clip,
            ..AdamConfig::default()
        }
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lambda: self.lambda,
            seed,
            adam: self.adam(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model(0).backbone.validate().map_err(|e| field("backbone", e))?;
        validate_rank(self.model_dim, self.rank).map_err(|e| field("rank", e))?;
        if self.mode == Mode::Multitask && self.num_tasks == 0 {
            return Err(Error::Config("num_tasks: must be >= 1".into()));
        }
        if self.pool_size == 0 {
            return Err(Error::Config("pool_size: must be >= 1".into()));
        }
        check_lambda(self.lambda).map_err(|e| field("lambda", e))?;
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise: must lie in [0, 1], got {}", self.noise)));
        }
        check_tau(self.tau).map_err(|e| field("tau", e))?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size: must be >= 1".into()));
        }
        self.adam().validate().map_err(|e| field("optimizer", e))?;
        for (name, n) in [("train_size", self.train_size), ("val_size", self.val_size), ("test_size", self.test_size)] {
            if n == 0 {
                return Err(Error::Config(format!("{name}: must be >= 1")));
            }
        }
        let specs = self.suite(0).specs().map_err(|e| field("data", e))?;
        for s in &specs {
            s.validate().map_err(|e| field("data", e))?;
        }
        Ok(())
    }

    /// Hash of the run description, ignoring the seeds, the swept
    /// coordinates (`lambda`, `noise`) and the worker count.
    pub fn hash(&self) -> String {
        let canonical = Self {
            seeds: Vec::new(),
            lambda: 0.0,
            noise: 0.0,
            workers: 0,
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn coordinate(&self) -> String {
        format!("lambda={},noise={}", self.lambda, self.noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let with_opts = ExperimentConfig {
            gate_lr: Some(0.01),
            mode: Mode::Multitask,
            ..cfg
        };
        assert_eq!(ExperimentConfig::from_toml(&with_opts.to_toml()).unwrap(), with_opts);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("lamda = 1.0"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&["lambda=2.5".into(), "mode=multitask".into(), "seeds=[4, 5]".into()])
            .unwrap();
        assert_eq!(cfg.lambda, 2.5);
        assert_eq!(cfg.mode, Mode::Multitask);
        assert_eq!(cfg.seeds, vec![4, 5]);
        let err = ExperimentConfig::default().with_overrides(&["rank=9".into()]).unwrap_err();
        assert!(err.to_string().contains("rank"), "{err}");
        assert!(ExperimentConfig::default().with_overrides(&["lambda=-1".into()]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["nonsense".into()]).is_err());
    }

    #[test]
    fn hash_ignores_seeds_and_coordinates() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            seeds: vec![9],
            lambda: 5.0,
            noise: 0.2,
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { rank: 2, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
        assert_eq!(b.coordinate(), "lambda=5,noise=0.2");
    }
}

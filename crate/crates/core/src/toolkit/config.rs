use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx_dataset, synth_dataset, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::search::SearchConfig;
use crate::space::StackedBcnnConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Idx,
}

/// Flat run configuration: network shape, search, retraining and data
/// fields side by side. Missing keys take defaults; unknown keys are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub u: usize,
    pub k: usize,
    pub c: usize,
    pub n_in: usize,
    pub num_classes: usize,
    pub input_size: usize,
    pub input_channels: usize,
    pub stem_stride: usize,
    pub b2o: bool,
    pub d2e: bool,

    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub arch_lr: f32,
    pub arch_weight_decay: f32,
    pub xi: Option<f32>,
    pub first_order: bool,
    pub patience: usize,
    pub kes: bool,
    pub k_divisor: usize,
    pub grad_clip: Option<f32>,
    pub seed: u64,

    pub eval_epochs: usize,
    pub eval_batch_size: usize,
    pub eval_lr: f32,
    pub eval_momentum: f32,
    pub eval_weight_decay: f32,

    pub data: DataKind,
    pub data_seed: u64,
    pub synth_per_class: usize,
    pub synth_test_per_class: usize,
    pub synth_noise: f32,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = StackedBcnnConfig::default();
        let q = SearchConfig::default();
        RunConfig {
            u: s.u,
            k: s.k,
            c: s.c,
            n_in: s.n_in,
            num_classes: s.num_classes,
            input_size: s.input_size,
            input_channels: s.input_channels,
            stem_stride: s.stem_stride,
            b2o: s.b2o,
            d2e: s.d2e,
            max_epochs: q.max_epochs,
            batch_size: q.batch_size,
            lr: q.lr,
            momentum: q.momentum,
            weight_decay: q.weight_decay,
            arch_lr: q.arch_lr,
            arch_weight_decay: q.arch_weight_decay,
            xi: q.xi,
            first_order: q.first_order,
            patience: q.patience,
            kes: q.kes,
            k_divisor: q.k_divisor,
            grad_clip: q.grad_clip,
            seed: q.seed,
            eval_epochs: 30,
            eval_batch_size: 64,
            eval_lr: 0.05,
            eval_momentum: 0.9,
            eval_weight_decay: 3e-4,
            data: DataKind::Synthetic,
            data_seed: 0,
            synth_per_class: 64,
            synth_test_per_class: 64,
            synth_noise: 0.5,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

/// Retraining hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub grad_clip: Option<f32>,
    pub seed: u64,
}

impl RunConfig {
    /// Reads a config file, or the config embedded in a run manifest.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(obj) = value.as_object_mut() {
            if obj.contains_key("manifest_version") {
                value = obj
                    .remove("config")
                    .ok_or_else(|| Error::Config("manifest has no \"config\" object".into()))?;
            }
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.space().validate()?;
        self.search().validate()?;
        if self.eval_epochs < 1 || self.eval_batch_size < 2 {
            return Err(Error::Config("eval_epochs must be ≥ 1 and eval_batch_size ≥ 2".into()));
        }
        if self.data == DataKind::Synthetic && (self.synth_per_class == 0 || self.synth_test_per_class == 0) {
            return Err(Error::Config("synthetic data needs synth_per_class and synth_test_per_class ≥ 1".into()));
        }
        Ok(())
    }

    pub fn space(&self) -> StackedBcnnConfig {
        StackedBcnnConfig {
            u: self.u,
            k: self.k,
            c: self.c,
            n_in: self.n_in,
            num_classes: self.num_classes,
            input_size: self.input_size,
            input_channels: self.input_channels,
            stem_stride: self.stem_stride,
            b2o: self.b2o,
            d2e: self.d2e,
        }
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            arch_lr: self.arch_lr,
            arch_weight_decay: self.arch_weight_decay,
            xi: self.xi,
            first_order: self.first_order,
            patience: self.patience,
            kes: self.kes,
            k_divisor: self.k_divisor,
            grad_clip: self.grad_clip,
            seed: self.seed,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            epochs: self.eval_epochs,
            batch_size: self.eval_batch_size,
            lr: self.eval_lr,
            momentum: self.eval_momentum,
            weight_decay: self.eval_weight_decay,
            grad_clip: self.grad_clip,
            seed: self.seed,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.num_classes,
            per_class: self.synth_per_class + self.synth_test_per_class,
            size: self.input_size,
            channels: self.input_channels,
            noise: self.synth_noise,
        }
    }

    /// `(train, test)` datasets. Synthetic data draws both from one pool so
    /// they share class prototypes.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match self.data {
            DataKind::Synthetic => {
                let pool = synth_dataset(&self.synth_spec(), self.data_seed)?;
                let n_train = self.num_classes * self.synth_per_class;
                let train: Vec<usize> = (0..n_train).collect();
                let test: Vec<usize> = (n_train..pool.len()).collect();
                Ok((pool.subset(&train), pool.subset(&test)))
            }
            DataKind::Idx => {
                let need = |p: &Option<PathBuf>, name: &str| {
                    p.clone().ok_or_else(|| Error::Config(format!("data = \"idx\" requires {name}")))
                };
                let train = load_idx_dataset(need(&self.train_images, "train_images")?, need(&self.train_labels, "train_labels")?)?;
                let test = load_idx_dataset(need(&self.test_images, "test_images")?, need(&self.test_labels, "test_labels")?)?;
                Ok((train, test))
            }
        }
    }
}

//! JSON run configuration: strict parsing (unknown fields are errors),
//! defaults for everything, and an effective-config echo so a run directory
//! records exactly what it was trained with.

use std::fs;
use std::path::Path;

use ducos_core::fusion::FusionMode;
use ducos_core::image::GradOp;
use ducos_core::network::ModelConfig;
use ducos_core::scene::Regime;
use ducos_core::trainer::{Optimizer, ScheduleMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum FusionSpec {
    Pcc,
    Addition,
    Concat,
    ForceAlpha(f64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum GradOpSpec {
    Central,
    Sobel,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerSpec {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleSpec {
    RecomputeFromInitial,
    LiteralCompounding,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RegimeSpec {
    Clean,
    Noisy,
}

impl From<RegimeSpec> for Regime {
    fn from(r: RegimeSpec) -> Self {
        match r {
            RegimeSpec::Clean => Regime::Clean,
            RegimeSpec::Noisy => Regime::Noisy,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub channels: usize,
    pub res_blocks: usize,
    pub iterations: usize,
    pub deconv_kernel: usize,
    pub prompt_channels: usize,
    pub patch_size: usize,
    pub h_shared: bool,
    pub fusion: FusionSpec,
    pub grad_op: GradOpSpec,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::from_core(&ModelConfig::default())
    }
}

impl ModelSpec {
    pub fn to_core(self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            res_blocks: self.res_blocks,
            iterations: self.iterations,
            deconv_kernel: self.deconv_kernel,
            prompt_channels: self.prompt_channels,
            patch_size: self.patch_size,
            h_shared: self.h_shared,
            fusion: match self.fusion {
                FusionSpec::Pcc => FusionMode::Pcc,
                FusionSpec::Addition => FusionMode::Addition,
                FusionSpec::Concat => FusionMode::Concat,
                FusionSpec::ForceAlpha(a) => FusionMode::ForceAlpha(a),
            },
            grad_op: match self.grad_op {
                GradOpSpec::Central => GradOp::Central,
                GradOpSpec::Sobel => GradOp::Sobel,
            },
        }
    }

    pub fn from_core(c: &ModelConfig) -> Self {
        ModelSpec {
            channels: c.channels,
            res_blocks: c.res_blocks,
            iterations: c.iterations,
            deconv_kernel: c.deconv_kernel,
            prompt_channels: c.prompt_channels,
            patch_size: c.patch_size,
            h_shared: c.h_shared,
            fusion: match c.fusion {
                FusionMode::Pcc => FusionSpec::Pcc,
                FusionMode::Addition => FusionSpec::Addition,
                FusionMode::Concat => FusionSpec::Concat,
                FusionMode::ForceAlpha(a) => FusionSpec::ForceAlpha(a),
            },
            grad_op: match c.grad_op {
                GradOp::Central => GradOpSpec::Central,
                GradOp::Sobel => GradOpSpec::Sobel,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub n_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub scale: f64,
    pub regime: RegimeSpec,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            n_scenes: 4,
            height: 56,
            width: 56,
            scale: 2.0,
            regime: RegimeSpec::Clean,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub lr: f64,
    pub lambda0: f64,
    pub mu0: f64,
    pub eta_lambda0: f64,
    pub eta_mu0: f64,
    pub schedule: ScheduleSpec,
    pub disable_cf_loss: bool,
    pub disable_gr_loss: bool,
    pub fixed_multipliers: bool,
    pub model: ModelSpec,
    pub data: DataSpec,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            seed: t.seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: OptimizerSpec::Sgd,
            lr: t.lr,
            lambda0: t.lambda0,
            mu0: t.mu0,
            eta_lambda0: t.eta_lambda0,
            eta_mu0: t.eta_mu0,
            schedule: ScheduleSpec::RecomputeFromInitial,
            disable_cf_loss: false,
            disable_gr_loss: false,
            fixed_multipliers: false,
            model: ModelSpec::default(),
            data: DataSpec::default(),
            out_dir: "run".to_string(),
        }
    }
}

impl RunConfig {
    pub fn to_train_config(&self) -> Result<TrainConfig> {
        self.validate()?;
        Ok(TrainConfig {
            model: self.model.to_core(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: match self.optimizer {
                OptimizerSpec::Sgd => Optimizer::Sgd,
                OptimizerSpec::Adam => Optimizer::Adam,
            },
            lr: self.lr,
            seed: self.seed,
            lambda0: self.lambda0,
            mu0: self.mu0,
            eta_lambda0: self.eta_lambda0,
            eta_mu0: self.eta_mu0,
            schedule: match self.schedule {
                ScheduleSpec::RecomputeFromInitial => ScheduleMode::RecomputeFromInitial,
                ScheduleSpec::LiteralCompounding => ScheduleMode::LiteralCompounding,
            },
            disable_cf_loss: self.disable_cf_loss,
            disable_gr_loss: self.disable_gr_loss,
            fixed_multipliers: self.fixed_multipliers,
            ..TrainConfig::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(AppError::Config(
                "epochs and batch_size must be >= 1".to_string(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AppError::Config("lr must be positive".to_string()));
        }
        if self.lambda0 < 0.0 || self.mu0 < 0.0 || self.eta_lambda0 < 0.0 || self.eta_mu0 < 0.0 {
            return Err(AppError::Config(
                "multipliers and their step sizes must be nonnegative".to_string(),
            ));
        }
        if self.data.n_scenes == 0 {
            return Err(AppError::Config("data.n_scenes must be >= 1".to_string()));
        }
        if self.data.height < 28 || self.data.width < 28 {
            return Err(AppError::Config(
                "data dimensions must be >= 28".to_string(),
            ));
        }
        if !(self.data.scale > 1.0) {
            return Err(AppError::Config("data.scale must be > 1".to_string()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Write the fully resolved configuration next to the run outputs.
    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| AppError::Config(e.to_string()))?;
        fs::write(dir.join("effective_config.json"), text)?;
        Ok(())
    }
}

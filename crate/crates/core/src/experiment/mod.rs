//! End-to-end pipeline: configuration, training loop, evaluation and the
//! error-growth grids, all reading and writing inside one run directory.

mod evaluate;
mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CheckpointError, TensorError};
use crate::calibration::CalibrationError;
use crate::error_profile::{
    build_prior_schedule, computational_error, delta_x0, physical_error, ErrorGrid, PriorSchedule,
    ProfileError,
};
use crate::loss::{LossConfig, LossError, LossKind};
use crate::model::{ModelConfig, ModelError, SigmaMode};
use crate::sim::{Dataset, SimConfig, SimError, SplitCounts};

pub use evaluate::{evaluate, load_checkpoint, Evaluation, MetricsReport};
pub use train::{
    read_runlog, train, EpochRecord, LossTotals, TrainOutcome, CHECKPOINT_FILE, RUNLOG_FILE,
};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialisation error: {0}")]
    Serialise(#[from] toml::ser::Error),
    #[error("run log: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMetric {
    ValidationLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Learning rate halves every this many epochs.
    pub lr_halving: usize,
    pub checkpoint_metric: CheckpointMetric,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 50,
            batch_size: DESK_BATCH,
            lr0: 5e-4,
            lr_halving: 200,
            checkpoint_metric: CheckpointMetric::ValidationLoss,
        }
    }
}

/// Grids for the computational and physical error profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub dt_grid: Vec<f64>,
    pub reference_dt: f64,
    pub sigma_grid: Vec<f64>,
    /// Sampled states per run, including the initial one.
    pub horizon: usize,
    pub n_runs: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            dt_grid: vec![0.001, 0.002, 0.005, 0.01],
            reference_dt: 0.0005,
            sigma_grid: vec![1e-5, 1e-4, 1e-3, 1e-2],
            horizon: 100,
            n_runs: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Shuffling and Gumbel noise.
    pub train: u64,
    /// Error-profile runs.
    pub profile: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            train: 1,
            profile: 2,
        }
    }
}

/// Everything needed to reproduce a run. Dataset generation is seeded by
/// `simulator.rng_seed`, weight initialisation by `model.init_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub simulator: SimConfig,
    pub data: SplitCounts,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub training: TrainingConfig,
    pub error_profile: ProfileConfig,
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::desk()
    }
}

impl ExperimentConfig {
    /// Laptop-size setup: 1000/200/200 simulations, 50 epochs.
    pub fn desk() -> Self {
        ExperimentConfig {
            simulator: SimConfig::default(),
            data: SplitCounts {
                train: 1000,
                validation: 200,
                test: 200,
            },
            model: ModelConfig {
                sigma_mode: SigmaMode::Fixed,
                ..ModelConfig::default()
            },
            loss: LossConfig::default(),
            training: TrainingConfig::default(),
            error_profile: ProfileConfig::default(),
            seeds: Seeds::default(),
        }
    }

    /// Full-size setup: 50k/10k/10k simulations, 500 epochs, batch 128.
    /// Not something to run on a laptop.
    pub fn full() -> Self {
        let mut c = ExperimentConfig::desk();
        c.data = SplitCounts {
            train: 50_000,
            validation: 10_000,
            test: 10_000,
        };
        c.training.epochs = 500;
        c.training.batch_size = 128;
        c
    }

    pub fn profile(name: &str) -> Result<Self, ExperimentError> {
        match name {
            "desk" => Ok(ExperimentConfig::desk()),
            "full" => Ok(ExperimentConfig::full()),
            other => Err(ExperimentError::Config(format!(
                "unknown profile `{other}` (desk, full)"
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        ExperimentConfig::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String, ExperimentError> {
        Ok(toml::to_string(self)?)
    }

    /// Sets the loss kind and the sigma mode it requires.
    pub fn with_loss(mut self, kind: LossKind) -> Self {
        self.loss.kind = kind;
        self.model.sigma_mode = match kind {
            LossKind::Fixed => SigmaMode::Fixed,
            LossKind::IsoGauss | LossKind::Lorentzian => SigmaMode::Isotropic,
            LossKind::SemiIsoGauss => SigmaMode::SemiIsotropic,
            LossKind::AnisoGauss | LossKind::AnisoGaussKl | LossKind::Niw => SigmaMode::Anisotropic,
        };
        self
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.simulator.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.loss.kind.check_mode(self.model.sigma_mode)?;
        let bad = |m: String| Err(ExperimentError::Config(m));
        let need = self.model.encoder_window + self.model.decoder_window;
        if self.simulator.n_sampled_steps < need {
            return bad(format!(
                "trajectories have {} steps, encoder + decoder windows need {need}",
                self.simulator.n_sampled_steps
            ));
        }
        if self.data.train == 0 || self.data.validation == 0 || self.data.test == 0 {
            return bad("every data split needs at least one simulation".into());
        }
        if self.training.batch_size == 0 || !(self.training.lr0 > 0.0) {
            return bad("batch_size and lr0 must be positive".into());
        }
        if self.loss.kind == LossKind::Fixed {
            let s = self.loss.fixed_sigma2.sqrt();
            if (self.model.sigma0 - s).abs() > 1e-12 * s {
                return bad(format!(
                    "fixed loss: model.sigma0 ({}) must equal sqrt(loss.fixed_sigma2) ({s})",
                    self.model.sigma0
                ));
            }
        }
        let p = &self.error_profile;
        if p.dt_grid.is_empty() || p.sigma_grid.is_empty() || p.horizon == 0 || p.n_runs == 0 {
            return bad("error_profile grids, horizon and n_runs must be non-empty".into());
        }
        Ok(())
    }
}

/// Batch size of the desk profile. With 1000 training simulations a batch
/// of 128 gives under 400 optimiser steps in 50 epochs, far too few for the
/// encoder to pick up any edges. Epoch time barely depends on batch size.
pub const DESK_BATCH: usize = 2;

pub const COMPUTATIONAL_GRID_FILE: &str = "error_computational.csv";
pub const PHYSICAL_GRID_FILE: &str = "error_physical.csv";
pub const PRIOR_FILE: &str = "prior.csv";

/// Both error grids on the configured axes, written as CSV into `out_dir`.
pub fn write_error_grids(
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(ErrorGrid, ErrorGrid), ExperimentError> {
    let p = &cfg.error_profile;
    let comp = computational_error(
        &cfg.simulator,
        &p.dt_grid,
        p.reference_dt,
        p.horizon,
        p.n_runs,
        cfg.seeds.profile,
    )?;
    let phys = physical_error(
        &cfg.simulator,
        &p.sigma_grid,
        p.horizon,
        p.n_runs,
        cfg.seeds.profile,
    )?;
    fs::create_dir_all(out_dir)?;
    comp.write_csv(&out_dir.join(COMPUTATIONAL_GRID_FILE))?;
    phys.write_csv(&out_dir.join(PHYSICAL_GRID_FILE))?;
    Ok((comp, phys))
}

/// Prior widths for the decoder window from the two grids and the training data.
pub fn prior_from_grids(
    cfg: &ExperimentConfig,
    comp: &ErrorGrid,
    phys: &ErrorGrid,
    train: &Dataset,
) -> Result<PriorSchedule, ExperimentError> {
    let dx0 = delta_x0(train)?;
    Ok(build_prior_schedule(
        comp,
        phys,
        dx0,
        cfg.simulator.dt_fine,
        cfg.model.decoder_window,
    )?)
}

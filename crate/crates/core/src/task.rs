//! Experiment description files (TOML). One file fully describes a run:
//! world, features, target, controller, model, warm start and seeds.
//!
//! ```toml
//! schema_version = 1
//! name = "rod_bending"
//!
//! [world]
//! template = "rod"
//! nodes = 20
//!
//! [features]
//! components = [{ kind = "centroid" }, { kind = "distance", i = 0, j = 1 }]
//!
//! [target]
//! displacement = [0.12, 0.0, 0.08, -0.12, 0.04, 0.02]
//!
//! [model]
//! kind = "fo_gpr"
//!
//! [warm_start]
//! steps = 20
//!
//! [run]
//! seeds = [0, 1, 2]
//! ```

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::controller::{ControlConfig, ServoTask};
use crate::error::{Error, Result};
use crate::features::{FeatureSpec, FeatureVector};
use crate::gp_core::Hyperparams;
use crate::model::ModelKind;
use crate::sim::{build_world, World, WorldParams};

pub const SCHEMA_VERSION: u32 = 1;

/// Learning rate of the linear baseline when the file does not set one.
pub const DEFAULT_LEARNING_RATE: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub world: WorldParams,
    pub features: FeatureSpec,
    pub target: TargetSpec,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub warm_start: WarmStartConfig,
    #[serde(default)]
    pub run: RunSettings,
}

/// The goal `x_d`, either given directly or as the feature vector reached by
/// moving the manipulated points by `displacement` from the initial pose.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub displacement: Option<Vec<f64>>,
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    #[default]
    FoGpr,
    StandardGpr,
    OfflineGpr,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelName,
    pub sigma_rbf: f64,
    pub sigma_n: f64,
    pub max_size: usize,
    /// Relative singular-value cutoff of the linear-mean fit (0 = exact).
    pub mean_rcond: f64,
    /// Observations after which `offline_gpr` stops learning.
    pub freeze_at: Option<usize>,
    /// Step size of the `linear` baseline.
    pub learning_rate: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let hp = Hyperparams::default();
        ModelConfig {
            kind: ModelName::FoGpr,
            sigma_rbf: hp.sigma_rbf,
            sigma_n: hp.sigma_n,
            max_size: hp.max_size,
            mean_rcond: hp.mean_rcond,
            freeze_at: None,
            learning_rate: None,
        }
    }
}

impl ModelConfig {
    pub fn model_kind(&self) -> Result<ModelKind> {
        let stray = |field: &str, kind: &str| {
            Err(Error::config(format!("model.{field}"), format!("not used by model kind `{kind}`")))
        };
        match self.kind {
            ModelName::FoGpr | ModelName::StandardGpr => {
                let kind = if self.kind == ModelName::FoGpr { "fo_gpr" } else { "standard_gpr" };
                if self.freeze_at.is_some() {
                    return stray("freeze_at", kind);
                }
                if self.learning_rate.is_some() {
                    return stray("learning_rate", kind);
                }
                Ok(if self.kind == ModelName::FoGpr { ModelKind::FoGpr } else { ModelKind::StandardGpr })
            }
            ModelName::OfflineGpr => {
                if self.learning_rate.is_some() {
                    return stray("learning_rate", "offline_gpr");
                }
                let freeze_at =
                    self.freeze_at.ok_or_else(|| Error::config("model.freeze_at", "required for offline_gpr"))?;
                Ok(ModelKind::OfflineGpr { freeze_at })
            }
            ModelName::Linear => {
                if self.freeze_at.is_some() {
                    return stray("freeze_at", "linear");
                }
                let learning_rate = self.learning_rate.unwrap_or(DEFAULT_LEARNING_RATE);
                if !(learning_rate > 0.0 && learning_rate.is_finite()) {
                    return Err(Error::config("model.learning_rate", format!("must be positive, got {learning_rate}")));
                }
                Ok(ModelKind::Linear { learning_rate })
            }
        }
    }

    pub fn hyperparams(&self, eta: f64) -> Result<Hyperparams> {
        let hp = Hyperparams {
            sigma_rbf: self.sigma_rbf,
            sigma_n: self.sigma_n,
            max_size: self.max_size,
            eta,
            mean_rcond: self.mean_rcond,
        };
        hp.validate().map_err(|e| match e {
            Error::Config { field, message } if field == "eta" => Error::config("control.eta", message),
            Error::Config { field, message } => Error::config(format!("model.{field}"), message),
            other => other,
        })?;
        Ok(hp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmStartConfig {
    /// Number of random excitation commands before servoing.
    pub steps: usize,
    /// Largest excitation command norm (m).
    pub amplitude: f64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        WarmStartConfig { steps: 0, amplitude: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub seeds: Vec<u64>,
    /// Output directory, relative to the working directory.
    pub out_dir: Option<String>,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings { seeds: vec![0], out_dir: None }
    }
}

/// A task file resolved into a ready world, goal and model choice.
#[derive(Debug, Clone)]
pub struct Trial {
    pub name: String,
    pub world: World,
    pub task: ServoTask,
    pub control: ControlConfig,
    pub warm_start: WarmStartConfig,
    pub hyperparams: Hyperparams,
    pub model: ModelKind,
}

impl TaskFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: TaskFile = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).map_or_else(|| "task file".to_string(), str::to_string);
            Error::config(field, e.to_string().trim_end().to_string())
        })?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { field, message } => Error::config(field, format!("{}: {message}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("task file", e.to_string()))
    }

    /// Checks everything that can be checked without building the world.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        self.features.validate()?;
        self.control.validate()?;
        self.model.model_kind()?;
        self.model.hyperparams(self.control.eta)?;
        if self.warm_start.steps > 0 && !(self.warm_start.amplitude > 0.0 && self.warm_start.amplitude.is_finite()) {
            return Err(Error::config("warm_start.amplitude", "must be positive"));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds", "at least one seed is required"));
        }
        match (&self.target.displacement, &self.target.values) {
            (Some(_), Some(_)) => Err(Error::config("target", "give either `displacement` or `values`, not both")),
            (None, None) => Err(Error::config("target", "one of `displacement` or `values` is required")),
            (Some(d), None) if d.iter().any(|v| !v.is_finite()) => {
                Err(Error::config("target.displacement", "values must be finite"))
            }
            (None, Some(v)) if v.iter().any(|v| !v.is_finite()) => {
                Err(Error::config("target.values", "values must be finite"))
            }
            _ => Ok(()),
        }
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.world.name().to_string())
    }

    /// Builds the world and resolves the goal.
    pub fn build(&self) -> Result<Trial> {
        self.validate()?;
        let world = build_world(&self.world)?;
        let x0 = world.features(&self.features).map_err(|e| Error::config("features", e.to_string()))?;
        let target = match (&self.target.displacement, &self.target.values) {
            (Some(d), _) => {
                if d.len() != world.control_dim() {
                    return Err(Error::config(
                        "target.displacement",
                        format!("expected {} values (3 per manipulated node), got {}", world.control_dim(), d.len()),
                    ));
                }
                reach(&world, &DVector::from_column_slice(d), self.control.velocity_cap, &self.features)?
            }
            (None, Some(v)) => {
                if v.len() != x0.len() {
                    return Err(Error::config(
                        "target.values",
                        format!("expected {} values for this feature spec, got {}", x0.len(), v.len()),
                    ));
                }
                FeatureVector { values: DVector::from_column_slice(v) }
            }
            (None, None) => unreachable!("validated"),
        };
        Ok(Trial {
            name: self.display_name(),
            world,
            task: ServoTask { spec: self.features.clone(), target },
            control: self.control,
            warm_start: self.warm_start,
            hyperparams: self.model.hyperparams(self.control.eta)?,
            model: self.model.model_kind()?,
        })
    }
}

/// Features after moving the manipulated points of a copy of `world` by
/// `displacement`, in equal steps no longer than `max_step`.
pub fn reach(world: &World, displacement: &DVector<f64>, max_step: f64, spec: &FeatureSpec) -> Result<FeatureVector> {
    let mut moved = world.clone();
    let steps = (displacement.norm() / max_step).ceil().max(1.0) as usize;
    let step = displacement / steps as f64;
    for _ in 0..steps {
        moved.apply_control(&step)?;
    }
    moved.features(spec)
}

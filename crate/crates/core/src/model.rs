//! Deformation models the controller can drive: the bounded FO-GPR engine,
//! the unbounded standard GPR, a GPR frozen after a number of observations,
//! and an online linear model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::fo_gpr::GpState;
use crate::gp_core::{Hyperparams, Posterior};

/// A learned map from feature velocity to manipulated-point velocity.
pub trait DeformationModel {
    fn predict(&self, query: &DVector<f64>) -> Result<Posterior>;

    /// Train on a realised (feature change, applied command) pair.
    fn observe(&mut self, dx: DVector<f64>, dp: DVector<f64>) -> Result<()>;

    /// Number of observations currently shaping the prediction.
    fn stored(&self) -> usize;
}

impl DeformationModel for GpState {
    fn predict(&self, query: &DVector<f64>) -> Result<Posterior> {
        GpState::predict(self, query)
    }

    fn observe(&mut self, dx: DVector<f64>, dp: DVector<f64>) -> Result<()> {
        self.add_observation(dx, dp).map(|_| ())
    }

    fn stored(&self) -> usize {
        self.len()
    }
}

/// A bounded GPR that stops learning once it has absorbed `freeze_at`
/// observations (counting any the wrapped state already holds); later pairs
/// are ignored.
#[derive(Debug, Clone)]
pub struct OfflineGpr {
    state: GpState,
    freeze_at: u64,
}

impl OfflineGpr {
    pub fn new(state: GpState, freeze_at: usize) -> Self {
        OfflineGpr { state, freeze_at: freeze_at as u64 }
    }

    pub fn is_frozen(&self) -> bool {
        self.state.step_count() >= self.freeze_at
    }

    pub fn state(&self) -> &GpState {
        &self.state
    }
}

impl DeformationModel for OfflineGpr {
    fn predict(&self, query: &DVector<f64>) -> Result<Posterior> {
        self.state.predict(query)
    }

    fn observe(&mut self, dx: DVector<f64>, dp: DVector<f64>) -> Result<()> {
        if self.is_frozen() {
            return Ok(());
        }
        self.state.add_observation(dx, dp).map(|_| ())
    }

    fn stored(&self) -> usize {
        self.state.len()
    }
}

/// `dp = W dx`, trained by the online least-squares gradient step
/// `W += rate (dp - W dx) dx^T`. It reports zero variance, so it never
/// explores on its own.
#[derive(Debug, Clone)]
pub struct LinearModel {
    w: DMatrix<f64>,
    rate: f64,
    seen: usize,
}

impl LinearModel {
    pub fn new(in_dim: usize, out_dim: usize, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::config("model.learning_rate", format!("must be positive, got {rate}")));
        }
        Ok(LinearModel { w: DMatrix::zeros(out_dim, in_dim), rate, seen: 0 })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }
}

impl DeformationModel for LinearModel {
    fn predict(&self, query: &DVector<f64>) -> Result<Posterior> {
        check_dim(self.w.ncols(), query.len())?;
        Ok(Posterior { mu: &self.w * query, var: 0.0 })
    }

    fn observe(&mut self, dx: DVector<f64>, dp: DVector<f64>) -> Result<()> {
        check_dim(self.w.ncols(), dx.len())?;
        check_dim(self.w.nrows(), dp.len())?;
        let residual = dp - &self.w * &dx;
        self.w.ger(self.rate, &residual, &dx, 1.0);
        if self.w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalHealth("linear model weights diverged".into()));
        }
        self.seen += 1;
        Ok(())
    }

    fn stored(&self) -> usize {
        self.seen
    }
}

/// Model choice as written in a task file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    FoGpr,
    StandardGpr,
    OfflineGpr { freeze_at: usize },
    Linear { learning_rate: f64 },
}

impl ModelKind {
    pub fn name(&self) -> String {
        match self {
            ModelKind::FoGpr => "fo_gpr".into(),
            ModelKind::StandardGpr => "standard_gpr".into(),
            ModelKind::OfflineGpr { freeze_at } => format!("offline_gpr@{freeze_at}"),
            ModelKind::Linear { learning_rate } => format!("linear@{learning_rate}"),
        }
    }
}

#[derive(Debug, Clone)]
pub enum AnyModel {
    Gp(GpState),
    Offline(OfflineGpr),
    Linear(LinearModel),
}

impl AnyModel {
    pub fn build(kind: &ModelKind, hp: Hyperparams, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(match *kind {
            ModelKind::FoGpr => AnyModel::Gp(GpState::new(hp, in_dim, out_dim)?),
            ModelKind::StandardGpr => AnyModel::Gp(GpState::unbounded(hp, in_dim, out_dim)?),
            ModelKind::OfflineGpr { freeze_at } => {
                AnyModel::Offline(OfflineGpr::new(GpState::new(hp, in_dim, out_dim)?, freeze_at))
            }
            ModelKind::Linear { learning_rate } => AnyModel::Linear(LinearModel::new(in_dim, out_dim, learning_rate)?),
        })
    }

    pub fn gp(&self) -> Option<&GpState> {
        match self {
            AnyModel::Gp(s) => Some(s),
            AnyModel::Offline(o) => Some(o.state()),
            AnyModel::Linear(_) => None,
        }
    }
}

impl DeformationModel for AnyModel {
    fn predict(&self, query: &DVector<f64>) -> Result<Posterior> {
        match self {
            AnyModel::Gp(m) => DeformationModel::predict(m, query),
            AnyModel::Offline(m) => m.predict(query),
            AnyModel::Linear(m) => m.predict(query),
        }
    }

    fn observe(&mut self, dx: DVector<f64>, dp: DVector<f64>) -> Result<()> {
        match self {
            AnyModel::Gp(m) => m.observe(dx, dp),
            AnyModel::Offline(m) => m.observe(dx, dp),
            AnyModel::Linear(m) => m.observe(dx, dp),
        }
    }

    fn stored(&self) -> usize {
        match self {
            AnyModel::Gp(m) => m.stored(),
            AnyModel::Offline(m) => m.stored(),
            AnyModel::Linear(m) => m.stored(),
        }
    }
}

//! Browser bindings for three small demos: a budgeted GP learning a drifting
//! curve, a rod settling under end displacements, and the shape histogram of
//! a sheet as it is bent. The plain-Rust functions are what the bindings call
//! and what the tests exercise; the `wasm_bindgen` layer only converts errors.

use fogpr::features::{FeatureComponent, FeatureSpec};
use fogpr::fo_gpr::{GpState, UpdateKind};
use fogpr::gp_core::Hyperparams;
use fogpr::sim::{build_world, GridParams, RodParams, World, WorldParams};
use fogpr::Result;
use nalgebra::{dvector, DVector};
use wasm_bindgen::prelude::*;

/// Largest per-axis move handed to the equilibrium solver in one go.
const MAX_STEP: f64 = 0.005;

fn to_js(e: fogpr::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A one-input, one-output GP with a fixed budget of stored points.
#[wasm_bindgen]
pub struct GpDemo {
    state: GpState,
}

#[wasm_bindgen]
impl GpDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(capacity: usize, sigma_rbf: f64, sigma_n: f64) -> Result<GpDemo, JsError> {
        GpDemo::create(capacity, sigma_rbf, sigma_n).map_err(to_js)
    }

    /// Adds an observation; returns `"grow"`, `"swap"` (an old point was
    /// forgotten) or `"absorbed"` (merged into a stored neighbour).
    pub fn add(&mut self, x: f64, y: f64) -> Result<String, JsError> {
        self.observe(x, y).map_err(to_js)
    }

    /// Posterior over `n` evenly spaced inputs in `[lo, hi]`, as
    /// `[x0, mean0, std0, x1, mean1, std1, ...]`.
    pub fn curve(&self, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, JsError> {
        self.posterior_curve(lo, hi, n).map_err(to_js)
    }

    /// Stored points as `[x0, y0, x1, y1, ...]`.
    pub fn stored(&self) -> Vec<f64> {
        let data = self.state.data();
        data.inputs().iter().zip(data.outputs()).flat_map(|(x, y)| [x[0], y[0]]).collect()
    }

    pub fn capacity(&self) -> usize {
        self.state.capacity()
    }
}

impl GpDemo {
    pub fn create(capacity: usize, sigma_rbf: f64, sigma_n: f64) -> Result<GpDemo> {
        let hp = Hyperparams { max_size: capacity, sigma_rbf, sigma_n, ..Hyperparams::default() };
        Ok(GpDemo { state: GpState::new(hp, 1, 1)? })
    }

    pub fn observe(&mut self, x: f64, y: f64) -> Result<String> {
        Ok(match self.state.add_observation(dvector![x], dvector![y])? {
            UpdateKind::Grow => "grow",
            UpdateKind::Swap(_) => "swap",
            UpdateKind::Absorbed(_) => "absorbed",
        }
        .to_string())
    }

    pub fn posterior_curve(&self, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            let x = if n > 1 { lo + (hi - lo) * i as f64 / (n - 1) as f64 } else { lo };
            let p = self.state.predict(&dvector![x])?;
            out.extend([x, p.mu[0], p.var.max(0.0).sqrt()]);
        }
        Ok(out)
    }
}

/// Moves the manipulated nodes by `total` in steps the solver can follow.
fn move_gradually(world: &mut World, total: &DVector<f64>) -> Result<()> {
    let steps = (total.amax() / MAX_STEP).ceil().max(1.0) as usize;
    let dp = total / steps as f64;
    for _ in 0..steps {
        world.apply_control(&dp)?;
    }
    Ok(())
}

fn flatten(world: &World) -> Vec<f64> {
    world.positions().iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

/// Equilibrium of a hanging rod after moving its left end by `(lx, lz)` and
/// its right end by `(rx, rz)` in the vertical plane. Returns node positions
/// as `[x0, y0, z0, x1, ...]`.
pub fn rod_shape(nodes: usize, stiffening: f64, lx: f64, lz: f64, rx: f64, rz: f64) -> Result<Vec<f64>> {
    let params = RodParams { nodes, stiffening, ..RodParams::default() };
    let mut world = build_world(&WorldParams::Rod(params))?;
    move_gradually(&mut world, &dvector![lx, 0.0, lz, rx, 0.0, rz])?;
    Ok(flatten(&world))
}

#[wasm_bindgen]
pub fn rod_equilibrium(nodes: usize, stiffening: f64, lx: f64, lz: f64, rx: f64, rz: f64) -> Result<Vec<f64>, JsError> {
    rod_shape(nodes, stiffening, lx, lz, rx, rz).map_err(to_js)
}

/// A sheet whose grasped edges are pushed `squeeze` towards each other and
/// lifted by `lift`. Returns the node positions and the shape histogram
/// (three blocks of `bins`) of the feedback points.
pub fn sheet_shape(squeeze: f64, lift: f64, bins: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut world = build_world(&WorldParams::Sheet(GridParams::default()))?;
    move_gradually(&mut world, &dvector![squeeze, 0.0, lift, -squeeze, 0.0, lift])?;
    let spec = FeatureSpec::new(vec![FeatureComponent::FpfhHistogram { bins }]);
    let hist = world.features(&spec)?.values;
    Ok((flatten(&world), hist.as_slice().to_vec()))
}

/// Same as [`sheet_shape`], packed as `[bins*3 histogram values, positions...]`.
#[wasm_bindgen]
pub fn sheet_fpfh(squeeze: f64, lift: f64, bins: usize) -> Result<Vec<f64>, JsError> {
    let (positions, mut hist) = sheet_shape(squeeze, lift, bins).map_err(to_js)?;
    hist.extend(positions);
    Ok(hist)
}

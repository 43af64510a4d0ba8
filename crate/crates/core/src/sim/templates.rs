//! World templates: a rod (rolled-towel analog), a stiff sheet (plastic
//! sheet analog) and a soft cloth grid (towel analog). Every template starts
//! from its rest layout and is relaxed to equilibrium before it is returned.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{solve_equilibrium, Bend, SolverConfig, Spring, World};
use crate::error::{Error, Result};
use crate::features::Point3;

const STANDARD_GRAVITY: [f64; 3] = [0.0, 0.0, -9.81];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "template", rename_all = "snake_case")]
pub enum WorldParams {
    Rod(RodParams),
    Sheet(GridParams),
    ClothGrid(GridParams),
}

impl WorldParams {
    /// Default parameters for a template name.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "rod" => Ok(WorldParams::Rod(RodParams::default())),
            "sheet" => Ok(WorldParams::Sheet(GridParams::default())),
            "cloth_grid" => Ok(WorldParams::ClothGrid(GridParams::default())),
            other => Err(Error::config(
                "world.template",
                format!("unknown template `{other}` (expected rod, sheet or cloth_grid)"),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WorldParams::Rod(_) => "rod",
            WorldParams::Sheet(_) => "sheet",
            WorldParams::ClothGrid(_) => "cloth_grid",
        }
    }
}

/// Chain of `nodes` nodes along +x with stretch and bending springs; by
/// default both ends are manipulated and the nodes at one and three
/// quarters of the length are the feedback points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RodParams {
    pub nodes: usize,
    pub length: f64,
    pub stiffness: f64,
    pub bending: f64,
    pub stiffening: f64,
    /// Mass per node (kg).
    pub mass: f64,
    pub gravity: [f64; 3],
    pub manipulated: Option<Vec<usize>>,
    pub feedback: Option<Vec<usize>>,
    pub solver: SolverConfig,
}

impl Default for RodParams {
    fn default() -> Self {
        RodParams {
            nodes: 20,
            length: 1.0,
            stiffness: 500.0,
            bending: 0.02,
            stiffening: 0.0,
            mass: 0.01,
            gravity: STANDARD_GRAVITY,
            manipulated: None,
            feedback: None,
            solver: SolverConfig::default(),
        }
    }
}

/// Row-major `nx x ny` grid in the xy-plane with structural, shear
/// (both diagonals) and bending springs along rows and columns. Unset
/// physical parameters take the template's defaults: the sheet is stiff in
/// bending, the cloth is soft and light. By default the middle nodes of the
/// left and right edges are manipulated and every other node is feedback.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridParams {
    pub nx: Option<usize>,
    pub ny: Option<usize>,
    pub width: Option<f64>,
    pub height: Option<f64>,
    pub stiffness: Option<f64>,
    pub shear: Option<f64>,
    pub bending: Option<f64>,
    pub stiffening: Option<f64>,
    /// Mass per node (kg).
    pub mass: Option<f64>,
    pub gravity: Option<[f64; 3]>,
    pub manipulated: Option<Vec<usize>>,
    pub feedback: Option<Vec<usize>>,
    pub solver: SolverConfig,
}

struct GridDefaults {
    n: usize,
    size: f64,
    stiffness: f64,
    shear: f64,
    bending: f64,
    mass: f64,
}

const SHEET: GridDefaults = GridDefaults { n: 5, size: 0.3, stiffness: 200.0, shear: 50.0, bending: 0.5, mass: 0.005 };

const CLOTH: GridDefaults =
    GridDefaults { n: 7, size: 0.4, stiffness: 100.0, shear: 10.0, bending: 0.002, mass: 0.002 };

pub fn build_world(params: &WorldParams) -> Result<World> {
    let mut world = match params {
        WorldParams::Rod(p) => rod(p)?,
        WorldParams::Sheet(p) => grid(p, &SHEET)?,
        WorldParams::ClothGrid(p) => grid(p, &CLOTH)?,
    };
    solve_equilibrium(&mut world)?;
    Ok(world)
}

fn positive(field: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(field, format!("must be positive, got {v}")))
    }
}

fn finish(world: Result<World>, stiffening: f64, solver: SolverConfig) -> Result<World> {
    if !(stiffening >= 0.0) || !stiffening.is_finite() {
        return Err(Error::config("world.stiffening", format!("must be >= 0, got {stiffening}")));
    }
    positive("world.solver.g_tol", solver.g_tol)?;
    let world = world.map_err(|e| match e {
        Error::InvalidInput(m) | Error::Degenerate(m) => Error::config("world", m),
        other => other,
    })?;
    Ok(world.with_stiffening(stiffening)?.with_solver(solver))
}

fn rod(p: &RodParams) -> Result<World> {
    let n = p.nodes;
    if n < 3 {
        return Err(Error::config("world.nodes", format!("a rod needs at least 3 nodes, got {n}")));
    }
    let length = positive("world.length", p.length)?;
    let k = positive("world.stiffness", p.stiffness)?;
    let kb = positive("world.bending", p.bending)?;
    let mass = positive("world.mass", p.mass)?;
    let seg = length / (n - 1) as f64;

    let positions = (0..n).map(|i| Point3::new(i as f64 * seg, 0.0, 0.0)).collect();
    let springs = (0..n - 1).map(|i| Spring { i, j: i + 1, rest: seg, k }).collect();
    let bends = (0..n - 2).map(|i| Bend { i, j: i + 1, k: i + 2, stiffness: kb, rest: seg }).collect();
    let last = (n - 1) as f64;
    let manipulated = p.manipulated.clone().unwrap_or_else(|| vec![0, n - 1]);
    let feedback =
        p.feedback.clone().unwrap_or_else(|| vec![(last / 4.0).round() as usize, (3.0 * last / 4.0).round() as usize]);
    finish(
        World::new(positions, vec![mass; n], springs, bends, Vector3::from(p.gravity), manipulated, feedback),
        p.stiffening,
        p.solver,
    )
}

fn grid(p: &GridParams, d: &GridDefaults) -> Result<World> {
    let nx = p.nx.unwrap_or(d.n);
    let ny = p.ny.unwrap_or(d.n);
    if nx < 3 || ny < 2 {
        return Err(Error::config("world.nx", format!("grid must be at least 3x2, got {nx}x{ny}")));
    }
    let dx = positive("world.width", p.width.unwrap_or(d.size))? / (nx - 1) as f64;
    let dy = positive("world.height", p.height.unwrap_or(d.size))? / (ny - 1) as f64;
    let k = positive("world.stiffness", p.stiffness.unwrap_or(d.stiffness))?;
    let ks = positive("world.shear", p.shear.unwrap_or(d.shear))?;
    let kb = positive("world.bending", p.bending.unwrap_or(d.bending))?;
    let mass = positive("world.mass", p.mass.unwrap_or(d.mass))?;
    let idx = |r: usize, c: usize| r * nx + c;

    let mut positions = Vec::with_capacity(nx * ny);
    for r in 0..ny {
        for c in 0..nx {
            positions.push(Point3::new(c as f64 * dx, r as f64 * dy, 0.0));
        }
    }
    let diag = dx.hypot(dy);
    let mut springs = Vec::new();
    let mut bends = Vec::new();
    for r in 0..ny {
        for c in 0..nx {
            if c + 1 < nx {
                springs.push(Spring { i: idx(r, c), j: idx(r, c + 1), rest: dx, k });
            }
            if r + 1 < ny {
                springs.push(Spring { i: idx(r, c), j: idx(r + 1, c), rest: dy, k });
            }
            if c + 1 < nx && r + 1 < ny {
                springs.push(Spring { i: idx(r, c), j: idx(r + 1, c + 1), rest: diag, k: ks });
                springs.push(Spring { i: idx(r, c + 1), j: idx(r + 1, c), rest: diag, k: ks });
            }
            if c + 2 < nx {
                bends.push(Bend { i: idx(r, c), j: idx(r, c + 1), k: idx(r, c + 2), stiffness: kb, rest: dx });
            }
            if r + 2 < ny {
                bends.push(Bend { i: idx(r, c), j: idx(r + 1, c), k: idx(r + 2, c), stiffness: kb, rest: dy });
            }
        }
    }
    let mid = (ny - 1) / 2;
    let manipulated = p.manipulated.clone().unwrap_or_else(|| vec![idx(mid, 0), idx(mid, nx - 1)]);
    let feedback = p.feedback.clone().unwrap_or_else(|| (0..nx * ny).filter(|i| !manipulated.contains(i)).collect());
    let world = World::new(
        positions,
        vec![mass; nx * ny],
        springs,
        bends,
        Vector3::from(p.gravity.unwrap_or(STANDARD_GRAVITY)),
        manipulated,
        feedback,
    )
    .and_then(|w| w.with_grid(nx, ny));
    finish(world, p.stiffening.unwrap_or(0.0), p.solver)
}

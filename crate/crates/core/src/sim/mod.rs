//! Quasi-static mass-spring world.
//!
//! Manipulated nodes are boundary conditions; every other node settles to a
//! minimum of the potential
//!
//! ```text
//! U = sum_springs k (e^2 / 2 + beta e^4 / (4 L^2))     e = |p_i - p_j| - L
//!   + sum_bends   s |p_i - 2 p_j + p_k|^2 / (2 L^2)
//!   - sum_nodes   m_i g . p_i
//! ```
//!
//! `beta` is the stiffening coefficient: the effective spring stiffness is
//! `k (1 + 3 beta (e / L)^2)`, so larger strains make the object stiffer.

mod solver;
mod templates;

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::features::{extract, FeatureSpec, FeatureVector, Point3, PointCloud};

pub use solver::{solve_equilibrium, SolveStats, SolverConfig};
pub use templates::{build_world, GridParams, RodParams, WorldParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Manipulated,
    Feedback,
    Uninformative,
}

/// Stretch spring between nodes `i` and `j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spring {
    pub i: usize,
    pub j: usize,
    pub rest: f64,
    pub k: f64,
}

/// Bending element on the consecutive triple `(i, j, k)`; `rest` is the
/// segment length used to make the stiffness scale-free.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bend {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub stiffness: f64,
    pub rest: f64,
}

#[derive(Debug, Clone)]
pub struct World {
    positions: Vec<Point3>,
    mass: Vec<f64>,
    springs: Vec<Spring>,
    bends: Vec<Bend>,
    gravity: Vector3<f64>,
    stiffening: f64,
    manipulated: Vec<usize>,
    feedback: Vec<usize>,
    /// `(nx, ny)` when the nodes form a row-major surface grid; used for
    /// vertex normals.
    grid: Option<(usize, usize)>,
    solver: SolverConfig,
}

impl World {
    /// Validated world. `manipulated` fixes the layout of command vectors and
    /// `feedback` the order of the feature point cloud.
    pub fn new(
        positions: Vec<Point3>,
        mass: Vec<f64>,
        springs: Vec<Spring>,
        bends: Vec<Bend>,
        gravity: Vector3<f64>,
        manipulated: Vec<usize>,
        feedback: Vec<usize>,
    ) -> Result<Self> {
        let n = positions.len();
        check_dim(n, mass.len())?;
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if manipulated.is_empty() || feedback.is_empty() {
            return bad("a world needs at least one manipulated and one feedback node".into());
        }
        let mut claimed = vec![false; n];
        for &i in manipulated.iter().chain(&feedback) {
            if i >= n {
                return bad(format!("node index {i} out of range ({n} nodes)"));
            }
            if claimed[i] {
                return bad(format!("node {i} is listed twice among manipulated/feedback nodes"));
            }
            claimed[i] = true;
        }
        if positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return bad("non-finite node position".into());
        }
        if mass.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return bad("node masses must be finite and nonnegative".into());
        }
        for s in &springs {
            if s.i >= n || s.j >= n || s.i == s.j {
                return bad(format!("spring ({}, {}) has invalid endpoints", s.i, s.j));
            }
            if !(s.k > 0.0) || !(s.rest > 0.0) {
                return bad(format!("spring ({}, {}) needs positive stiffness and rest length", s.i, s.j));
            }
        }
        for b in &bends {
            if b.i >= n || b.j >= n || b.k >= n {
                return bad(format!("bend ({}, {}, {}) has invalid nodes", b.i, b.j, b.k));
            }
            if !(b.stiffness > 0.0) || !(b.rest > 0.0) {
                return bad(format!("bend ({}, {}, {}) needs positive stiffness", b.i, b.j, b.k));
            }
        }
        if !gravity.iter().all(|v| v.is_finite()) {
            return bad("non-finite gravity".into());
        }
        if !connected(n, &springs) {
            return Err(Error::Degenerate("spring graph is not connected".into()));
        }
        Ok(World {
            positions,
            mass,
            springs,
            bends,
            gravity,
            stiffening: 0.0,
            manipulated,
            feedback,
            grid: None,
            solver: SolverConfig::default(),
        })
    }

    pub fn with_stiffening(mut self, beta: f64) -> Result<Self> {
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::InvalidInput(format!("stiffening must be >= 0, got {beta}")));
        }
        self.stiffening = beta;
        Ok(self)
    }

    /// Declare the nodes a row-major `nx x ny` grid (node `r * nx + c`).
    pub fn with_grid(mut self, nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 || nx * ny != self.positions.len() {
            return Err(Error::InvalidInput(format!("grid {nx}x{ny} does not match {} nodes", self.positions.len())));
        }
        self.grid = Some((nx, ny));
        Ok(self)
    }

    pub fn with_solver(mut self, solver: SolverConfig) -> Self {
        self.solver = solver;
        self
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn springs(&self) -> &[Spring] {
        &self.springs
    }

    pub fn bends(&self) -> &[Bend] {
        &self.bends
    }

    pub fn gravity(&self) -> Vector3<f64> {
        self.gravity
    }

    pub fn stiffening(&self) -> f64 {
        self.stiffening
    }

    pub fn manipulated(&self) -> &[usize] {
        &self.manipulated
    }

    pub fn feedback(&self) -> &[usize] {
        &self.feedback
    }

    pub fn solver(&self) -> &SolverConfig {
        &self.solver
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Dimension of a command vector: three coordinates per manipulated node.
    pub fn control_dim(&self) -> usize {
        3 * self.manipulated.len()
    }

    pub fn roles(&self) -> Vec<Role> {
        let mut roles = vec![Role::Uninformative; self.len()];
        for &i in &self.manipulated {
            roles[i] = Role::Manipulated;
        }
        for &i in &self.feedback {
            roles[i] = Role::Feedback;
        }
        roles
    }

    /// Stacked manipulated-node positions `p^m`.
    pub fn manipulated_positions(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.control_dim(),
            self.manipulated.iter().flat_map(|&i| self.positions[i].iter().copied()),
        )
    }

    pub fn energy(&self) -> f64 {
        energy_of(self, &self.positions)
    }

    /// `dU/dp` for every node, stacked `[x0, y0, z0, x1, ...]`.
    pub fn gradient(&self) -> DVector<f64> {
        gradient_of(self, &self.positions)
    }

    /// Largest gradient component over the free (non-manipulated) nodes.
    pub fn free_residual(&self) -> f64 {
        let g = self.gradient();
        let roles = self.roles();
        (0..self.len())
            .filter(|&i| roles[i] != Role::Manipulated)
            .flat_map(|i| (0..3).map(move |a| 3 * i + a))
            .map(|k| g[k].abs())
            .fold(0.0, f64::max)
    }

    /// Move the manipulated nodes by `dp` and re-solve the equilibrium. On
    /// failure the world is left unchanged.
    pub fn apply_control(&mut self, dp: &DVector<f64>) -> Result<SolveStats> {
        check_dim(self.control_dim(), dp.len())?;
        if dp.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite command".into()));
        }
        let mut next = self.clone();
        for (m, &i) in self.manipulated.iter().enumerate() {
            next.positions[i] += Vector3::new(dp[3 * m], dp[3 * m + 1], dp[3 * m + 2]);
        }
        let stats = solve_equilibrium(&mut next)?;
        *self = next;
        Ok(stats)
    }

    /// Per-vertex unit normals from the surface grid (area-weighted triangle
    /// normals); `None` for worlds without a grid.
    pub fn vertex_normals(&self) -> Option<Vec<Point3>> {
        let (nx, ny) = self.grid?;
        let p = &self.positions;
        let mut acc = vec![Vector3::zeros(); p.len()];
        for r in 0..ny - 1 {
            for c in 0..nx - 1 {
                let a = r * nx + c;
                let b = a + 1;
                let d = a + nx;
                let e = d + 1;
                for (u, v, w) in [(a, b, e), (a, e, d)] {
                    let n = (p[v] - p[u]).cross(&(p[w] - p[u]));
                    acc[u] += n;
                    acc[v] += n;
                    acc[w] += n;
                }
            }
        }
        Some(
            acc.into_iter()
                .map(|n| {
                    let len = n.norm();
                    if len > 0.0 {
                        n / len
                    } else {
                        Vector3::z()
                    }
                })
                .collect(),
        )
    }

    /// Point cloud of the feedback nodes, with mesh normals when available.
    pub fn feedback_cloud(&self) -> Result<PointCloud> {
        let pts: Vec<Point3> = self.feedback.iter().map(|&i| self.positions[i]).collect();
        match self.vertex_normals() {
            Some(normals) => PointCloud::with_normals(pts, self.feedback.iter().map(|&i| normals[i]).collect()),
            None => PointCloud::new(pts),
        }
    }

    pub fn features(&self, spec: &FeatureSpec) -> Result<FeatureVector> {
        if spec.needs_normals() && self.grid.is_none() {
            return Err(Error::InvalidInput(
                "this feature spec needs surface normals, which only grid worlds provide".into(),
            ));
        }
        extract(spec, &self.feedback_cloud()?)
    }

    /// Apply `dp` and report the realised feature change.
    pub fn apply_control_observe(
        &mut self,
        spec: &FeatureSpec,
        dp: &DVector<f64>,
    ) -> Result<(DVector<f64>, SolveStats)> {
        let before = self.features(spec)?.values;
        let stats = self.apply_control(dp)?;
        let after = self.features(spec)?.values;
        Ok((after - before, stats))
    }
}

/// Central-difference Jacobian `dx / dp^m` of the equilibrium feature map.
/// Each probe re-solves from the current equilibrium.
pub fn ground_truth_jacobian(world: &World, spec: &FeatureSpec, h: f64) -> Result<DMatrix<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidInput(format!("step must be positive, got {h}")));
    }
    let dim_x = world.features(spec)?.len();
    let dim_p = world.control_dim();
    let mut jac = DMatrix::zeros(dim_x, dim_p);
    for c in 0..dim_p {
        let probe = |sign: f64| -> Result<DVector<f64>> {
            let mut w = world.clone();
            let mut dp = DVector::zeros(dim_p);
            dp[c] = sign * h;
            w.apply_control(&dp)?;
            Ok(w.features(spec)?.values)
        };
        let plus = probe(1.0)?;
        let minus = probe(-1.0)?;
        jac.set_column(c, &((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

fn connected(n: usize, springs: &[Spring]) -> bool {
    if n == 0 {
        return false;
    }
    let mut adj = vec![Vec::new(); n];
    for s in springs {
        adj[s.i].push(s.j);
        adj[s.j].push(s.i);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == n
}

// Spring energy `k (e^2/2 + beta e^4 / (4 L^2))` and its first two
// derivatives with respect to the length.
fn spring_terms(s: &Spring, beta: f64, len: f64) -> (f64, f64, f64) {
    let e = len - s.rest;
    let q = beta / (s.rest * s.rest);
    let energy = s.k * (0.5 * e * e + 0.25 * q * e.powi(4));
    let force = s.k * (e + q * e.powi(3));
    let stiff = s.k * (1.0 + 3.0 * q * e * e);
    (energy, force, stiff)
}

pub(crate) fn energy_of(world: &World, pos: &[Point3]) -> f64 {
    let mut u = 0.0;
    for s in &world.springs {
        u += spring_terms(s, world.stiffening, (pos[s.i] - pos[s.j]).norm()).0;
    }
    for b in &world.bends {
        let v = pos[b.i] - 2.0 * pos[b.j] + pos[b.k];
        u += 0.5 * b.stiffness / (b.rest * b.rest) * v.norm_squared();
    }
    for (p, &m) in pos.iter().zip(&world.mass) {
        u -= m * world.gravity.dot(p);
    }
    u
}

pub(crate) fn gradient_of(world: &World, pos: &[Point3]) -> DVector<f64> {
    let mut g = DVector::zeros(3 * pos.len());
    let mut add = |i: usize, v: &Vector3<f64>| {
        for a in 0..3 {
            g[3 * i + a] += v[a];
        }
    };
    for s in &world.springs {
        let d = pos[s.i] - pos[s.j];
        let len = d.norm();
        if len <= f64::MIN_POSITIVE {
            continue;
        }
        let f = spring_terms(s, world.stiffening, len).1;
        let v = d * (f / len);
        add(s.i, &v);
        add(s.j, &-v);
    }
    for b in &world.bends {
        let c = b.stiffness / (b.rest * b.rest);
        let v = (pos[b.i] - 2.0 * pos[b.j] + pos[b.k]) * c;
        add(b.i, &v);
        add(b.j, &(-2.0 * v));
        add(b.k, &v);
    }
    for (i, &m) in world.mass.iter().enumerate() {
        add(i, &(-m * world.gravity));
    }
    g
}

pub(crate) fn hessian_of(world: &World, pos: &[Point3]) -> DMatrix<f64> {
    let n = pos.len();
    let mut h = DMatrix::zeros(3 * n, 3 * n);
    let mut add = |i: usize, j: usize, blk: &Matrix3<f64>| {
        let mut view = h.fixed_view_mut::<3, 3>(3 * i, 3 * j);
        view += blk;
    };
    for s in &world.springs {
        let d = pos[s.i] - pos[s.j];
        let len = d.norm();
        if len <= f64::MIN_POSITIVE {
            continue;
        }
        let (_, f, stiff) = spring_terms(s, world.stiffening, len);
        let u = d / len;
        let uu = u * u.transpose();
        let blk = uu * stiff + (Matrix3::identity() - uu) * (f / len);
        add(s.i, s.i, &blk);
        add(s.j, s.j, &blk);
        add(s.i, s.j, &-blk);
        add(s.j, s.i, &-blk);
    }
    for b in &world.bends {
        let c = b.stiffness / (b.rest * b.rest);
        let idx = [b.i, b.j, b.k];
        let w = [1.0, -2.0, 1.0];
        for (x, &ix) in idx.iter().enumerate() {
            for (y, &iy) in idx.iter().enumerate() {
                add(ix, iy, &(Matrix3::identity() * (c * w[x] * w[y])));
            }
        }
    }
    h
}

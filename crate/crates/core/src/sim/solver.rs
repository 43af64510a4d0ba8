use nalgebra::{Cholesky, DVector};
use serde::{Deserialize, Serialize};

use super::{energy_of, gradient_of, hessian_of, Role, World};
use crate::error::{Error, Result};
use crate::features::Point3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Converged when every free gradient component is at most this (N).
    pub g_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { g_tol: 1e-8, max_iter: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Free-node gradient infinity norm at the returned state.
    pub residual: f64,
    pub energy_before: f64,
    pub energy_after: f64,
}

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1.0 / 16384.0;

/// Minimise the potential over the free nodes with the manipulated nodes held
/// fixed: damped Newton steps `(H + lambda I) d = -g` with Armijo
/// backtracking; the damping grows whenever the Hessian is indefinite or no
/// step is accepted, which degrades the step towards gradient descent.
///
/// Accepted steps never raise the energy by more than rounding level.
pub fn solve_equilibrium(world: &mut World) -> Result<SolveStats> {
    let cfg = world.solver;
    let roles = world.roles();
    let dofs: Vec<usize> = (0..world.len())
        .filter(|&i| roles[i] != Role::Manipulated)
        .flat_map(|i| (0..3).map(move |a| 3 * i + a))
        .collect();
    let free_grad = |pos: &[Point3]| {
        let g = gradient_of(world, pos);
        DVector::from_iterator(dofs.len(), dofs.iter().map(|&k| g[k]))
    };

    let mut pos = world.positions.clone();
    let mut energy = energy_of(world, &pos);
    let energy_before = energy;
    let mut lambda = 0.0f64;
    let mut iterations = 0;
    loop {
        let g = free_grad(&pos);
        let residual = g.amax();
        if !residual.is_finite() {
            return Err(Error::Equilibrium { iterations, residual });
        }
        if residual <= cfg.g_tol {
            world.positions = pos;
            return Ok(SolveStats { iterations, residual, energy_before, energy_after: energy });
        }
        if iterations >= cfg.max_iter {
            return Err(Error::Equilibrium { iterations, residual });
        }
        iterations += 1;

        let h = hessian_of(world, &pos).select_rows(&dofs).select_columns(&dofs);
        let scale = h.diagonal().amax().max(1e-12);
        let mut accepted = None;
        for _ in 0..40 {
            let mut damped = h.clone();
            for k in 0..dofs.len() {
                damped[(k, k)] += lambda;
            }
            let Some(chol) = Cholesky::new(damped) else {
                lambda = raise(lambda, scale);
                continue;
            };
            let d = -chol.solve(&g);
            let slope = g.dot(&d);
            let mut t = 1.0;
            while t >= MIN_STEP {
                let trial = displaced(&pos, &dofs, &d, t);
                let e_trial = energy_of(world, &trial);
                let armijo = e_trial <= energy + ARMIJO * t * slope;
                // Near the minimum the energy decrease drops below rounding;
                // accept a step that does not raise the energy beyond that
                // level and reduces the gradient.
                let rounding = !armijo
                    && e_trial - energy <= 16.0 * f64::EPSILON * energy.abs().max(1.0)
                    && free_grad(&trial).amax() < residual;
                if armijo || rounding {
                    accepted = Some((trial, e_trial, t));
                    break;
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
            lambda = raise(lambda, scale);
        }
        let Some((next, e_next, t)) = accepted else {
            return Err(Error::Equilibrium { iterations, residual });
        };
        pos = next;
        energy = e_next;
        if t == 1.0 {
            lambda = if lambda < 1e-10 * scale { 0.0 } else { lambda / 10.0 };
        }
    }
}

fn raise(lambda: f64, scale: f64) -> f64 {
    if lambda == 0.0 {
        1e-8 * scale
    } else {
        lambda * 10.0
    }
}

fn displaced(pos: &[Point3], dofs: &[usize], d: &DVector<f64>, t: f64) -> Vec<Point3> {
    let mut out = pos.to_vec();
    for (k, &dof) in dofs.iter().enumerate() {
        out[dof / 3][dof % 3] += t * d[k];
    }
    out
}

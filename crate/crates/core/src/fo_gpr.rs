//! Fast online GPR: a bounded-memory GP maintained incrementally in `O(N^2)`
//! per observation.
//!
//! Below capacity each observation grows the model by one row. At capacity
//! the stored observation whose Gram row has the largest sum (the one most
//! correlated with everything else) is replaced by the new one, which changes
//! the Gram matrix by a rank-2 term.
//!
//! The Gram matrix is represented by its Cholesky factor rather than an
//! explicit inverse. With small noise variances the Gram matrix is badly
//! conditioned (`cond ~ N / sigma_n^2`), and explicit-inverse updates then
//! amplify the stored inverse's rounding error until it is useless. The
//! factor carries the same information, supports the same `O(N^2)` growth,
//! replacement and prediction, and stays backward stable. [`GpState::inverse`]
//! materialises `A^-1` on demand.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gp_core::{
    clamp_variance, fit_linear_mean_truncated, gram_matrix, kernel_column, rbf_unchecked, Dataset, Hyperparams,
    MeanWeights, Posterior,
};

/// Growth is refused when the Schur complement `r` drops to this level.
pub const R_MIN: f64 = 1e-12;
/// A replacement whose rank-2 capacitance determinant falls below this is
/// treated as singular and the factor is rebuilt densely.
pub const CAPACITANCE_MIN: f64 = 1e-12;
/// Updates between factor-consistency probes.
pub const HYGIENE_INTERVAL: u64 = 1000;
/// Relative probe residual `|L L^T v - A v| / (|A| |v|)` above which the
/// factor is recomputed densely.
pub const HYGIENE_TOL: f64 = 1e-6;

pub const SNAPSHOT_SCHEMA_VERSION: u32 = 1;

/// Which branch an observation took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    Grow,
    /// Replaced the stored observation at this index.
    Swap(usize),
    /// Near-duplicate input: averaged into the output of this stored index.
    Absorbed(usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthCounters {
    pub absorbed: u64,
    pub dense_fallbacks: u64,
    pub hygiene_refactors: u64,
}

/// Online GP model state.
///
/// Observations live in slots `0..len()`; the Gram matrix is kept in slot
/// order. The Cholesky factor `L` (with `L L^T = A`) is kept in its own
/// order, `order[f]` being the slot of factor row `f`.
#[derive(Debug, Clone)]
pub struct GpState {
    hp: Hyperparams,
    capacity: usize,
    data: Dataset,
    gram: DMatrix<f64>,
    chol: DMatrix<f64>,
    order: Vec<usize>,
    w: MeanWeights,
    step_count: u64,
    health: HealthCounters,
}

/// `L L^T + w w^T` in place (`w` is consumed).
fn rank_one_update(l: &mut DMatrix<f64>, w: &mut DVector<f64>) {
    let n = l.nrows();
    for k in 0..n {
        let lkk = l[(k, k)];
        let r = lkk.hypot(w[k]);
        let c = r / lkk;
        let s = w[k] / lkk;
        l[(k, k)] = r;
        for i in (k + 1)..n {
            let li = (l[(i, k)] + s * w[i]) / c;
            l[(i, k)] = li;
            w[i] = c * w[i] - s * li;
        }
    }
}

/// `L L^T - w w^T` in place; false if the result is not positive definite,
/// in which case `l` is left partially modified.
fn rank_one_downdate(l: &mut DMatrix<f64>, w: &mut DVector<f64>) -> bool {
    let n = l.nrows();
    for k in 0..n {
        let lkk = l[(k, k)];
        let r2 = (lkk - w[k]) * (lkk + w[k]);
        if !(r2 > 0.0) {
            return false;
        }
        let r = r2.sqrt();
        let c = r / lkk;
        let s = w[k] / lkk;
        l[(k, k)] = r;
        for i in (k + 1)..n {
            let li = (l[(i, k)] - s * w[i]) / c;
            l[(i, k)] = li;
            w[i] = c * w[i] - s * li;
        }
    }
    true
}

impl GpState {
    /// Empty model holding at most `hp.max_size` observations.
    pub fn new(hp: Hyperparams, in_dim: usize, out_dim: usize) -> Result<Self> {
        hp.validate()?;
        Ok(Self::with_capacity(hp, hp.max_size, in_dim, out_dim))
    }

    /// Empty model that never forgets (the standard GPR baseline).
    pub fn unbounded(hp: Hyperparams, in_dim: usize, out_dim: usize) -> Result<Self> {
        hp.validate()?;
        Ok(Self::with_capacity(hp, usize::MAX, in_dim, out_dim))
    }

    fn with_capacity(hp: Hyperparams, capacity: usize, in_dim: usize, out_dim: usize) -> Self {
        GpState {
            hp,
            capacity,
            data: Dataset::new(in_dim, out_dim),
            gram: DMatrix::zeros(0, 0),
            chol: DMatrix::zeros(0, 0),
            order: Vec::new(),
            w: MeanWeights::zeros(out_dim, in_dim),
            step_count: 0,
            health: HealthCounters::default(),
        }
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The Gram matrix `K + sigma_n^2 I` of the stored inputs, in slot order.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Lower-triangular Cholesky factor of the Gram matrix, in factor order.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Slot of each factor row.
    pub fn factor_order(&self) -> &[usize] {
        &self.order
    }

    /// `A^-1` in slot order, materialised from the factor in `O(N^3)`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.len();
        let linv = lower_triangular_inverse(&self.chol);
        let inv_f = linv.transpose() * &linv;
        let mut pos = vec![0; n];
        for (f, &slot) in self.order.iter().enumerate() {
            pos[slot] = f;
        }
        DMatrix::from_fn(n, n, |i, j| inv_f[(pos[i], pos[j])])
    }

    pub fn weights(&self) -> &MeanWeights {
        &self.w
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn health(&self) -> HealthCounters {
        self.health
    }

    fn pos(&self, slot: usize) -> usize {
        self.order.iter().position(|&s| s == slot).expect("slot in factor")
    }

    fn check_pair(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        check_dim(self.data.in_dim(), x.len())?;
        check_dim(self.data.out_dim(), y.len())?;
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite observation".into()));
        }
        Ok(())
    }

    /// Kernel column against the stored inputs, in factor order.
    fn factor_column(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.order.len(),
            self.order.iter().map(|&s| rbf_unchecked(self.data.inputs[s].as_slice(), x.as_slice(), self.hp.sigma_rbf)),
        )
    }

    /// Append one row to the factor: `l = L^-1 b`, `r = c - l^T l`, and the
    /// new row is `[l^T, sqrt(r)]`. `r` is the Schur complement of the block
    /// growth `A^-1 -> [[A^-1 + z z^T / r, -z / r], [-z^T / r, 1 / r]]`
    /// with `z = A^-1 b`.
    fn schur_row(&self, b: &DVector<f64>, c: f64) -> (DVector<f64>, f64) {
        let mut l = b.clone();
        self.chol.solve_lower_triangular_unchecked_mut(&mut l);
        let r = c - l.norm_squared();
        (l, r)
    }

    fn append_factor_row(&mut self, l: &DVector<f64>, r: f64, slot: usize) {
        let n = self.chol.nrows();
        let mut chol = std::mem::replace(&mut self.chol, DMatrix::zeros(0, 0)).resize(n + 1, n + 1, 0.0);
        for j in 0..n {
            chol[(n, j)] = l[j];
        }
        chol[(n, n)] = r.sqrt();
        self.chol = chol;
        self.order.push(slot);
    }

    /// Grow the model by one observation.
    ///
    /// With `b = k(X, x)` and `c = k(x, x) + sigma_n^2`, a Schur complement
    /// `r = c - b^T A^-1 b <= R_MIN` means `x` duplicates stored data: the
    /// pair is then absorbed by averaging its output into the nearest slot.
    pub fn grow_update(&mut self, x: DVector<f64>, y: DVector<f64>) -> Result<UpdateKind> {
        self.check_pair(&x, &y)?;
        let n = self.data.len();
        if n >= self.capacity {
            return Err(Error::InvalidInput(format!("grow_update at capacity ({n} of {})", self.capacity)));
        }
        let c = 1.0 + self.hp.noise_var();
        let (l, r) = self.schur_row(&self.factor_column(&x), c);
        if !(r > R_MIN) {
            let j = self.nearest_stored(&x);
            log::info!("absorbing near-duplicate observation into stored index {j} (r = {r:e})");
            let merged = (&self.data.outputs[j] + &y) * 0.5;
            self.data.outputs[j] = merged;
            self.health.absorbed += 1;
            return Ok(UpdateKind::Absorbed(j));
        }

        let b = kernel_column(&self.data.inputs, &x, self.hp.sigma_rbf);
        let mut gram = std::mem::replace(&mut self.gram, DMatrix::zeros(0, 0)).resize(n + 1, n + 1, 0.0);
        for i in 0..n {
            gram[(i, n)] = b[i];
            gram[(n, i)] = b[i];
        }
        gram[(n, n)] = c;
        self.gram = gram;
        self.append_factor_row(&l, r, n);
        self.data.inputs.push(x);
        self.data.outputs.push(y);
        Ok(UpdateKind::Grow)
    }

    fn nearest_stored(&self, x: &DVector<f64>) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, xi) in self.data.inputs.iter().enumerate() {
            let d2 = (xi - x).norm_squared();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best.0
    }

    /// Index of the Gram row with the largest sum; ties go to the lowest index.
    pub fn select_forget_index(&self) -> usize {
        argmax_row_sum(&self.gram)
    }

    /// Replace stored observation `i_star` in `O(N^2)`.
    ///
    /// The Gram matrix changes by `U V^T` with `U = [e, d]`, `V = [d, e]`,
    /// `d = k_t - k_{t-1}` (zero at `i_star`, where the diagonal is
    /// unchanged). Since `e d^T + d e^T = (u u^T - v v^T)` with
    /// `u, v = (e +- d) / sqrt(2)`, the factor takes one rank-one update and
    /// one downdate, each a full pass whatever the slot's position. The
    /// Woodbury capacitance determinant `det(I + V^T A^-1 U)` is
    /// `det(A') / det(A)`, the product of the squared ratios of the new and
    /// old factor diagonals; below `CAPACITANCE_MIN`, or if the downdate
    /// loses definiteness, the factor is rebuilt densely.
    pub fn swap_update(&mut self, i_star: usize, x: DVector<f64>, y: DVector<f64>) -> Result<()> {
        self.check_pair(&x, &y)?;
        let n = self.data.len();
        if i_star >= n {
            return Err(Error::InvalidInput(format!("swap index {i_star} out of range 0..{n}")));
        }
        let c = 1.0 + self.hp.noise_var();
        let mut new_col = kernel_column(&self.data.inputs, &x, self.hp.sigma_rbf);
        new_col[i_star] = c;

        let p = self.pos(i_star);
        let mut u = DVector::from_iterator(n, self.order.iter().map(|&s| new_col[s] - self.gram[(s, i_star)]));
        u[p] = 0.0;
        let mut v = -&u;
        u[p] = 1.0;
        v[p] = 1.0;
        u *= std::f64::consts::FRAC_1_SQRT_2;
        v *= std::f64::consts::FRAC_1_SQRT_2;

        let old_diag = self.chol.diagonal();
        self.data.inputs[i_star] = x;
        self.data.outputs[i_star] = y;
        for j in 0..n {
            self.gram[(j, i_star)] = new_col[j];
            self.gram[(i_star, j)] = new_col[j];
        }

        rank_one_update(&mut self.chol, &mut u);
        let det = if rank_one_downdate(&mut self.chol, &mut v) {
            self.chol.diagonal().iter().zip(old_diag.iter()).map(|(a, b)| (a / b).powi(2)).product()
        } else {
            f64::NAN
        };
        if !(det >= CAPACITANCE_MIN) || !det.is_finite() {
            log::warn!("singular swap capacitance (det = {det:e}); refactoring densely");
            self.health.dense_fallbacks += 1;
            return self.refactor();
        }
        Ok(())
    }

    /// Dense refactorisation of the stored Gram matrix; resets the order.
    fn refactor(&mut self) -> Result<()> {
        let n = self.len();
        self.order = (0..n).collect();
        self.chol = if n == 0 {
            DMatrix::zeros(0, 0)
        } else {
            nalgebra::Cholesky::new(self.gram.clone())
                .ok_or_else(|| Error::NumericalHealth("Gram matrix is not positive definite".into()))?
                .unpack()
        };
        Ok(())
    }

    /// One streaming update: grow below capacity, forget-and-swap at capacity,
    /// then refit the linear mean.
    pub fn add_observation(&mut self, x: DVector<f64>, y: DVector<f64>) -> Result<UpdateKind> {
        self.check_pair(&x, &y)?;
        let kind = if self.data.len() < self.capacity {
            self.grow_update(x, y)?
        } else {
            let i_star = self.select_forget_index();
            self.swap_update(i_star, x, y)?;
            UpdateKind::Swap(i_star)
        };
        self.w = fit_linear_mean_truncated(&self.data, self.hp.mean_rcond)?;
        self.step_count += 1;
        if self.step_count.is_multiple_of(HYGIENE_INTERVAL) {
            self.hygiene()?;
        }
        Ok(kind)
    }

    /// `O(N^2)` probe of `L L^T` against the stored Gram; refactors when the
    /// relative residual is too large.
    fn hygiene(&mut self) -> Result<()> {
        let worst = self.factor_probe();
        if !(worst <= HYGIENE_TOL) {
            log::info!("factor probe residual {worst:e} after {} updates; refactoring", self.step_count);
            self.refactor()?;
            self.health.hygiene_refactors += 1;
        }
        Ok(())
    }

    /// Largest relative residual `|L L^T v - A v|_inf / (|A|_inf |v|_inf)`
    /// over two fixed probe vectors.
    pub fn factor_probe(&self) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        let a_norm = self.gram.row_iter().map(|r| r.abs().sum()).fold(0.0, f64::max);
        let probes = [DVector::from_element(n, 1.0), DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 })];
        probes
            .iter()
            .map(|v| {
                let vf = DVector::from_iterator(n, self.order.iter().map(|&s| v[s]));
                let llt = &self.chol * self.chol.tr_mul(&vf);
                let av = &self.gram * v;
                let diff = (0..n).map(|f| (llt[f] - av[self.order[f]]).abs()).fold(0.0, f64::max);
                diff / a_norm
            })
            .fold(0.0, f64::max)
    }

    /// Posterior at `query`: `mu = W q + k^T A^-1 (P - W X)`,
    /// `var = 1 - |L^-1 k|^2`.
    pub fn predict(&self, query: &DVector<f64>) -> Result<Posterior> {
        check_dim(self.data.in_dim(), query.len())?;
        let mut mu = self.w.apply(query);
        if self.is_empty() {
            return Ok(Posterior { mu, var: 1.0 });
        }
        let mut v = self.factor_column(query);
        self.chol.solve_lower_triangular_unchecked_mut(&mut v);
        let var = clamp_variance(1.0 - v.norm_squared())?;
        self.chol.tr_solve_lower_triangular_unchecked_mut(&mut v);
        for (f, &s) in self.order.iter().enumerate() {
            let resid = &self.data.outputs[s] - self.w.apply(&self.data.inputs[s]);
            mu.axpy(v[f], &resid, 1.0);
        }
        Ok(Posterior { mu, var })
    }

    /// `max |A^-1 A - I|`, with `A^-1` materialised from the factor and `A`
    /// rebuilt from the stored inputs.
    pub fn consistency_residual(&self) -> Result<f64> {
        let n = self.data.len();
        if n == 0 {
            return Ok(0.0);
        }
        let rebuilt = gram_matrix(&self.data.inputs, &self.hp)?;
        Ok((self.inverse() * rebuilt - DMatrix::identity(n, n)).amax())
    }

    pub fn snapshot(&self) -> GpSnapshot {
        GpSnapshot {
            schema_version: SNAPSHOT_SCHEMA_VERSION,
            hyperparams: self.hp,
            capacity: (self.capacity != usize::MAX).then_some(self.capacity),
            in_dim: self.data.in_dim(),
            out_dim: self.data.out_dim(),
            step_count: self.step_count,
            inputs: self.data.inputs.iter().map(|v| v.as_slice().to_vec()).collect(),
            outputs: self.data.outputs.iter().map(|v| v.as_slice().to_vec()).collect(),
        }
    }

    /// Rebuild a state from a snapshot; the factor is recomputed densely.
    pub fn from_snapshot(snap: &GpSnapshot) -> Result<Self> {
        if snap.schema_version != SNAPSHOT_SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported snapshot version {}", snap.schema_version),
            ));
        }
        snap.hyperparams.validate()?;
        if snap.inputs.len() != snap.outputs.len() {
            return Err(Error::InvalidInput("snapshot inputs/outputs length differ".into()));
        }
        let capacity = snap.capacity.unwrap_or(usize::MAX);
        if snap.inputs.len() > capacity {
            return Err(Error::InvalidInput("snapshot holds more pairs than its capacity".into()));
        }
        let mut state = Self::with_capacity(snap.hyperparams, capacity, snap.in_dim, snap.out_dim);
        for (x, y) in snap.inputs.iter().zip(&snap.outputs) {
            state.data.push(DVector::from_column_slice(x), DVector::from_column_slice(y))?;
        }
        if !state.data.is_empty() {
            state.gram = gram_matrix(&state.data.inputs, &state.hp)?;
        }
        state.refactor()?;
        state.w = fit_linear_mean_truncated(&state.data, state.hp.mean_rcond)?;
        state.step_count = snap.step_count;
        Ok(state)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.snapshot())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let snap: GpSnapshot = serde_json::from_str(s)?;
        Self::from_snapshot(&snap)
    }
}

/// Checkpoint format. The factor is not persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpSnapshot {
    pub schema_version: u32,
    pub hyperparams: Hyperparams,
    /// `None` for an unbounded model.
    pub capacity: Option<usize>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub step_count: u64,
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

/// Inverse of a lower-triangular matrix by recursive 2x2 blocking,
/// `[[A, 0], [B, C]]^-1 = [[A^-1, 0], [-C^-1 B A^-1, C^-1]]`, so that most of
/// the work runs through matrix products.
fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    const BASE: usize = 48;
    let n = l.nrows();
    if n <= BASE {
        let mut inv = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut col = inv.view_range_mut(j.., j);
            col[0] = 1.0;
            l.view_range(j.., j..).solve_lower_triangular_unchecked_mut(&mut col);
        }
        return inv;
    }
    let h = n / 2;
    let a_inv = lower_triangular_inverse(&l.view_range(..h, ..h).clone_owned());
    let c_inv = lower_triangular_inverse(&l.view_range(h.., h..).clone_owned());
    let lower = -(&c_inv * l.view_range(h.., ..h) * &a_inv);
    let mut inv = DMatrix::zeros(n, n);
    inv.view_range_mut(..h, ..h).copy_from(&a_inv);
    inv.view_range_mut(h.., h..).copy_from(&c_inv);
    inv.view_range_mut(h.., ..h).copy_from(&lower);
    inv
}

pub(crate) fn argmax_row_sum(a: &DMatrix<f64>) -> usize {
    let sums = a.column_sum();
    let mut best = 0;
    for i in 1..sums.len() {
        if sums[i] > sums[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp_core::rbf_kernel;
    use nalgebra::dvector;
    use rand::{rngs::StdRng, RngExt, SeedableRng};

    fn hp(m: usize) -> Hyperparams {
        Hyperparams { max_size: m, ..Hyperparams::default() }
    }

    fn rand_pair(rng: &mut StdRng, d: usize, m: usize) -> (DVector<f64>, DVector<f64>) {
        let x = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(m, |i, _| (x.sum() * (i + 1) as f64).sin() + 0.3 * x[0]);
        (x, y)
    }

    fn dense_inverse(state: &GpState) -> DMatrix<f64> {
        gram_matrix(state.data().inputs(), state.hyperparams()).unwrap().try_inverse().unwrap()
    }

    #[test]
    fn first_pair_gives_scalar_inverse() {
        let mut s = GpState::new(hp(10), 2, 1).unwrap();
        s.add_observation(dvector![0.1, 0.2], dvector![1.0]).unwrap();
        let expect = 1.0 / (1.0 + s.hyperparams().noise_var());
        assert!((s.inverse()[(0, 0)] - expect).abs() < 1e-15);
    }

    #[test]
    fn two_inputs_match_closed_form_inverse() {
        let params = hp(10);
        let mut s = GpState::new(params, 1, 1).unwrap();
        s.add_observation(dvector![0.0], dvector![0.0]).unwrap();
        s.add_observation(dvector![0.5], dvector![1.0]).unwrap();
        let a = 1.0 + params.noise_var();
        let k = rbf_kernel(&dvector![0.0], &dvector![0.5], params.sigma_rbf).unwrap();
        let det = a * a - k * k;
        let expect = DMatrix::from_row_slice(2, 2, &[a / det, -k / det, -k / det, a / det]);
        // relative to entry size, which is ~1/(1 - k^2)
        let scale = expect.amax();
        assert!((s.inverse() - &expect).amax() / scale < 1e-12);
    }

    #[test]
    fn growth_tracks_dense_inverse() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut s = GpState::new(hp(100), 3, 2).unwrap();
        for _ in 0..50 {
            let (x, y) = rand_pair(&mut rng, 3, 2);
            assert_eq!(s.add_observation(x, y).unwrap(), UpdateKind::Grow);
            let dense = dense_inverse(&s);
            let rel = (s.inverse() - &dense).amax() / dense.amax();
            assert!(rel <= 1e-8, "relative deviation {rel:e}");
            assert!(s.consistency_residual().unwrap() <= 1e-6);
        }
    }

    #[test]
    fn forget_index_prefers_duplicates() {
        let mut s = GpState::new(hp(3), 1, 1).unwrap();
        let x = dvector![0.0];
        s.add_observation(x.clone(), dvector![1.0]).unwrap();
        // second copy is absorbed by the near-duplicate guard only when r <= R_MIN;
        // with sigma_n = 1e-3, r ~ 2e-6 so it is stored.
        s.add_observation(x, dvector![1.0]).unwrap();
        s.add_observation(dvector![10.0], dvector![0.0]).unwrap();
        assert_eq!(s.len(), 3);
        let sums = s.gram().column_sum();
        let s2 = s.hyperparams().noise_var();
        assert!((sums[0] - (2.0 + s2)).abs() < 1e-12);
        assert!((sums[2] - (1.0 + s2)).abs() < 1e-12);
        assert_eq!(s.select_forget_index(), 0);
    }

    #[test]
    fn forget_index_identical_inputs_is_zero() {
        let hp = Hyperparams { sigma_n: 0.1, max_size: 4, ..Hyperparams::default() };
        let mut s = GpState::new(hp, 2, 1).unwrap();
        for _ in 0..4 {
            s.add_observation(dvector![0.3, 0.3], dvector![1.0]).unwrap();
        }
        assert_eq!(s.len(), 4);
        assert_eq!(s.select_forget_index(), 0);
    }

    #[test]
    fn forget_index_matches_rebuilt_gram_scan() {
        let mut rng = StdRng::seed_from_u64(5);
        for trial in 0..5 {
            let m = 20 + 5 * trial;
            let mut s = GpState::new(hp(m), 2, 1).unwrap();
            for _ in 0..(m + 7) {
                let (x, y) = rand_pair(&mut rng, 2, 1);
                s.add_observation(x, y).unwrap();
            }
            let rebuilt = gram_matrix(s.data().inputs(), s.hyperparams()).unwrap();
            let mut best = 0;
            let mut best_sum = f64::NEG_INFINITY;
            for i in 0..m {
                let sum: f64 = (0..m).map(|j| rebuilt[(i, j)]).sum();
                if sum > best_sum {
                    best_sum = sum;
                    best = i;
                }
            }
            assert_eq!(s.select_forget_index(), best);
            // the diagonal noise term is constant across rows and cannot move the argmax
            let mut k_only = rebuilt.clone();
            k_only.fill_diagonal(1.0);
            assert_eq!(argmax_row_sum(&k_only), best);
        }
    }

    #[test]
    fn swap_with_itself_is_identity() {
        let mut rng = StdRng::seed_from_u64(2);
        let mut s = GpState::new(hp(5), 2, 1).unwrap();
        for _ in 0..5 {
            let (x, y) = rand_pair(&mut rng, 2, 1);
            s.add_observation(x, y).unwrap();
        }
        let before = s.inverse();
        let (x, y) = (s.data().inputs()[1].clone(), s.data().outputs()[1].clone());
        s.swap_update(1, x, y).unwrap();
        assert!((s.inverse() - before).amax() < 1e-10);
    }

    #[test]
    fn swap_matches_dense_on_three_points() {
        let params = Hyperparams { max_size: 3, ..Hyperparams::default() };
        let mut s = GpState::new(params, 1, 1).unwrap();
        for (x, y) in [(-0.8, 0.1), (0.0, 0.5), (0.9, -0.2)] {
            s.add_observation(dvector![x], dvector![y]).unwrap();
        }
        s.swap_update(1, dvector![0.35], dvector![0.7]).unwrap();
        let dense = dense_inverse(&s);
        let rel = (s.inverse() - &dense).amax() / dense.amax();
        assert!(rel < 1e-10, "{rel:e}");
        assert_eq!(s.data().inputs()[1], dvector![0.35]);
    }

    #[test]
    fn swap_difference_is_rank_two_uv() {
        let params = Hyperparams { sigma_n: 0.1, ..hp(6) };
        let mut rng = StdRng::seed_from_u64(11);
        let mut s = GpState::new(params, 2, 1).unwrap();
        for _ in 0..6 {
            let (x, y) = rand_pair(&mut rng, 2, 1);
            s.add_observation(x, y).unwrap();
        }
        let i = 4;
        let before = s.gram().clone();
        let inv_before = s.inverse();
        let (x, y) = rand_pair(&mut rng, 2, 1);
        s.swap_update(i, x, y).unwrap();
        let after = gram_matrix(s.data().inputs(), &params).unwrap();

        let mut e = DVector::zeros(6);
        e[i] = 1.0;
        let mut d = after.column(i) - before.column(i);
        d[i] *= 0.5;
        let u = DMatrix::from_columns(&[e.clone(), d.clone()]);
        let v = DMatrix::from_columns(&[d, e]);
        assert!((&before + &u * v.transpose() - &after).amax() < 1e-15);

        // Woodbury capacitance determinant vs the ratio of Schur complements.
        let cap = DMatrix::identity(2, 2) + v.transpose() * &inv_before * &u;
        let others: Vec<usize> = (0..6).filter(|&j| j != i).collect();
        let schur = |a: &DMatrix<f64>| {
            let sub = a.select_rows(&others).select_columns(&others);
            let b = a.column(i).select_rows(&others);
            a[(i, i)] - (b.transpose() * sub.try_inverse().unwrap() * &b)[(0, 0)]
        };
        let ratio = schur(&after) / schur(&before);
        assert!((cap.determinant() - ratio).abs() < 1e-10 * ratio.abs());
    }

    #[test]
    fn long_swap_stream_stays_consistent() {
        let mut rng = StdRng::seed_from_u64(99);
        let mut s = GpState::new(hp(50), 3, 2).unwrap();
        for t in 0..550 {
            let (x, y) = rand_pair(&mut rng, 3, 2);
            s.add_observation(x, y).unwrap();
            if t % 25 == 0 || t == 549 {
                let r = s.consistency_residual().unwrap();
                assert!(r <= 1e-6, "step {t}: residual {r:e}");
            }
        }
        assert_eq!(s.len(), 50);
        assert_eq!(s.health().dense_fallbacks, 0);
    }

    #[test]
    fn add_observation_branches() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut s = GpState::new(hp(4), 2, 1).unwrap();
        for _ in 0..3 {
            let (x, y) = rand_pair(&mut rng, 2, 1);
            s.add_observation(x, y).unwrap();
        }
        assert_eq!(s.len(), 3);
        let (x, y) = rand_pair(&mut rng, 2, 1);
        assert_eq!(s.add_observation(x, y).unwrap(), UpdateKind::Grow);
        assert_eq!(s.len(), 4);
        let (x, y) = rand_pair(&mut rng, 2, 1);
        assert!(matches!(s.add_observation(x.clone(), y).unwrap(), UpdateKind::Swap(_)));
        assert_eq!(s.len(), 4);
        assert!(s.data().inputs().contains(&x));
        assert_eq!(s.step_count(), 5);
    }

    #[test]
    fn near_duplicate_is_absorbed() {
        let hp = Hyperparams { sigma_n: 1e-9, max_size: 10, ..Hyperparams::default() };
        let mut s = GpState::new(hp, 1, 1).unwrap();
        s.add_observation(dvector![0.2], dvector![1.0]).unwrap();
        let kind = s.add_observation(dvector![0.2], dvector![3.0]).unwrap();
        assert_eq!(kind, UpdateKind::Absorbed(0));
        assert_eq!(s.len(), 1);
        assert_eq!(s.data().outputs()[0], dvector![2.0]);
        assert_eq!(s.health().absorbed, 1);
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let run = || {
            let mut rng = StdRng::seed_from_u64(42);
            let mut s = GpState::new(hp(20), 2, 2).unwrap();
            for _ in 0..40 {
                let (x, y) = rand_pair(&mut rng, 2, 2);
                s.add_observation(x, y).unwrap();
            }
            let probes: Vec<_> = (0..10)
                .map(|i| {
                    let q = dvector![0.1 * i as f64 - 0.5, 0.3 - 0.05 * i as f64];
                    s.predict(&q).unwrap()
                })
                .collect();
            (s.inverse(), probes)
        };
        let (a1, p1) = run();
        let (a2, p2) = run();
        assert_eq!(a1, a2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn forgetting_keeps_distinct_points() {
        let hp = Hyperparams { max_size: 10, ..Hyperparams::default() };
        let mut s = GpState::new(hp, 2, 1).unwrap();
        let distinct = [dvector![3.0, 0.0], dvector![0.0, 3.0], dvector![-3.0, -3.0]];
        for x in &distinct {
            s.add_observation(x.clone(), dvector![1.0]).unwrap();
        }
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..200 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-0.01..0.01));
            s.add_observation(x, dvector![0.0]).unwrap();
        }
        for x in &distinct {
            assert!(s.data().inputs().contains(x), "lost {x}");
        }
    }

    #[test]
    fn snapshot_round_trip_rebuilds_inverse() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut s = GpState::new(hp(8), 2, 1).unwrap();
        for _ in 0..12 {
            let (x, y) = rand_pair(&mut rng, 2, 1);
            s.add_observation(x, y).unwrap();
        }
        let json = s.to_json().unwrap();
        let back = GpState::from_json(&json).unwrap();
        assert_eq!(back.data(), s.data());
        assert_eq!(back.step_count(), 12);
        assert!(back.consistency_residual().unwrap() < 1e-6);
        let q = dvector![0.2, -0.1];
        let (p1, p2) = (s.predict(&q).unwrap(), back.predict(&q).unwrap());
        assert!((p1.mu - p2.mu).amax() < 1e-6);

        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v.get("inputs").is_some() && v.get("hyperparams").is_some());
        assert!(v.get("a_inv").is_none());
    }

    #[test]
    fn rejects_bad_dimensions() {
        let mut s = GpState::new(hp(8), 2, 1).unwrap();
        assert!(s.add_observation(dvector![1.0], dvector![1.0]).is_err());
        assert!(s.add_observation(dvector![1.0, 2.0], dvector![1.0, 0.0]).is_err());
        assert!(s.predict(&dvector![1.0]).is_err());
    }
}
